use rand::Rng;

use super::arith::Arith;
use super::{NnError, Tensor};

/// Dense layer `y = W·x (+ b)`. Weights and bias are at one scale unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<E> {
    pub w: Tensor<E>,
    pub b: Option<Vec<E>>,
}

impl<E: Copy> DenseLayer<E> {
    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Uniform(-1/√fan_in, 1/√fan_in) reals for an `out × in` matrix.
pub fn init_uniform<R: Rng>(out: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// `x·Wᵀ` row-wise for a batch `[B, in]`, plus bias, at one unit.
pub fn dense_forward<A: Arith>(a: &A, layer: &DenseLayer<A::Elem>, x: &Tensor<A::Elem>) -> Result<Tensor<A::Elem>, NnError> {
    let (out, inp) = (layer.out_dim(), layer.in_dim());
    if x.cols() != inp {
        return Err(NnError::Shape(format!("layer expects {inp} inputs, got {}", x.cols())));
    }
    let batch = x.rows();
    let mut data = Vec::with_capacity(batch * out);
    for b in 0..batch {
        let xr = x.row(b);
        for j in 0..out {
            let mut v = a.dot(layer.w.row(j).iter().copied().zip(xr.iter().copied()), 2, 1)?;
            if let Some(bias) = &layer.b {
                v = a.add(v, bias[j])?;
            }
            data.push(v);
        }
    }
    Tensor::matrix(batch, out, data)
}

pub fn relu<A: Arith>(a: &A, x: &Tensor<A::Elem>) -> Tensor<A::Elem> {
    x.map(|v| if a.is_positive(v) { v } else { a.zero() })
}

/// Passes `upstream` where the pre-activation `x` is positive, zero elsewhere.
pub fn relu_backward<A: Arith>(a: &A, x: &Tensor<A::Elem>, upstream: &Tensor<A::Elem>) -> Result<Tensor<A::Elem>, NnError> {
    if x.dims() != upstream.dims() {
        return Err(NnError::Shape(format!("relu input {:?} vs upstream {:?}", x.dims(), upstream.dims())));
    }
    let data = x.data().iter().zip(upstream.data()).map(|(&h, &u)| if a.is_positive(h) { u } else { a.zero() }).collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// Per-layer parameter steps, already multiplied by the learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep<E> {
    pub w: Tensor<E>,
    pub b: Option<Vec<E>>,
}

/// Dense+ReLU stack run by the feature-holding party.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<A: Arith> {
    arith: A,
    layers: Vec<DenseLayer<A::Elem>>,
}

/// Inputs and pre-activations recorded by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<E> {
    inputs: Vec<Tensor<E>>,
    pre: Vec<Tensor<E>>,
}

impl<E: Copy> ForwardCache<E> {
    pub fn output_pre_activation(&self) -> Option<&Tensor<E>> {
        self.pre.last()
    }
}

impl<A: Arith> FeatureExtractor<A> {
    pub fn new(arith: A, layers: Vec<DenseLayer<A::Elem>>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape("extractor needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::Shape(format!("layer output {} does not feed input {}", pair[0].out_dim(), pair[1].in_dim())));
            }
        }
        Ok(Self { arith, layers })
    }

    /// Seeded initialization for widths `[d_in, h1, ..., d_h]`.
    pub fn init<R: Rng>(arith: A, widths: &[usize], bias: bool, rng: &mut R) -> Result<Self, NnError> {
        if widths.len() < 2 {
            return Err(NnError::Shape("need input and output widths".into()));
        }
        let mut layers = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, out) = (pair[0], pair[1]);
            let w = init_uniform(out, fan_in, rng).into_iter().map(|x| arith.from_real(x, 1)).collect::<Result<Vec<_>, _>>()?;
            let b = if bias { Some(vec![arith.zero(); out]) } else { None };
            layers.push(DenseLayer { w: Tensor::matrix(out, fan_in, w)?, b });
        }
        Self::new(arith, layers)
    }

    pub fn arith(&self) -> &A {
        &self.arith
    }

    pub fn layers(&self) -> &[DenseLayer<A::Elem>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor<A::Elem>) -> Result<(Tensor<A::Elem>, ForwardCache<A::Elem>), NnError> {
        let mut cur = x.clone();
        let mut cache = ForwardCache { inputs: Vec::new(), pre: Vec::new() };
        for layer in &self.layers {
            let h = dense_forward(&self.arith, layer, &cur)?;
            cache.inputs.push(cur);
            cur = relu(&self.arith, &h);
            cache.pre.push(h);
        }
        Ok((cur, cache))
    }

    /// Steps `η·∂L/∂θ` for every layer given `upstream = ∂L/∂a` at one unit.
    pub fn backward(&self, cache: &ForwardCache<A::Elem>, upstream: &Tensor<A::Elem>, lr: A::Elem) -> Result<Vec<LayerStep<A::Elem>>, NnError> {
        let grads = self.gradients(cache, upstream)?;
        grads.into_iter().map(|g| self.scale_step(g, lr)).collect()
    }

    /// Raw `∂L/∂θ` per layer, at one unit.
    pub fn gradients(&self, cache: &ForwardCache<A::Elem>, upstream: &Tensor<A::Elem>) -> Result<Vec<LayerStep<A::Elem>>, NnError> {
        if cache.pre.len() != self.layers.len() {
            return Err(NnError::MissingCache);
        }
        let a = &self.arith;
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut d_out = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[l];
            let dh = relu_backward(a, &cache.pre[l], &d_out)?;
            let (out, inp, batch) = (layer.out_dim(), layer.in_dim(), x.rows());
            let mut gw = Vec::with_capacity(out * inp);
            for j in 0..out {
                for k in 0..inp {
                    gw.push(a.dot((0..batch).map(|b| (dh.at(b, j), x.at(b, k))), 2, 1)?);
                }
            }
            let gb = match layer.b {
                Some(_) => Some((0..out).map(|j| (0..batch).try_fold(a.zero(), |acc, b| a.add(acc, dh.at(b, j)))).collect::<Result<Vec<_>, _>>()?),
                None => None,
            };
            if l > 0 {
                let mut dx = Vec::with_capacity(batch * inp);
                for b in 0..batch {
                    for k in 0..inp {
                        dx.push(a.dot((0..out).map(|j| (layer.w.at(j, k), dh.at(b, j))), 2, 1)?);
                    }
                }
                d_out = Tensor::matrix(batch, inp, dx)?;
            }
            steps.push(LayerStep { w: Tensor::matrix(out, inp, gw)?, b: gb });
        }
        steps.reverse();
        Ok(steps)
    }

    fn scale_step(&self, g: LayerStep<A::Elem>, lr: A::Elem) -> Result<LayerStep<A::Elem>, NnError> {
        let a = &self.arith;
        Ok(LayerStep {
            w: g.w.try_map(|v| a.mul(lr, v, 2, 1))?,
            b: g.b.map(|b| b.into_iter().map(|v| a.mul(lr, v, 2, 1)).collect::<Result<Vec<_>, _>>()).transpose()?,
        })
    }

    /// `θ ← θ - step` for every layer.
    pub fn apply(&mut self, steps: &[LayerStep<A::Elem>]) -> Result<(), NnError> {
        if steps.len() != self.layers.len() {
            return Err(NnError::Shape(format!("{} steps for {} layers", steps.len(), self.layers.len())));
        }
        let a = self.arith.clone();
        for (layer, step) in self.layers.iter_mut().zip(steps) {
            sgd_step(&a, layer.w.data_mut(), step.w.data())?;
            if let (Some(b), Some(sb)) = (layer.b.as_mut(), step.b.as_ref()) {
                sgd_step(&a, b, sb)?;
            }
        }
        Ok(())
    }
}

/// `params ← params - step`, element-wise.
pub fn sgd_step<A: Arith>(a: &A, params: &mut [A::Elem], step: &[A::Elem]) -> Result<(), NnError> {
    if params.len() != step.len() {
        return Err(NnError::Shape(format!("{} params vs {} step entries", params.len(), step.len())));
    }
    for (p, &s) in params.iter_mut().zip(step) {
        *p = a.sub(*p, s)?;
    }
    Ok(())
}
