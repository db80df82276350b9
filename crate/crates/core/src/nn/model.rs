use rand::Rng;

use super::arith::Arith;
use super::layers::{init_uniform, sgd_step, FeatureExtractor, ForwardCache, LayerStep};
use super::loss::{argmax, ce_loss, softmax};
use super::{seeded_rng, Architecture, NnError, Tensor, STREAM_EXTRACTOR, STREAM_HEAD};

/// Classifier weights `W2` (`c × d_h`), held at two scale units.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<E> {
    pub w: Tensor<E>,
}

impl<E: Copy> Head<E> {
    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }
}

impl<E: Copy> Head<E> {
    pub fn init<A: Arith<Elem = E>, R: Rng>(a: &A, classes: usize, d_h: usize, rng: &mut R) -> Result<Self, NnError> {
        let w = init_uniform(classes, d_h, rng).into_iter().map(|x| a.from_real(x, 2)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { w: Tensor::matrix(classes, d_h, w)? })
    }
}

/// Encodes real inputs at one unit.
pub fn encode_inputs<A: Arith>(a: &A, x: &Tensor<f64>) -> Result<Tensor<A::Elem>, NnError> {
    x.try_map(|v| a.from_real(v, 1))
}

/// `z = W2·a` per row, at one unit.
pub fn head_logits<A: Arith>(a: &A, w: &Tensor<A::Elem>, acts: &Tensor<A::Elem>) -> Result<Tensor<A::Elem>, NnError> {
    if w.cols() != acts.cols() {
        return Err(NnError::Shape(format!("head expects {} features, got {}", w.cols(), acts.cols())));
    }
    let (batch, c) = (acts.rows(), w.rows());
    let mut out = Vec::with_capacity(batch * c);
    for b in 0..batch {
        for j in 0..c {
            out.push(a.dot(w.row(j).iter().copied().zip(acts.row(b).iter().copied()), 3, 1)?);
        }
    }
    Tensor::matrix(batch, c, out)
}

/// Softmax cross-entropy over a batch. Returns the summed loss, the
/// probabilities and `(p - t) / B` encoded at one unit.
pub fn softmax_xent<A: Arith>(a: &A, logits: &Tensor<A::Elem>, targets: &Tensor<f64>) -> Result<(f64, Tensor<f64>, Tensor<A::Elem>), NnError> {
    if logits.dims() != targets.dims() {
        return Err(NnError::Shape(format!("logits {:?} vs targets {:?}", logits.dims(), targets.dims())));
    }
    let (batch, c) = (logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(batch * c);
    let mut grad = Vec::with_capacity(batch * c);
    for b in 0..batch {
        let z: Vec<f64> = logits.row(b).iter().map(|&v| a.to_real(v, 1)).collect();
        let p = softmax(&z);
        let t = targets.row(b);
        loss += ce_loss(&p, t);
        for j in 0..c {
            grad.push(a.from_real((p[j] - t[j]) / batch as f64, 1)?);
        }
        probs.extend(p);
    }
    if !loss.is_finite() {
        return Err(NnError::Diverged);
    }
    Ok((loss, Tensor::matrix(batch, c, probs)?, Tensor::matrix(batch, c, grad)?))
}

/// `η·g` at one unit.
pub fn scale_gradient<A: Arith>(a: &A, lr: A::Elem, g: &Tensor<A::Elem>) -> Result<Tensor<A::Elem>, NnError> {
    g.try_map(|v| a.mul(lr, v, 2, 1))
}

/// `Σ_b g'_b ⊗ a_b` at two units (exact in fixed mode).
pub fn head_step<A: Arith>(a: &A, scaled_grad: &Tensor<A::Elem>, acts: &Tensor<A::Elem>) -> Result<Tensor<A::Elem>, NnError> {
    let (batch, c, d) = (acts.rows(), scaled_grad.cols(), acts.cols());
    if scaled_grad.rows() != batch {
        return Err(NnError::Shape(format!("{} gradient rows vs {batch} activation rows", scaled_grad.rows())));
    }
    let mut out = Vec::with_capacity(c * d);
    for j in 0..c {
        for k in 0..d {
            out.push(a.dot((0..batch).map(|b| (scaled_grad.at(b, j), acts.at(b, k))), 2, 2)?);
        }
    }
    Tensor::matrix(c, d, out)
}

/// `∂L/∂a = W2ᵀ·g` per row, at one unit.
pub fn head_input_grad<A: Arith>(a: &A, w: &Tensor<A::Elem>, g: &Tensor<A::Elem>) -> Result<Tensor<A::Elem>, NnError> {
    let (batch, c, d) = (g.rows(), w.rows(), w.cols());
    if g.cols() != c {
        return Err(NnError::Shape(format!("gradient has {} classes, head has {c}", g.cols())));
    }
    let mut out = Vec::with_capacity(batch * d);
    for b in 0..batch {
        for k in 0..d {
            out.push(a.dot((0..c).map(|j| (w.at(j, k), g.at(b, j))), 3, 1)?);
        }
    }
    Tensor::matrix(batch, d, out)
}

/// Predicted class per row of logits held at one unit.
pub fn argmax_rows<A: Arith>(a: &A, z: &Tensor<A::Elem>) -> Vec<usize> {
    (0..z.rows()).map(|b| argmax(&z.row(b).iter().map(|&v| a.to_real(v, 1)).collect::<Vec<_>>())).collect()
}

/// Extractor and head trained together on one machine.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralModel<A: Arith> {
    pub extractor: FeatureExtractor<A>,
    pub head: Head<A::Elem>,
    arith: A,
}

/// Raw gradients of the mean batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<E> {
    pub loss: f64,
    pub extractor: Vec<LayerStep<E>>,
    pub head: Tensor<E>,
}

impl<A: Arith> CentralModel<A> {
    /// Seeded initialization: the extractor and head draw from separate streams.
    pub fn init(arith: A, arch: &Architecture, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let extractor = FeatureExtractor::init(arith.clone(), &arch.widths(), arch.bias, &mut seeded_rng(seed, STREAM_EXTRACTOR))?;
        let head = Head::init(&arith, arch.classes, arch.hidden_dim(), &mut seeded_rng(seed, STREAM_HEAD))?;
        Ok(Self { extractor, head, arith })
    }

    pub fn from_parts(arith: A, extractor: FeatureExtractor<A>, head: Head<A::Elem>) -> Result<Self, NnError> {
        if extractor.output_dim() != head.input_dim() {
            return Err(NnError::Shape(format!("extractor emits {} features, head expects {}", extractor.output_dim(), head.input_dim())));
        }
        Ok(Self { extractor, head, arith })
    }

    pub fn arith(&self) -> &A {
        &self.arith
    }

    pub fn logits(&self, x: &Tensor<A::Elem>) -> Result<(Tensor<A::Elem>, ForwardCache<A::Elem>, Tensor<A::Elem>), NnError> {
        let (acts, cache) = self.extractor.forward(x)?;
        let z = head_logits(&self.arith, &self.head.w, &acts)?;
        Ok((acts, cache, z))
    }

    pub fn predict(&self, x: &Tensor<A::Elem>) -> Result<Vec<usize>, NnError> {
        let (_, _, z) = self.logits(x)?;
        Ok(argmax_rows(&self.arith, &z))
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, x: &Tensor<A::Elem>, t: &Tensor<f64>) -> Result<f64, NnError> {
        let (_, _, z) = self.logits(x)?;
        let (sum, _, _) = softmax_xent(&self.arith, &z, t)?;
        Ok(sum / x.rows() as f64)
    }

    pub fn gradients(&self, x: &Tensor<A::Elem>, t: &Tensor<f64>) -> Result<Gradients<A::Elem>, NnError> {
        let a = &self.arith;
        let (acts, cache, z) = self.logits(x)?;
        let (sum, _, g) = softmax_xent(a, &z, t)?;
        let da = head_input_grad(a, &self.head.w, &g)?;
        let extractor = self.extractor.gradients(&cache, &da)?;
        let head = head_step(a, &g, &acts)?;
        Ok(Gradients { loss: sum / x.rows() as f64, extractor, head })
    }

    /// One SGD step on a mini-batch; returns the summed loss before the step.
    pub fn train_batch(&mut self, x: &Tensor<A::Elem>, t: &Tensor<f64>, lr: A::Elem) -> Result<f64, NnError> {
        self.train_batch_scored(x, t, lr).map(|(loss, _)| loss)
    }

    /// Like [`CentralModel::train_batch`], also returning the predictions
    /// made before the step.
    pub fn train_batch_scored(&mut self, x: &Tensor<A::Elem>, t: &Tensor<f64>, lr: A::Elem) -> Result<(f64, Vec<usize>), NnError> {
        let a = self.arith.clone();
        let (acts, cache, z) = self.logits(x)?;
        let (sum, _, g) = softmax_xent(&a, &z, t)?;
        let preds = argmax_rows(&a, &z);
        let da = head_input_grad(&a, &self.head.w, &g)?;
        let step = head_step(&a, &scale_gradient(&a, lr, &g)?, &acts)?;
        let ext_steps = self.extractor.backward(&cache, &da, lr)?;
        sgd_step(&a, self.head.w.data_mut(), step.data())?;
        self.extractor.apply(&ext_steps)?;
        Ok((sum, preds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arith::{Fixed, Float};

    fn arch() -> Architecture {
        Architecture { input_dim: 3, hidden: vec![5, 4], classes: 3, bias: true }
    }

    #[test]
    fn init_is_deterministic() {
        let a = CentralModel::init(Float, &arch(), 11).unwrap();
        let b = CentralModel::init(Float, &arch(), 11).unwrap();
        let c = CentralModel::init(Float, &arch(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.extractor.layers()[0].w.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn step_reduces_loss() {
        let mut m = CentralModel::init(Float, &arch(), 9).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -0.5, 0.3, 0.2, 0.9, -1.1]).unwrap();
        let t = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (acts, _, _) = m.logits(&x).unwrap();
        assert!(acts.data().iter().any(|&v| v > 0.0));
        let before = m.loss(&x, &t).unwrap();
        m.train_batch(&x, &t, 0.1).unwrap();
        let after = m.loss(&x, &t).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let m = CentralModel::init(Float, &arch(), 9).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -0.5, 0.3, 0.2, 0.9, -1.1]).unwrap();
        let t = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let g = m.gradients(&x, &t).unwrap();
        let h = 1e-5;
        for i in 0..m.head.w.len() {
            let mut p = m.clone();
            p.head.w.data_mut()[i] += h;
            let mut q = m.clone();
            q.head.w.data_mut()[i] -= h;
            let num = (p.loss(&x, &t).unwrap() - q.loss(&x, &t).unwrap()) / (2.0 * h);
            let ana = g.head.data()[i];
            assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "{i}: {num} vs {ana}");
        }
    }

    #[test]
    fn extractor_gradients_match_finite_differences() {
        let m = CentralModel::init(Float, &arch(), 9).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -0.5, 0.3, 0.2, 0.9, -1.1]).unwrap();
        let t = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let g = m.gradients(&x, &t).unwrap();
        let h = 1e-5;
        for l in 0..2 {
            for i in 0..m.extractor.layers()[l].w.len() {
                let bump = |d: f64| {
                    let mut p = m.clone();
                    let mut layers = p.extractor.layers().to_vec();
                    layers[l].w.data_mut()[i] += d;
                    p.extractor = FeatureExtractor::new(Float, layers).unwrap();
                    p.loss(&x, &t).unwrap()
                };
                let num = (bump(h) - bump(-h)) / (2.0 * h);
                let ana = g.extractor[l].w.data()[i];
                assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "layer {l} [{i}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn fixed_model_tracks_float_model() {
        let fx = Fixed::new(32).unwrap();
        let mut mf = CentralModel::init(Float, &arch(), 4).unwrap();
        let mut mi = CentralModel::init(fx, &arch(), 4).unwrap();
        let xr = Tensor::matrix(2, 3, vec![1.0, -0.5, 0.3, 0.2, 0.9, -1.1]).unwrap();
        let t = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let xi = encode_inputs(&fx, &xr).unwrap();
        for _ in 0..20 {
            let lf = mf.train_batch(&xr, &t, 0.05).unwrap();
            let li = mi.train_batch(&xi, &t, fx.from_real(0.05, 1).unwrap()).unwrap();
            assert!((lf - li).abs() < 1e-6);
        }
    }
}
