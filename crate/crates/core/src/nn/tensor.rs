use super::NnError;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E = f64> {
    dims: Vec<usize>,
    data: Vec<E>,
}

impl<E: Copy> Tensor<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self, NnError> {
        let want: usize = dims.iter().product();
        if want != data.len() {
            return Err(NnError::Shape(format!("dims {dims:?} need {want} elements, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Vec<usize>, v: E) -> Self {
        let len = dims.iter().product();
        Self { dims, data: vec![v; len] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self, NnError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix (a vector counts as one row).
    pub fn rows(&self) -> usize {
        match self.dims.as_slice() {
            [_] => 1,
            [r, ..] => *r,
            [] => 0,
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> E {
        self.data[i * self.cols() + j]
    }

    pub fn map<F: Copy>(&self, f: impl Fn(E) -> F) -> Tensor<F> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn try_map<F: Copy>(&self, f: impl Fn(E) -> Result<F, NnError>) -> Result<Tensor<F>, NnError> {
        Ok(Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect::<Result<_, _>>()? })
    }

    /// Selects rows by index into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { dims: vec![idx.len(), c], data }
    }
}

impl Tensor<f64> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
