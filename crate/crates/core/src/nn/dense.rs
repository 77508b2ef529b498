use super::{shape_err, Matrix, NnError, Parameterized, RngState, TensorKind};

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// out × in
    pub w: Matrix,
    /// out × 1
    pub b: Matrix,
}

impl DenseParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Matrix::zeros(output, input), b: Matrix::zeros(output, 1) }
    }

    pub fn init(input: usize, output: usize, scale: f64, rng: &mut RngState) -> Self {
        let mut p = Self::zeros(input, output);
        p.w.data.iter_mut().for_each(|x| *x = rng.uniform(-scale, scale));
        p
    }

    pub fn input_size(&self) -> usize {
        self.w.cols
    }

    pub fn output_size(&self) -> usize {
        self.w.rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.input_size() {
            return Err(shape_err(format!("input of {}", self.input_size()), x.len()));
        }
        let mut y = self.b.data.clone();
        self.w.matvec_acc(x, &mut y);
        Ok(y)
    }

    /// Accumulates `∂/∂W`, `∂/∂b` into `grad` and `Wᵀ dy` into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut DenseParams, dx: &mut [f64]) {
        grad.w.add_outer(dy, x);
        for (b, d) in grad.b.data.iter_mut().zip(dy) {
            *b += d;
        }
        self.w.tmatvec_acc(dy, dx);
    }
}

impl Parameterized for DenseParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }

    fn tensor_names(&self) -> Vec<(String, TensorKind)> {
        vec![("w".into(), TensorKind::Weight), ("b".into(), TensorKind::Bias)]
    }
}
