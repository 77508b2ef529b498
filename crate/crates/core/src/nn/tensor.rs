use std::sync::Arc;

use super::{shape_err, NnError};

/// Dense row-major matrix. Bias vectors are stored as single-column matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self { rows: values.len(), cols: 1, data: values }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · y`
    pub fn tmatvec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += yr * w;
            }
        }
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ar == 0.0 {
                continue;
            }
            for (w, bv) in row.iter_mut().zip(b) {
                *w += ar * bv;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product with four independent accumulators, so the loop vectorizes.
/// The summation order is fixed, which keeps results bit-reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage with a manifest mapping slices back to named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub manifest: Arc<[TensorSpec]>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], manifest: self.manifest.clone() }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.values.len() == other.values.len() && self.manifest == other.manifest
    }

    /// Slice belonging to the named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.manifest.iter().find(|s| s.name == name).map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    /// Per-coordinate flag: true where the coordinate belongs to a bias.
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for s in self.manifest.iter().filter(|s| s.kind == TensorKind::Bias) {
            mask[s.offset..s.offset + s.len()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// A fixed set of named tensors that can be flattened for optimization.
///
/// `tensors`, `tensors_mut` and `tensor_names` must list tensors in the same order.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
    fn tensor_names(&self) -> Vec<(String, TensorKind)>;

    fn manifest(&self) -> Vec<TensorSpec> {
        let mut offset = 0;
        self.tensor_names()
            .into_iter()
            .zip(self.tensors())
            .map(|((name, kind), m)| {
                let spec = TensorSpec { name, kind, rows: m.rows, cols: m.cols, offset };
                offset += m.data.len();
                spec
            })
            .collect()
    }

    fn flatten(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.num_params());
        for m in self.tensors() {
            values.extend_from_slice(&m.data);
        }
        ParamVector { values, manifest: self.manifest().into() }
    }

    fn load_flat(&mut self, flat: &ParamVector) -> Result<(), NnError> {
        let mine = self.manifest();
        if mine.len() != flat.manifest.len()
            || mine.iter().zip(flat.manifest.iter()).any(|(a, b)| (a.rows, a.cols, a.offset) != (b.rows, b.cols, b.offset))
            || self.num_params() != flat.values.len()
        {
            return Err(shape_err(
                format!("{} tensors / {} values", mine.len(), self.num_params()),
                format!("{} tensors / {} values", flat.manifest.len(), flat.values.len()),
            ));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.data.len();
            m.data.copy_from_slice(&flat.values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for m in self.tensors_mut() {
            m.data.iter_mut().for_each(|x| *x = value);
        }
    }

    fn add_grad(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    fn zeroed(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}
