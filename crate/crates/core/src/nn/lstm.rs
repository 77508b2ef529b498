use super::{shape_err, sigmoid, Matrix, NnError, Parameterized, RngState, TensorKind};

/// Input weights, recurrent weights and bias of one gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// hidden × input
    pub w: Matrix,
    /// hidden × hidden
    pub u: Matrix,
    /// hidden × 1
    pub b: Matrix,
}

impl GateParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self { w: Matrix::zeros(hidden, input), u: Matrix::zeros(hidden, hidden), b: Matrix::zeros(hidden, 1) }
    }

    /// `b + W x + U h`
    fn preactivation(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut z = self.b.data.clone();
        self.w.matvec_acc(x, &mut z);
        self.u.matvec_acc(h, &mut z);
        z
    }
}

/// Standard LSTM cell without peepholes. Gate order: input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub output: GateParams,
    pub candidate: GateParams,
}

const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input: GateParams::zeros(input, hidden),
            forget: GateParams::zeros(input, hidden),
            output: GateParams::zeros(input, hidden),
            candidate: GateParams::zeros(input, hidden),
        }
    }

    /// Weights uniform in `[-scale, scale]`, forget bias 1, other biases 0.
    pub fn init(input: usize, hidden: usize, scale: f64, rng: &mut RngState) -> Self {
        let mut p = Self::zeros(input, hidden);
        for gate in p.gates_mut() {
            for m in [&mut gate.w, &mut gate.u] {
                m.data.iter_mut().for_each(|x| *x = rng.uniform(-scale, scale));
            }
        }
        p.forget.b.data.iter_mut().for_each(|x| *x = 1.0);
        p
    }

    pub fn input_size(&self) -> usize {
        self.input.w.cols
    }

    pub fn hidden_size(&self) -> usize {
        self.input.w.rows
    }

    pub fn gates(&self) -> [&GateParams; 4] {
        [&self.input, &self.forget, &self.output, &self.candidate]
    }

    pub fn gates_mut(&mut self) -> [&mut GateParams; 4] {
        [&mut self.input, &mut self.forget, &mut self.output, &mut self.candidate]
    }
}

impl Parameterized for LstmCellParams {
    fn tensors(&self) -> Vec<&Matrix> {
        self.gates().into_iter().flat_map(|g| [&g.w, &g.u, &g.b]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.gates_mut().into_iter().flat_map(|g| [&mut g.w, &mut g.u, &mut g.b]).collect()
    }

    fn tensor_names(&self) -> Vec<(String, TensorKind)> {
        GATE_NAMES
            .iter()
            .flat_map(|g| {
                [
                    (format!("{g}.w"), TensorKind::Weight),
                    (format!("{g}.u"), TensorKind::Weight),
                    (format!("{g}.b"), TensorKind::Bias),
                ]
            })
            .collect()
    }
}

/// Everything one step's backward pass needs.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// One LSTM step:
/// `i, f, o = σ(W x + U h + b)`, `g = tanh(W x + U h + b)`,
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(p: &LstmCellParams, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let cache = lstm_step_cached(p, x.to_vec(), h.to_vec(), c.to_vec())?;
    Ok((cache.h, cache.c))
}

pub fn lstm_step_cached(
    p: &LstmCellParams,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
) -> Result<LstmStepCache, NnError> {
    let hidden = p.hidden_size();
    if x.len() != p.input_size() {
        return Err(shape_err(format!("input of {}", p.input_size()), x.len()));
    }
    if h_prev.len() != hidden || c_prev.len() != hidden {
        return Err(shape_err(format!("state of {hidden}"), format!("{}/{}", h_prev.len(), c_prev.len())));
    }
    let i: Vec<f64> = p.input.preactivation(&x, &h_prev).into_iter().map(sigmoid).collect();
    let f: Vec<f64> = p.forget.preactivation(&x, &h_prev).into_iter().map(sigmoid).collect();
    let o: Vec<f64> = p.output.preactivation(&x, &h_prev).into_iter().map(sigmoid).collect();
    let g: Vec<f64> = p.candidate.preactivation(&x, &h_prev).into_iter().map(f64::tanh).collect();
    let c: Vec<f64> = (0..hidden).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hidden).map(|j| o[j] * tanh_c[j]).collect();
    Ok(LstmStepCache { x, h_prev, c_prev, i, f, o, g, c, tanh_c, h })
}

/// Reverse-mode step. Takes the gradients flowing into `h'` and `c'`,
/// accumulates parameter gradients into `grad`, and adds the gradients with
/// respect to `x`, `h` and `c` into `dx`, `dh_prev` and `dc_prev`.
pub fn lstm_step_backward(
    p: &LstmCellParams,
    cache: &LstmStepCache,
    dh: &[f64],
    dc: &[f64],
    grad: &mut LstmCellParams,
    dx: &mut [f64],
    dh_prev: &mut [f64],
    dc_prev: &mut [f64],
) {
    let hidden = p.hidden_size();
    let mut dz = [vec![0.0; hidden], vec![0.0; hidden], vec![0.0; hidden], vec![0.0; hidden]];
    for j in 0..hidden {
        let (i, f, o, g, tc) = (cache.i[j], cache.f[j], cache.o[j], cache.g[j], cache.tanh_c[j]);
        let dc_total = dc[j] + dh[j] * o * (1.0 - tc * tc);
        dz[0][j] = dc_total * g * i * (1.0 - i);
        dz[1][j] = dc_total * cache.c_prev[j] * f * (1.0 - f);
        dz[2][j] = dh[j] * tc * o * (1.0 - o);
        dz[3][j] = dc_total * i * (1.0 - g * g);
        dc_prev[j] += dc_total * f;
    }
    for ((gate, dgate), dzg) in p.gates().into_iter().zip(grad.gates_mut()).zip(&dz) {
        dgate.w.add_outer(dzg, &cache.x);
        dgate.u.add_outer(dzg, &cache.h_prev);
        for (b, d) in dgate.b.data.iter_mut().zip(dzg) {
            *b += d;
        }
        gate.w.tmatvec_acc(dzg, dx);
        gate.u.tmatvec_acc(dzg, dh_prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_zero_state() {
        let p = LstmCellParams::zeros(3, 4);
        let (h, c) = lstm_step(&p, &[0.3, -1.0, 2.0], &[0.5; 4], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn forget_bias_carries_cell_state() {
        let mut p = LstmCellParams::zeros(2, 3);
        p.forget.b.data.iter_mut().for_each(|b| *b = 10.0);
        let v = [0.7, -0.4, 1.3];
        let (_, c) = lstm_step(&p, &[1.0, 1.0], &[0.0; 3], &v).unwrap();
        for (cj, vj) in c.iter().zip(v) {
            assert!((cj - vj * 0.99995).abs() < 1e-4);
            assert!((cj - vj * sigmoid(10.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn hidden_state_is_bounded() {
        let mut rng = RngState::new(5);
        let p = LstmCellParams::init(4, 6, 3.0, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.uniform(-50.0, 50.0)).collect();
        let c: Vec<f64> = (0..6).map(|_| rng.uniform(-50.0, 50.0)).collect();
        let (h, c2) = lstm_step(&p, &x, &[0.9; 6], &c).unwrap();
        assert!(h.iter().all(|v| v.abs() <= 1.0));
        assert!(c2.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = LstmCellParams::zeros(2, 3);
        assert!(matches!(lstm_step(&p, &[1.0], &[0.0; 3], &[0.0; 3]), Err(NnError::ShapeMismatch { .. })));
        assert!(matches!(lstm_step(&p, &[1.0, 2.0], &[0.0; 2], &[0.0; 3]), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn step_backward_matches_finite_differences() {
        let mut rng = RngState::new(17);
        let mut p = LstmCellParams::init(3, 4, 0.5, &mut rng);
        for g in p.gates_mut() {
            g.b.data.iter_mut().for_each(|b| *b += rng.uniform(-0.5, 0.5));
        }
        let x: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let wh: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let wc: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        // scalar loss: wh·h' + wc·c'
        let loss = |p: &LstmCellParams| {
            let (h2, c2) = lstm_step(p, &x, &h, &c).unwrap();
            h2.iter().zip(&wh).map(|(a, b)| a * b).sum::<f64>() + c2.iter().zip(&wc).map(|(a, b)| a * b).sum::<f64>()
        };
        let cache = lstm_step_cached(&p, x.clone(), h.clone(), c.clone()).unwrap();
        let mut grad = LstmCellParams::zeros(3, 4);
        let (mut dx, mut dh, mut dc) = (vec![0.0; 3], vec![0.0; 4], vec![0.0; 4]);
        lstm_step_backward(&p, &cache, &wh, &wc, &mut grad, &mut dx, &mut dh, &mut dc);
        let theta = p.flatten();
        let err = crate::nn::grad_check(
            |t| {
                let mut q = p.clone();
                q.load_flat(t).unwrap();
                loss(&q)
            },
            &grad.flatten(),
            &theta,
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }
}
