//! The recurrent generator and bidirectional recurrent discriminator, their
//! forward passes, backpropagation through time, and the checkpoint format.

use thiserror::Error;

use crate::features::{NormalizedSequence, TONE_FEATURES};
use crate::nn::{
    lstm_step_backward, lstm_step_cached, shape_err, sigmoid, DenseParams, LstmCellParams, LstmStepCache, Matrix,
    NnError, Parameterized, RngState, TensorKind,
};

/// Uniform initialization range for every weight matrix.
pub const INIT_SCALE: f64 = 0.08;

/// Architecture shared by the generator and the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub tones_per_step: usize,
    pub noise_dim: usize,
}

impl ModelConfig {
    /// Small model that trains in minutes on a laptop.
    pub fn desk() -> Self {
        Self { depth: 2, hidden: 64, tones_per_step: 1, noise_dim: 4 }
    }

    /// Two layers of 350 units.
    pub fn paper() -> Self {
        Self { depth: 2, hidden: 350, tones_per_step: 1, noise_dim: 4 }
    }

    pub fn with_tones_per_step(self, tones_per_step: usize) -> Self {
        Self { tones_per_step, ..self }
    }

    pub fn step_width(&self) -> usize {
        self.tones_per_step * TONE_FEATURES
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Noise fed to the generator: `len` vectors of `dim` components in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSequence {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl NoiseSequence {
    pub fn sample(len: usize, dim: usize, rng: &mut RngState) -> Self {
        Self { dim, data: (0..len * dim).map(|_| rng.next_f64()).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Unidirectional LSTM stack whose first layer sees `[noise ‖ previous output]`
/// and whose top layer feeds a logistic output head.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub config: ModelConfig,
    pub layers: Vec<LstmCellParams>,
    pub head: DenseParams,
}

impl GeneratorParams {
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Self {
        let input = config.noise_dim + config.step_width();
        let layers = (0..config.depth)
            .map(|l| LstmCellParams::init(if l == 0 { input } else { config.hidden }, config.hidden, INIT_SCALE, rng))
            .collect();
        let head = DenseParams::init(config.hidden, config.step_width(), INIT_SCALE, rng);
        Self { config, layers, head }
    }
}

impl Parameterized for GeneratorParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        out.extend(self.head.tensors_mut());
        out
    }

    fn tensor_names(&self) -> Vec<(String, TensorKind)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.tensor_names().into_iter().map(|(n, k)| (format!("g.layer{i}.{n}"), k)));
        }
        out.extend(self.head.tensor_names().into_iter().map(|(n, k)| (format!("g.head.{n}"), k)));
        out
    }
}

/// Bidirectional LSTM stack with a per-step logistic head shared over time.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub config: ModelConfig,
    /// `(forward, backward)` cells per layer.
    pub layers: Vec<(LstmCellParams, LstmCellParams)>,
    /// 2·hidden → 1
    pub head: DenseParams,
}

impl DiscriminatorParams {
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Self {
        let layers = (0..config.depth)
            .map(|l| {
                let input = if l == 0 { config.step_width() } else { 2 * config.hidden };
                let fwd = LstmCellParams::init(input, config.hidden, INIT_SCALE, rng);
                let bwd = LstmCellParams::init(input, config.hidden, INIT_SCALE, rng);
                (fwd, bwd)
            })
            .collect();
        let head = DenseParams::init(2 * config.hidden, 1, INIT_SCALE, rng);
        Self { config, layers, head }
    }
}

impl Parameterized for DiscriminatorParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.layers.iter().flat_map(|(f, b)| f.tensors().into_iter().chain(b.tensors())).collect();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> =
            self.layers.iter_mut().flat_map(|(f, b)| f.tensors_mut().into_iter().chain(b.tensors_mut())).collect();
        out.extend(self.head.tensors_mut());
        out
    }

    fn tensor_names(&self) -> Vec<(String, TensorKind)> {
        let mut out = Vec::new();
        for (i, (f, b)) in self.layers.iter().enumerate() {
            out.extend(f.tensor_names().into_iter().map(|(n, k)| (format!("d.layer{i}.fwd.{n}"), k)));
            out.extend(b.tensor_names().into_iter().map(|(n, k)| (format!("d.layer{i}.bwd.{n}"), k)));
        }
        out.extend(self.head.tensor_names().into_iter().map(|(n, k)| (format!("d.head.{n}"), k)));
        out
    }
}

/// Recorded generator forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    /// `cells[t][layer]`
    cells: Vec<Vec<LstmStepCache>>,
    outputs: Vec<Vec<f64>>,
    /// Previous outputs were fed back (false under teacher forcing).
    free_running: bool,
}

pub fn generator_forward(p: &GeneratorParams, z: &NoiseSequence) -> Result<NormalizedSequence, ModelError> {
    Ok(generator_forward_traced(p, z, None)?.0)
}

/// Run the generator over `z`. With `teacher`, step `t` sees the true step
/// `t − 1` of `teacher` instead of its own previous output.
pub fn generator_forward_traced(
    p: &GeneratorParams,
    z: &NoiseSequence,
    teacher: Option<&NormalizedSequence>,
) -> Result<(NormalizedSequence, GeneratorTrace), ModelError> {
    let cfg = &p.config;
    let width = cfg.step_width();
    if z.dim != cfg.noise_dim {
        return Err(shape_err(format!("noise dim {}", cfg.noise_dim), z.dim).into());
    }
    let len = z.len();
    if len == 0 {
        return Err(shape_err("noise length ≥ 1", 0).into());
    }
    if let Some(x) = teacher {
        if x.step_width() != width || x.len() != len {
            return Err(shape_err(format!("{len} steps of {width}"), format!("{} steps of {}", x.len(), x.step_width())).into());
        }
    }

    let mut h = vec![vec![0.0; cfg.hidden]; cfg.depth];
    let mut c = vec![vec![0.0; cfg.hidden]; cfg.depth];
    let mut prev = vec![0.0; width];
    let mut cells = Vec::with_capacity(len);
    let mut outputs = Vec::with_capacity(len);
    let mut data = Vec::with_capacity(len * width);

    for t in 0..len {
        let mut input = Vec::with_capacity(cfg.noise_dim + width);
        input.extend_from_slice(z.step(t));
        match teacher {
            Some(x) if t > 0 => input.extend_from_slice(x.step(t - 1)),
            Some(_) => input.extend(std::iter::repeat_n(0.0, width)),
            None => input.extend_from_slice(&prev),
        }
        let mut step_cells = Vec::with_capacity(cfg.depth);
        for (l, cell) in p.layers.iter().enumerate() {
            let cache = lstm_step_cached(cell, input, std::mem::take(&mut h[l]), std::mem::take(&mut c[l]))?;
            h[l] = cache.h.clone();
            c[l] = cache.c.clone();
            input = cache.h.clone();
            step_cells.push(cache);
        }
        let y: Vec<f64> = p.head.forward(&input)?.into_iter().map(sigmoid).collect();
        data.extend_from_slice(&y);
        prev.copy_from_slice(&y);
        outputs.push(y);
        cells.push(step_cells);
    }
    let trace = GeneratorTrace { cells, outputs, free_running: teacher.is_none() };
    Ok((NormalizedSequence::new(cfg.tones_per_step, data), trace))
}

/// Backpropagation through time for the generator. `d_out` is the gradient of
/// the loss with respect to the emitted sequence, flat in step-major order.
/// In free-running mode gradients also flow through the fed-back outputs.
pub fn generator_backward(p: &GeneratorParams, trace: &GeneratorTrace, d_out: &[f64]) -> GeneratorParams {
    let cfg = &p.config;
    let width = cfg.step_width();
    let len = trace.outputs.len();
    debug_assert_eq!(d_out.len(), len * width);
    let mut grad = p.zeroed();
    let mut dh_next = vec![vec![0.0; cfg.hidden]; cfg.depth];
    let mut dc_next = vec![vec![0.0; cfg.hidden]; cfg.depth];
    let mut d_feedback = vec![0.0; width];

    for t in (0..len).rev() {
        let y = &trace.outputs[t];
        let da: Vec<f64> =
            (0..width).map(|j| (d_out[t * width + j] + d_feedback[j]) * y[j] * (1.0 - y[j])).collect();
        let mut dh: Vec<Vec<f64>> = dh_next.clone();
        let top = cfg.depth - 1;
        p.head.backward(&trace.cells[t][top].h, &da, &mut grad.head, &mut dh[top]);

        let mut d_input = Vec::new();
        for l in (0..cfg.depth).rev() {
            let cache = &trace.cells[t][l];
            let mut dx = vec![0.0; cache.x.len()];
            let mut dh_prev = vec![0.0; cfg.hidden];
            let mut dc_prev = vec![0.0; cfg.hidden];
            lstm_step_backward(&p.layers[l], cache, &dh[l], &dc_next[l], &mut grad.layers[l], &mut dx, &mut dh_prev, &mut dc_prev);
            dh_next[l] = dh_prev;
            dc_next[l] = dc_prev;
            if l > 0 {
                for (a, b) in dh[l - 1].iter_mut().zip(&dx) {
                    *a += b;
                }
            } else {
                d_input = dx;
            }
        }
        if trace.free_running {
            d_feedback.copy_from_slice(&d_input[cfg.noise_dim..]);
        }
    }
    grad
}

/// Result of scoring one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    /// Mean of `per_step`, the probability that the sequence is real.
    pub p_mean: f64,
    pub per_step: Vec<f64>,
    /// Time average of the top layer's concatenated forward/backward states.
    pub features: Vec<f64>,
}

/// Recorded discriminator forward pass.
#[derive(Debug, Clone)]
pub struct DiscTrace {
    /// Per layer: forward-direction caches in time order and backward-direction
    /// caches in processing order (last step first).
    layers: Vec<(Vec<LstmStepCache>, Vec<LstmStepCache>)>,
    top: Vec<Vec<f64>>,
    per_step: Vec<f64>,
    input_width: usize,
}

pub fn discriminator_forward(p: &DiscriminatorParams, x: &NormalizedSequence) -> Result<DiscOutput, ModelError> {
    Ok(discriminator_forward_traced(p, x)?.0)
}

fn run_direction(cell: &LstmCellParams, inputs: &[Vec<f64>], order: impl Iterator<Item = usize>) -> Result<Vec<LstmStepCache>, NnError> {
    let hidden = cell.hidden_size();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut caches = Vec::with_capacity(inputs.len());
    for t in order {
        let cache = lstm_step_cached(cell, inputs[t].clone(), h, c)?;
        h = cache.h.clone();
        c = cache.c.clone();
        caches.push(cache);
    }
    Ok(caches)
}

pub fn discriminator_forward_traced(
    p: &DiscriminatorParams,
    x: &NormalizedSequence,
) -> Result<(DiscOutput, DiscTrace), ModelError> {
    let cfg = &p.config;
    if x.step_width() != cfg.step_width() {
        return Err(shape_err(format!("steps of {}", cfg.step_width()), x.step_width()).into());
    }
    let len = x.len();
    if len == 0 {
        return Err(shape_err("sequence length ≥ 1", 0).into());
    }
    let mut inputs: Vec<Vec<f64>> = x.steps().map(<[f64]>::to_vec).collect();
    let mut layers = Vec::with_capacity(cfg.depth);
    for (fwd, bwd) in &p.layers {
        let f = run_direction(fwd, &inputs, 0..len)?;
        let b = run_direction(bwd, &inputs, (0..len).rev())?;
        inputs = (0..len)
            .map(|t| {
                let mut o = f[t].h.clone();
                o.extend_from_slice(&b[len - 1 - t].h);
                o
            })
            .collect();
        layers.push((f, b));
    }

    let mut per_step = Vec::with_capacity(len);
    let mut features = vec![0.0; 2 * cfg.hidden];
    for o in &inputs {
        per_step.push(sigmoid(p.head.forward(o)?[0]));
        for (a, b) in features.iter_mut().zip(o) {
            *a += b;
        }
    }
    let inv = 1.0 / len as f64;
    features.iter_mut().for_each(|a| *a *= inv);
    let p_mean = per_step.iter().sum::<f64>() * inv;
    let trace = DiscTrace { layers, top: inputs, per_step: per_step.clone(), input_width: x.step_width() };
    Ok((DiscOutput { p_mean, per_step, features }, trace))
}

fn backward_direction(
    cell: &LstmCellParams,
    caches: &[LstmStepCache],
    d_h: impl Fn(usize) -> Vec<f64>,
    grad: &mut LstmCellParams,
    mut d_x: impl FnMut(usize, &[f64]),
) {
    let hidden = cell.hidden_size();
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    for s in (0..caches.len()).rev() {
        let mut dh = d_h(s);
        for (a, b) in dh.iter_mut().zip(&dh_next) {
            *a += b;
        }
        let mut dx = vec![0.0; caches[s].x.len()];
        let mut dh_prev = vec![0.0; hidden];
        let mut dc_prev = vec![0.0; hidden];
        lstm_step_backward(cell, &caches[s], &dh, &dc_next, grad, &mut dx, &mut dh_prev, &mut dc_prev);
        dh_next = dh_prev;
        dc_next = dc_prev;
        d_x(s, &dx);
    }
}

/// Backpropagation through both directions. `d_p_mean` and `d_features` are the
/// loss gradients with respect to [`DiscOutput::p_mean`] and
/// [`DiscOutput::features`]. Returns the parameter gradient and the gradient
/// with respect to the input sequence (flat, step-major).
pub fn discriminator_backward(
    p: &DiscriminatorParams,
    trace: &DiscTrace,
    d_p_mean: f64,
    d_features: Option<&[f64]>,
) -> (DiscriminatorParams, Vec<f64>) {
    let hidden = p.config.hidden;
    let len = trace.top.len();
    let inv = 1.0 / len as f64;
    let mut grad = p.zeroed();

    let mut d_top: Vec<Vec<f64>> = Vec::with_capacity(len);
    for t in 0..len {
        let pt = trace.per_step[t];
        let ds = d_p_mean * inv * pt * (1.0 - pt);
        let mut d_o = vec![0.0; 2 * hidden];
        p.head.backward(&trace.top[t], &[ds], &mut grad.head, &mut d_o);
        if let Some(df) = d_features {
            for (a, b) in d_o.iter_mut().zip(df) {
                *a += b * inv;
            }
        }
        d_top.push(d_o);
    }

    let mut d_layer_out = d_top;
    for l in (0..p.config.depth).rev() {
        let (fwd, bwd) = &p.layers[l];
        let (f_caches, b_caches) = &trace.layers[l];
        let in_width = f_caches[0].x.len();
        let mut d_in = vec![vec![0.0; in_width]; len];
        let (gf, gb) = &mut grad.layers[l];
        backward_direction(fwd, f_caches, |s| d_layer_out[s][..hidden].to_vec(), gf, |s, dx| {
            for (a, b) in d_in[s].iter_mut().zip(dx) {
                *a += b;
            }
        });
        backward_direction(bwd, b_caches, |s| d_layer_out[len - 1 - s][hidden..].to_vec(), gb, |s, dx| {
            for (a, b) in d_in[len - 1 - s].iter_mut().zip(dx) {
                *a += b;
            }
        });
        d_layer_out = d_in;
    }
    debug_assert!(d_layer_out.iter().all(|v| v.len() == trace.input_width));
    (grad, d_layer_out.concat())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CRGN";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize both networks: `CRGN`, u32 version, u32 depth, hidden, tones per
/// step and noise dim, then every generator matrix followed by every
/// discriminator matrix as u32 rows, u32 cols and row-major f64, all
/// little-endian.
pub fn encode_checkpoint(g: &GeneratorParams, d: &DiscriminatorParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = g.config;
    for v in [c.depth, c.hidden, c.tones_per_step, c.noise_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in g.tensors().into_iter().chain(d.tensors()) {
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for x in &m.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_checkpoint`]. When `expected` is given the stored
/// architecture must equal it. Returns the networks and any trailing bytes.
pub fn decode_checkpoint<'a>(
    bytes: &'a [u8],
    expected: Option<&ModelConfig>,
) -> Result<(GeneratorParams, DiscriminatorParams, &'a [u8]), ModelError> {
    let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&'a [u8], ModelError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u32 = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
    if read_u32(take(4)?) != CHECKPOINT_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(take(4)?);
    }
    let config = ModelConfig { depth: dims[0], hidden: dims[1], tones_per_step: dims[2], noise_dim: dims[3] };
    if config.depth == 0 || config.hidden == 0 || !matches!(config.tones_per_step, 1 | 3) || config.depth > 64 || config.hidden > 1 << 16 {
        return Err(bad("invalid architecture manifest"));
    }
    if let Some(want) = expected {
        if *want != config {
            return Err(ModelError::BadCheckpoint(format!("architecture {config:?} does not match requested {want:?}")));
        }
    }
    let mut rng = RngState::new(0);
    let mut g = GeneratorParams::init(config, &mut rng);
    let mut d = DiscriminatorParams::init(config, &mut rng);
    for m in g.tensors_mut().into_iter().chain(d.tensors_mut()) {
        let rows = read_u32(take(4)?);
        let cols = read_u32(take(4)?);
        if (rows, cols) != (m.rows, m.cols) {
            return Err(bad("matrix shape does not match manifest"));
        }
        let raw = take(rows * cols * 8)?;
        for (x, chunk) in m.data.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok((g, d, &bytes[pos..]))
}
