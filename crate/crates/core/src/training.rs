//! Adversarial losses, next-event pretraining, the adversarial loop with
//! freezing and feature matching, and the maximum-likelihood baseline.

use thiserror::Error;

use crate::features::{self, canonicalize_events, Corpus, CurriculumSchedule, FeatureError, NormalizedSequence, ToneEvent};
use crate::metrics::MetricsReport;
use crate::models::{
    decode_checkpoint, discriminator_backward, discriminator_forward_traced, encode_checkpoint, generator_backward,
    generator_forward, generator_forward_traced, DiscOutput, DiscTrace, DiscriminatorParams, GeneratorParams,
    GeneratorTrace, ModelConfig, ModelError, NoiseSequence,
};
use crate::nn::{clip_global_norm, sgd_step, NnError, Parameterized, RngState};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss; epoch rolled back")]
    NonfiniteLoss,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("bad training checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub adversarial_epochs: usize,
    pub freeze_ratio: f64,
    pub feature_matching: bool,
    pub curriculum: CurriculumSchedule,
    pub seed: u64,
    pub model: ModelConfig,
    /// Global gradient-norm cap applied before every update.
    pub clip_norm: f64,
    /// Batches per epoch; `None` means roughly one pass over the corpus.
    pub batches_per_epoch: Option<usize>,
    /// Length of the sample scored at the end of every epoch.
    pub sample_length: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            l2: 1e-4,
            batch_size: 16,
            pretrain_epochs: 6,
            adversarial_epochs: 60,
            freeze_ratio: 0.7,
            feature_matching: true,
            curriculum: CurriculumSchedule::default(),
            seed: 1,
            model: ModelConfig::desk(),
            clip_norm: 5.0,
            batches_per_epoch: None,
            sample_length: 64,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(self.l2 >= 0.0) {
            return fail("l2 must be non-negative");
        }
        if !(self.freeze_ratio > 0.0 && self.freeze_ratio < 1.0) {
            return fail("freeze ratio must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if !matches!(self.model.tones_per_step, 1 | 3) {
            return fail("tones per step must be 1 or 3");
        }
        if self.model.depth == 0 || self.model.hidden == 0 || self.model.noise_dim == 0 {
            return fail("depth, hidden size and noise dimension must be positive");
        }
        let c = &self.curriculum;
        if c.base_length == 0 || c.doubling_period_epochs == 0 || c.base_length > c.max_length {
            return fail("curriculum needs 0 < base length ≤ max length and a positive period");
        }
        if self.sample_length == 0 {
            return fail("sample length must be positive");
        }
        Ok(())
    }
}

/// Mutable loop state; everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub pretrain_epochs_done: usize,
    /// Adversarial (or baseline) epochs completed.
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub d_frozen: bool,
    pub g_frozen: bool,
    pub rng: RngState,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
}

impl TrainingState {
    pub fn new(config: &TrainingConfig) -> Self {
        let mut rng = RngState::new(config.seed);
        let generator = GeneratorParams::init(config.model, &mut rng);
        let discriminator = DiscriminatorParams::init(config.model, &mut rng);
        Self {
            pretrain_epochs_done: 0,
            epoch: 0,
            loss_d: 0.0,
            loss_g: 0.0,
            d_frozen: false,
            g_frozen: false,
            rng,
            generator,
            discriminator,
        }
    }

    /// Global epoch index used by the curriculum.
    pub fn global_epoch(&self) -> usize {
        self.pretrain_epochs_done + self.epoch
    }

    /// Network checkpoint followed by a `CRGT` trailer holding the loop state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = encode_checkpoint(&self.generator, &self.discriminator);
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.pretrain_epochs_done as u64).to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.loss_d.to_le_bytes());
        out.extend_from_slice(&self.loss_g.to_le_bytes());
        out.push(u8::from(self.d_frozen));
        out.push(u8::from(self.g_frozen));
        let (seed, stream, pos) = self.rng.parts();
        out.extend_from_slice(&seed.to_le_bytes());
        out.extend_from_slice(&stream.to_le_bytes());
        out.extend_from_slice(&pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, TrainError> {
        let (generator, discriminator, rest) = decode_checkpoint(bytes, expected)?;
        let bad = |m: &str| TrainError::BadCheckpoint(m.to_string());
        if rest.len() != 4 + 4 + 8 + 8 + 8 + 8 + 2 + 8 + 8 + 16 || &rest[..4] != STATE_MAGIC {
            return Err(bad("missing training state"));
        }
        let u64_at = |i: usize| u64::from_le_bytes(rest[i..i + 8].try_into().expect("8 bytes"));
        if u32::from_le_bytes(rest[4..8].try_into().expect("4 bytes")) != STATE_VERSION {
            return Err(bad("unsupported training state version"));
        }
        Ok(Self {
            pretrain_epochs_done: u64_at(8) as usize,
            epoch: u64_at(16) as usize,
            loss_d: f64::from_bits(u64_at(24)),
            loss_g: f64::from_bits(u64_at(32)),
            d_frozen: rest[40] != 0,
            g_frozen: rest[41] != 0,
            rng: RngState::from_parts(
                u64_at(42),
                u64_at(50),
                u128::from_le_bytes(rest[58..74].try_into().expect("16 bytes")),
            ),
            generator,
            discriminator,
        })
    }
}

const STATE_MAGIC: &[u8; 4] = b"CRGT";
const STATE_VERSION: u32 = 1;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn inside_clamp(p: f64) -> bool {
    p > PROB_EPS && p < 1.0 - PROB_EPS
}

/// `(1/m) Σ [−log D(x) − log(1 − D(G(z)))]`
pub fn loss_d(d_real: &[f64], d_fake: &[f64]) -> Result<f64, TrainError> {
    if d_real.is_empty() || d_real.len() != d_fake.len() {
        return Err(if d_real.is_empty() { TrainError::EmptyBatch } else { TrainError::ShapeMismatch("batch sizes".into()) });
    }
    let m = d_real.len() as f64;
    Ok(d_real.iter().zip(d_fake).map(|(&r, &f)| -clamp_prob(r).ln() - (1.0 - clamp_prob(f)).ln()).sum::<f64>() / m)
}

/// `(1/m) Σ log(1 − D(G(z)))`
pub fn loss_g(d_fake: &[f64]) -> Result<f64, TrainError> {
    if d_fake.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    Ok(d_fake.iter().map(|&f| (1.0 - clamp_prob(f)).ln()).sum::<f64>() / d_fake.len() as f64)
}

/// `(1/m) Σ ‖R(x) − R(G(z))‖²`
pub fn feature_matching_loss(r_real: &[Vec<f64>], r_fake: &[Vec<f64>]) -> Result<f64, TrainError> {
    if r_real.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if r_real.len() != r_fake.len() || r_real.iter().zip(r_fake).any(|(a, b)| a.len() != b.len()) {
        return Err(TrainError::ShapeMismatch("feature batches differ in shape".into()));
    }
    let total: f64 = r_real.iter().zip(r_fake).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sum();
    Ok(total / r_real.len() as f64)
}

/// `(update_d, update_g)`: a network is frozen while its loss is below
/// `ratio` times the other's. Never freezes both.
pub fn freeze_gate(loss_d: f64, loss_g_mag: f64, ratio: f64) -> (bool, bool) {
    let update_d = !(loss_d < ratio * loss_g_mag);
    let update_g = !(loss_g_mag < ratio * loss_d);
    if !update_d && !update_g {
        (true, true)
    } else {
        (update_d, update_g)
    }
}

/// One batch pushed through G and D, keeping every trace so that any of the
/// losses can be differentiated without recomputing the forward pass.
pub struct AdversarialPass {
    fake_traces: Vec<GeneratorTrace>,
    real_out: Vec<DiscOutput>,
    real_traces: Vec<DiscTrace>,
    fake_out: Vec<DiscOutput>,
    fake_traces_d: Vec<DiscTrace>,
}

impl AdversarialPass {
    pub fn run(
        g: &GeneratorParams,
        d: &DiscriminatorParams,
        real: &[NormalizedSequence],
        noise: &[NoiseSequence],
    ) -> Result<Self, TrainError> {
        if real.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        if real.len() != noise.len() {
            return Err(TrainError::ShapeMismatch("real and noise batch sizes differ".into()));
        }
        let mut pass = Self {
            fake_traces: Vec::with_capacity(real.len()),
            real_out: Vec::with_capacity(real.len()),
            real_traces: Vec::with_capacity(real.len()),
            fake_out: Vec::with_capacity(real.len()),
            fake_traces_d: Vec::with_capacity(real.len()),
        };
        for (x, z) in real.iter().zip(noise) {
            let (fake, gt) = generator_forward_traced(g, z, None)?;
            let (ro, rt) = discriminator_forward_traced(d, x)?;
            let (fo, ft) = discriminator_forward_traced(d, &fake)?;
            pass.fake_traces.push(gt);
            pass.real_out.push(ro);
            pass.real_traces.push(rt);
            pass.fake_out.push(fo);
            pass.fake_traces_d.push(ft);
        }
        Ok(pass)
    }

    fn m(&self) -> f64 {
        self.real_out.len() as f64
    }

    pub fn d_real(&self) -> Vec<f64> {
        self.real_out.iter().map(|o| o.p_mean).collect()
    }

    pub fn d_fake(&self) -> Vec<f64> {
        self.fake_out.iter().map(|o| o.p_mean).collect()
    }

    pub fn loss_d(&self) -> f64 {
        loss_d(&self.d_real(), &self.d_fake()).expect("non-empty batch")
    }

    /// `−(1/m) Σ log D(G(z))`: large when the discriminator rejects the fakes.
    pub fn generator_deficit(&self) -> f64 {
        self.fake_out.iter().map(|o| -clamp_prob(o.p_mean).ln()).sum::<f64>() / self.m()
    }

    /// `L̂_G` with feature matching, `L_G` otherwise.
    pub fn generator_objective(&self, feature_matching: bool) -> f64 {
        if feature_matching {
            let real: Vec<Vec<f64>> = self.real_out.iter().map(|o| o.features.clone()).collect();
            let fake: Vec<Vec<f64>> = self.fake_out.iter().map(|o| o.features.clone()).collect();
            feature_matching_loss(&real, &fake).expect("paired features")
        } else {
            loss_g(&self.d_fake()).expect("non-empty batch")
        }
    }

    /// Gradient of `L_D` with respect to the discriminator.
    pub fn discriminator_grad(&self, d: &DiscriminatorParams) -> DiscriminatorParams {
        let m = self.m();
        let mut grad = d.zeroed();
        for (o, t) in self.real_out.iter().zip(&self.real_traces) {
            let dp = if inside_clamp(o.p_mean) { -1.0 / (m * o.p_mean) } else { 0.0 };
            grad.add_grad(&discriminator_backward(d, t, dp, None).0);
        }
        for (o, t) in self.fake_out.iter().zip(&self.fake_traces_d) {
            let dp = if inside_clamp(o.p_mean) { 1.0 / (m * (1.0 - o.p_mean)) } else { 0.0 };
            grad.add_grad(&discriminator_backward(d, t, dp, None).0);
        }
        grad
    }

    /// Gradient of the generator objective with respect to the generator,
    /// backpropagated through the (fixed) discriminator.
    pub fn generator_grad(&self, g: &GeneratorParams, d: &DiscriminatorParams, feature_matching: bool) -> GeneratorParams {
        let m = self.m();
        let mut grad = g.zeroed();
        for i in 0..self.fake_out.len() {
            let fo = &self.fake_out[i];
            let (dp, df) = if feature_matching {
                let df: Vec<f64> =
                    self.real_out[i].features.iter().zip(&fo.features).map(|(r, f)| -2.0 * (r - f) / m).collect();
                (0.0, Some(df))
            } else {
                let dp = if inside_clamp(fo.p_mean) { -1.0 / (m * (1.0 - fo.p_mean)) } else { 0.0 };
                (dp, None)
            };
            let (_, d_input) = discriminator_backward(d, &self.fake_traces_d[i], dp, df.as_deref());
            grad.add_grad(&generator_backward(g, &self.fake_traces[i], &d_input));
        }
        grad
    }
}

/// Squared next-event error under teacher forcing, averaged over events
/// (each event contributes the squared distance of its slot vector), and its
/// gradient.
pub fn pretrain_loss_and_grad(
    g: &GeneratorParams,
    real: &[NormalizedSequence],
    noise: &[NoiseSequence],
) -> Result<(f64, GeneratorParams), TrainError> {
    if real.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if real.len() != noise.len() {
        return Err(TrainError::ShapeMismatch("real and noise batch sizes differ".into()));
    }
    let count: usize = real.iter().map(|x| x.len()).sum();
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut grad = g.zeroed();
    for (x, z) in real.iter().zip(noise) {
        let (y, trace) = generator_forward_traced(g, z, Some(x))?;
        let diff: Vec<f64> = y.data.iter().zip(&x.data).map(|(a, b)| a - b).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>() * scale;
        let dy: Vec<f64> = diff.iter().map(|d| 2.0 * d * scale).collect();
        grad.add_grad(&generator_backward(g, &trace, &dy));
    }
    Ok((loss, grad))
}

fn apply_update<P: Parameterized>(params: &mut P, grad: &P, config: &TrainingConfig) -> Result<(), TrainError> {
    let mut flat_grad = grad.flatten();
    clip_global_norm(&mut flat_grad, config.clip_norm);
    let updated = sgd_step(&params.flatten(), &flat_grad, config.lr, config.l2)?;
    params.load_flat(&updated)?;
    Ok(())
}

fn sample_noise(count: usize, len: usize, dim: usize, rng: &mut RngState) -> Vec<NoiseSequence> {
    (0..count).map(|_| NoiseSequence::sample(len, dim, rng)).collect()
}

fn batches_for_epoch(corpus: &Corpus, config: &TrainingConfig, seq_len: usize) -> Result<usize, TrainError> {
    if let Some(n) = config.batches_per_epoch {
        return Ok(n.max(1));
    }
    let steps = corpus.total_steps(config.model.tones_per_step)?;
    Ok((steps / (config.batch_size * seq_len)).max(1))
}

/// One epoch of next-event training with teacher forcing. Returns the mean
/// batch loss.
pub fn pretrain_epoch(state: &mut TrainingState, corpus: &Corpus, config: &TrainingConfig) -> Result<f64, TrainError> {
    let seq_len = features::curriculum_length(&config.curriculum, state.global_epoch());
    let batches = batches_for_epoch(corpus, config, seq_len)?;
    let start = state.clone();
    let mut total = 0.0;
    for _ in 0..batches {
        let real =
            features::sample_batch(corpus, config.model.tones_per_step, seq_len, config.batch_size, &mut state.rng)?;
        let noise = sample_noise(real.len(), seq_len, config.model.noise_dim, &mut state.rng);
        let (loss, grad) = pretrain_loss_and_grad(&state.generator, &real, &noise)?;
        if !loss.is_finite() {
            *state = start;
            return Err(TrainError::NonfiniteLoss);
        }
        if let Err(e) = apply_update(&mut state.generator, &grad, config) {
            *state = start;
            return Err(e);
        }
        total += loss;
    }
    state.pretrain_epochs_done += 1;
    Ok(total / batches as f64)
}

/// Run the remaining pretraining epochs; returns each epoch's mean loss.
pub fn pretrain(state: &mut TrainingState, corpus: &Corpus, config: &TrainingConfig) -> Result<Vec<f64>, TrainError> {
    let mut losses = Vec::new();
    while state.pretrain_epochs_done < config.pretrain_epochs {
        losses.push(pretrain_epoch(state, corpus, config)?);
    }
    Ok(losses)
}

/// Maximum-likelihood baseline: the generator trained only on next-event
/// error for the whole epoch budget. Returns each epoch's mean loss.
pub fn train_baseline(state: &mut TrainingState, corpus: &Corpus, config: &TrainingConfig) -> Result<Vec<f64>, TrainError> {
    let budget = config.pretrain_epochs + config.adversarial_epochs;
    let mut losses = Vec::new();
    while state.pretrain_epochs_done < budget {
        losses.push(pretrain_epoch(state, corpus, config)?);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss_d: f64,
    pub generator_objective: f64,
    /// `−(1/m) Σ log D(G(z))`, the generator's loss as seen by freezing.
    pub generator_deficit: f64,
    pub updated_d: bool,
    pub updated_g: bool,
}

/// One adversarial batch. Both networks are differentiated at the current
/// parameters; each is then updated only if its flag allows it.
pub fn adversarial_batch(
    state: &mut TrainingState,
    real: &[NormalizedSequence],
    noise: &[NoiseSequence],
    config: &TrainingConfig,
    update_d: bool,
    update_g: bool,
) -> Result<BatchOutcome, TrainError> {
    let pass = AdversarialPass::run(&state.generator, &state.discriminator, real, noise)?;
    let loss_d = pass.loss_d();
    let generator_objective = pass.generator_objective(config.feature_matching);
    let generator_deficit = pass.generator_deficit();
    if !loss_d.is_finite() || !generator_objective.is_finite() {
        return Err(TrainError::NonfiniteLoss);
    }
    let g_grad = update_g.then(|| pass.generator_grad(&state.generator, &state.discriminator, config.feature_matching));
    if update_d {
        let d_grad = pass.discriminator_grad(&state.discriminator);
        apply_update(&mut state.discriminator, &d_grad, config)?;
    }
    if let Some(g_grad) = g_grad {
        apply_update(&mut state.generator, &g_grad, config)?;
    }
    Ok(BatchOutcome { loss_d, generator_objective, generator_deficit, updated_d: update_d, updated_g: update_g })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g_objective: f64,
    pub d_frozen_fraction: f64,
    pub g_frozen_fraction: f64,
    pub metrics: MetricsReport,
}

/// Column names of the epoch CSV, in order.
pub const EPOCH_COLUMNS: [&str; 5] = ["epoch", "loss_d", "loss_g_objective", "d_frozen_fraction", "g_frozen_fraction"];

impl EpochLog {
    pub fn csv_header() -> String {
        EPOCH_COLUMNS.iter().chain(crate::metrics::METRIC_COLUMNS.iter()).copied().collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut fields = vec![
            self.epoch.to_string(),
            format!("{}", self.loss_d),
            format!("{}", self.loss_g_objective),
            format!("{}", self.d_frozen_fraction),
            format!("{}", self.g_frozen_fraction),
        ];
        fields.extend(self.metrics.csv_fields());
        fields.join(",")
    }
}

/// What an epoch observer sees after every adversarial batch.
pub struct BatchObservation<'a> {
    pub batch: usize,
    pub outcome: &'a BatchOutcome,
    pub generator_before: &'a GeneratorParams,
    pub discriminator_before: &'a DiscriminatorParams,
    pub state_after: &'a TrainingState,
}

pub fn adversarial_epoch(state: &mut TrainingState, corpus: &Corpus, config: &TrainingConfig) -> Result<EpochLog, TrainError> {
    adversarial_epoch_observed(state, corpus, config, |_| {})
}

/// [`adversarial_epoch`] with a callback after every batch. Freeze flags are
/// recomputed after each batch from the running epoch means of `L_D` and the
/// generator deficit `−log D(G(z))`, which grows as the discriminator wins.
/// The deficit is used under feature matching too, whose objective lives on
/// an unrelated scale. On a non-finite
/// loss the state is restored to the start of the epoch.
pub fn adversarial_epoch_observed(
    state: &mut TrainingState,
    corpus: &Corpus,
    config: &TrainingConfig,
    mut observer: impl FnMut(BatchObservation<'_>),
) -> Result<EpochLog, TrainError> {
    let start = state.clone();
    match run_adversarial_epoch(state, corpus, config, &mut observer) {
        Ok(log) => Ok(log),
        Err(e) => {
            *state = start;
            Err(e)
        }
    }
}

fn run_adversarial_epoch(
    state: &mut TrainingState,
    corpus: &Corpus,
    config: &TrainingConfig,
    observer: &mut dyn FnMut(BatchObservation<'_>),
) -> Result<EpochLog, TrainError> {
    let seq_len = features::curriculum_length(&config.curriculum, state.global_epoch());
    let batches = batches_for_epoch(corpus, config, seq_len)?;
    let (mut sum_d, mut sum_g, mut sum_deficit) = (0.0, 0.0, 0.0);
    let (mut d_frozen, mut g_frozen) = (0usize, 0usize);

    for b in 0..batches {
        let real =
            features::sample_batch(corpus, config.model.tones_per_step, seq_len, config.batch_size, &mut state.rng)?;
        let noise = sample_noise(real.len(), seq_len, config.model.noise_dim, &mut state.rng);
        let (update_d, update_g) = (!state.d_frozen, !state.g_frozen);
        let before = (state.generator.clone(), state.discriminator.clone());
        let outcome = adversarial_batch(state, &real, &noise, config, update_d, update_g)?;
        d_frozen += usize::from(!update_d);
        g_frozen += usize::from(!update_g);
        sum_d += outcome.loss_d;
        sum_g += outcome.generator_objective;
        sum_deficit += outcome.generator_deficit;
        let n = (b + 1) as f64;
        let (ud, ug) = freeze_gate(sum_d / n, sum_deficit / n, config.freeze_ratio);
        state.d_frozen = !ud;
        state.g_frozen = !ug;
        observer(BatchObservation {
            batch: b,
            outcome: &outcome,
            generator_before: &before.0,
            discriminator_before: &before.1,
            state_after: state,
        });
    }

    let n = batches as f64;
    state.loss_d = sum_d / n;
    state.loss_g = sum_g / n;
    state.epoch += 1;
    let metrics = epoch_sample_report(&state.generator, config, state.global_epoch())?;
    Ok(EpochLog {
        epoch: state.epoch,
        loss_d: state.loss_d,
        loss_g_objective: state.loss_g,
        d_frozen_fraction: d_frozen as f64 / n,
        g_frozen_fraction: g_frozen as f64 / n,
        metrics,
    })
}

const SAMPLE_STREAM: u64 = 1 << 32;

/// Metrics of one sample drawn after `global_epoch` epochs. The sample uses
/// its own stream of the run seed, so logging never perturbs training.
pub fn epoch_sample_report(
    g: &GeneratorParams,
    config: &TrainingConfig,
    global_epoch: usize,
) -> Result<MetricsReport, TrainError> {
    let mut rng = RngState::new(config.seed).split(SAMPLE_STREAM + global_epoch as u64);
    Ok(MetricsReport::evaluate(&sample_events(g, config.sample_length, &mut rng)?))
}

/// Free-running generation from fresh noise.
pub fn generate(g: &GeneratorParams, length: usize, rng: &mut RngState) -> Result<NormalizedSequence, TrainError> {
    let z = NoiseSequence::sample(length, g.config.noise_dim, rng);
    Ok(generator_forward(g, &z)?)
}

/// Generate and decode into MIDI-representable tone events.
pub fn sample_events(g: &GeneratorParams, length: usize, rng: &mut RngState) -> Result<Vec<ToneEvent>, TrainError> {
    let seq = generate(g, length, rng)?;
    Ok(canonicalize_events(&seq.to_events(&features::FeatureBounds::default())))
}

/// Seed of the default gradient-check instance.
pub const GRADCHECK_SEED: u64 = 11;

/// Names of the losses covered by [`check_loss_gradients`], in report order.
pub const CHECKED_LOSSES: [&str; 4] = ["L_D", "L_G", "L_G_feature_matching", "MSE"];

/// Finite-difference check of every training loss through the full model at
/// hidden 8, depth 1, length 5 and batch 2. Returns `(loss name, max relative
/// error)`. `corrupt` perturbs one analytic coordinate per loss, so a working
/// detector must then report a large error.
pub fn check_loss_gradients(seed: u64, corrupt: bool) -> Result<Vec<(&'static str, f64)>, TrainError> {
    const EPS: f64 = 1e-5;
    let cfg = ModelConfig { depth: 1, hidden: 8, tones_per_step: 1, noise_dim: 4 };
    let (len, m) = (5, 2);
    let mut rng = RngState::new(seed);
    // Larger weights than the training init keep every gradient coordinate
    // well above finite-difference noise.
    let mut g = GeneratorParams::init(cfg, &mut rng);
    let mut d = DiscriminatorParams::init(cfg, &mut rng);
    for t in g.tensors_mut().into_iter().chain(d.tensors_mut()) {
        t.data.iter_mut().for_each(|v| *v += rng.uniform(-1.0, 1.0));
    }
    let real: Vec<NormalizedSequence> = (0..m)
        .map(|_| NormalizedSequence::new(1, (0..len * 4).map(|_| rng.uniform(0.05, 0.95)).collect()))
        .collect();
    let noise = sample_noise(m, len, cfg.noise_dim, &mut rng);

    let spoil = |mut v: crate::nn::ParamVector| {
        if corrupt {
            v.values[0] = v.values[0] * 1.5 + 1e-3;
        }
        v
    };
    let check_g = |analytic: GeneratorParams, f: &dyn Fn(&GeneratorParams) -> f64| {
        crate::nn::grad_check(
            |theta| {
                let mut q = g.clone();
                q.load_flat(theta).expect("same layout");
                f(&q)
            },
            &spoil(analytic.flatten()),
            &g.flatten(),
            EPS,
        )
    };

    let pass = AdversarialPass::run(&g, &d, &real, &noise)?;
    let err_d = crate::nn::grad_check(
        |theta| {
            let mut q = d.clone();
            q.load_flat(theta).expect("same layout");
            AdversarialPass::run(&g, &q, &real, &noise).expect("valid batch").loss_d()
        },
        &spoil(pass.discriminator_grad(&d).flatten()),
        &d.flatten(),
        EPS,
    );
    let objective = |q: &GeneratorParams, fm: bool| {
        AdversarialPass::run(q, &d, &real, &noise).expect("valid batch").generator_objective(fm)
    };
    let err_g = check_g(pass.generator_grad(&g, &d, false), &|q| objective(q, false));
    let err_fm = check_g(pass.generator_grad(&g, &d, true), &|q| objective(q, true));
    let (_, mse_grad) = pretrain_loss_and_grad(&g, &real, &noise)?;
    let err_mse = check_g(mse_grad, &|q| pretrain_loss_and_grad(q, &real, &noise).expect("valid batch").0);
    Ok(CHECKED_LOSSES.into_iter().zip([err_d, err_g, err_fm, err_mse]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::midi_note_to_freq;

    #[test]
    fn loss_d_examples() {
        assert!(loss_d(&[1.0 - 1e-7], &[1e-7]).unwrap() <= 3e-7);
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        assert!((loss_d(&[0.5], &[0.5]).unwrap() - two_ln2).abs() < 1e-6);
        assert!((loss_d(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - two_ln2).abs() < 1e-6);
        assert!(matches!(loss_d(&[], &[]), Err(TrainError::EmptyBatch)));
    }

    #[test]
    fn loss_g_examples() {
        assert!((loss_g(&[0.5]).unwrap() + std::f64::consts::LN_2).abs() < 1e-6);
        assert!(loss_g(&[1e-7]).unwrap().abs() <= 2e-7);
        assert!((loss_g(&[0.5, 1e-7]).unwrap() + 0.3466).abs() < 1e-4);
        assert!(matches!(loss_g(&[]), Err(TrainError::EmptyBatch)));
    }

    #[test]
    fn feature_matching_examples() {
        let a = vec![vec![0.3, -0.2], vec![1.0, 2.0]];
        assert_eq!(feature_matching_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_matching_loss(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]]).unwrap(), 1.0);
        let real = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let fake = vec![vec![0.0, 0.0], vec![0.0, 1.0 - 2f64.sqrt()]];
        assert!((feature_matching_loss(&real, &fake).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(feature_matching_loss(&real, &fake[..1]), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn freeze_gate_examples() {
        assert_eq!(freeze_gate(0.6, 1.0, 0.7), (false, true));
        assert_eq!(freeze_gate(1.0, 1.0, 0.7), (true, true));
        assert_eq!(freeze_gate(1.0, 0.6, 0.7), (true, false));
        assert_eq!(freeze_gate(1.0, 1.0, 1e9), (true, true));
    }

    fn constant_tone_corpus(songs: usize, len: usize) -> Corpus {
        let e = ToneEvent { duration_ticks: 384.0, freq_hz: midi_note_to_freq(64), intensity: 96.0, delta_ticks: 384.0 };
        Corpus::from_sequences(vec![vec![e; len]; songs], 0)
    }

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            model: ModelConfig { depth: 1, hidden: 16, tones_per_step: 1, noise_dim: 4 },
            batch_size: 4,
            batches_per_epoch: Some(8),
            curriculum: CurriculumSchedule { base_length: 6, doubling_period_epochs: 2, max_length: 12 },
            sample_length: 12,
            seed: 3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn pretraining_lowers_loss_on_constant_tones() {
        let corpus = constant_tone_corpus(4, 32);
        let config = tiny_config();
        let mut state = TrainingState::new(&config);
        let first = pretrain_epoch(&mut state, &corpus, &config).unwrap();
        let second = pretrain_epoch(&mut state, &corpus, &config).unwrap();
        assert!(second < first, "{second} !< {first}");
    }

    #[test]
    fn zero_pretrain_epochs_leave_params() {
        let corpus = constant_tone_corpus(2, 16);
        let config = TrainingConfig { pretrain_epochs: 0, ..tiny_config() };
        let mut state = TrainingState::new(&config);
        let before = state.clone();
        assert!(pretrain(&mut state, &corpus, &config).unwrap().is_empty());
        assert_eq!(state, before);
    }

    #[test]
    fn perfect_prediction_has_zero_mse() {
        let config = tiny_config();
        let mut g = GeneratorParams::init(config.model, &mut RngState::new(1));
        g.head.fill(0.0);
        let target = NormalizedSequence::new(1, vec![0.5; 20]);
        let noise = vec![NoiseSequence::sample(5, 4, &mut RngState::new(2))];
        let (loss, grad) = pretrain_loss_and_grad(&g, &[target], &noise).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.flatten().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn baseline_equals_pretrain_only_generator() {
        let corpus = constant_tone_corpus(3, 20);
        let config = TrainingConfig { pretrain_epochs: 1, adversarial_epochs: 1, ..tiny_config() };
        let mut baseline = TrainingState::new(&config);
        train_baseline(&mut baseline, &corpus, &config).unwrap();
        let mut pre = TrainingState::new(&config);
        pretrain(&mut pre, &corpus, &TrainingConfig { pretrain_epochs: 2, ..config.clone() }).unwrap();
        assert_eq!(baseline.generator, pre.generator);
        let seq = generate(&baseline.generator, 10, &mut RngState::new(4)).unwrap();
        assert!(seq.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn frozen_network_is_untouched_by_a_batch() {
        let corpus = constant_tone_corpus(3, 20);
        let config = tiny_config();
        let mut state = TrainingState::new(&config);
        let real = features::sample_batch(&corpus, 1, 6, 4, &mut state.rng).unwrap();
        let noise = sample_noise(4, 6, 4, &mut state.rng);
        let d_before = state.discriminator.clone();
        let g_before = state.generator.clone();
        adversarial_batch(&mut state, &real, &noise, &config, false, true).unwrap();
        assert_eq!(state.discriminator.flatten().values, d_before.flatten().values);
        assert_ne!(state.generator, g_before);
        let g_mid = state.generator.clone();
        adversarial_batch(&mut state, &real, &noise, &config, true, false).unwrap();
        assert_eq!(state.generator, g_mid);
        assert_ne!(state.discriminator, d_before);
    }

    #[test]
    fn adversarial_epoch_is_deterministic() {
        let corpus = constant_tone_corpus(3, 20);
        let config = TrainingConfig { batches_per_epoch: Some(1), ..tiny_config() };
        let run = || {
            let mut state = TrainingState::new(&config);
            let log = adversarial_epoch(&mut state, &corpus, &config).unwrap();
            (log, state)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.loss_d.to_bits(), b.loss_d.to_bits());
        assert_eq!(a.loss_g_objective.to_bits(), b.loss_g_objective.to_bits());
        assert_eq!(sa, sb);
    }

    #[test]
    fn state_bytes_round_trip() {
        let corpus = constant_tone_corpus(2, 20);
        let config = TrainingConfig { batches_per_epoch: Some(1), ..tiny_config() };
        let mut state = TrainingState::new(&config);
        adversarial_epoch(&mut state, &corpus, &config).unwrap();
        let bytes = state.to_bytes();
        let back = TrainingState::from_bytes(&bytes, Some(&config.model)).unwrap();
        assert_eq!(back, state);
        let other = ModelConfig { hidden: 8, ..config.model };
        assert!(TrainingState::from_bytes(&bytes, Some(&other)).is_err());
    }

    #[test]
    fn loss_gradients_pass_and_corruption_is_caught() {
        for (name, err) in check_loss_gradients(GRADCHECK_SEED, false).unwrap() {
            assert!(err <= 1e-4, "{name}: {err}");
        }
        for (name, err) in check_loss_gradients(GRADCHECK_SEED, true).unwrap() {
            assert!(err > 1e-2, "{name}: {err}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig { freeze_ratio: 1e9, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { lr: 0.0, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { batch_size: 0, ..TrainingConfig::default() }.validate().is_err());
    }
}
