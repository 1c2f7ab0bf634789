//! Adam, the two-stage training protocol and checkpoint files.
//!
//! A training run is one logical thread: a single ChaCha stream seeded from
//! `StageConfig::seed` drives both the per-epoch shuffles and the dropout
//! masks, so `(seed, data, config)` fixes the result bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrialSet;
use crate::error::{ensure, Error, Result};
use crate::filterbank::SubbandStack;
use crate::io;
use crate::network::{self, DropoutSpec, Gradients, NetworkConfig, Parameters, TENSOR_NAMES};
use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSVEPCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStageConfig")]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub dropout: DropoutSpec,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStageConfig {
    epochs: usize,
    batch_size: usize,
    #[serde(default = "StageConfig::default_learning_rate")]
    learning_rate: f64,
    #[serde(default = "StageConfig::default_l2_lambda")]
    l2_lambda: f64,
    dropout: DropoutSpec,
    #[serde(default)]
    seed: u64,
    #[serde(default = "StageConfig::default_beta1")]
    adam_beta1: f64,
    #[serde(default = "StageConfig::default_beta2")]
    adam_beta2: f64,
    #[serde(default = "StageConfig::default_epsilon")]
    adam_epsilon: f64,
}

impl TryFrom<RawStageConfig> for StageConfig {
    type Error = Error;

    fn try_from(r: RawStageConfig) -> Result<Self> {
        let cfg = StageConfig {
            epochs: r.epochs,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            l2_lambda: r.l2_lambda,
            dropout: r.dropout,
            seed: r.seed,
            adam_beta1: r.adam_beta1,
            adam_beta2: r.adam_beta2,
            adam_epsilon: r.adam_epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl StageConfig {
    fn default_learning_rate() -> f64 {
        1e-4
    }
    fn default_l2_lambda() -> f64 {
        1e-3
    }
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_epsilon() -> f64 {
        1e-8
    }

    /// Learning rate 1e-4, lambda 1e-3 and the usual Adam constants.
    pub fn new(epochs: usize, batch_size: usize, dropout: DropoutSpec, seed: u64) -> Result<Self> {
        let cfg = StageConfig {
            epochs,
            batch_size,
            learning_rate: Self::default_learning_rate(),
            l2_lambda: Self::default_l2_lambda(),
            dropout,
            seed,
            adam_beta1: Self::default_beta1(),
            adam_beta2: Self::default_beta2(),
            adam_epsilon: Self::default_epsilon(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn benchmark_stage1(seed: u64) -> Self {
        Self::new(1000, 100, DropoutSpec::new(0.1, 0.1, 0.95).unwrap(), seed).unwrap()
    }

    pub fn benchmark_stage2(seed: u64) -> Self {
        Self::new(1000, 200, DropoutSpec::new(0.6, 0.6, 0.95).unwrap(), seed).unwrap()
    }

    pub fn beta_stage1(seed: u64) -> Self {
        Self::new(800, 100, DropoutSpec::new(0.1, 0.1, 0.95).unwrap(), seed).unwrap()
    }

    pub fn beta_stage2(seed: u64) -> Self {
        Self::new(1000, 120, DropoutSpec::new(0.7, 0.7, 0.95).unwrap(), seed).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Argument, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, Argument, "batch size must be at least 1");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate >= 0.0,
            Argument,
            "learning rate must be finite and nonnegative, got {}",
            self.learning_rate
        );
        ensure!(
            self.l2_lambda.is_finite() && self.l2_lambda >= 0.0,
            Argument,
            "l2 lambda must be nonnegative"
        );
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            Argument,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_epsilon > 0.0, Argument, "Adam epsilon must be positive");
        self.dropout.validate()
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Parameters,
    pub second_moment: Parameters,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: NetworkConfig) -> Self {
        Self {
            first_moment: Parameters::zeros(config),
            second_moment: Parameters::zeros(config),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &StageConfig,
) -> Result<()> {
    ensure!(
        params.config() == grads.config() && params.config() == state.first_moment.config(),
        Shape,
        "parameters, gradients and optimizer state disagree on shape"
    );
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_epsilon;

    let m_all = state.first_moment.tensors_mut();
    let v_all = state.second_moment.tensors_mut();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m_all)
        .zip(v_all)
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Borrowed training examples: sub-band stacks with their labels.
#[derive(Debug, Clone)]
pub struct Examples<'a> {
    stacks: Vec<&'a SubbandStack>,
    labels: Vec<usize>,
}

impl<'a> Examples<'a> {
    pub fn new(stacks: Vec<&'a SubbandStack>, labels: Vec<usize>) -> Result<Self> {
        ensure!(
            stacks.len() == labels.len(),
            Argument,
            "{} stacks but {} labels",
            stacks.len(),
            labels.len()
        );
        Ok(Self { stacks, labels })
    }

    /// Pairs each trial with its precomputed stack.
    pub fn from_trials(trials: &TrialSet, stacks: &'a [SubbandStack]) -> Result<Self> {
        ensure!(
            trials.len() == stacks.len(),
            Argument,
            "{} trials but {} precomputed stacks",
            trials.len(),
            stacks.len()
        );
        Self::new(stacks.iter().collect(), trials.labels())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn stacks(&self) -> &[&'a SubbandStack] {
        &self.stacks
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn extend(&mut self, other: &Examples<'a>) {
        self.stacks.extend_from_slice(&other.stacks);
        self.labels.extend_from_slice(&other.labels);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub params: Parameters,
    /// Mean per-trial loss of each epoch (cross-entropy plus the L2 term).
    pub loss_history: Vec<f64>,
    pub adam_steps: u64,
}

impl StageOutcome {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }
}

/// Mini-batch training from `init`, with a fresh optimizer state.
pub fn train_stage(examples: &Examples, init: Parameters, cfg: &StageConfig) -> Result<StageOutcome> {
    let state = AdamState::new(*init.config());
    train_stage_with_state(examples, init, state, cfg)
}

pub fn train_stage_with_state(
    examples: &Examples,
    init: Parameters,
    mut state: AdamState,
    cfg: &StageConfig,
) -> Result<StageOutcome> {
    cfg.validate()?;
    ensure!(
        !examples.is_empty(),
        Argument,
        "cannot train on an empty trial set"
    );
    let n_classes = init.config().n_classes;
    ensure!(
        examples.labels.iter().all(|&l| l < n_classes),
        Argument,
        "labels must lie in [0, {n_classes})"
    );
    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grads = Parameters::zeros(*params.config());
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.scale(0.0);
            let mut ce = 0.0;
            for &i in batch {
                let cache = network::forward(&params, examples.stacks[i], &cfg.dropout, &mut rng)?;
                ce += network::cross_entropy(&cache, examples.labels[i]);
                network::accumulate_gradient(&cache, examples.labels[i], &params, &mut grads)?;
            }
            let size = batch.len() as f64;
            grads.scale(1.0 / size);
            grads.add_scaled(&params, 2.0 * cfg.l2_lambda);
            epoch_loss += ce + size * cfg.l2_lambda * params.squared_norm();
            adam_step(&mut params, &grads, &mut state, cfg)?;
        }
        history.push(epoch_loss / examples.len() as f64);
    }
    if !params.is_finite() {
        return Err(Error::Data("training diverged to non-finite parameters".into()));
    }
    Ok(StageOutcome {
        params,
        loss_history: history,
        adam_steps: state.step,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageOutcome {
    pub global: StageOutcome,
    pub subjects: BTreeMap<String, StageOutcome>,
}

/// Seed of subject `subject_id`'s fine-tuning run.
pub fn subject_seed(stage2_seed: u64, subject_id: &str) -> u64 {
    seed::derive(stage2_seed, &["stage2", subject_id])
}

/// Seed used to draw the initial weights of a stage-1 run.
pub fn init_seed(stage1_seed: u64) -> u64 {
    seed::derive(stage1_seed, &["init"])
}

/// Stage 1 alone: fresh weights drawn from `init_seed(stage1.seed)`.
pub fn train_global(config: &NetworkConfig, global: &Examples, stage1: &StageConfig) -> Result<StageOutcome> {
    let init = network::init_params(config, &mut ChaCha8Rng::seed_from_u64(init_seed(stage1.seed)));
    train_stage(global, init, stage1)
}

/// Trains a global model from fresh weights on the pooled examples, then
/// fine-tunes a copy of it for every subject on that subject's examples,
/// each with a fresh Adam state.
pub fn two_stage_train(
    config: &NetworkConfig,
    global: &Examples,
    per_subject: &BTreeMap<String, Examples>,
    stage1: &StageConfig,
    stage2: &StageConfig,
) -> Result<TwoStageOutcome> {
    for (subject, ex) in per_subject {
        ensure!(
            !ex.is_empty(),
            Argument,
            "subject {subject} has no training trials"
        );
    }
    let global_outcome = train_global(config, global, stage1)?;
    let subjects = fine_tune_all(&global_outcome.params, per_subject, stage2)?;
    Ok(TwoStageOutcome {
        global: global_outcome,
        subjects,
    })
}

/// Stage 2 for every subject, starting from `global`.
pub fn fine_tune_all(
    global: &Parameters,
    per_subject: &BTreeMap<String, Examples>,
    stage2: &StageConfig,
) -> Result<BTreeMap<String, StageOutcome>> {
    let run = |(subject, ex): (&String, &Examples)| -> Result<(String, StageOutcome)> {
        let cfg = stage2.with_seed(subject_seed(stage2.seed, subject));
        let state = AdamState::new(*global.config());
        debug_assert_eq!(state.step, 0);
        Ok((
            subject.clone(),
            train_stage_with_state(ex, global.clone(), state, &cfg)?,
        ))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let entries: Vec<_> = per_subject.iter().collect();
        entries.into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        per_subject.iter().map(run).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// `global`, `finetune` or `importance`.
    pub stage: String,
    /// Subject id, or `global` for pooled models.
    pub subject_id: String,
    pub fold: Option<usize>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub stage_config: StageConfig,
    pub params: Parameters,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    config: NetworkConfig,
    stage_config: StageConfig,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        ensure!(
            self.params.config() == &self.config,
            Shape,
            "checkpoint parameters do not match its network config"
        );
        let shapes = Parameters::shapes(&self.config);
        let mut tensors = Vec::with_capacity(6);
        let mut offset = 0;
        for (name, shape) in TENSOR_NAMES.iter().zip(shapes) {
            let len: usize = shape.iter().product();
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset,
            });
            offset += len * 8;
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config,
            stage_config: self.stage_config,
            provenance: self.provenance.clone(),
            tensors,
        };
        let mut payload = Vec::with_capacity(offset);
        for v in self.params.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Ok(io::join_container(
            CHECKPOINT_MAGIC,
            &serde_json::to_vec(&header)?,
            &payload,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = io::split_container(bytes, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader =
            serde_json::from_slice(header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let config = header
            .config
            .validated()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let shapes = Parameters::shapes(&config);
        ensure!(
            header.tensors.len() == 6,
            Format,
            "expected 6 tensors, found {}",
            header.tensors.len()
        );
        let mut offset = 0;
        let mut tensors: [Vec<f64>; 6] = Default::default();
        for (i, entry) in header.tensors.iter().enumerate() {
            ensure!(
                entry.name == TENSOR_NAMES[i] && entry.shape == shapes[i] && entry.offset == offset,
                Format,
                "tensor manifest entry {i} ({} {:?} @{}) does not match the config",
                entry.name,
                entry.shape,
                entry.offset
            );
            let len: usize = entry.shape.iter().product();
            let end = offset + len * 8;
            ensure!(
                end <= payload.len(),
                Format,
                "payload truncated in tensor {}",
                entry.name
            );
            tensors[i] = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
        }
        ensure!(
            offset == payload.len(),
            Format,
            "{} trailing bytes after the last tensor",
            payload.len() - offset
        );
        Ok(Checkpoint {
            config,
            stage_config: header.stage_config,
            params: Parameters::from_tensors(config, tensors)?,
            provenance: header.provenance,
        })
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    io::write_atomic(path, &cp.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&io::read_file(path)?)
}

/// Loads a checkpoint and checks it was trained for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &NetworkConfig) -> Result<Checkpoint> {
    let cp = load_checkpoint(path)?;
    if &cp.config != expected {
        return Err(Error::shape_mismatch("checkpoint network", expected, &cp.config));
    }
    Ok(cp)
}
