//! Policy-gradient objective over all enumerated episodes, optimizers, and
//! the epoch loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{logistic_nll, reasonet_last_loss};
use crate::error::{Error, Result};
use crate::graphgen::{GraphInstance, Label};
use crate::model::{length_groups, AnyModel};
use crate::params::ParamStore;
use crate::reasonet::{infer_deterministic, BatchIds, BoundModel, EpisodeTrace, ModelConfig, ModelKind, TraceValues};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Lower bound on the baseline when dividing by it.
pub const MIN_RATIO_BASELINE: f64 = 1e-6;

/// Stream tag for epoch shuffling, disjoint from the dataset streams.
const SHUFFLE_STREAM: u64 = 3 << 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adadelta,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Per-instance expected reward over all episodes.
    Instance,
    /// One running average per termination step, shared by all instances.
    MovingAverage,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardRescale {
    /// Advantage `r / b - 1`.
    Ratio,
    /// Advantage `r - b`.
    Difference,
}

macro_rules! parse_via_serde {
    ($($t:ty),*) => {$(
        impl std::str::FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
            }
        }
    )*};
}
parse_via_serde!(OptimizerKind, BaselineMode, RewardRescale);

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub t_max: usize,
    pub embedding_dim: usize,
    pub encoder_hidden: usize,
    pub controller_hidden: usize,
    pub attention_dim: usize,
    /// Hidden size of both layers of the LSTM reader.
    pub reader_hidden: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub clip_abs: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    pub baseline_lambda: f64,
    pub reward_rescale: RewardRescale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Reasonet,
            t_max: 15,
            embedding_dim: 64,
            encoder_hidden: 64,
            controller_hidden: 128,
            attention_dim: 64,
            reader_hidden: 128,
            gamma: 10.0,
            batch_size: 32,
            optimizer: OptimizerKind::Adadelta,
            learning_rate: 0.5,
            rho: 0.95,
            epsilon: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_abs: None,
            epochs: 30,
            seed: 0,
            baseline_mode: BaselineMode::Instance,
            baseline_lambda: 0.9,
            reward_rescale: RewardRescale::Ratio,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.baseline_mode == BaselineMode::MovingAverage && !(self.baseline_lambda > 0.0 && self.baseline_lambda < 1.0) {
            return fail(format!("baseline_lambda must lie in (0, 1), got {}", self.baseline_lambda));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.epsilon > 0.0) {
            return fail("rho must lie in [0, 1) and epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            return fail("beta1 and beta2 must lie in [0, 1) and adam_epsilon must be positive".into());
        }
        if let Some(c) = self.clip_abs {
            if !(c > 0.0) {
                return fail(format!("clip_abs must be positive, got {c}"));
            }
        }
        self.model_config(1).validate().map_err(Error::Config)
    }

    pub fn model_config(&self, num_nodes: usize) -> ModelConfig {
        let reader = self.model == ModelKind::DeepLstm;
        ModelConfig {
            kind: self.model,
            num_nodes,
            embedding_dim: self.embedding_dim,
            encoder_hidden: if reader { self.reader_hidden } else { self.encoder_hidden },
            controller_hidden: if reader { 0 } else { self.controller_hidden },
            attention_dim: if reader { 0 } else { self.attention_dim },
            gamma: self.gamma,
            t_max: if reader { 1 } else { self.t_max },
            init_seed: self.seed,
        }
    }
}

/// `(J, b)`: the probability of answering correctly, summed over all
/// (termination step, answer) episodes, and the instance baseline, which
/// under full enumeration equals `J`.
pub fn expected_reward(values: &TraceValues, label: Label) -> (f64, f64) {
    let probs = crate::reasonet::episode_probs(&values.term_probs);
    let j: f64 = probs.iter().enumerate().map(|(k, p)| p * values.answer_prob(k, label)).sum();
    (j, j)
}

/// `b ← λ·b + (1 − λ)·r`.
pub fn moving_average_baseline(b: f64, r: f64, lambda: f64) -> f64 {
    lambda * b + (1.0 - lambda) * r
}

/// Where the baseline of an episode comes from.
#[derive(Clone, Copy, Debug)]
pub enum Baseline<'a> {
    Instance,
    /// Per-termination-step values, indexed by `k - 1`.
    PerStep(&'a [f64]),
    None,
}

/// Advantage of each episode `(k, Yes)` and `(k, No)` for one instance.
pub fn episode_advantages(values: &TraceValues, label: Label, rescale: RewardRescale, baseline: Baseline<'_>) -> Vec<[f64; 2]> {
    let (j, _) = expected_reward(values, label);
    let reward = |yes: bool| if Label::from_bool(yes) == label { 1.0 } else { 0.0 };
    (0..values.term_probs.len())
        .map(|k| {
            let b = match baseline {
                Baseline::Instance => Some(j),
                Baseline::PerStep(bs) => Some(bs[k]),
                Baseline::None => None,
            };
            [true, false].map(|yes| {
                let r = reward(yes);
                match (b, rescale) {
                    (None, _) => r,
                    (Some(b), RewardRescale::Ratio) => r / b.max(MIN_RATIO_BASELINE) - 1.0,
                    (Some(b), RewardRescale::Difference) => r - b,
                }
            })
        })
        .collect()
}

/// `(1/B) Σ_b Σ_{k,a} π_b(k, a) · w_b(k, a)` with `w` held constant.
pub fn weighted_episode_sum(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    trace: &EpisodeTrace,
    weights: &[Vec<[f64; 2]>],
) -> Result<Var> {
    let batch = weights.len();
    let t_max = trace.t_max();
    let probs = model.episode_probs(tape, trace)?;
    let cat = |tape: &mut Tape, vs: &[Var]| if vs.len() == 1 { Ok(vs[0]) } else { tape.concat(vs, 1) };
    let p = cat(tape, &probs)?;
    let yes = cat(tape, &trace.p_yes)?;
    let no = cat(tape, &trace.p_no)?;
    let column = |a: usize| {
        let data = weights.iter().flat_map(|w| w.iter().map(move |pair| pair[a])).collect();
        Tensor::new(&[batch, t_max], data)
    };
    let w_yes = tape.constant(column(0)?);
    let w_no = tape.constant(column(1)?);
    let a = tape.mul(yes, w_yes)?;
    let b = tape.mul(no, w_no)?;
    let per_step = tape.add(a, b)?;
    let weighted = tape.mul(p, per_step)?;
    let total = tape.sum(weighted)?;
    Ok(tape.scale(total, 1.0 / batch as f64)?)
}

/// Mean expected reward over the batch, differentiable.
pub fn expected_reward_var(tape: &mut Tape, model: &BoundModel<'_>, trace: &EpisodeTrace, labels: &[Label]) -> Result<Var> {
    let rewards: Vec<Vec<[f64; 2]>> = labels
        .iter()
        .map(|&l| vec![[f64::from(l == Label::Yes), f64::from(l == Label::No)]; trace.t_max()])
        .collect();
    weighted_episode_sum(tape, model, trace, &rewards)
}

/// `-(1/B) Σ_b Σ_{k,a} π(k, a) · A(k, a)` for precomputed advantages.
pub fn policy_loss(tape: &mut Tape, model: &BoundModel<'_>, trace: &EpisodeTrace, advantages: &[Vec<[f64; 2]>]) -> Result<Var> {
    let sum = weighted_episode_sum(tape, model, trace, advantages)?;
    Ok(tape.scale(sum, -1.0)?)
}

/// Batch policy-gradient loss; `-∇` of it is the enumerated REINFORCE estimator.
pub fn reinforce_loss(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    trace: &EpisodeTrace,
    labels: &[Label],
    rescale: RewardRescale,
    baseline: Baseline<'_>,
) -> Result<Var> {
    let advantages: Vec<Vec<[f64; 2]>> = labels
        .iter()
        .enumerate()
        .map(|(b, &l)| episode_advantages(&trace.values(tape, b), l, rescale, baseline))
        .collect();
    policy_loss(tape, model, trace, &advantages)
}

/// Clamps every gradient element into `[-c, c]`.
pub fn clip_gradients(params: &mut ParamStore, c: f64) {
    for p in params.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g = g.clamp(-c, c));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState {
    pub sq_grad: Vec<Vec<f64>>,
    pub sq_update: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

fn zeros_like(params: &ParamStore) -> Vec<Vec<f64>> {
    params.iter().map(|p| vec![0.0; p.value.len()]).collect()
}

impl AdaDeltaState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            sq_grad: zeros_like(params),
            sq_update: zeros_like(params),
        }
    }
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: zeros_like(params),
            v: zeros_like(params),
            step: 0,
        }
    }
}

pub fn adadelta_update(params: &mut ParamStore, state: &mut AdaDeltaState, lr: f64, rho: f64, eps: f64) {
    for ((p, eg), ed) in params.iter_mut().zip(&mut state.sq_grad).zip(&mut state.sq_update) {
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = p.grad[i];
            eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
            let delta = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
            ed[i] = rho * ed[i] + (1.0 - rho) * delta * delta;
            values[i] += lr * delta;
        }
    }
}

pub fn adam_update(params: &mut ParamStore, state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = p.grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Adadelta(AdaDeltaState),
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Adadelta => OptimizerState::Adadelta(AdaDeltaState::new(params)),
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(params)),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, cfg: &TrainConfig) {
        match self {
            OptimizerState::Adadelta(s) => adadelta_update(params, s, cfg.learning_rate, cfg.rho, cfg.epsilon),
            OptimizerState::Adam(s) => adam_update(params, s, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "mean_J")]
    pub mean_j: f64,
    pub loss: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub train_acc: f64,
    pub wall_seconds: f64,
}

pub fn append_metrics(path: &Path, metrics: &EpochMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(metrics)?).map_err(|e| Error::io(path, e))
}

/// Sums over one mini-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub count: usize,
    pub correct: usize,
    pub sum_j: f64,
    pub sum_loss: f64,
}

/// Owns a model and its optimizer state across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: AnyModel,
    optimizer: OptimizerState,
    step_baselines: Vec<f64>,
    shuffle_rng: ChaCha8Rng,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, num_nodes: usize) -> Result<Self> {
        config.validate()?;
        let model = AnyModel::new(config.model_config(num_nodes))?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: AnyModel) -> Result<Self> {
        config.validate()?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            optimizer: OptimizerState::new(config.optimizer, model.params()),
            step_baselines: vec![0.0; model.config().t_max],
            shuffle_rng,
            epochs_done: 0,
            config,
            model,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Current per-step moving-average baselines.
    pub fn step_baselines(&self) -> &[f64] {
        &self.step_baselines
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn train_epoch(&mut self, data: &[GraphInstance]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let shuffled: Vec<GraphInstance> = order.iter().map(|&i| data[i].clone()).collect();
        let mut total = BatchStats::default();
        let mut batches = 0usize;
        for group in length_groups(&shuffled) {
            for chunk in group.chunks(self.config.batch_size) {
                let indices: Vec<usize> = chunk.iter().map(|&i| order[i]).collect();
                let stats = self.train_batch(data, &indices)?;
                total.count += stats.count;
                total.correct += stats.correct;
                total.sum_j += stats.sum_j;
                total.sum_loss += stats.sum_loss;
                batches += 1;
            }
        }
        self.epochs_done += 1;
        Ok(EpochMetrics {
            epoch: self.epochs_done,
            mean_j: total.sum_j / total.count as f64,
            loss: total.sum_loss / batches as f64,
            train_acc: total.correct as f64 / total.count as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Forward, backward and one optimizer step on `data[indices]`, which
    /// must share one sequence length.
    pub fn train_batch(&mut self, data: &[GraphInstance], indices: &[usize]) -> Result<BatchStats> {
        let refs: Vec<&GraphInstance> = indices.iter().map(|&i| &data[i]).collect();
        let stats = match self.batch_gradients(&refs) {
            Ok(stats) => stats,
            Err(Error::Tensor(TensorError::NonFinite { op })) => {
                return Err(self.locate_nonfinite(data, indices, format!("{op} produced a non-finite value")))
            }
            Err(e) => return Err(e),
        };
        if !stats.sum_loss.is_finite() || !stats.sum_j.is_finite() {
            return Err(self.locate_nonfinite(data, indices, "non-finite loss".into()));
        }
        let params = self.model.params_mut();
        if params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            params.zero_grads();
            return Err(self.locate_nonfinite(data, indices, "non-finite gradient".into()));
        }
        if let Some(c) = self.config.clip_abs {
            clip_gradients(params, c);
        }
        self.optimizer.step(params, &self.config);
        params.zero_grads();
        Ok(stats)
    }

    fn batch_gradients(&mut self, refs: &[&GraphInstance]) -> Result<BatchStats> {
        let labels: Vec<Label> = refs.iter().map(|i| i.label).collect();
        let mut tape = Tape::new();
        let (loss, stats, bound, step_rewards) = match &self.model {
            AnyModel::DeepLstm(m) => {
                let bound = m.params.bind(&mut tape);
                let logits = m.logits(&mut tape, &bound, refs)?;
                let loss = logistic_nll(&mut tape, logits, &labels)?;
                let mut stats = BatchStats {
                    count: refs.len(),
                    ..Default::default()
                };
                for (z, l) in tape.value(logits).data().iter().zip(&labels) {
                    let p_yes = 1.0 / (1.0 + (-z).exp());
                    stats.correct += usize::from(Label::from_bool(p_yes >= 0.5) == *l);
                    stats.sum_j += if l.is_yes() { p_yes } else { 1.0 - p_yes };
                }
                (loss, stats, bound, Vec::new())
            }
            AnyModel::ReasoNet(m) => {
                let bm = m.bind(&mut tape, true)?;
                let ids = BatchIds::new(m.vocab(), refs)?;
                let (memory, s1) = bm.encode(&mut tape, &ids)?;
                let trace = bm.unroll(&mut tape, &memory, s1)?;
                let values: Vec<TraceValues> = (0..refs.len()).map(|b| trace.values(&tape, b)).collect();
                let mut stats = BatchStats {
                    count: refs.len(),
                    ..Default::default()
                };
                for (v, &l) in values.iter().zip(&labels) {
                    stats.correct += usize::from(infer_deterministic(v).answer == l);
                    stats.sum_j += expected_reward(v, l).0;
                }
                let loss = if m.config.kind == ModelKind::ReasonetLast {
                    let last = *trace.states.last().expect("t_max >= 1");
                    reasonet_last_loss(&mut tape, &bm, last, &labels)?
                } else {
                    let baseline = match self.config.baseline_mode {
                        BaselineMode::Instance => Baseline::Instance,
                        BaselineMode::MovingAverage => Baseline::PerStep(&self.step_baselines),
                        BaselineMode::None => Baseline::None,
                    };
                    let advantages: Vec<Vec<[f64; 2]>> = values
                        .iter()
                        .zip(&labels)
                        .map(|(v, &l)| episode_advantages(v, l, self.config.reward_rescale, baseline))
                        .collect();
                    policy_loss(&mut tape, &bm, &trace, &advantages)?
                };
                let step_rewards: Vec<Vec<f64>> = values
                    .iter()
                    .zip(&labels)
                    .map(|(v, &l)| (0..v.p_yes.len()).map(|k| v.answer_prob(k, l)).collect())
                    .collect();
                (loss, stats, bm.bound, step_rewards)
            }
        };
        let mut stats = stats;
        stats.sum_loss = tape.value(loss).item();
        tape.backward(loss)?;
        self.model.params_mut().accumulate_grads(&tape, &bound);
        if self.config.baseline_mode == BaselineMode::MovingAverage {
            for rewards in &step_rewards {
                for (b, &r) in self.step_baselines.iter_mut().zip(rewards) {
                    *b = moving_average_baseline(*b, r, self.config.baseline_lambda);
                }
            }
        }
        Ok(stats)
    }

    fn locate_nonfinite(&self, data: &[GraphInstance], indices: &[usize], detail: String) -> Error {
        let culprit = indices
            .iter()
            .copied()
            .find(|&i| match self.model.predict(std::slice::from_ref(&data[i]), 1) {
                Ok(p) => !p[0].score.is_finite(),
                Err(_) => true,
            })
            .unwrap_or(indices[0]);
        Error::NonFinite {
            epoch: self.epochs_done + 1,
            instance: culprit,
            detail,
        }
    }
}
