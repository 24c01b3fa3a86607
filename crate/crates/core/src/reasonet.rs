//! The reasoning network: a GRU controller that repeatedly attends over an
//! encoded graph description, with a logistic termination gate and a logistic
//! Yes/No answer head read from every intermediate state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::graphgen::{GraphInstance, Label, Vocab};
use crate::layers::{init_uniform, BiLstm, Embedding, GruCell, GruWeights, Linear, INPUT_WEIGHT_RANGE};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{OpKind, Result, Tape, Tensor, TensorError, Var};

/// Guard added to vector norms inside the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Termination gate, trained by policy gradient over all episodes.
    Reasonet,
    /// No termination gate; always answers from the final state.
    ReasonetLast,
    /// Two stacked LSTMs over the concatenated graph and query.
    DeepLstm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Reasonet => "reasonet",
            ModelKind::ReasonetLast => "reasonet-last",
            ModelKind::DeepLstm => "deep-lstm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "reasonet" => Ok(ModelKind::Reasonet),
            "reasonet-last" => Ok(ModelKind::ReasonetLast),
            "deep-lstm" => Ok(ModelKind::DeepLstm),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyperparameters. The deep LSTM reader uses `encoder_hidden`
/// for both of its layers and ignores the controller and attention fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_nodes: usize,
    pub embedding_dim: usize,
    pub encoder_hidden: usize,
    pub controller_hidden: usize,
    pub attention_dim: usize,
    pub gamma: f64,
    pub t_max: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale small-graph ReasoNet.
    pub fn small(num_nodes: usize) -> Self {
        Self {
            kind: ModelKind::Reasonet,
            num_nodes,
            embedding_dim: 64,
            encoder_hidden: 64,
            controller_hidden: 128,
            attention_dim: 64,
            gamma: 10.0,
            t_max: 15,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.t_max < 1 {
            return Err("t_max must be at least 1".into());
        }
        if !(self.gamma > 0.0) {
            return Err(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.num_nodes < 1 || self.embedding_dim < 1 || self.encoder_hidden < 1 {
            return Err("dimensions must be positive".into());
        }
        if self.kind != ModelKind::DeepLstm {
            if self.controller_hidden != 2 * self.encoder_hidden {
                return Err(format!(
                    "controller_hidden ({}) must equal twice encoder_hidden ({}) since the initial state concatenates both query directions",
                    self.controller_hidden, self.encoder_hidden
                ));
            }
            if self.attention_dim < 1 {
                return Err("attention_dim must be positive".into());
            }
        }
        Ok(())
    }
}

/// Token ids for a batch of instances with equal sequence lengths, laid out
/// position-major (`ids[pos * batch + b]`).
#[derive(Clone, Debug)]
pub struct BatchIds {
    pub batch: usize,
    pub graph: Vec<usize>,
    pub graph_len: usize,
    pub query: Vec<usize>,
    pub query_len: usize,
}

impl BatchIds {
    pub fn new(vocab: &Vocab, instances: &[&GraphInstance]) -> Result<Self> {
        let graphs: Vec<Vec<usize>> = instances.iter().map(|i| vocab.graph_ids(i)).collect();
        let queries: Vec<Vec<usize>> = instances.iter().map(|i| vocab.query_ids(i)).collect();
        let (graph, graph_len) = position_major(&graphs)?;
        let (query, query_len) = position_major(&queries)?;
        Ok(Self {
            batch: instances.len(),
            graph,
            graph_len,
            query,
            query_len,
        })
    }
}

/// Interleaves equal-length sequences position-major.
pub fn position_major(seqs: &[Vec<usize>]) -> Result<(Vec<usize>, usize)> {
    let len = seqs.first().map_or(0, Vec::len);
    if len == 0 || seqs.iter().any(|s| s.len() != len) {
        return Err(TensorError::InvalidArgument {
            op: OpKind::Gather,
            msg: "batch sequences must be non-empty and of equal length".into(),
        });
    }
    let mut out = Vec::with_capacity(len * seqs.len());
    for pos in 0..len {
        out.extend(seqs.iter().map(|s| s[pos]));
    }
    Ok((out, len))
}

/// Encoded graph description, ready for attention.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `[B × L × width]`.
    pub vectors: Var,
    /// Unit-normalized projections of the memory vectors, `[B × L × attention_dim]`.
    pub keys: Var,
    pub batch: usize,
    pub len: usize,
    pub width: usize,
}

/// Per-step record of a full unroll over a batch. Every list has `t_max` entries.
#[derive(Clone, Debug)]
pub struct EpisodeTrace {
    /// Controller states `s_1..s_T`, each `[B × hidden]`.
    pub states: Vec<Var>,
    /// Attention distributions over memory at each step, `[B × L]`.
    pub attention: Vec<Var>,
    /// Termination probabilities, `[B × 1]`; the last is fixed at 1.
    pub term_probs: Vec<Var>,
    /// `P(answer = Yes | s_t)`, `[B × 1]`.
    pub p_yes: Vec<Var>,
    /// `P(answer = No | s_t)`, computed directly from the logit for precision.
    pub p_no: Vec<Var>,
}

impl EpisodeTrace {
    pub fn t_max(&self) -> usize {
        self.states.len()
    }

    /// Plain values of instance `b`.
    pub fn values(&self, tape: &Tape, b: usize) -> TraceValues {
        let col = |v: &Var| tape.value(*v).data()[b];
        TraceValues {
            term_probs: self.term_probs.iter().map(col).collect(),
            p_yes: self.p_yes.iter().map(col).collect(),
            p_no: self.p_no.iter().map(col).collect(),
            attention: self
                .attention
                .iter()
                .map(|a| {
                    let t = tape.value(*a);
                    let len = t.shape()[1];
                    t.data()[b * len..(b + 1) * len].to_vec()
                })
                .collect(),
        }
    }
}

/// Detached per-instance view of an [`EpisodeTrace`].
#[derive(Clone, Debug, PartialEq)]
pub struct TraceValues {
    pub term_probs: Vec<f64>,
    pub p_yes: Vec<f64>,
    pub p_no: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

impl TraceValues {
    pub fn answer_prob(&self, step: usize, label: Label) -> f64 {
        match label {
            Label::Yes => self.p_yes[step],
            Label::No => self.p_no[step],
        }
    }
}

/// `p(k) = t_k · Π_{i<k} (1 - t_i)`.
pub fn episode_probs(term_probs: &[f64]) -> Vec<f64> {
    let mut survive = 1.0;
    term_probs
        .iter()
        .map(|&t| {
            let p = t * survive;
            survive *= 1.0 - t;
            p
        })
        .collect()
}

/// Deterministic test-time decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    /// 1-based termination step with the largest `p(k)`; ties go to the earliest step.
    pub step: usize,
    pub answer: Label,
    /// `P(Yes)` at the chosen step.
    pub score: f64,
    /// `Σ_k p(k) · P(Yes | s_k)`.
    pub expected_score: f64,
}

pub fn infer_deterministic(values: &TraceValues) -> Decision {
    let probs = episode_probs(&values.term_probs);
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    let score = values.p_yes[best];
    Decision {
        step: best + 1,
        answer: Label::from_bool(score >= values.p_no[best]),
        score,
        expected_score: probs.iter().zip(&values.p_yes).map(|(p, y)| p * y).sum(),
    }
}

#[derive(Clone, Debug)]
pub struct ReasoNetModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    vocab: Vocab,
    embedding: Embedding,
    query_encoder: BiLstm,
    graph_encoder: BiLstm,
    attend_memory: ParamId,
    attend_state: ParamId,
    controller: GruCell,
    termination: Option<Linear>,
    answer: Linear,
}

/// Parameters of a [`ReasoNetModel`] bound to one tape.
pub struct BoundModel<'m> {
    pub model: &'m ReasoNetModel,
    pub bound: Bound,
    controller: GruWeights,
}

impl ReasoNetModel {
    /// Builds a freshly initialized model. `kind` must be one of the ReasoNet kinds.
    pub fn new(config: ModelConfig) -> std::result::Result<Self, String> {
        config.validate()?;
        if config.kind == ModelKind::DeepLstm {
            return Err("deep-lstm is not a ReasoNet kind".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let vocab = Vocab::new(config.num_nodes);
        let (e, h, c, a) = (
            config.embedding_dim,
            config.encoder_hidden,
            config.controller_hidden,
            config.attention_dim,
        );
        let embedding = Embedding::new(&mut params, "embedding", vocab.len(), e, &mut rng);
        let query_encoder = BiLstm::new(&mut params, "query_encoder", e, h, &mut rng);
        let graph_encoder = BiLstm::new(&mut params, "graph_encoder", e, h, &mut rng);
        let attend_memory = params.add(
            "attention.w_memory",
            init_uniform(2 * h, a, -INPUT_WEIGHT_RANGE, INPUT_WEIGHT_RANGE, &mut rng),
        );
        let attend_state = params.add(
            "attention.w_state",
            init_uniform(c, a, -INPUT_WEIGHT_RANGE, INPUT_WEIGHT_RANGE, &mut rng),
        );
        let controller = GruCell::new(&mut params, "controller", 2 * h, c, &mut rng);
        let termination =
            (config.kind == ModelKind::Reasonet).then(|| Linear::new(&mut params, "termination", c, 1, &mut rng));
        let answer = Linear::new(&mut params, "answer", c, 1, &mut rng);
        Ok(Self {
            config,
            params,
            vocab,
            embedding,
            query_encoder,
            graph_encoder,
            attend_memory,
            attend_state,
            controller,
            termination,
            answer,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn t_max(&self) -> usize {
        self.config.t_max
    }

    pub fn has_termination_gate(&self) -> bool {
        self.termination.is_some()
    }

    pub fn termination_head(&self) -> Option<&Linear> {
        self.termination.as_ref()
    }

    pub fn answer_head(&self) -> &Linear {
        &self.answer
    }

    pub fn bind<'m>(&'m self, tape: &mut Tape, trainable: bool) -> Result<BoundModel<'m>> {
        let bound = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        let controller = self.controller.bind(tape, &bound)?;
        Ok(BoundModel {
            model: self,
            bound,
            controller,
        })
    }

    /// Full unroll and deterministic decision for each instance, without gradients.
    pub fn predict(&self, instances: &[&GraphInstance]) -> Result<Vec<(Decision, TraceValues)>> {
        let mut tape = Tape::new();
        let bm = self.bind(&mut tape, false)?;
        let ids = BatchIds::new(&self.vocab, instances)?;
        let (memory, s1) = bm.encode(&mut tape, &ids)?;
        let trace = bm.unroll(&mut tape, &memory, s1)?;
        Ok((0..instances.len())
            .map(|b| {
                let v = trace.values(&tape, b);
                (infer_deterministic(&v), v)
            })
            .collect())
    }

    /// Sampled inference on one instance: draw the gate at each
    /// step before `t_max`, stop when it fires, then sample the answer.
    /// Returns the 1-based termination step and the sampled answer.
    pub fn infer_stochastic<R: Rng + ?Sized>(&self, instance: &GraphInstance, rng: &mut R) -> Result<(usize, Label)> {
        let mut tape = Tape::new();
        let bm = self.bind(&mut tape, false)?;
        let ids = BatchIds::new(&self.vocab, &[instance])?;
        let (memory, mut s) = bm.encode(&mut tape, &ids)?;
        let mut t = 1;
        loop {
            if t < self.config.t_max {
                let stop = match bm.termination_prob(&mut tape, s)? {
                    Some(p) => rng.gen::<f64>() < tape.value(p).item(),
                    None => false,
                };
                if !stop {
                    let (x, _) = bm.attend(&mut tape, &memory, s)?;
                    s = bm.step(&mut tape, s, x)?;
                    t += 1;
                    continue;
                }
            }
            let (p_yes, _) = bm.answer_dist(&mut tape, s)?;
            let yes = rng.gen::<f64>() < tape.value(p_yes).item();
            return Ok((t, Label::from_bool(yes)));
        }
    }
}

impl BoundModel<'_> {
    fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    /// Memory from the graph description and the initial state from the query.
    pub fn encode(&self, tape: &mut Tape, ids: &BatchIds) -> Result<(Memory, Var)> {
        let m = self.model;
        let g_emb = m.embedding.lookup(tape, &self.bound, &ids.graph)?;
        let graph = m.graph_encoder.encode_packed(tape, &self.bound, g_emb, ids.graph_len)?;
        let q_emb = m.embedding.lookup(tape, &self.bound, &ids.query)?;
        let query = m.query_encoder.encode_packed(tape, &self.bound, q_emb, ids.query_len)?;
        let memory = self.memory_from(tape, &graph.memory)?;
        Ok((memory, query.last))
    }

    /// Stacks per-position `[B × width]` vectors into attention memory.
    pub fn memory_from(&self, tape: &mut Tape, vectors: &[Var]) -> Result<Memory> {
        let (batch, width) = {
            let s = tape.shape(vectors[0]);
            (s[0], s[1])
        };
        let len = vectors.len();
        let flat = if len == 1 { vectors[0] } else { tape.concat(vectors, 1)? };
        let stacked = tape.reshape(flat, &[batch, len, width])?;
        let rows = tape.reshape(flat, &[batch * len, width])?;
        let projected = tape.matmul(rows, self.var(self.model.attend_memory))?;
        let unit = tape.l2_normalize(projected, COSINE_EPS)?;
        let keys = tape.reshape(unit, &[batch, len, self.model.config.attention_dim])?;
        Ok(Memory {
            vectors: stacked,
            keys,
            batch,
            len,
            width,
        })
    }

    /// `a_i = softmax_i(γ · cos(W_1 m_i, W_2 s))` and `x = Σ_i a_i m_i`.
    pub fn attend(&self, tape: &mut Tape, memory: &Memory, s: Var) -> Result<(Var, Var)> {
        let (b, l, a) = (memory.batch, memory.len, self.model.config.attention_dim);
        let q = tape.matmul(s, self.var(self.model.attend_state))?;
        let q = tape.l2_normalize(q, COSINE_EPS)?;
        let q = tape.reshape(q, &[b, a, 1])?;
        let cos = tape.batch_matmul(memory.keys, q)?;
        let cos = tape.reshape(cos, &[b, l])?;
        let logits = tape.scale(cos, self.model.config.gamma)?;
        let weights = tape.softmax(logits)?;
        let w3 = tape.reshape(weights, &[b, 1, l])?;
        let x = tape.batch_matmul(w3, memory.vectors)?;
        let x = tape.reshape(x, &[b, memory.width])?;
        Ok((x, weights))
    }

    /// `σ(W_tg s + b_tg)`, or `None` for models without a gate.
    pub fn termination_prob(&self, tape: &mut Tape, s: Var) -> Result<Option<Var>> {
        match &self.model.termination {
            Some(head) => {
                let logit = head.forward(tape, &self.bound, s)?;
                Ok(Some(tape.sigmoid(logit)?))
            }
            None => Ok(None),
        }
    }

    /// Answer logit `W_a s + b_a`, `[B × 1]`.
    pub fn answer_logit(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        self.model.answer.forward(tape, &self.bound, s)
    }

    /// `(P(Yes), P(No))`, each `[B × 1]`.
    pub fn answer_dist(&self, tape: &mut Tape, s: Var) -> Result<(Var, Var)> {
        let logit = self.answer_logit(tape, s)?;
        let yes = tape.sigmoid(logit)?;
        let neg = tape.scale(logit, -1.0)?;
        let no = tape.sigmoid(neg)?;
        Ok((yes, no))
    }

    /// Controller update `s' = GRU(s, x)`.
    pub fn step(&self, tape: &mut Tape, s: Var, x: Var) -> Result<Var> {
        self.controller.step(tape, s, x)
    }

    /// Runs all `t_max` steps, recording gate and answer outputs at each.
    pub fn unroll(&self, tape: &mut Tape, memory: &Memory, s1: Var) -> Result<EpisodeTrace> {
        let t_max = self.model.config.t_max;
        let width = tape.shape(s1)[1];
        if width != self.model.config.controller_hidden {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::MatMul,
                lhs: tape.shape(s1).to_vec(),
                rhs: vec![memory.batch, self.model.config.controller_hidden],
            });
        }
        let mut trace = EpisodeTrace {
            states: Vec::with_capacity(t_max),
            attention: Vec::with_capacity(t_max),
            term_probs: Vec::with_capacity(t_max),
            p_yes: Vec::with_capacity(t_max),
            p_no: Vec::with_capacity(t_max),
        };
        let batch = memory.batch;
        let mut s = s1;
        for t in 1..=t_max {
            let gate = if t == t_max {
                tape.constant(Tensor::full(&[batch, 1], 1.0))
            } else {
                match self.termination_prob(tape, s)? {
                    Some(p) => p,
                    None => tape.constant(Tensor::zeros(&[batch, 1])),
                }
            };
            let (yes, no) = self.answer_dist(tape, s)?;
            let (x, weights) = self.attend(tape, memory, s)?;
            trace.states.push(s);
            trace.term_probs.push(gate);
            trace.p_yes.push(yes);
            trace.p_no.push(no);
            trace.attention.push(weights);
            if t < t_max {
                s = self.step(tape, s, x)?;
            }
        }
        Ok(trace)
    }

    /// `p(k)` for every step as tape values, `[B × 1]` each.
    pub fn episode_probs(&self, tape: &mut Tape, trace: &EpisodeTrace) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(trace.t_max());
        let mut survive: Option<Var> = None;
        for &t in &trace.term_probs {
            let p = match survive {
                Some(sv) => tape.mul(t, sv)?,
                None => t,
            };
            out.push(p);
            let cont = tape.one_minus(t)?;
            survive = Some(match survive {
                Some(sv) => tape.mul(sv, cont)?,
                None => cont,
            });
        }
        Ok(out)
    }
}
