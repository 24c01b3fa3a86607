//! Comparison models: a two-layer LSTM reader with no attention, and helpers
//! for the fixed-depth ReasoNet variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graphgen::{GraphInstance, Label, Vocab};
use crate::layers::{Embedding, Linear, LstmCell, LstmWeights};
use crate::params::{Bound, ParamStore};
use crate::reasonet::{position_major, BoundModel, ModelConfig, ModelKind};
use crate::tensor::{Result, Tape, Tensor, Var};

/// Reads `graph | query` left to right with two stacked LSTMs and predicts
/// the label from the final top-layer state.
#[derive(Clone, Debug)]
pub struct DeepLstmReader {
    pub config: ModelConfig,
    pub params: ParamStore,
    vocab: Vocab,
    embedding: Embedding,
    lower: LstmCell,
    upper: LstmCell,
    head: Linear,
}

impl DeepLstmReader {
    pub fn new(config: ModelConfig) -> std::result::Result<Self, String> {
        config.validate()?;
        if config.kind != ModelKind::DeepLstm {
            return Err(format!("{} is not a deep-lstm configuration", config.kind));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let vocab = Vocab::with_separator(config.num_nodes);
        let (e, h) = (config.embedding_dim, config.encoder_hidden);
        let embedding = Embedding::new(&mut params, "embedding", vocab.len(), e, &mut rng);
        let lower = LstmCell::new(&mut params, "lstm0", e, h, &mut rng);
        let upper = LstmCell::new(&mut params, "lstm1", h, h, &mut rng);
        let head = Linear::new(&mut params, "answer", h, 1, &mut rng);
        Ok(Self {
            config,
            params,
            vocab,
            embedding,
            lower,
            upper,
            head,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Token ids of `graph | query`.
    pub fn input_ids(&self, instance: &GraphInstance) -> Vec<usize> {
        let mut ids = self.vocab.graph_ids(instance);
        ids.push(self.vocab.separator().expect("reader vocabulary has a separator"));
        ids.extend(self.vocab.query_ids(instance));
        ids
    }

    /// Answer logits `[B × 1]` for equal-length instances.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, instances: &[&GraphInstance]) -> Result<Var> {
        let seqs: Vec<Vec<usize>> = instances.iter().map(|i| self.input_ids(i)).collect();
        let (ids, len) = position_major(&seqs)?;
        let batch = instances.len();
        let emb = self.embedding.lookup(tape, bound, &ids)?;
        let lower = self.lower.bind(tape, bound)?;
        let upper = self.upper.bind(tape, bound)?;
        let states = run_lstm(tape, &lower, emb, len, batch)?;
        let stacked = if len == 1 { states[0] } else { tape.concat(&states, 0)? };
        let top = run_lstm(tape, &upper, stacked, len, batch)?;
        self.head.forward(tape, bound, *top.last().expect("non-empty sequence"))
    }

    /// `P(Yes)` for each instance, without gradients.
    pub fn predict(&self, instances: &[&GraphInstance]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let logits = self.logits(&mut tape, &bound, instances)?;
        let p = tape.sigmoid(logits)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// Forward LSTM over `packed: [len·B × input]`, returning every state.
fn run_lstm(tape: &mut Tape, cell: &LstmWeights, packed: Var, len: usize, batch: usize) -> Result<Vec<Var>> {
    let projected = cell.project_input(tape, packed)?;
    let mut s = tape.constant(Tensor::zeros(&[batch, cell.hidden_dim()]));
    let mut c = s;
    let mut out = Vec::with_capacity(len);
    for pos in 0..len {
        let xw = if len == 1 {
            projected
        } else {
            tape.slice(projected, 0, pos * batch, (pos + 1) * batch)?
        };
        (s, c) = cell.step_projected(tape, xw, s, c)?;
        out.push(s);
    }
    Ok(out)
}

/// `-(1/B) Σ_b log P(label_b)` for a `[B × 1]` Yes-logit.
pub fn logistic_nll(tape: &mut Tape, logits: Var, labels: &[Label]) -> Result<Var> {
    let signs = Tensor::new(
        &[labels.len(), 1],
        labels.iter().map(|l| if l.is_yes() { 1.0 } else { -1.0 }).collect(),
    )?;
    let signs = tape.constant(signs);
    let signed = tape.mul(logits, signs)?;
    let log_p = tape.log_sigmoid(signed)?;
    let mean = tape.mean(log_p)?;
    tape.scale(mean, -1.0)
}

/// Negative log-likelihood of the label under the answer head at the final step.
pub fn reasonet_last_loss(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    final_state: Var,
    labels: &[Label],
) -> Result<Var> {
    let logits = model.answer_logit(tape, final_state)?;
    logistic_nll(tape, logits, labels)
}

/// Two-step configuration derived from `config`. With `fixed_final_step` the
/// gate is dropped and the answer always comes from the second state.
pub fn make_tmax2_variant(config: &ModelConfig, fixed_final_step: bool) -> ModelConfig {
    let mut out = config.clone();
    out.t_max = 2;
    if fixed_final_step {
        out.kind = ModelKind::ReasonetLast;
    }
    out
}
