//! Finite-difference verification of every differentiable component, from
//! single tape ops up to the full unrolled expected reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{logistic_nll, DeepLstmReader};
use crate::error::{Error, Result};
use crate::graphgen::GraphInstance;
use crate::layers::{BiLstm, Embedding, GruCell, Linear, LstmCell};
use crate::params::{Bound, ParamStore};
use crate::reasonet::{BatchIds, BoundModel, EpisodeTrace, ModelConfig, ModelKind, ReasoNetModel};
use crate::tensor::{finite_difference_grad, relative_error, Tape, Tensor, Var};
use crate::training::{expected_reward_var, reinforce_loss, Baseline, RewardRescale};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Entries where both the analytic and numeric gradient fall below this are skipped.
pub const NEGLIGIBLE: f64 = 1e-7;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Primitives,
    Cells,
    FullUnroll,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Primitives, Group::Cells, Group::FullUnroll];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Primitives => "primitives",
            Group::Cells => "cells",
            Group::FullUnroll => "full-unroll",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub group: Group,
    pub name: String,
    pub worst_rel_error: f64,
    /// Gradient entries compared.
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn worst(&self, group: Group) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.group == group)
            .map(|c| c.worst_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.worst_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| c.worst_rel_error > self.tolerance).collect()
    }
}

/// Worst relative error between backprop and central differences of `loss`
/// with respect to every parameter in `store`, and the number of entries compared.
pub fn check_store<F, E>(store: &ParamStore, loss: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &Bound) -> std::result::Result<Var, E>,
    E: Into<Error>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let l = loss(&mut tape, &bound).map_err(Into::into)?;
    tape.backward(l)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate_grads(&tape, &bound);

    let value_of = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind_frozen(&mut tape);
        let l = loss(&mut tape, &bound).map_err(Into::into)?;
        Ok(tape.value(l).item())
    };
    let (mut worst, mut entries) = (0.0f64, 0);
    let mut probe = store.clone();
    for p in analytic.iter() {
        let id = store.find(&p.name).expect("same registry");
        let mut failure = None;
        let numeric = finite_difference_grad(
            |t| {
                probe.get_mut(id).value = t.clone();
                Ok(value_of(&probe).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                }))
            },
            &p.value,
            FD_STEP,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        probe.get_mut(id).value = p.value.clone();
        for (a, n) in p.grad.iter().zip(numeric.data()) {
            if a.abs().max(n.abs()) > NEGLIGIBLE {
                worst = worst.max(relative_error(*a, *n));
                entries += 1;
            }
        }
    }
    Ok((worst, entries))
}

/// `Σ out ⊙ W` for a fixed pseudo-random `W`, so every output element
/// contributes a distinct weight to the checked scalar.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> crate::tensor::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

fn inputs(tensors: Vec<Tensor>) -> ParamStore {
    let mut store = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        store.add(format!("x{i}"), t);
    }
    store
}

type OpBuilder = fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpBuilder)> {
    let mut r = |shape: &[usize], lo: f64, hi: f64| random(rng, shape, lo, hi);
    vec![
        ("matmul", vec![r(&[3, 4], -2.0, 2.0), r(&[4, 2], -2.0, 2.0)], |t, v| t.matmul(v[0], v[1])),
        (
            "affine",
            vec![r(&[3, 4], -2.0, 2.0), r(&[4, 2], -2.0, 2.0), r(&[2], -1.0, 1.0)],
            |t, v| t.affine(v[0], v[1], v[2]),
        ),
        (
            "batch_matmul",
            vec![r(&[2, 3, 4], -2.0, 2.0), r(&[2, 4, 2], -2.0, 2.0)],
            |t, v| t.batch_matmul(v[0], v[1]),
        ),
        ("add_broadcast", vec![r(&[3, 4], -2.0, 2.0), r(&[4], -2.0, 2.0)], |t, v| t.add(v[0], v[1])),
        ("sub", vec![r(&[3, 4], -2.0, 2.0), r(&[3, 4], -2.0, 2.0)], |t, v| t.sub(v[0], v[1])),
        ("mul_broadcast", vec![r(&[3, 4], -2.0, 2.0), r(&[4], -2.0, 2.0)], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![r(&[5], -2.0, 2.0)], |t, v| t.scale(v[0], -1.7)),
        ("one_minus", vec![r(&[5], -2.0, 2.0)], |t, v| t.one_minus(v[0])),
        ("sigmoid", vec![r(&[3, 3], -4.0, 4.0)], |t, v| t.sigmoid(v[0])),
        ("log_sigmoid", vec![r(&[3, 3], -6.0, 6.0)], |t, v| t.log_sigmoid(v[0])),
        ("tanh", vec![r(&[3, 3], -3.0, 3.0)], |t, v| t.tanh(v[0])),
        ("exp", vec![r(&[3, 3], -2.0, 2.0)], |t, v| t.exp(v[0])),
        ("log", vec![r(&[3, 3], 0.3, 3.0)], |t, v| t.log(v[0])),
        ("softmax", vec![r(&[3, 5], -3.0, 3.0)], |t, v| t.softmax(v[0])),
        ("sum", vec![r(&[3, 5], -3.0, 3.0)], |t, v| t.sum(v[0])),
        ("mean", vec![r(&[3, 5], -3.0, 3.0)], |t, v| t.mean(v[0])),
        ("l2_normalize", vec![r(&[4, 3], -2.0, 2.0)], |t, v| t.l2_normalize(v[0], 1e-12)),
        (
            "concat",
            vec![r(&[2, 3], -2.0, 2.0), r(&[2, 2], -2.0, 2.0)],
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        ("slice", vec![r(&[4, 5], -2.0, 2.0)], |t, v| t.slice(v[0], 1, 1, 4)),
        ("reshape", vec![r(&[4, 3], -2.0, 2.0)], |t, v| t.reshape(v[0], &[2, 6])),
        ("gather", vec![r(&[5, 3], -2.0, 2.0)], |t, v| t.gather(v[0], &[4, 0, 4, 2])),
        (
            "lstm_pointwise",
            vec![r(&[2, 12], -3.0, 3.0), r(&[2, 3], -2.0, 2.0)],
            |t, v| t.lstm_pointwise(v[0], v[1]),
        ),
    ]
}

fn check_primitives(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, (name, tensors, build)) in primitive_cases(&mut rng).into_iter().enumerate() {
        let store = inputs(tensors);
        let mix = seed.wrapping_add(i as u64);
        let (worst, entries) = check_store(&store, |tape, bound| {
            let vars: Vec<Var> = store.iter().map(|p| bound.var(store.find(&p.name).unwrap())).collect();
            let y = build(tape, &vars)?;
            weighted_sum(tape, y, mix)
        })?;
        out.push(CheckResult {
            group: Group::Primitives,
            name: name.to_string(),
            worst_rel_error: worst,
            entries,
        });
    }
    Ok(())
}

fn scramble(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.7..0.7));
    }
}

fn toy_reasonet(seed: u64, t_max: usize) -> Result<ReasoNetModel> {
    let mut m = ReasoNetModel::new(ModelConfig {
        kind: ModelKind::Reasonet,
        num_nodes: 2,
        embedding_dim: 3,
        encoder_hidden: 2,
        controller_hidden: 4,
        attention_dim: 3,
        gamma: 10.0,
        t_max,
        init_seed: seed,
    })
    .map_err(Error::Config)?;
    scramble(&mut m.params, seed);
    Ok(m)
}

fn check_cells(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let (batch, input, hidden) = (2, 3, 4);
    let mut push = |name: &str, r: (f64, usize)| {
        out.push(CheckResult {
            group: Group::Cells,
            name: name.to_string(),
            worst_rel_error: r.0,
            entries: r.1,
        })
    };

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", input, hidden, &mut rng);
    let x = store.add("x", random(&mut rng, &[batch, input], -1.0, 1.0));
    let s = store.add("s", random(&mut rng, &[batch, hidden], -1.0, 1.0));
    let c = store.add("c", random(&mut rng, &[batch, hidden], -1.0, 1.0));
    push(
        "lstm_step",
        check_store(&store, |tape, b| {
            let w = cell.bind(tape, b)?;
            let (s1, c1) = w.step(tape, b.var(s), b.var(c), b.var(x))?;
            let (s2, c2) = w.step(tape, s1, c1, b.var(x))?;
            let both = tape.concat(&[s2, c2], 1)?;
            weighted_sum(tape, both, seed)
        })?,
    );

    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", input, hidden, &mut rng);
    let x = store.add("x", random(&mut rng, &[batch, input], -1.0, 1.0));
    let s = store.add("s", random(&mut rng, &[batch, hidden], -1.0, 1.0));
    push(
        "gru_step",
        check_store(&store, |tape, b| {
            let w = cell.bind(tape, b)?;
            let s1 = w.step(tape, b.var(s), b.var(x))?;
            let s2 = w.step(tape, s1, b.var(x))?;
            weighted_sum(tape, s2, seed)
        })?,
    );

    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "embedding", 5, input, &mut rng);
    let enc = BiLstm::new(&mut store, "encoder", input, 2, &mut rng);
    let ids = [1, 4, 0, 2, 3, 3];
    push(
        "embedding_bilstm",
        check_store(&store, |tape, b| {
            let packed = emb.lookup(tape, b, &ids)?;
            let e = enc.encode_packed(tape, b, packed, 3)?;
            let mut all = e.memory.clone();
            all.push(e.last);
            let cat = tape.concat(&all, 1)?;
            weighted_sum(tape, cat, seed)
        })?,
    );

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", input, 2, &mut rng);
    let x = store.add("x", random(&mut rng, &[batch, input], -1.0, 1.0));
    push(
        "linear",
        check_store(&store, |tape, b| {
            let y = lin.forward(tape, b, b.var(x))?;
            weighted_sum(tape, y, seed)
        })?,
    );

    let model = toy_reasonet(seed, 3)?;
    let mut store = model.params.clone();
    let width = 2 * model.config.encoder_hidden;
    let mem: Vec<_> = (0..3)
        .map(|i| store.add(format!("m{i}"), random(&mut rng, &[batch, width], -1.0, 1.0)))
        .collect();
    let s = store.add("s", random(&mut rng, &[batch, model.config.controller_hidden], -1.0, 1.0));
    let heads = |tape: &mut Tape, b: &Bound| -> crate::tensor::Result<Var> {
        let mut bm = model.bind(tape, false)?;
        bm.bound = b.clone();
        let vectors: Vec<Var> = mem.iter().map(|&m| b.var(m)).collect();
        let memory = bm.memory_from(tape, &vectors)?;
        let (x, weights) = bm.attend(tape, &memory, b.var(s))?;
        let s2 = bm.step(tape, b.var(s), x)?;
        let gate = bm.termination_prob(tape, s2)?.expect("gated model");
        let (yes, no) = bm.answer_dist(tape, s2)?;
        let cat = tape.concat(&[x, weights, s2, gate, yes, no], 1)?;
        weighted_sum(tape, cat, seed)
    };
    push("attention_controller_heads", check_store(&store, heads)?);

    let mut reader = DeepLstmReader::new(ModelConfig {
        kind: ModelKind::DeepLstm,
        num_nodes: 3,
        embedding_dim: 3,
        encoder_hidden: 3,
        controller_hidden: 0,
        attention_dim: 0,
        gamma: 1.0,
        t_max: 1,
        init_seed: seed,
    })
    .map_err(Error::Config)?;
    scramble(&mut reader.params, seed);
    let insts = [
        GraphInstance::labelled(3, vec![(0, 1)], (0, 1)),
        GraphInstance::labelled(3, vec![(2, 1)], (1, 2)),
    ];
    let refs: Vec<&GraphInstance> = insts.iter().collect();
    let labels: Vec<_> = insts.iter().map(|i| i.label).collect();
    push(
        "deep_lstm_reader",
        check_store(&reader.params, |tape, b| {
            let z = reader.logits(tape, b, &refs)?;
            logistic_nll(tape, z, &labels)
        })?,
    );
    Ok(())
}

/// Toy instances on two nodes: one reachable, one not.
pub fn toy_instances() -> Vec<GraphInstance> {
    vec![
        GraphInstance::labelled(2, vec![(0, 1), (1, 0)], (0, 1)),
        GraphInstance::labelled(2, vec![(1, 0), (1, 1)], (0, 1)),
    ]
}

fn check_full_unroll(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let model = toy_reasonet(seed.wrapping_add(2000), 3)?;
    let insts = toy_instances();
    let refs: Vec<&GraphInstance> = insts.iter().collect();
    let labels: Vec<_> = insts.iter().map(|i| i.label).collect();
    let ids = BatchIds::new(model.vocab(), &refs)?;
    let objective = |tape: &mut Tape, b: &Bound| -> Result<Var> {
        let mut bm = model.bind(tape, false)?;
        bm.bound = b.clone();
        let (memory, s1) = bm.encode(tape, &ids)?;
        let trace = bm.unroll(tape, &memory, s1)?;
        expected_reward_var(tape, &bm, &trace, &labels)
    };
    let (worst, entries) = check_store(&model.params, objective)?;
    out.push(CheckResult {
        group: Group::FullUnroll,
        name: "expected_reward".into(),
        worst_rel_error: worst,
        entries,
    });

    type Loss<'a> = dyn Fn(&mut Tape, &BoundModel<'_>, &EpisodeTrace) -> Result<Var> + 'a;
    let grads = |loss: &Loss<'_>| -> Result<ParamStore> {
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape, true)?;
        let (memory, s1) = bm.encode(&mut tape, &ids)?;
        let trace = bm.unroll(&mut tape, &memory, s1)?;
        let l = loss(&mut tape, &bm, &trace)?;
        tape.backward(l)?;
        let mut store = model.params.clone();
        store.zero_grads();
        store.accumulate_grads(&tape, &bm.bound);
        Ok(store)
    };
    let direct = grads(&|t, bm, tr| {
        let j = expected_reward_var(t, bm, tr, &labels)?;
        Ok(t.scale(j, -1.0)?)
    })?;
    let reinforce = grads(&|t, bm, tr| reinforce_loss(t, bm, tr, &labels, RewardRescale::Difference, Baseline::Instance))?;
    let (mut worst, mut entries) = (0.0f64, 0);
    for (p, q) in reinforce.iter().zip(direct.iter()) {
        for (a, b) in p.grad.iter().zip(&q.grad) {
            if a.abs().max(b.abs()) > NEGLIGIBLE {
                worst = worst.max(relative_error(*a, *b));
                entries += 1;
            }
        }
    }
    out.push(CheckResult {
        group: Group::FullUnroll,
        name: "reinforce_vs_direct".into(),
        worst_rel_error: worst,
        entries,
    });
    Ok(())
}

/// Runs every check. Deterministic in `seed`.
pub fn run(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut checks = Vec::new();
    check_primitives(seed, &mut checks)?;
    check_cells(seed, &mut checks)?;
    check_full_unroll(seed, &mut checks)?;
    Ok(GradCheckReport {
        seed,
        tolerance,
        checks,
    })
}
