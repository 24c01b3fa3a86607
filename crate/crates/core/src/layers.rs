//! Embeddings, recurrent cells, bidirectional encoders and initializers.
//!
//! Weight matrices are stored input-major (`[input × output]`) so that a batch
//! of row vectors `x: [B × input]` maps through `x · W`. Batched tensors carry
//! the batch on their first axis.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, Var};

/// Matrix with orthonormal columns (`rows >= cols`) or rows (`rows < cols`),
/// from a QR factorization of a Gaussian matrix with `diag(R) > 0`.
pub fn init_orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "empty matrix");
    let (tall, wide) = (rows.max(cols), rows.min(cols));
    // Column-major columns of a tall Gaussian matrix.
    let mut q: Vec<Vec<f64>> = (0..wide)
        .map(|_| (0..tall).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    // Modified Gram-Schmidt, applied twice for orthogonality to round-off.
    for j in 0..wide {
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = q.split_at_mut(j);
                let dot: f64 = done[i].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(&done[i]).for_each(|(c, p)| *c -= dot * p);
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if rows >= cols {
                data[i * cols + j] = v;
            } else {
                data[j * cols + i] = v;
            }
        }
    }
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

/// Independent draws from `U[lo, hi)`.
pub fn init_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor {
    assert!(lo < hi, "empty range {lo}..{hi}");
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

/// Bound on the non-recurrent weights of every cell.
pub const INPUT_WEIGHT_RANGE: f64 = 0.01;
/// Bound on embedding entries.
pub const EMBEDDING_RANGE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let table = init_uniform(vocab_size, dim, -EMBEDDING_RANGE, EMBEDDING_RANGE, rng);
        Self {
            table: store.add(name, table),
            vocab_size,
            dim,
        }
    }

    /// Rows of the table for `ids`, shape `[ids.len() × dim]`.
    pub fn lookup(&self, tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var> {
        tape.gather(bound.var(self.table), ids)
    }
}

/// Affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let w = init_uniform(input, output, -INPUT_WEIGHT_RANGE, INPUT_WEIGHT_RANGE, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, bound.var(self.weight), bound.var(self.bias))
    }
}

/// LSTM cell parameters, one matrix triple per gate (input, forget, output, candidate).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    input_weights: [ParamId; 4],
    recurrent_weights: [ParamId; 4],
    biases: [ParamId; 4],
}

/// Gate-fused view of an [`LstmCell`] bound to a tape.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    w: Var,
    u: Var,
    b: Var,
    hidden: usize,
}

impl LstmCell {
    const GATES: [&'static str; 4] = ["i", "f", "o", "c"];

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for gate in Self::GATES {
            let wi = init_uniform(input_dim, hidden_dim, -INPUT_WEIGHT_RANGE, INPUT_WEIGHT_RANGE, rng);
            w.push(store.add(format!("{name}.w_{gate}"), wi));
            u.push(store.add(format!("{name}.u_{gate}"), init_orthogonal(hidden_dim, hidden_dim, rng)));
            b.push(store.add(format!("{name}.b_{gate}"), Tensor::zeros(&[hidden_dim])));
        }
        Self {
            input_dim,
            hidden_dim,
            input_weights: w.try_into().expect("four gates"),
            recurrent_weights: u.try_into().expect("four gates"),
            biases: b.try_into().expect("four gates"),
        }
    }

    pub fn bind(&self, tape: &mut Tape, bound: &Bound) -> Result<LstmWeights> {
        let vars = |ids: &[ParamId; 4]| ids.map(|id| bound.var(id));
        let w = tape.concat(&vars(&self.input_weights), 1)?;
        let u = tape.concat(&vars(&self.recurrent_weights), 1)?;
        let b = tape.concat(&vars(&self.biases), 0)?;
        Ok(LstmWeights {
            w,
            u,
            b,
            hidden: self.hidden_dim,
        })
    }
}

impl LstmWeights {
    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    /// `x · W + b` for a stack of inputs, `[n × 4·hidden]`.
    pub fn project_input(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.affine(x, self.w, self.b)
    }

    /// One step given the already projected input.
    pub fn step_projected(&self, tape: &mut Tape, xw: Var, s: Var, c: Var) -> Result<(Var, Var)> {
        let h = self.hidden;
        let pre = tape.affine(s, self.u, xw)?;
        let packed = tape.lstm_pointwise(pre, c)?;
        let s_next = tape.slice(packed, 1, 0, h)?;
        let c_next = tape.slice(packed, 1, h, 2 * h)?;
        Ok((s_next, c_next))
    }

    /// `(s', c')` for inputs `x: [B × input]`, states `s, c: [B × hidden]`.
    pub fn step(&self, tape: &mut Tape, s: Var, c: Var, x: Var) -> Result<(Var, Var)> {
        let xw = self.project_input(tape, x)?;
        self.step_projected(tape, xw, s, c)
    }
}

/// GRU cell: `z = σ(x W_z + s U_z + b_z)`, `r = σ(x W_r + s U_r + b_r)`,
/// `h = tanh(x W_h + (r ∘ s) U_h + b_h)`, `s' = (1 - z) ∘ s + z ∘ h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    input_weights: [ParamId; 3],
    recurrent_weights: [ParamId; 3],
    biases: [ParamId; 3],
}

#[derive(Clone, Debug)]
pub struct GruWeights {
    w: Var,
    u_zr: Var,
    u_h: Var,
    b: Var,
    hidden: usize,
}

impl GruCell {
    const GATES: [&'static str; 3] = ["z", "r", "h"];

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for gate in Self::GATES {
            let wi = init_uniform(input_dim, hidden_dim, -INPUT_WEIGHT_RANGE, INPUT_WEIGHT_RANGE, rng);
            w.push(store.add(format!("{name}.w_{gate}"), wi));
            u.push(store.add(format!("{name}.u_{gate}"), init_orthogonal(hidden_dim, hidden_dim, rng)));
            b.push(store.add(format!("{name}.b_{gate}"), Tensor::zeros(&[hidden_dim])));
        }
        Self {
            input_dim,
            hidden_dim,
            input_weights: w.try_into().expect("three gates"),
            recurrent_weights: u.try_into().expect("three gates"),
            biases: b.try_into().expect("three gates"),
        }
    }

    pub fn bind(&self, tape: &mut Tape, bound: &Bound) -> Result<GruWeights> {
        let w = tape.concat(&self.input_weights.map(|id| bound.var(id)), 1)?;
        let u_zr = tape.concat(
            &[bound.var(self.recurrent_weights[0]), bound.var(self.recurrent_weights[1])],
            1,
        )?;
        let b = tape.concat(&self.biases.map(|id| bound.var(id)), 0)?;
        Ok(GruWeights {
            w,
            u_zr,
            u_h: bound.var(self.recurrent_weights[2]),
            b,
            hidden: self.hidden_dim,
        })
    }
}

impl GruWeights {
    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    /// `s'` for input `x: [B × input]` and state `s: [B × hidden]`.
    pub fn step(&self, tape: &mut Tape, s: Var, x: Var) -> Result<Var> {
        let h = self.hidden;
        let xw = tape.affine(x, self.w, self.b)?;
        let xw_zr = tape.slice(xw, 1, 0, 2 * h)?;
        let xw_h = tape.slice(xw, 1, 2 * h, 3 * h)?;
        let zr_pre = tape.affine(s, self.u_zr, xw_zr)?;
        let zr = tape.sigmoid(zr_pre)?;
        let z = tape.slice(zr, 1, 0, h)?;
        let r = tape.slice(zr, 1, h, 2 * h)?;
        let rs = tape.mul(r, s)?;
        let cand_pre = tape.affine(rs, self.u_h, xw_h)?;
        let cand = tape.tanh(cand_pre)?;
        let delta = tape.sub(cand, s)?;
        let moved = tape.mul(z, delta)?;
        tape.add(s, moved)
    }
}

/// Forward and backward LSTM over one token sequence.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

/// Output of a bidirectional encoder for a batch of equal-length sequences.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// One `[B × 2·hidden]` vector per position: forward state after reading
    /// position `k` next to the backward state after reading positions `k..`.
    pub memory: Vec<Var>,
    /// Forward final state next to the backward final state, `[B × 2·hidden]`.
    pub last: Var,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input_dim, hidden_dim, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input_dim, hidden_dim, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim
    }

    /// Encodes `packed: [seq_len·B × input]`, laid out position-major.
    pub fn encode_packed(&self, tape: &mut Tape, bound: &Bound, packed: Var, seq_len: usize) -> Result<Encoded> {
        let fwd = self.forward.bind(tape, bound)?;
        let bwd = self.backward.bind(tape, bound)?;
        encode_bidirectional_packed(tape, &fwd, &bwd, packed, seq_len)
    }
}

/// Bidirectional encoding of a token sequence given per-position inputs `[B × input]`.
pub fn encode_bidirectional(tape: &mut Tape, fwd: &LstmWeights, bwd: &LstmWeights, tokens: &[Var]) -> Result<Encoded> {
    if tokens.is_empty() {
        return Err(crate::tensor::TensorError::InvalidArgument {
            op: crate::tensor::OpKind::Concat,
            msg: "cannot encode an empty sequence".into(),
        });
    }
    let packed = if tokens.len() == 1 { tokens[0] } else { tape.concat(tokens, 0)? };
    encode_bidirectional_packed(tape, fwd, bwd, packed, tokens.len())
}

/// As [`encode_bidirectional`], with the inputs stacked position-major into one tensor.
pub fn encode_bidirectional_packed(
    tape: &mut Tape,
    fwd: &LstmWeights,
    bwd: &LstmWeights,
    packed: Var,
    seq_len: usize,
) -> Result<Encoded> {
    let rows = tape.shape(packed)[0];
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(crate::tensor::TensorError::InvalidArgument {
            op: crate::tensor::OpKind::Slice,
            msg: format!("{rows} rows cannot be split into {seq_len} positions"),
        });
    }
    let batch = rows / seq_len;
    let run = |tape: &mut Tape, cell: &LstmWeights, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, Var)>> {
        let projected = cell.project_input(tape, packed)?;
        let mut s = tape.constant(Tensor::zeros(&[batch, cell.hidden]));
        let mut c = s;
        let mut out = Vec::with_capacity(seq_len);
        for pos in order {
            let xw = if seq_len == 1 {
                projected
            } else {
                tape.slice(projected, 0, pos * batch, (pos + 1) * batch)?
            };
            (s, c) = cell.step_projected(tape, xw, s, c)?;
            out.push((pos, s));
        }
        Ok(out)
    };
    let forward = run(tape, fwd, &mut (0..seq_len))?;
    let mut backward = run(tape, bwd, &mut (0..seq_len).rev())?;
    backward.reverse();
    let mut memory = Vec::with_capacity(seq_len);
    for ((_, f), (_, b)) in forward.iter().zip(&backward) {
        memory.push(tape.concat(&[*f, *b], 1)?);
    }
    let last = tape.concat(&[forward[seq_len - 1].1, backward[0].1], 1)?;
    Ok(Encoded { memory, last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(store: &mut ParamStore) {
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(4, 4), (7, 3), (3, 7), (64, 64)] {
            let q = init_orthogonal(r, c, &mut rng);
            let d = q.data();
            let (outer, inner) = if r >= c { (c, r) } else { (r, c) };
            for a in 0..outer {
                for b in 0..outer {
                    let dot: f64 = (0..inner)
                        .map(|k| {
                            if r >= c {
                                d[k * c + a] * d[k * c + b]
                            } else {
                                d[a * c + k] * d[b * c + k]
                            }
                        })
                        .sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() <= 1e-10, "{r}x{c}: {dot}");
                }
            }
        }
    }

    #[test]
    fn uniform_range_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = init_uniform(3, 3, -0.01, 0.01, &mut rng);
        assert!(t.data().iter().all(|&v| (-0.01..0.01).contains(&v)));
        let a = init_orthogonal(5, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = init_orthogonal(5, 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn gru_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 2, &mut rng);
        zeroed(&mut store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let w = cell.bind(&mut tape, &bound).unwrap();
        let s = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]));
        let x = tape.constant(Tensor::matrix(&[&[0.7, -3.0, 2.0]]));
        let s2 = w.step(&mut tape, s, x).unwrap();
        assert_eq!(tape.value(s2).data(), &[0.5, 0.0]);
        let zero = tape.constant(Tensor::zeros(&[1, 2]));
        let s3 = w.step(&mut tape, zero, x).unwrap();
        assert_eq!(tape.value(s3).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 2, 2, &mut rng);
        zeroed(&mut store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let w = cell.bind(&mut tape, &bound).unwrap();
        let s = tape.constant(Tensor::matrix(&[&[0.3, -0.2]]));
        let c = tape.constant(Tensor::matrix(&[&[1.0, -2.0]]));
        let x = tape.constant(Tensor::matrix(&[&[5.0, 1.0]]));
        let (s2, c2) = w.step(&mut tape, s, c, x).unwrap();
        assert_eq!(tape.value(c2).data(), &[0.5, -1.0]);
        let want: Vec<f64> = [0.5f64, -1.0].iter().map(|v| 0.5 * v.tanh()).collect();
        assert_eq!(tape.value(s2).data(), want.as_slice());

        let zc = tape.constant(Tensor::zeros(&[1, 2]));
        let (s3, c3) = w.step(&mut tape, s, zc, x).unwrap();
        assert_eq!(tape.value(c3).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(s3).data(), &[0.0, 0.0]);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let w = cell.bind(&mut tape, &bound).unwrap();
        let s = tape.constant(Tensor::zeros(&[1, 2]));
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(w.step(&mut tape, s, x).is_err());
    }

    #[test]
    fn gru_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 4, 6, &mut rng);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let w = cell.bind(&mut tape, &bound).unwrap();
        let mut s = tape.constant(Tensor::new(&[1, 6], (0..6).map(|i| i as f64 - 2.5).collect()).unwrap());
        for _ in 0..20 {
            let prev_max = tape.value(s).data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let x = tape.constant(init_uniform(1, 4, -5.0, 5.0, &mut rng));
            s = w.step(&mut tape, s, x).unwrap();
            assert!(tape.value(s).data().iter().all(|v| v.abs() <= prev_max + 1e-12));
        }
    }

    fn embedded_sequence(tape: &mut Tape, seq: &[Tensor]) -> Vec<Var> {
        seq.iter().map(|t| tape.constant(t.clone())).collect()
    }

    #[test]
    fn encoder_shapes_and_single_token_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = BiLstm::new(&mut store, "enc", 3, 4, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fwd = enc.forward.bind(&mut tape, &bound).unwrap();
        let bwd = enc.backward.bind(&mut tape, &bound).unwrap();

        let one = embedded_sequence(&mut tape, &[init_uniform(1, 3, -1.0, 1.0, &mut rng)]);
        let out = encode_bidirectional(&mut tape, &fwd, &bwd, &one).unwrap();
        assert_eq!(out.memory.len(), 1);
        assert_eq!(tape.value(out.memory[0]), tape.value(out.last));

        let seven: Vec<Tensor> = (0..7).map(|_| init_uniform(1, 3, -1.0, 1.0, &mut rng)).collect();
        let seven = embedded_sequence(&mut tape, &seven);
        let out = encode_bidirectional(&mut tape, &fwd, &bwd, &seven).unwrap();
        assert_eq!(out.memory.len(), 7);
        assert!(out.memory.iter().all(|&m| tape.shape(m) == [1, 8]));

        assert!(encode_bidirectional(&mut tape, &fwd, &bwd, &[]).is_err());
    }

    #[test]
    fn encoder_reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = BiLstm::new(&mut store, "enc", 3, 4, &mut rng);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
        }
        let seq: Vec<Tensor> = (0..5).map(|_| init_uniform(2, 3, -1.0, 1.0, &mut rng)).collect();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fwd = enc.forward.bind(&mut tape, &bound).unwrap();
        let bwd = enc.backward.bind(&mut tape, &bound).unwrap();
        let vars = embedded_sequence(&mut tape, &seq);
        let a = encode_bidirectional(&mut tape, &fwd, &bwd, &vars).unwrap();
        let rev: Vec<Var> = vars.iter().rev().copied().collect();
        let b = encode_bidirectional(&mut tape, &bwd, &fwd, &rev).unwrap();
        for k in 0..5 {
            let ma = tape.value(a.memory[k]).data();
            let mb = tape.value(b.memory[4 - k]).data();
            for row in 0..2 {
                let (ra, rb) = (&ma[row * 8..row * 8 + 8], &mb[row * 8..row * 8 + 8]);
                assert_eq!(&ra[..4], &rb[4..]);
                assert_eq!(&ra[4..], &rb[..4]);
            }
        }
    }

    /// Scalar loss of a 3-token encoding followed by one GRU step, as a function
    /// of one chosen parameter.
    fn encoder_loss(store: &ParamStore, enc: &BiLstm, gru: &GruCell, inputs: &[Tensor]) -> Result<(Tape, Bound, Var)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fwd = enc.forward.bind(&mut tape, &bound)?;
        let bwd = enc.backward.bind(&mut tape, &bound)?;
        let g = gru.bind(&mut tape, &bound)?;
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = encode_bidirectional(&mut tape, &fwd, &bwd, &vars)?;
        let mut s = out.last;
        for &m in &out.memory {
            s = g.step(&mut tape, s, m)?;
        }
        let sq = tape.mul(s, s)?;
        let total = tape.sum(sq)?;
        let loss = tape.scale(total, 0.5)?;
        Ok((tape, bound, loss))
    }

    #[test]
    fn encoder_and_cells_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = BiLstm::new(&mut store, "enc", 3, 2, &mut rng);
        let gru = GruCell::new(&mut store, "ctl", 4, 4, &mut rng);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.9..0.9));
        }
        let inputs: Vec<Tensor> = (0..3).map(|_| init_uniform(2, 3, -1.0, 1.0, &mut rng)).collect();

        let (mut tape, bound, loss) = encoder_loss(&store, &enc, &gru, &inputs).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = store.clone();
        analytic.accumulate_grads(&tape, &bound);

        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        let mut worst = 0.0f64;
        for name in names {
            let id = store.find(&name).unwrap();
            let f = |x: &Tensor| -> Result<f64> {
                let mut probe = store.clone();
                probe.get_mut(id).value = x.clone();
                let (tape, _, loss) = encoder_loss(&probe, &enc, &gru, &inputs)?;
                Ok(tape.value(loss).item())
            };
            let numeric = finite_difference_grad(f, &store.get(id).value, 1e-5).unwrap();
            for (a, b) in analytic.get(id).grad.iter().zip(numeric.data()) {
                if (a - b).abs() > 1e-9 {
                    worst = worst.max(relative_error(*a, *b));
                }
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}
