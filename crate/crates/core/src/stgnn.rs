//! Graph branch: learnable channel adjacency, graph convolutions, a
//! bidirectional LSTM over the node sequence, and attention pooling.
//!
//! Node tensors are laid out `[B, N, D]`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::drdcae::{Affine, Head};
use crate::error::{invalid, shape_err, Result};
use crate::params::{xavier_uniform, Bound, Group, ParamId, ParamStore};
use crate::tensor::{BatchNormMode, BatchNormStats, Real, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Forward-pass phase. Training updates batch-norm buffers and applies
/// dropout when an RNG is supplied.
pub enum Phase<'a> {
    Train(Option<&'a mut dyn RngCore>),
    Eval,
}

impl Phase<'_> {
    pub fn bn_mode(&self) -> BatchNormMode {
        match self {
            Phase::Train(_) => BatchNormMode::Train {
                momentum: BN_MOMENTUM,
            },
            Phase::Eval => BatchNormMode::Eval,
        }
    }
}

/// Off-diagonal mask `1 - I`.
pub fn off_diagonal_mask<T: Real>(n: usize) -> Tensor<T> {
    let data = (0..n * n)
        .map(|i| if i / n == i % n { T::zero() } else { T::one() })
        .collect();
    Tensor::new(vec![n, n], data).expect("square")
}

/// Trainable `A[C, C]`; the graph uses its masked row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    pub n: usize,
    pub a: ParamId,
}

impl Adjacency {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: Tensor<T>) -> Result<Self> {
        let s = init.shape();
        if s.len() != 2 || s[0] != s[1] {
            return shape_err(format!("adjacency must be square, got {s:?}"));
        }
        let n = s[0];
        Ok(Self {
            n,
            a: store.add("adjacency", Group::St, init),
        })
    }
}

/// `softmax(A ⊙ M)` row-wise with the diagonal excluded.
pub fn normalize_adjacency<T: Real>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return shape_err(format!("adjacency must be square, got {s:?}"));
    }
    if s[0] < 2 {
        return invalid(format!("adjacency needs at least 2 nodes, got {}", s[0]));
    }
    tape.masked_softmax(a, &off_diagonal_mask(s[0]))
}

/// Plain-value version of [`normalize_adjacency`].
pub fn normalized_adjacency_values<T: Real>(a: &Tensor<T>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let n = normalize_adjacency(&mut tape, v)?;
    Ok(tape.value(n).data().iter().map(|x| x.f64()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConv {
    pub din: usize,
    pub dout: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub residual: bool,
}

impl GraphConv {
    /// The residual path is enabled only when `din == dout`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Group::St, xavier_uniform(rng, &[din, dout], din, dout));
        let b = store.add(format!("{name}.b"), Group::St, Tensor::zeros(&[dout]));
        let gamma = store.add(format!("{name}.bn.gamma"), Group::St, Tensor::full(&[dout], T::one()));
        let beta = store.add(format!("{name}.bn.beta"), Group::St, Tensor::zeros(&[dout]));
        Self {
            din,
            dout,
            w,
            b,
            gamma,
            beta,
            residual: din == dout,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b, self.gamma, self.beta]
    }
}

/// `ReLU(BN(Ã·H·W + b [+ H]))`, batch norm over the `B·N` rows.
pub fn graph_conv<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    layer: &GraphConv,
    adj: Var,
    h: Var,
    stats: &mut BatchNormStats<T>,
    mode: BatchNormMode,
) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || s[2] != layer.din {
        return shape_err(format!(
            "graph conv expects [B, N, {}] input, got {s:?}",
            layer.din
        ));
    }
    let (b, n) = (s[0], s[1]);
    let mixed = tape.mix_nodes(adj, h)?;
    let rows = tape.reshape(mixed, &[b * n, layer.din])?;
    let mut y = tape.linear(rows, p[layer.w], p[layer.b])?;
    if layer.residual {
        let skip = tape.reshape(h, &[b * n, layer.din])?;
        y = tape.add(y, skip)?;
    }
    let y = tape.batchnorm1d(y, p[layer.gamma], p[layer.beta], stats, mode, BN_EPS)?;
    let y = tape.relu(y);
    tape.reshape(y, &[b, n, layer.dout])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiLstm {
    pub input: usize,
    pub hidden: usize,
    /// `w[I+H, 4H]`, `b[4H]`, gates ordered input, forget, candidate, output.
    pub forward: Affine,
    pub backward: Affine,
}

impl BiLstm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, input: usize, hidden: usize) -> Self {
        let mut dir = |name: &str| {
            let (fi, fo) = (input + hidden, 4 * hidden);
            let w = store.add(format!("lstm.{name}.w"), Group::St, xavier_uniform(rng, &[fi, fo], fi, fo));
            let b = store.add(format!("lstm.{name}.b"), Group::St, Tensor::zeros(&[fo]));
            Affine { w, b }
        };
        let forward = dir("fw");
        let backward = dir("bw");
        Self {
            input,
            hidden,
            forward,
            backward,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.forward.ids(), self.backward.ids()].concat()
    }
}

/// Scans nodes `0..N` and `N..0` from zero states; per-node outputs are the
/// concatenation `[h_fw, h_bw]`, giving `[B, N, 2H]`.
pub fn bilstm_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, lstm: &BiLstm, h: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || s[2] != lstm.input || s[1] == 0 {
        return shape_err(format!(
            "bilstm expects [B, N, {}] input, got {s:?}",
            lstm.input
        ));
    }
    let (b, n, hid) = (s[0], s[1], lstm.hidden);
    let steps: Vec<Var> = (0..n)
        .map(|t| {
            let x = tape.slice(h, 1, t, 1)?;
            tape.reshape(x, &[b, lstm.input])
        })
        .collect::<Result<_>>()?;
    let mut run = |dir: &Affine, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
        let mut hs = tape.constant(Tensor::zeros(&[b, hid]));
        let mut cs = tape.constant(Tensor::zeros(&[b, hid]));
        let mut out = vec![hs; n];
        for t in order {
            let (hn, cn) = tape.lstm_cell(steps[t], hs, cs, p[dir.w], p[dir.b])?;
            out[t] = tape.reshape(hn, &[b, 1, hid])?;
            hs = hn;
            cs = cn;
        }
        Ok(out)
    };
    let fw = run(&lstm.forward, &mut (0..n))?;
    let bw = run(&lstm.backward, &mut (0..n).rev())?;
    let fw = tape.concat(&fw, 1)?;
    let bw = tape.concat(&bw, 1)?;
    tape.concat(&[fw, bw], 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionPool {
    pub dim: usize,
    pub score_hidden: Affine,
    pub score_out: Affine,
}

impl AttentionPool {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, dim: usize) -> Self {
        Self {
            dim,
            score_hidden: Affine::xavier(store, rng, "attention.w1", Group::St, dim, dim),
            score_out: Affine::xavier(store, rng, "attention.w2", Group::St, dim, 1),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.score_hidden.ids(), self.score_out.ids()].concat()
    }
}

/// Returns the pooled `[B, D]` vector and the node weights `alpha[B, N]`.
pub fn attention_pool<T: Real>(tape: &mut Tape<T>, p: &Bound, attn: &AttentionPool, h: Var) -> Result<(Var, Var)> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || s[2] != attn.dim {
        return shape_err(format!(
            "attention expects [B, N, {}] input, got {s:?}",
            attn.dim
        ));
    }
    let (b, n) = (s[0], s[1]);
    let rows = tape.reshape(h, &[b * n, attn.dim])?;
    let u = attn.score_hidden.forward(tape, p, rows)?;
    let u = tape.relu(u);
    let scores = attn.score_out.forward(tape, p, u)?;
    let scores = tape.reshape(scores, &[b, n])?;
    let alpha = tape.masked_softmax(scores, &Tensor::full(&[b, n], T::one()))?;
    let pooled = tape.pool_nodes(alpha, h)?;
    Ok((pooled, alpha))
}

/// Full graph branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stgnn {
    pub adjacency: Adjacency,
    /// Input projection used when the branch consumes the latent code.
    pub input_proj: Option<Affine>,
    pub gc1: GraphConv,
    pub gc2: GraphConv,
    pub lstm: BiLstm,
    pub attention: AttentionPool,
    pub head: Head,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StOutput {
    pub logits: Var,
    /// `[B, N]`
    pub alpha: Var,
    /// Normalized adjacency `[C, C]`.
    pub adjacency: Var,
}

impl Stgnn {
    /// Parameters excluding the `C x C` adjacency.
    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.input_proj.map(|a| a.ids()).unwrap_or_default(),
            self.gc1.ids(),
            self.gc2.ids(),
            self.lstm.ids(),
            self.attention.ids(),
            self.head.ids(),
        ]
        .concat()
    }

    /// `x` is `[B, N, D_in]`; `bn` holds the two graph layers' buffers.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        bn: &mut [BatchNormStats<T>; 2],
        phase: &mut Phase<'_>,
    ) -> Result<StOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.adjacency.n {
            return shape_err(format!(
                "graph branch expects [B, {}, D] input, got {s:?}",
                self.adjacency.n
            ));
        }
        let mut h = x;
        if let Some(proj) = &self.input_proj {
            let rows = tape.reshape(x, &[s[0] * s[1], s[2]])?;
            let y = proj.forward(tape, p, rows)?;
            h = tape.reshape(y, &[s[0], s[1], self.gc1.din])?;
        }
        let adjacency = normalize_adjacency(tape, p[self.adjacency.a])?;
        let mode = phase.bn_mode();
        let [bn1, bn2] = bn;
        h = graph_conv(tape, p, &self.gc1, adjacency, h, bn1, mode)?;
        if let Phase::Train(Some(rng)) = phase {
            h = tape.dropout(h, self.dropout, &mut **rng)?;
        }
        h = graph_conv(tape, p, &self.gc2, adjacency, h, bn2, mode)?;
        let seq = bilstm_forward(tape, p, &self.lstm, h)?;
        let (pooled, alpha) = attention_pool(tape, p, &self.attention, seq)?;
        let logits = self.head.forward(tape, p, pooled)?;
        Ok(StOutput {
            logits,
            alpha,
            adjacency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn identity_bn(d: usize) -> BatchNormStats<f64> {
        BatchNormStats {
            mean: vec![0.0; d],
            var: vec![1.0 - BN_EPS; d],
        }
    }

    #[test]
    fn adjacency_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a2 = normalized_adjacency_values(&random(&mut rng, &[2, 2])).unwrap();
        assert_eq!(a2, vec![0.0, 1.0, 1.0, 0.0]);

        let eq = Tensor::new(vec![3, 3], vec![9.0, 0.4, 0.4, 0.4, -2.0, 0.4, 0.4, 0.4, 5.0]).unwrap();
        let a3 = normalized_adjacency_values(&eq).unwrap();
        for i in 0..3 {
            let mut row: Vec<f64> = a3[i * 3..i * 3 + 3].to_vec();
            row.sort_by(f64::total_cmp);
            assert_eq!(row, vec![0.0, 0.5, 0.5]);
        }

        let r = Tensor::new(vec![3, 3], vec![7.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let a = normalized_adjacency_values(&r).unwrap();
        assert_eq!(a[0], 0.0);
        assert!((a[1] - 0.268_941_421).abs() < 1e-8);
        assert!((a[2] - 0.731_058_579).abs() < 1e-8);

        assert!(normalized_adjacency_values(&Tensor::<f64>::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn adjacency_structure_holds_for_any_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..9 {
            let a = normalized_adjacency_values(&random(&mut rng, &[n, n]).cast::<f64>()).unwrap();
            for i in 0..n {
                assert_eq!(a[i * n + i], 0.0);
                let s: f64 = a[i * n..(i + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    fn gc_setup(din: usize, dout: usize) -> (ParamStore<f64>, GraphConv) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let gc = GraphConv::new(&mut s, &mut rng, "gc", din, dout);
        (s, gc)
    }

    #[test]
    fn graph_conv_counts_and_shapes() {
        let (s, gc1) = gc_setup(18, 32);
        assert!(!gc1.residual);
        assert_eq!(s.count(&gc1.ids()), 672);
        let (s2, gc2) = gc_setup(32, 32);
        assert!(gc2.residual);
        assert_eq!(s2.count(&gc2.ids()), 1120);

        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adj = t.constant(Tensor::full(&[5, 5], 0.2));
        let h = t.constant(random(&mut rng, &[3, 5, 18]));
        let mut bn = BatchNormStats::new(32);
        let mode = BatchNormMode::Train { momentum: 0.1 };
        let y = graph_conv(&mut t, &p, &gc1, adj, h, &mut bn, mode).unwrap();
        assert_eq!(t.shape(y), &[3, 5, 32]);
        let wrong = t.constant(Tensor::full(&[4, 4], 0.25));
        assert!(graph_conv(&mut t, &p, &gc1, wrong, h, &mut bn, mode).is_err());
    }

    #[test]
    fn graph_conv_zero_input_is_zero() {
        let (s, gc) = gc_setup(4, 6);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let adj = t.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
        let h = t.constant(Tensor::zeros(&[2, 3, 4]));
        let mut bn = BatchNormStats::new(6);
        let y = graph_conv(&mut t, &p, &gc, adj, h, &mut bn, BatchNormMode::Train { momentum: 0.1 }).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_conv_two_node_hand_oracle() {
        let (mut s, gc) = gc_setup(3, 3);
        let mut gc = gc;
        gc.residual = false;
        let eye: Vec<f64> = (0..9).map(|i| if i / 3 == i % 3 { 1.0 } else { 0.0 }).collect();
        *s.get_mut(gc.w) = Tensor::new(vec![3, 3], eye).unwrap();
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let adj = t.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let hv = vec![0.5, -1.0, 2.0, -0.3, 0.7, 0.0];
        let h = t.constant(Tensor::new(vec![1, 2, 3], hv.clone()).unwrap());
        let mut bn = identity_bn(3);
        let y = graph_conv(&mut t, &p, &gc, adj, h, &mut bn, BatchNormMode::Eval).unwrap();
        let expect = [hv[3].max(0.0), hv[4].max(0.0), hv[5].max(0.0), hv[0].max(0.0), hv[1].max(0.0), hv[2].max(0.0)];
        for (a, e) in t.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_with_zero_weights_is_relu() {
        let (mut s, gc) = gc_setup(4, 4);
        *s.get_mut(gc.w) = Tensor::zeros(&[4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let adj = t.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
        let hv = random(&mut rng, &[2, 3, 4]);
        let h = t.constant(hv.clone());
        let mut bn = identity_bn(4);
        let y = graph_conv(&mut t, &p, &gc, adj, h, &mut bn, BatchNormMode::Eval).unwrap();
        for (a, e) in t.value(y).data().iter().zip(hv.data()) {
            assert!((a - e.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_conv_is_permutation_equivariant() {
        let (s, gc) = gc_setup(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 5;
        let perm = [3usize, 0, 4, 1, 2];
        for _ in 0..5 {
            let a = random(&mut rng, &[n, n]);
            let a_norm = normalized_adjacency_values(&a).unwrap();
            let h = random(&mut rng, &[2, n, 4]);
            let mut pa = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    pa[i * n + j] = a_norm[perm[i] * n + perm[j]];
                }
            }
            let mut ph = vec![0.0; 2 * n * 4];
            for b in 0..2 {
                for i in 0..n {
                    for k in 0..4 {
                        ph[(b * n + i) * 4 + k] = h.data()[(b * n + perm[i]) * 4 + k];
                    }
                }
            }
            let run = |adj: Vec<f64>, hv: Vec<f64>| {
                let mut t = Tape::new();
                let p = s.bind(&mut t);
                let adj = t.constant(Tensor::new(vec![n, n], adj).unwrap());
                let h = t.constant(Tensor::new(vec![2, n, 4], hv).unwrap());
                let mut bn = BatchNormStats::new(4);
                let y = graph_conv(&mut t, &p, &gc, adj, h, &mut bn, BatchNormMode::Train { momentum: 0.1 }).unwrap();
                t.value(y).data().to_vec()
            };
            let base = run(a_norm.clone(), h.data().to_vec());
            let permuted = run(pa, ph);
            for b in 0..2 {
                for i in 0..n {
                    for k in 0..4 {
                        let x = permuted[(b * n + i) * 4 + k];
                        let y = base[(b * n + perm[i]) * 4 + k];
                        assert!((x - y).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn bilstm_shape_count_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::<f64>::new();
        let lstm = BiLstm::new(&mut s, &mut rng, 32, 32);
        assert_eq!(s.count(&lstm.ids()), 16_640);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let h = t.constant(random(&mut rng, &[2, 6, 32]));
        let y = bilstm_forward(&mut t, &p, &lstm, h).unwrap();
        assert_eq!(t.shape(y), &[2, 6, 64]);

        for id in lstm.ids() {
            let shape = s.get(id).shape().to_vec();
            *s.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let h = t.constant(random(&mut rng, &[2, 6, 32]));
        let y = bilstm_forward(&mut t, &p, &lstm, h).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        let wrong = t.constant(Tensor::zeros(&[2, 6, 31]));
        assert!(bilstm_forward(&mut t, &p, &lstm, wrong).is_err());
    }

    // Scalar reference LSTM, one direction.
    fn lstm_ref(xs: &[Vec<f64>], w: &[f64], b: &[f64], hid: usize) -> Vec<Vec<f64>> {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
        let mut out = Vec::new();
        for x in xs {
            let xh: Vec<f64> = x.iter().chain(&h).copied().collect();
            let pre: Vec<f64> = (0..4 * hid)
                .map(|j| b[j] + xh.iter().enumerate().map(|(k, v)| v * w[k * 4 * hid + j]).sum::<f64>())
                .collect();
            for u in 0..hid {
                let (i, f, g, o) = (sig(pre[u]), sig(pre[hid + u]), pre[2 * hid + u].tanh(), sig(pre[3 * hid + u]));
                c[u] = f * c[u] + i * g;
                h[u] = o * c[u].tanh();
            }
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn bilstm_matches_scalar_reference_in_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut s = ParamStore::<f64>::new();
        let lstm = BiLstm::new(&mut s, &mut rng, 3, 2);
        for id in [lstm.forward.b, lstm.backward.b] {
            *s.get_mut(id) = random(&mut rng, &[8]);
        }
        let n = 4;
        let hv = random(&mut rng, &[1, n, 3]);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let h = t.constant(hv.clone());
        let y = bilstm_forward(&mut t, &p, &lstm, h).unwrap();
        let y = t.value(y).data().to_vec();

        let xs: Vec<Vec<f64>> = (0..n).map(|i| hv.data()[i * 3..i * 3 + 3].to_vec()).collect();
        let fw = lstm_ref(&xs, s.get(lstm.forward.w).data(), s.get(lstm.forward.b).data(), 2);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut bw = lstm_ref(&rev, s.get(lstm.backward.w).data(), s.get(lstm.backward.b).data(), 2);
        bw.reverse();
        for i in 0..n {
            let expect: Vec<f64> = fw[i].iter().chain(&bw[i]).copied().collect();
            for (k, e) in expect.iter().enumerate() {
                assert!((y[i * 4 + k] - e).abs() < 1e-12);
            }
        }
    }

    fn attention(seed: u64, dim: usize) -> (ParamStore<f64>, AttentionPool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let a = AttentionPool::new(&mut s, &mut rng, dim);
        *s.get_mut(a.score_hidden.b) = random(&mut rng, &[dim]);
        *s.get_mut(a.score_out.b) = random(&mut rng, &[1]);
        (s, a)
    }

    #[test]
    fn attention_count_and_degenerate_cases() {
        let (s, a) = attention(1, 64);
        assert_eq!(s.count(&a.ids()), 4225);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let row: Vec<f64> = (0..64).map(|i| (i as f64 * 0.1).sin()).collect();
        let h = t.constant(Tensor::new(vec![1, 5, 64], row.repeat(5)).unwrap());
        let (pooled, alpha) = attention_pool(&mut t, &p, &a, h).unwrap();
        for &w in t.value(alpha).data() {
            assert!((w - 0.2).abs() < 1e-12);
        }
        for (x, e) in t.value(pooled).data().iter().zip(&row) {
            assert!((x - e).abs() < 1e-12);
        }
        let one = t.constant(Tensor::new(vec![1, 1, 64], row.clone()).unwrap());
        let (pooled, alpha) = attention_pool(&mut t, &p, &a, one).unwrap();
        assert_eq!(t.value(alpha).data(), &[1.0]);
        assert_eq!(t.value(pooled).data(), &row[..]);
    }

    #[test]
    fn attention_three_node_oracle() {
        let (s, a) = attention(9, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let hv = random(&mut rng, &[1, 3, 4]);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let h = t.constant(hv.clone());
        let (pooled, alpha) = attention_pool(&mut t, &p, &a, h).unwrap();

        let (w1, b1) = (s.get(a.score_hidden.w).data(), s.get(a.score_hidden.b).data());
        let (w2, b2) = (s.get(a.score_out.w).data(), s.get(a.score_out.b).data()[0]);
        let score = |x: &[f64]| {
            let mut acc = b2;
            for j in 0..4 {
                let u: f64 = b1[j] + (0..4).map(|k| x[k] * w1[k * 4 + j]).sum::<f64>();
                acc += w2[j] * u.max(0.0);
            }
            acc
        };
        let nodes: Vec<&[f64]> = (0..3).map(|i| &hv.data()[i * 4..i * 4 + 4]).collect();
        let e: Vec<f64> = nodes.iter().map(|x| score(x).exp()).collect();
        let z = e[0] + e[1] + e[2];
        for i in 0..3 {
            assert!((t.value(alpha).data()[i] - e[i] / z).abs() < 1e-12);
        }
        for k in 0..4 {
            let want = (e[0] * nodes[0][k] + e[1] * nodes[1][k] + e[2] * nodes[2][k]) / z;
            assert!((t.value(pooled).data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let (s, a) = attention(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let h = t.constant(random(&mut rng, &[7, 9, 6]).cast::<f64>());
        let (_, alpha) = attention_pool(&mut t, &p, &a, h).unwrap();
        for row in t.value(alpha).data().chunks(9) {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
