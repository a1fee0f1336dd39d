//! Finite-difference checks of every model layer and of the full training
//! loss on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::drdcae::{ae_classify, decode, dense_block_forward, encode, LossWeights};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::params::Bound;
use crate::stgnn::{attention_pool, bilstm_forward, graph_conv, normalize_adjacency, Phase};
use crate::tensor::{finite_diff_gradcheck, BatchNormMode, BatchNormStats, OpCheck, Tape, Tensor, Var};

const BATCH: usize = 2;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

// Scalar readout `sum(y * w)` with a fixed random `w`.
fn readout(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone().reshaped(tape.shape(y))?);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

struct Fixture {
    model: Model<f64>,
    params: Vec<Tensor<f64>>,
    rng: ChaCha8Rng,
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let config = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.n_channels;
        let adj = random(&mut rng, &[c, c], -1.0, 1.0);
        let mut model = Model::<f64>::init(config, adj.data(), seed)?;
        // Nonzero biases so every gradient path is exercised.
        for e in &mut model.store.entries {
            if e.name.ends_with(".b") || e.name.ends_with("bias") || e.name.ends_with("beta") {
                e.value = random(&mut rng, e.value.shape(), -0.2, 0.2);
            }
        }
        let params = model.store.entries.iter().map(|e| e.value.clone()).collect();
        Ok(Self { model, params, rng })
    }

    fn with_input(&self, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut all = self.params.clone();
        all.push(x);
        all
    }

    fn split(&self, v: &[Var]) -> (Bound, Var) {
        let n = self.params.len();
        (Bound(v[..n].to_vec()), v[n])
    }
}

/// One row per layer plus the composite loss, each with the given
/// threshold on the maximum relative error.
pub fn run_layer_suite(seed: u64, h: f64, threshold: f64) -> Result<Vec<OpCheck>> {
    let mut fx = Fixture::new(seed)?;
    let cfg = fx.model.config.clone();
    let (c, f) = (cfg.n_channels, cfg.n_features);
    let ae = fx.model.ae.clone().expect("tiny model has an autoencoder");
    let st = fx.model.stgnn().cloned().expect("tiny model has a graph branch");
    let mut rows = Vec::new();
    let mut push = |name: &str, o: crate::tensor::GradcheckOutcome| {
        rows.push(OpCheck::from_outcome(name, &o, threshold));
    };

    let x = random(&mut fx.rng, &[BATCH, f, c], 0.05, 0.95);
    let dense_out = ae.dense.out_channels();
    let w = random(&mut fx.rng, &[BATCH * dense_out * c], -1.0, 1.0);
    push(
        "dense_block",
        finite_diff_gradcheck(&fx.with_input(x.clone()), h, |t, v| {
            let (p, x) = fx.split(v);
            let y = dense_block_forward(t, &p, &ae.dense, x)?;
            readout(t, y, &w)
        })?,
    );

    let x = random(&mut fx.rng, &[BATCH, dense_out, c], -1.0, 1.0);
    let w = random(&mut fx.rng, &[BATCH * cfg.latent * c], -1.0, 1.0);
    push(
        "encoder",
        finite_diff_gradcheck(&fx.with_input(x), h, |t, v| {
            let (p, x) = fx.split(v);
            let y = encode(t, &p, &ae.encoder, x)?;
            readout(t, y, &w)
        })?,
    );

    let z = random(&mut fx.rng, &[BATCH, cfg.latent, c], 0.0, 1.0);
    let w = random(&mut fx.rng, &[BATCH * f * c], -1.0, 1.0);
    push(
        "decoder",
        finite_diff_gradcheck(&fx.with_input(z.clone()), h, |t, v| {
            let (p, z) = fx.split(v);
            let y = decode(t, &p, &ae.decoder, z)?;
            readout(t, y, &w)
        })?,
    );

    let labels: Vec<usize> = (0..BATCH).map(|i| i % cfg.n_classes).collect();
    push(
        "ae_head",
        finite_diff_gradcheck(&fx.with_input(z), h, |t, v| {
            let (p, z) = fx.split(v);
            let y = ae_classify(t, &p, &ae.head, z)?;
            t.cross_entropy(y, &labels)
        })?,
    );

    let adj_id = st.adjacency.a;
    let w = random(&mut fx.rng, &[c * c], -1.0, 1.0);
    push(
        "adjacency_softmax",
        finite_diff_gradcheck(&fx.params, h, |t, v| {
            let a = normalize_adjacency(t, v[adj_id.0])?;
            readout(t, a, &w)
        })?,
    );

    // Under batch statistics the pre-normalization bias has an identically
    // zero gradient, so the layer rows use running statistics instead.
    let bn0 = fx.model.bn.clone();
    for (name, layer, din) in [("gc1", st.gc1, f), ("gc2", st.gc2, cfg.graph_hidden)] {
        let hx = random(&mut fx.rng, &[BATCH, c, din], -1.0, 1.0);
        let stats = BatchNormStats {
            mean: random(&mut fx.rng, &[layer.dout], -0.5, 0.5).into_data(),
            var: random(&mut fx.rng, &[layer.dout], 0.5, 2.0).into_data(),
        };
        let w = random(&mut fx.rng, &[BATCH * c * layer.dout], -1.0, 1.0);
        push(
            name,
            finite_diff_gradcheck(&fx.with_input(hx), h, |t, v| {
                let (p, hx) = fx.split(v);
                let a = normalize_adjacency(t, p[adj_id])?;
                let mut stats = stats.clone();
                let y = graph_conv(t, &p, &layer, a, hx, &mut stats, BatchNormMode::Eval)?;
                readout(t, y, &w)
            })?,
        );
    }

    let hx = random(&mut fx.rng, &[BATCH, c, cfg.graph_hidden], -1.0, 1.0);
    let w = random(&mut fx.rng, &[BATCH * c * 2 * cfg.lstm_hidden], -1.0, 1.0);
    push(
        "bilstm",
        finite_diff_gradcheck(&fx.with_input(hx), h, |t, v| {
            let (p, hx) = fx.split(v);
            let y = bilstm_forward(t, &p, &st.lstm, hx)?;
            readout(t, y, &w)
        })?,
    );

    let hx = random(&mut fx.rng, &[BATCH, c, 2 * cfg.lstm_hidden], -1.0, 1.0);
    let w = random(&mut fx.rng, &[BATCH * 2 * cfg.lstm_hidden], -1.0, 1.0);
    push(
        "attention_pool",
        finite_diff_gradcheck(&fx.with_input(hx), h, |t, v| {
            let (p, hx) = fx.split(v);
            let (y, _) = attention_pool(t, &p, &st.attention, hx)?;
            readout(t, y, &w)
        })?,
    );

    let xs = random(&mut fx.rng, &[BATCH, c, f], 0.05, 0.95);
    push(
        "stgnn_branch",
        finite_diff_gradcheck(&fx.with_input(xs.clone()), h, |t, v| {
            let (p, xs) = fx.split(v);
            let mut bn = bn0.clone();
            let out = st.forward(t, &p, xs, &mut bn, &mut Phase::Train(None))?;
            t.cross_entropy(out.logits, &labels)
        })?,
    );

    let model = &fx.model;
    push(
        "composite_loss",
        finite_diff_gradcheck(&fx.with_input(xs), h, |t, v| {
            let (p, xs) = fx.split(v);
            let mut bn = bn0.clone();
            let out = model.forward(t, &p, xs, &mut bn, &mut Phase::Train(None))?;
            model.loss(t, &out, &labels, &LossWeights::default())
        })?,
    );
    Ok(rows)
}
