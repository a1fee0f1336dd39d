//! The joint model: autoencoder branch plus graph branch, and the ablation
//! variants built from them.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drdcae::{Affine, Decoder, DenseBlock, Drdcae, Encoder, Head, LossWeights};
use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{Bound, Group, ParamId, ParamStore};
use crate::stgnn::{Adjacency, AttentionPool, BiLstm, GraphConv, Phase, Stgnn};
use crate::tensor::{BatchNormStats, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Full model.
    A,
    /// Graph branch replaced by a two-layer fully connected network.
    B,
    /// No autoencoder; scaled features go straight to the graph branch.
    C,
    /// Residual connections removed from the graph layers.
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn description(self) -> &'static str {
        match self {
            Variant::A => "full model",
            Variant::B => "graph branch replaced by fully connected layers",
            Variant::C => "autoencoder removed",
            Variant::D => "no residual connections in graph layers",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// What the graph branch consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StgnnInput {
    Features,
    Latent,
}

impl FromStr for StgnnInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(StgnnInput::Features),
            "latent" => Ok(StgnnInput::Latent),
            other => Err(Error::Config(format!(
                "stgnn_input must be `features` or `latent`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for StgnnInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StgnnInput::Features => "features",
            StgnnInput::Latent => "latent",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub growth: usize,
    pub dense_layers: usize,
    pub kernel: usize,
    pub latent: usize,
    pub ae_hidden: usize,
    pub graph_hidden: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub stgnn_input: StgnnInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_channels: 22,
            n_features: 18,
            n_classes: 4,
            growth: 16,
            dense_layers: 3,
            kernel: 3,
            latent: 64,
            ae_hidden: 64,
            graph_hidden: 32,
            lstm_hidden: 32,
            head_hidden: 64,
            fc_hidden: 64,
            dropout: 0.3,
            variant: Variant::A,
            stgnn_input: StgnnInput::Features,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_channels: 4,
            n_features: 5,
            n_classes: 3,
            growth: 3,
            dense_layers: 3,
            kernel: 3,
            latent: 6,
            ae_hidden: 5,
            graph_hidden: 4,
            lstm_hidden: 3,
            head_hidden: 5,
            fc_hidden: 5,
            dropout: 0.3,
            variant: Variant::A,
            stgnn_input: StgnnInput::Features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 2 {
            return invalid(format!("need at least 2 channels, got {}", self.n_channels));
        }
        if self.n_classes < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.kernel % 2 == 0 {
            return invalid(format!("dense kernel must be odd, got {}", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let dims = [
            self.n_features,
            self.growth,
            self.latent,
            self.ae_hidden,
            self.graph_hidden,
            self.lstm_hidden,
            self.head_hidden,
            self.fc_hidden,
        ];
        if dims.contains(&0) {
            return invalid("model dimensions must be positive");
        }
        Ok(())
    }

    pub fn has_autoencoder(&self) -> bool {
        self.variant != Variant::C
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcBranch {
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Classifier {
    Graph(Stgnn),
    Dense(FcBranch),
}

/// Per-layer trainable parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub layers: Vec<(String, usize)>,
    pub autoencoder: usize,
    pub classifier: usize,
    pub adjacency: usize,
    /// Autoencoder plus classifier, adjacency excluded.
    pub total: usize,
    pub total_with_adjacency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub ae: Option<Drdcae>,
    pub classifier: Classifier,
    pub bn: [BatchNormStats<T>; 2],
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[B, F, N]` reconstruction target.
    pub target: Var,
    pub reconstruction: Option<Var>,
    pub ae_logits: Option<Var>,
    pub logits: Var,
    pub alpha: Option<Var>,
    pub adjacency: Option<Var>,
}

/// RNG stream of each parameter family, so variants sharing a branch
/// initialize it identically.
const STREAM_AE: u64 = 1;
const STREAM_GRAPH: u64 = 2;
const STREAM_FC: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<T: Real> Model<T> {
    /// Kaiming-normal convolution kernels, Xavier-uniform dense weights,
    /// zero biases, unit batch-norm scale, and `adjacency` (row-major
    /// `C x C`) as the initial graph.
    pub fn init(config: ModelConfig, adjacency: &[f64], seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.n_channels;
        if adjacency.len() != c * c {
            return shape_err(format!(
                "initial adjacency has {} entries, expected {c} x {c}",
                adjacency.len()
            ));
        }
        let mut store = ParamStore::new();
        let ae = config.has_autoencoder().then(|| {
            let mut rng = stream(seed, STREAM_AE);
            let dense = DenseBlock::new(&mut store, &mut rng, config.n_features, config.growth, config.dense_layers, config.kernel);
            let encoder = Encoder::new(&mut store, &mut rng, dense.out_channels(), config.latent);
            let decoder = Decoder::new(&mut store, &mut rng, config.latent, config.n_features);
            let head = Head::new(
                &mut store,
                &mut rng,
                "ae_head",
                Group::Ae,
                (config.latent, config.ae_hidden, config.n_classes),
            );
            Drdcae {
                dense,
                encoder,
                decoder,
                head,
            }
        });

        let classifier = if config.variant == Variant::B {
            let mut rng = stream(seed, STREAM_FC);
            let head = Head::new(
                &mut store,
                &mut rng,
                "fc",
                Group::St,
                (c * config.n_features, config.fc_hidden, config.n_classes),
            );
            Classifier::Dense(FcBranch { head })
        } else {
            let mut rng = stream(seed, STREAM_GRAPH);
            let adjacency = Adjacency::new(&mut store, Tensor::from_f64(&[c, c], adjacency)?)?;
            let latent_input = config.stgnn_input == StgnnInput::Latent && config.has_autoencoder();
            let input_proj = latent_input.then(|| {
                Affine::xavier(&mut store, &mut rng, "input_proj", Group::St, config.latent, config.n_features)
            });
            let mut gc1 = GraphConv::new(&mut store, &mut rng, "gc1", config.n_features, config.graph_hidden);
            let mut gc2 = GraphConv::new(&mut store, &mut rng, "gc2", config.graph_hidden, config.graph_hidden);
            if config.variant == Variant::D {
                gc1.residual = false;
                gc2.residual = false;
            }
            let lstm = BiLstm::new(&mut store, &mut rng, config.graph_hidden, config.lstm_hidden);
            let attention = AttentionPool::new(&mut store, &mut rng, 2 * config.lstm_hidden);
            let head = Head::new(
                &mut store,
                &mut rng,
                "st_head",
                Group::St,
                (2 * config.lstm_hidden, config.head_hidden, config.n_classes),
            );
            Classifier::Graph(Stgnn {
                adjacency,
                input_proj,
                gc1,
                gc2,
                lstm,
                attention,
                head,
                dropout: config.dropout,
            })
        };
        let bn = [
            BatchNormStats::new(config.graph_hidden),
            BatchNormStats::new(config.graph_hidden),
        ];
        Ok(Self {
            config,
            store,
            ae,
            classifier,
            bn,
        })
    }

    pub fn stgnn(&self) -> Option<&Stgnn> {
        match &self.classifier {
            Classifier::Graph(s) => Some(s),
            Classifier::Dense(_) => None,
        }
    }

    pub fn adjacency_id(&self) -> Option<ParamId> {
        self.stgnn().map(|s| s.adjacency.a)
    }

    /// Forward pass on `x[B, N, F]`. Batch-norm buffers are read from, and
    /// in training updated in, `bn`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        bn: &mut [BatchNormStats<T>; 2],
        phase: &mut Phase<'_>,
    ) -> Result<Forward> {
        let s = tape.shape(x).to_vec();
        let (c, f) = (self.config.n_channels, self.config.n_features);
        if s.len() != 3 || s[1] != c || s[2] != f {
            return shape_err(format!("model expects [B, {c}, {f}] input, got {s:?}"));
        }
        let b = s[0];
        let target = tape.transpose_last2(x)?;
        let ae_out = match &self.ae {
            Some(ae) => Some(ae.forward(tape, p, target)?),
            None => None,
        };
        let (logits, alpha, adjacency) = match &self.classifier {
            Classifier::Graph(st) => {
                let input = match (&st.input_proj, ae_out) {
                    (Some(_), Some(out)) => tape.transpose_last2(out.latent)?,
                    _ => x,
                };
                let out = st.forward(tape, p, input, bn, phase)?;
                (out.logits, Some(out.alpha), Some(out.adjacency))
            }
            Classifier::Dense(fc) => {
                let flat = tape.reshape(x, &[b, c * f])?;
                (fc.head.forward(tape, p, flat)?, None, None)
            }
        };
        Ok(Forward {
            target,
            reconstruction: ae_out.map(|o| o.reconstruction),
            ae_logits: ae_out.map(|o| o.logits),
            logits,
            alpha,
            adjacency,
        })
    }

    /// `mse + lambda * CE(ae) + gamma * CE(graph)`. Without an autoencoder
    /// only the last term remains.
    pub fn loss(&self, tape: &mut Tape<T>, out: &Forward, labels: &[usize], w: &LossWeights) -> Result<Var> {
        w.validate()?;
        let st = tape.cross_entropy(out.logits, labels)?;
        let mut total = tape.scale(st, T::c(w.gamma));
        if let (Some(rec), Some(ae_logits)) = (out.reconstruction, out.ae_logits) {
            let mse = tape.mse(rec, out.target)?;
            let ce = tape.cross_entropy(ae_logits, labels)?;
            let ce = tape.scale(ce, T::c(w.lambda));
            let ae = tape.add(mse, ce)?;
            total = tape.add(ae, total)?;
        }
        Ok(total)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let s = &self.store;
        let mut layers = Vec::new();
        if let Some(ae) = &self.ae {
            layers.push(("dense_block".into(), s.count(&ae.dense.ids())));
            layers.push(("encoder".into(), s.count(&ae.encoder.ids())));
            layers.push(("decoder".into(), s.count(&ae.decoder.ids())));
            layers.push(("ae_head_hidden".into(), s.count(&ae.head.hidden.ids())));
            layers.push(("ae_head_out".into(), s.count(&ae.head.out.ids())));
        }
        let adjacency = match &self.classifier {
            Classifier::Graph(st) => {
                if let Some(p) = &st.input_proj {
                    layers.push(("input_proj".into(), s.count(&p.ids())));
                }
                layers.push(("gc1".into(), s.count(&st.gc1.ids())));
                layers.push(("gc2".into(), s.count(&st.gc2.ids())));
                layers.push(("bilstm".into(), s.count(&st.lstm.ids())));
                layers.push(("attention".into(), s.count(&st.attention.ids())));
                layers.push(("st_head_hidden".into(), s.count(&st.head.hidden.ids())));
                layers.push(("st_head_out".into(), s.count(&st.head.out.ids())));
                s.count(&[st.adjacency.a])
            }
            Classifier::Dense(fc) => {
                layers.push(("fc_hidden".into(), s.count(&fc.head.hidden.ids())));
                layers.push(("fc_out".into(), s.count(&fc.head.out.ids())));
                0
            }
        };
        let autoencoder = self.ae.as_ref().map_or(0, |ae| s.count(&ae.ids()));
        let classifier = match &self.classifier {
            Classifier::Graph(st) => s.count(&st.ids()),
            Classifier::Dense(fc) => s.count(&fc.head.ids()),
        };
        ParamCounts {
            layers,
            autoencoder,
            classifier,
            adjacency,
            total: autoencoder + classifier,
            total_with_adjacency: s.total(),
        }
    }

    /// Current normalized adjacency, row-major.
    pub fn normalized_adjacency(&self) -> Option<Vec<f64>> {
        let id = self.adjacency_id()?;
        crate::stgnn::normalized_adjacency_values(self.store.get(id)).ok()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let bn = |s: &BatchNormStats<T>| BatchNormStats {
            mean: s.mean.iter().map(|v| U::c(v.f64())).collect(),
            var: s.var.iter().map(|v| U::c(v.f64())).collect(),
        };
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            ae: self.ae.clone(),
            classifier: self.classifier.clone(),
            bn: [bn(&self.bn[0]), bn(&self.bn[1])],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_adj(c: usize) -> Vec<f64> {
        vec![0.0; c * c]
    }

    #[test]
    fn default_counts_match_layer_table() {
        let m = Model::<f32>::init(ModelConfig::default(), &uniform_adj(22), 42).unwrap();
        let counts = m.param_counts();
        let get = |n: &str| counts.layers.iter().find(|l| l.0 == n).unwrap().1;
        assert_eq!(get("dense_block"), 4944);
        assert_eq!(get("encoder"), 4288);
        assert_eq!(get("decoder"), 1170);
        assert_eq!(get("ae_head_hidden"), 4160);
        assert_eq!(get("ae_head_out"), 260);
        assert_eq!(get("gc1"), 672);
        assert_eq!(get("gc2"), 1120);
        assert_eq!(get("bilstm"), 16_640);
        assert_eq!(get("attention"), 4225);
        assert_eq!(get("st_head_hidden"), 4160);
        assert_eq!(get("st_head_out"), 260);
        assert_eq!(counts.autoencoder, 14_822);
        assert_eq!(counts.classifier, 27_077);
        assert_eq!(counts.total, 41_899);
        assert_eq!(counts.adjacency, 484);
        assert_eq!(counts.total_with_adjacency, 41_899 + 484);
        assert_eq!(m.store.total(), counts.total_with_adjacency);
    }

    #[test]
    fn variants_share_branch_initialization() {
        let adj = uniform_adj(22);
        let cfg = |variant| ModelConfig {
            variant,
            ..ModelConfig::default()
        };
        let a = Model::<f32>::init(cfg(Variant::A), &adj, 7).unwrap();
        let c = Model::<f32>::init(cfg(Variant::C), &adj, 7).unwrap();
        let d = Model::<f32>::init(cfg(Variant::D), &adj, 7).unwrap();
        let b = Model::<f32>::init(cfg(Variant::B), &adj, 7).unwrap();
        assert!(c.ae.is_none());
        let st = |m: &Model<f32>| {
            m.store
                .entries
                .iter()
                .filter(|e| e.group == Group::St)
                .map(|e| e.value.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(st(&a), st(&c));
        assert_eq!(a.store, d.store);
        assert_eq!(a.param_counts().total, d.param_counts().total);
        assert!(!d.stgnn().unwrap().gc2.residual && a.stgnn().unwrap().gc2.residual);
        assert_eq!(b.param_counts().classifier, 22 * 18 * 64 + 64 + 64 * 4 + 4);
        let ae = |m: &Model<f32>| {
            m.store
                .entries
                .iter()
                .filter(|e| e.group == Group::Ae)
                .map(|e| e.value.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ae(&a), ae(&b));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let adj: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let cfg = ModelConfig::tiny();
        let a = Model::<f64>::init(cfg.clone(), &adj, 5).unwrap();
        let b = Model::<f64>::init(cfg.clone(), &adj, 5).unwrap();
        assert_eq!(a, b);
        let c = Model::<f64>::init(cfg, &adj, 6).unwrap();
        assert_ne!(a.store, c.store);
        for e in &a.store.entries {
            if e.name.ends_with(".b") || e.name.ends_with("bias") || e.name.ends_with("beta") {
                assert!(e.value.data().iter().all(|&v| v == 0.0), "{}", e.name);
            }
            if e.name.ends_with("gamma") {
                assert!(e.value.data().iter().all(|&v| v == 1.0), "{}", e.name);
            }
        }
        let id = a.adjacency_id().unwrap();
        assert_eq!(a.store.get(id).data(), &adj[..]);
    }

    #[test]
    fn forward_shapes_for_every_variant() {
        for variant in Variant::ALL {
            for stgnn_input in [StgnnInput::Features, StgnnInput::Latent] {
                let cfg = ModelConfig {
                    variant,
                    stgnn_input,
                    ..ModelConfig::default()
                };
                let m = Model::<f32>::init(cfg, &uniform_adj(22), 1).unwrap();
                let mut tape = Tape::new();
                let p = m.store.bind(&mut tape);
                let x = tape.constant(Tensor::full(&[3, 22, 18], 0.5));
                let mut bn = m.bn.clone();
                let out = m.forward(&mut tape, &p, x, &mut bn, &mut Phase::Eval).unwrap();
                assert_eq!(tape.shape(out.logits), &[3, 4]);
                assert_eq!(out.reconstruction.is_some(), variant != Variant::C);
                assert_eq!(out.alpha.is_some(), variant != Variant::B);
                let l = m.loss(&mut tape, &out, &[0, 1, 2], &LossWeights::default()).unwrap();
                assert!(tape.value(l).item().is_finite());
            }
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let m = Model::<f32>::init(ModelConfig::default(), &uniform_adj(22), 3).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let p = m.store.bind(&mut tape);
            let data: Vec<f32> = (0..2 * 22 * 18).map(|i| ((i * 31) % 97) as f32 / 97.0).collect();
            let x = tape.constant(Tensor::new(vec![2, 22, 18], data).unwrap());
            let mut bn = m.bn.clone();
            let out = m.forward(&mut tape, &p, x, &mut bn, &mut Phase::Eval).unwrap();
            assert_eq!(bn, m.bn);
            tape.value(out.logits).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn uniform_heads_give_closed_form_loss() {
        let m = Model::<f64>::init(ModelConfig::tiny(), &uniform_adj(4), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5, 4], 0.3));
        let zero = tape.constant(Tensor::zeros(&[2, 4]));
        let out = Forward {
            target: x,
            reconstruction: Some(x),
            ae_logits: Some(zero),
            logits: zero,
            alpha: None,
            adjacency: None,
        };
        let l = m.loss(&mut tape, &out, &[0, 3], &LossWeights::default()).unwrap();
        assert!((tape.value(l).item() - 1.3 * 4f64.ln()).abs() < 1e-12);
        assert!((1.3 * 4f64.ln() - 1.8021).abs() < 1e-4);

        let none = LossWeights { lambda: 0.0, gamma: 0.0 };
        let rec = tape.constant(Tensor::full(&[2, 5, 4], 0.5));
        let out = Forward {
            reconstruction: Some(rec),
            ..out
        };
        let l = m.loss(&mut tape, &out, &[0, 3], &none).unwrap();
        assert!((tape.value(l).item() - 0.04).abs() < 1e-12);

        let skew = tape.constant(Tensor::new(vec![2, 4], vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.5, 0.0, 3.0]).unwrap());
        let out = Forward { logits: skew, ..out };
        let at = |g: f64, tape: &mut Tape<f64>| {
            let l = m.loss(tape, &out, &[0, 3], &LossWeights { lambda: 0.0, gamma: g }).unwrap();
            tape.value(l).item()
        };
        let (l0, l1, l2) = (at(0.0, &mut tape), at(1.0, &mut tape), at(2.0, &mut tape));
        assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-12);
        let ce = tape.cross_entropy(skew, &[0, 3]).unwrap();
        assert!(((l1 - l0) - tape.value(ce).item()).abs() < 1e-12);
    }
}
