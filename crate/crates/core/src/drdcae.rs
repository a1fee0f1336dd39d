//! Residual-dense convolutional autoencoder over the node axis, with an
//! auxiliary classifier on the latent code.
//!
//! Tensors are laid out `[B, channels, N]`: the per-node features act as
//! convolution channels and the electrode axis as the spatial axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::params::{kaiming_normal, xavier_uniform, Bound, Group, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return invalid(format!(
                "loss weights must be non-negative, got lambda={} gamma={}",
                self.lambda, self.gamma
            ));
        }
        Ok(())
    }
}

/// Affine map stored as `w[in, out]`, `b[out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn xavier<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            group,
            xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out),
        );
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], p[self.b])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub growth: usize,
    pub kernel: usize,
    /// (kernel `[growth, cin_l, k]`, bias `[growth]`) per layer.
    pub layers: Vec<Affine>,
}

impl DenseBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        in_channels: usize,
        growth: usize,
        n_layers: usize,
        kernel: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let cin = in_channels + l * growth;
                let w = store.add(
                    format!("dense.{l}.kernel"),
                    Group::Ae,
                    kaiming_normal(rng, &[growth, cin, kernel], cin * kernel),
                );
                let b = store.add(format!("dense.{l}.bias"), Group::Ae, Tensor::zeros(&[growth]));
                Affine { w, b }
            })
            .collect();
        Self {
            in_channels,
            growth,
            kernel,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Affine::ids).collect()
    }
}

/// Each layer convolves the concatenation of the input and every earlier
/// layer's output, then appends its own `growth` channels.
pub fn dense_block_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, block: &DenseBlock, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] != block.in_channels {
        return shape_err(format!(
            "dense block expects [B, {}, N] input, got {s:?}",
            block.in_channels
        ));
    }
    let pad = block.kernel / 2;
    let mut features = x;
    for layer in &block.layers {
        let y = tape.conv1d(features, p[layer.w], p[layer.b], pad)?;
        let y = tape.relu(y);
        features = tape.concat(&[features, y], 1)?;
    }
    Ok(features)
}

/// 1x1 bottleneck convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub in_channels: usize,
    pub latent: usize,
    pub conv: Affine,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, in_channels: usize, latent: usize) -> Self {
        let w = store.add(
            "encoder.kernel",
            Group::Ae,
            kaiming_normal(rng, &[latent, in_channels, 1], in_channels),
        );
        let b = store.add("encoder.bias", Group::Ae, Tensor::zeros(&[latent]));
        Self {
            in_channels,
            latent,
            conv: Affine { w, b },
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.conv.ids()
    }
}

pub fn encode<T: Real>(tape: &mut Tape<T>, p: &Bound, enc: &Encoder, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] != enc.in_channels {
        return shape_err(format!(
            "encoder expects [B, {}, N] input, got {s:?}",
            enc.in_channels
        ));
    }
    let z = tape.conv1d(x, p[enc.conv.w], p[enc.conv.b], 0)?;
    Ok(tape.relu(z))
}

/// Transposed 1x1 convolution back to the feature channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoder {
    pub latent: usize,
    pub out_channels: usize,
    pub deconv: Affine,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, latent: usize, out_channels: usize) -> Self {
        let w = store.add(
            "decoder.kernel",
            Group::Ae,
            kaiming_normal(rng, &[latent, out_channels, 1], latent),
        );
        let b = store.add("decoder.bias", Group::Ae, Tensor::zeros(&[out_channels]));
        Self {
            latent,
            out_channels,
            deconv: Affine { w, b },
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.deconv.ids()
    }
}

pub fn decode<T: Real>(tape: &mut Tape<T>, p: &Bound, dec: &Decoder, z: Var) -> Result<Var> {
    let s = tape.shape(z);
    if s.len() != 3 || s[1] != dec.latent {
        return shape_err(format!("decoder expects [B, {}, N] latent, got {s:?}", dec.latent));
    }
    let y = tape.conv_transpose1d(z, p[dec.deconv.w], p[dec.deconv.b])?;
    Ok(tape.sigmoid(y))
}

/// Two-layer classifier `in -> hidden (ReLU) -> classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Affine,
    pub out: Affine,
}

impl Head {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        dims: (usize, usize, usize),
    ) -> Self {
        let (input, hidden, classes) = dims;
        Self {
            hidden: Affine::xavier(store, rng, &format!("{name}.hidden"), group, input, hidden),
            out: Affine::xavier(store, rng, &format!("{name}.out"), group, hidden, classes),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.hidden.ids(), self.out.ids()].concat()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, p, h)
    }
}

/// Mean over nodes of `z[B, L, N]`, then the head.
pub fn ae_classify<T: Real>(tape: &mut Tape<T>, p: &Bound, head: &Head, z: Var) -> Result<Var> {
    if tape.shape(z).len() != 3 {
        return shape_err(format!("ae head expects [B, L, N] latent, got {:?}", tape.shape(z)));
    }
    let pooled = tape.mean_axis(z, 2)?;
    head.forward(tape, p, pooled)
}

/// `mse(x, x_hat) + lambda * CE(logits, labels)`.
pub fn drdcae_loss<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    logits: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let rec = tape.mse(x_hat, x)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let ce = tape.scale(ce, T::c(w.lambda));
    tape.add(rec, ce)
}

/// Full autoencoder branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Drdcae {
    pub dense: DenseBlock,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Head,
}

/// Autoencoder outputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct AeOutput {
    /// `[B, L, N]`
    pub latent: Var,
    /// `[B, F, N]`, entries in (0, 1).
    pub reconstruction: Var,
    pub logits: Var,
}

impl Drdcae {
    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.dense.ids(),
            self.encoder.ids(),
            self.decoder.ids(),
            self.head.ids(),
        ]
        .concat()
    }

    /// `x` is `[B, F, N]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<AeOutput> {
        let d = dense_block_forward(tape, p, &self.dense, x)?;
        let latent = encode(tape, p, &self.encoder, d)?;
        let reconstruction = decode(tape, p, &self.decoder, latent)?;
        let logits = ae_classify(tape, p, &self.head, latent)?;
        Ok(AeOutput {
            latent,
            reconstruction,
            logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(classes: usize) -> (ParamStore<f64>, Drdcae) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let dense = DenseBlock::new(&mut s, &mut rng, 18, 16, 3, 3);
        let encoder = Encoder::new(&mut s, &mut rng, dense.out_channels(), 64);
        let decoder = Decoder::new(&mut s, &mut rng, 64, 18);
        let head = Head::new(&mut s, &mut rng, "ae_head", Group::Ae, (64, 64, classes));
        (
            s,
            Drdcae {
                dense,
                encoder,
                decoder,
                head,
            },
        )
    }

    #[test]
    fn parameter_counts() {
        let (s, m) = build(4);
        assert_eq!(s.count(&m.dense.ids()), 4944);
        assert_eq!(s.count(&m.encoder.ids()), 4288);
        assert_eq!(s.count(&m.decoder.ids()), 1170);
        assert_eq!(s.count(&m.head.hidden.ids()), 4160);
        assert_eq!(s.count(&m.head.out.ids()), 260);
        assert_eq!(s.count(&m.ids()), 14_822);
        assert_eq!(s.total(), 14_822);
    }

    #[test]
    fn channel_bookkeeping() {
        let (s, m) = build(4);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let x = t.constant(Tensor::full(&[2, 18, 22], 0.5));
        let d = dense_block_forward(&mut t, &p, &m.dense, x).unwrap();
        assert_eq!(t.shape(d), &[2, 66, 22]);
        let out = m.forward(&mut t, &p, x).unwrap();
        assert_eq!(t.shape(out.latent), &[2, 64, 22]);
        assert_eq!(t.shape(out.reconstruction), &[2, 18, 22]);
        assert_eq!(t.shape(out.logits), &[2, 4]);
        let wrong = t.constant(Tensor::zeros(&[2, 17, 22]));
        assert!(dense_block_forward(&mut t, &p, &m.dense, wrong).is_err());
        assert!(encode(&mut t, &p, &m.encoder, wrong).is_err());
        assert!(decode(&mut t, &p, &m.decoder, wrong).is_err());
    }

    #[test]
    fn zero_input_zero_bias_dense_block_is_zero() {
        let (s, m) = build(4);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let x = t.constant(Tensor::zeros(&[1, 18, 5]));
        let d = dense_block_forward(&mut t, &p, &m.dense, x).unwrap();
        assert!(t.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_encoder_and_half_decoder() {
        let (mut s, m) = build(4);
        *s.get_mut(m.encoder.conv.w) = Tensor::zeros(&[64, 66, 1]);
        *s.get_mut(m.encoder.conv.b) = Tensor::full(&[64], 0.7);
        *s.get_mut(m.decoder.deconv.w) = Tensor::zeros(&[64, 18, 1]);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let x = t.constant(Tensor::full(&[2, 66, 3], 1.3));
        let z = encode(&mut t, &p, &m.encoder, x).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v == 0.7));
        let y = decode(&mut t, &p, &m.decoder, z).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pooling_preserves_constant_rows() {
        let (s, m) = build(4);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let z = t.constant(Tensor::full(&[1, 64, 7], 0.25));
        let pooled = t.mean_axis(z, 2).unwrap();
        assert!(t.value(pooled).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let logits = ae_classify(&mut t, &p, &m.head, z).unwrap();
        assert_eq!(t.shape(logits), &[1, 4]);
    }

    #[test]
    fn decoder_range_is_open_unit_interval() {
        let (s, m) = build(4);
        let mut t = Tape::new();
        let p = s.bind(&mut t);
        let data: Vec<f64> = (0..2 * 64 * 4).map(|i| ((i * 17) % 23) as f64 - 11.0).collect();
        let z = t.constant(Tensor::new(vec![2, 64, 4], data).unwrap());
        let y = decode(&mut t, &p, &m.decoder, z).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn loss_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[2, 3, 2], 0.4));
        let uniform = t.constant(Tensor::zeros(&[2, 4]));
        let w = LossWeights::default();
        let l = drdcae_loss(&mut t, x, x, uniform, &[0, 3], &w).unwrap();
        assert!((t.value(l).item() - 0.3 * 4f64.ln()).abs() < 1e-12);

        let x_hat = t.constant(Tensor::full(&[2, 3, 2], 0.6));
        let skewed = t.constant(Tensor::new(vec![2, 4], vec![5.0, -1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 9.0]).unwrap());
        let zero_lambda = LossWeights { lambda: 0.0, gamma: 1.0 };
        let l = drdcae_loss(&mut t, x, x_hat, skewed, &[1, 2], &zero_lambda).unwrap();
        assert!((t.value(l).item() - 0.04).abs() < 1e-12);

        let l = drdcae_loss(&mut t, x, x_hat, uniform, &[1, 2], &w).unwrap();
        assert!((t.value(l).item() - (0.04 + 0.3 * 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nondecreasing_in_lambda() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[1, 2, 2], 0.2));
        let x_hat = t.constant(Tensor::full(&[1, 2, 2], 0.3));
        let logits = t.constant(Tensor::new(vec![1, 3], vec![0.2, -0.4, 1.0]).unwrap());
        let mut prev = f64::NEG_INFINITY;
        for k in 0..10 {
            let w = LossWeights { lambda: k as f64 * 0.25, gamma: 1.0 };
            let l = drdcae_loss(&mut t, x, x_hat, logits, &[1], &w).unwrap();
            let v = t.value(l).item();
            assert!(v >= prev);
            prev = v;
        }
        assert!(LossWeights { lambda: -1.0, gamma: 1.0 }.validate().is_err());
    }
}
