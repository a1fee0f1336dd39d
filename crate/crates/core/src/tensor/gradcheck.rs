use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNormMode, BatchNormStats, OpKind, Real, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Central-difference step used by the reports.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error in double precision.
pub const F64_THRESHOLD: f64 = 1e-4;
/// Pass threshold in single precision.
pub const F32_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// One row of a gradient-check report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub checked: usize,
    pub passed: bool,
}

impl OpCheck {
    pub fn from_outcome(name: impl Into<String>, outcome: &GradcheckOutcome, threshold: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_error: outcome.max_rel_error,
            threshold,
            checked: outcome.checked,
            passed: outcome.max_rel_error < threshold,
        }
    }
}

fn evaluate<T: Real, F>(params: &[Tensor<T>], f: &F, requires_grad: bool) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), requires_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.is_stochastic() {
        return Err(Error::NonDeterministic(
            "a stochastic operation was recorded; disable dropout before checking".into(),
        ));
    }
    if !tape.value(out).is_scalar() {
        return invalid(format!(
            "gradcheck function must return a scalar, got shape {:?}",
            tape.shape(out)
        ));
    }
    Ok((tape, vars, out))
}

/// Central differences `(f(p+h) - f(p-h)) / 2h` for every parameter entry.
pub fn numeric_gradient<T: Real, F>(params: &[Tensor<T>], h: f64, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {h}"));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..work.len() {
        let mut grad = Vec::with_capacity(work[pi].len());
        for ei in 0..work[pi].len() {
            let orig = work[pi].data()[ei];
            // Divide by the step actually representable in T.
            let up = T::c(orig.f64() + h);
            let down = T::c(orig.f64() - h);
            work[pi].data_mut()[ei] = up;
            let (tape, _, y) = evaluate(&work, &f, false)?;
            let plus = tape.value(y).item().f64();
            work[pi].data_mut()[ei] = down;
            let (tape, _, y) = evaluate(&work, &f, false)?;
            let minus = tape.value(y).item().f64();
            work[pi].data_mut()[ei] = orig;
            grad.push((plus - minus) / (up.f64() - down.f64()));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares backward-pass gradients of `f` against central differences and
/// returns the maximum of `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_gradcheck<T: Real, F>(params: &[Tensor<T>], h: f64, f: F) -> Result<GradcheckOutcome>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(params, &f, true)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<T>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    drop(tape);
    let numeric = numeric_gradient(params, h, &f)?;
    let mut outcome = GradcheckOutcome {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (ei, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let av = av.f64();
            let rel = (av - nv).abs() / (av.abs() + nv.abs()).max(1e-8);
            outcome.checked += 1;
            if rel > outcome.max_rel_error || rel.is_nan() {
                outcome.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                outcome.worst = (pi, ei);
            }
        }
    }
    Ok(outcome)
}

fn random<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

// Random values bounded away from zero, for kinked operations.
fn random_off_zero<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            T::c(if rng.random::<bool>() { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

// Projects a tensor output onto a fixed random direction so every output
// entry contributes to the scalar.
fn project<T: Real>(tape: &mut Tape<T>, y: Var, weights: &Tensor<T>) -> Result<Var> {
    let w = tape.constant(weights.clone().reshaped(tape.shape(y))?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_op<T: Real>(kind: OpKind, rng: &mut ChaCha8Rng, h: f64) -> Result<GradcheckOutcome> {
    macro_rules! unary {
        ($shape:expr => $out:expr, $gen:ident, |$t:ident, $x:ident| $body:expr) => {{
            let x = $gen::<T>(rng, &$shape);
            let w = random::<T>(rng, &$out);
            finite_diff_gradcheck(&[x], h, |$t: &mut Tape<T>, v: &[Var]| {
                let $x = v[0];
                let y = $body;
                project($t, y, &w)
            })
        }};
    }
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let a = random::<T>(rng, &[2, 3]);
            let b = random::<T>(rng, &[2, 3]);
            let w = random::<T>(rng, &[2, 3]);
            finite_diff_gradcheck(&[a, b], h, |t: &mut Tape<T>, v: &[Var]| {
                let y = match kind {
                    OpKind::Add => t.add(v[0], v[1])?,
                    OpKind::Sub => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, y, &w)
            })
        }
        OpKind::Scale => unary!([2, 3] => [2, 3], random, |t, x| t.scale(x, T::c(1.7))),
        OpKind::AddBias => {
            let x = random::<T>(rng, &[3, 4]);
            let b = random::<T>(rng, &[4]);
            let w = random::<T>(rng, &[3, 4]);
            finite_diff_gradcheck(&[x, b], h, |t: &mut Tape<T>, v: &[Var]| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y, &w)
            })
        }
        OpKind::MatMul => {
            let a = random::<T>(rng, &[3, 4]);
            let b = random::<T>(rng, &[4, 2]);
            let w = random::<T>(rng, &[3, 2]);
            finite_diff_gradcheck(&[a, b], h, |t: &mut Tape<T>, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, &w)
            })
        }
        OpKind::MixNodes => {
            let a = random::<T>(rng, &[3, 3]);
            let hx = random::<T>(rng, &[2, 3, 4]);
            let w = random::<T>(rng, &[2, 3, 4]);
            finite_diff_gradcheck(&[a, hx], h, |t: &mut Tape<T>, v: &[Var]| {
                let y = t.mix_nodes(v[0], v[1])?;
                project(t, y, &w)
            })
        }
        OpKind::PoolNodes => {
            let a = random::<T>(rng, &[2, 3]);
            let hx = random::<T>(rng, &[2, 3, 4]);
            let w = random::<T>(rng, &[2, 4]);
            finite_diff_gradcheck(&[a, hx], h, |t: &mut Tape<T>, v: &[Var]| {
                let y = t.pool_nodes(v[0], v[1])?;
                project(t, y, &w)
            })
        }
        OpKind::Relu => unary!([3, 4] => [3, 4], random_off_zero, |t, x| t.relu(x)),
        OpKind::Sigmoid => unary!([3, 4] => [3, 4], random, |t, x| t.sigmoid(x)),
        OpKind::Tanh => unary!([3, 4] => [3, 4], random, |t, x| t.tanh(x)),
        OpKind::Conv1d => {
            let x = random::<T>(rng, &[2, 3, 7]);
            let k = random::<T>(rng, &[2, 3, 3]);
            let b = random::<T>(rng, &[2]);
            let w = random::<T>(rng, &[2, 2, 7]);
            finite_diff_gradcheck(&[x, k, b], h, |t: &mut Tape<T>, v: &[Var]| {
                let y = t.conv1d(v[0], v[1], v[2], 1)?;
                project(t, y, &w)
            })
        }
        OpKind::ConvTranspose1d => {
            let z = random::<T>(rng, &[2, 3, 5]);
            let k = random::<T>(rng, &[3, 2, 3]);
            let b = random::<T>(rng, &[2]);
            let w = random::<T>(rng, &[2, 2, 7]);
            finite_diff_gradcheck(&[z, k, b], h, |t: &mut Tape<T>, v: &[Var]| {
                let y = t.conv_transpose1d(v[0], v[1], v[2])?;
                project(t, y, &w)
            })
        }
        OpKind::MaskedSoftmax => {
            let mut mask = Tensor::full(&[4, 4], T::one());
            for i in 0..4 {
                mask.data_mut()[i * 4 + i] = T::zero();
            }
            unary!([4, 4] => [4, 4], random, |t, x| t.masked_softmax(x, &mask)?)
        }
        OpKind::BatchNorm1d => {
            let x = random::<T>(rng, &[5, 3]);
            let g = random::<T>(rng, &[3]);
            let b = random::<T>(rng, &[3]);
            let w = random::<T>(rng, &[5, 3]);
            let mut worst: Option<GradcheckOutcome> = None;
            for mode in [BatchNormMode::Train { momentum: 0.1 }, BatchNormMode::Eval] {
                let mut base = BatchNormStats::new(3);
                base.mean = vec![T::c(0.2), T::c(-0.1), T::c(0.05)];
                base.var = vec![T::c(0.8), T::c(1.3), T::c(0.5)];
                let o = finite_diff_gradcheck(&[x.clone(), g.clone(), b.clone()], h, |t: &mut Tape<T>, v: &[Var]| {
                    let mut stats = base.clone();
                    let y = t.batchnorm1d(v[0], v[1], v[2], &mut stats, mode, 1e-5)?;
                    project(t, y, &w)
                })?;
                if worst.as_ref().map_or(true, |w| o.max_rel_error > w.max_rel_error) {
                    worst = Some(o);
                }
            }
            Ok(worst.expect("two modes checked"))
        }
        OpKind::Dropout => {
            let mask: Vec<T> = (0..12)
                .map(|i| if i % 3 == 0 { T::zero() } else { T::c(1.0 / 0.7) })
                .collect();
            unary!([3, 4] => [3, 4], random, |t, x| t.dropout_with_mask(x, mask.clone())?)
        }
        OpKind::Concat => {
            let a = random::<T>(rng, &[2, 2, 3]);
            let b = random::<T>(rng, &[2, 1, 3]);
            let w = random::<T>(rng, &[2, 3, 3]);
            finite_diff_gradcheck(&[a, b], h, |t: &mut Tape<T>, v: &[Var]| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                project(t, y, &w)
            })
        }
        OpKind::Slice => unary!([2, 5, 3] => [2, 3, 3], random, |t, x| t.slice(x, 1, 1, 3)?),
        OpKind::Reshape => unary!([2, 6] => [3, 4], random, |t, x| t.reshape(x, &[3, 4])?),
        OpKind::TransposeLast2 => unary!([2, 3, 4] => [2, 4, 3], random, |t, x| t.transpose_last2(x)?),
        OpKind::MeanAxis => unary!([2, 3, 4] => [2, 3], random, |t, x| t.mean_axis(x, 2)?),
        OpKind::Sum => {
            let x = random::<T>(rng, &[3, 4]);
            finite_diff_gradcheck(&[x], h, |t: &mut Tape<T>, v: &[Var]| Ok(t.sum(v[0])))
        }
        OpKind::CrossEntropy => {
            let x = random::<T>(rng, &[3, 4]);
            finite_diff_gradcheck(&[x], h, |t: &mut Tape<T>, v: &[Var]| t.cross_entropy(v[0], &[0, 3, 1]))
        }
        OpKind::Mse => {
            let a = random::<T>(rng, &[3, 4]);
            let b = random::<T>(rng, &[3, 4]);
            finite_diff_gradcheck(&[a, b], h, |t: &mut Tape<T>, v: &[Var]| t.mse(v[0], v[1]))
        }
    }
}

fn check_lstm_cell<T: Real>(rng: &mut ChaCha8Rng, h: f64) -> Result<GradcheckOutcome> {
    let x = random::<T>(rng, &[2, 3]);
    let hp = random::<T>(rng, &[2, 4]);
    let cp = random::<T>(rng, &[2, 4]);
    let w = random::<T>(rng, &[7, 16]);
    let b = random::<T>(rng, &[16]);
    let ph = random::<T>(rng, &[2, 4]);
    let pc = random::<T>(rng, &[2, 4]);
    finite_diff_gradcheck(&[x, hp, cp, w, b], h, |t: &mut Tape<T>, v: &[Var]| {
        let (hn, cn) = t.lstm_cell(v[0], v[1], v[2], v[3], v[4])?;
        let a = project(t, hn, &ph)?;
        let c = project(t, cn, &pc)?;
        t.add(a, c)
    })
}

/// Gradient check of every registered primitive plus the composite LSTM
/// cell, one row each.
pub fn run_op_suite<T: Real>(seed: u64, h: f64, threshold: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(OpKind::ALL.len() + 1);
    for kind in OpKind::ALL {
        let o = check_op::<T>(kind, &mut rng, h)?;
        rows.push(OpCheck::from_outcome(kind.name(), &o, threshold));
    }
    let o = check_lstm_cell::<T>(&mut rng, h)?;
    rows.push(OpCheck::from_outcome("lstm_cell", &o, threshold));
    Ok(rows)
}
