//! Salience estimation head: a two-layer MLP over concatenated
//! merged-head q/k/v features, trained with SmoothL1 regression against
//! teacher salience. Forward, analytic backward, and a decoupled
//! weight-decay adaptive update are written out explicitly so the gradient
//! math can be checked against finite differences.

use crate::attention::AttentionBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::salience::SalienceVector;
use crate::tensor::Tensor;

/// Weights of the two-layer head. `w1` is `[d_in, d_hidden]` row-major,
/// `w2` is `[d_hidden, d_out]`; `d_in` must equal `3 * heads * head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SehParams {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl SehParams {
    /// Uniform init in +-1/sqrt(fan_in) per layer, seeded.
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_hidden == 0 || d_out == 0 {
            return Err(Error::Argument("SEH dimensions must be >= 1".into()));
        }
        let mut rng = Rng::derive(seed, &[0x5e48]);
        let lim1 = 1.0 / (d_in as f64).sqrt();
        let lim2 = 1.0 / (d_hidden as f64).sqrt();
        let draw = |count: usize, lim: f64, rng: &mut Rng| -> Vec<f64> {
            (0..count).map(|_| rng.next_range(-lim, lim)).collect()
        };
        Ok(SehParams {
            d_in,
            d_hidden,
            d_out,
            w1: draw(d_in * d_hidden, lim1, &mut rng),
            b1: draw(d_hidden, lim1, &mut rng),
            w2: draw(d_hidden * d_out, lim2, &mut rng),
            b2: draw(d_out, lim2, &mut rng),
        })
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        SehParams {
            d_in,
            d_hidden,
            d_out,
            w1: vec![0.0; d_in * d_hidden],
            b1: vec![0.0; d_hidden],
            w2: vec![0.0; d_hidden * d_out],
            b2: vec![0.0; d_out],
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ] {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("SEH parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Gradients (or moment accumulators) shaped like [`SehParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct SehGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl SehGrads {
    pub fn zeros_like(params: &SehParams) -> Self {
        SehGrads {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.b1.len()],
            w2: vec![0.0; params.w2.len()],
            b2: vec![0.0; params.b2.len()],
        }
    }
}

/// Per-token regression output, shape `[B, L]`. No range constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct SehPrediction {
    batch: usize,
    seq_len: usize,
    scores: Vec<f64>,
}

impl SehPrediction {
    pub fn new(batch: usize, seq_len: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != batch * seq_len {
            return Err(Error::Shape(format!(
                "prediction length {} != {batch} x {seq_len}",
                scores.len()
            )));
        }
        Ok(SehPrediction {
            batch,
            seq_len,
            scores,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.scores[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn data(&self) -> &[f64] {
        &self.scores
    }
}

/// Merge the head axis of q, k, v into the feature axis and concatenate in
/// (q, k, v) order: token t, head n, dim d of tensor x lands at offset
/// `x_slot * N * D + n * D + d`. Output shape `[B, L, 3 * N * D]`.
pub fn seh_features(batch: &AttentionBatch) -> Result<Tensor> {
    if batch.q_len() != batch.k_len() {
        return Err(Error::Shape(format!(
            "q length {} != k/v length {}; SEH features need all three aligned",
            batch.q_len(),
            batch.k_len()
        )));
    }
    let (b, n, l, d) = (
        batch.batch(),
        batch.heads(),
        batch.q_len(),
        batch.head_dim(),
    );
    let merged = n * d;
    let width = 3 * merged;
    let mut out = Tensor::zeros(&[b, l, width]);
    let od = out.data_mut();
    for (slot, src) in [batch.q(), batch.k(), batch.v()].into_iter().enumerate() {
        let sd = src.data();
        for bi in 0..b {
            for ni in 0..n {
                for t in 0..l {
                    let src_base = ((bi * n + ni) * l + t) * d;
                    let dst_base = (bi * l + t) * width + slot * merged + ni * d;
                    od[dst_base..dst_base + d].copy_from_slice(&sd[src_base..src_base + d]);
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

fn check_width(batch: &AttentionBatch, params: &SehParams) -> Result<()> {
    let want = 3 * batch.heads() * batch.head_dim();
    if params.d_in != want {
        return Err(Error::Shape(format!(
            "SEH d_in {} does not match 3*N*D = {want}",
            params.d_in
        )));
    }
    Ok(())
}

/// `scores[b,t]` = mean over output channels of `SiLU(x w1 + b1) w2 + b2`.
pub fn seh_forward(batch: &AttentionBatch, params: &SehParams) -> Result<SehPrediction> {
    check_width(batch, params)?;
    params.check_finite()?;
    let features = seh_features(batch)?;
    let (b, l) = (batch.batch(), batch.q_len());
    let (d_in, d_h, d_out) = (params.d_in, params.d_hidden, params.d_out);

    let mut scores = Vec::with_capacity(b * l);
    let mut hidden = vec![0.0; d_h];
    for t in 0..b * l {
        let x = &features.data()[t * d_in..(t + 1) * d_in];
        for (h, slot) in hidden.iter_mut().enumerate() {
            let mut z = params.b1[h];
            for (i, &xi) in x.iter().enumerate() {
                z += xi * params.w1[i * d_h + h];
            }
            *slot = silu(z);
        }
        let mut sum = 0.0;
        for c in 0..d_out {
            let mut o = params.b2[c];
            for (h, &a) in hidden.iter().enumerate() {
                o += a * params.w2[h * d_out + c];
            }
            sum += o;
        }
        scores.push(sum / d_out as f64);
    }
    SehPrediction::new(b, l, scores)
}

#[inline]
fn smooth_l1_elem(diff: f64, beta: f64) -> f64 {
    if diff.abs() < beta {
        0.5 * diff * diff / beta
    } else {
        diff.abs() - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_grad(diff: f64, beta: f64) -> f64 {
    if diff.abs() < beta {
        diff / beta
    } else {
        diff.signum()
    }
}

/// SmoothL1 between prediction and target, mean-reduced over all B*L
/// elements.
pub fn smooth_l1(pred: &SehPrediction, target: &SalienceVector, beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::Argument("smooth_l1 beta must be > 0".into()));
    }
    if pred.batch() != target.batch() || pred.seq_len() != target.seq_len() {
        return Err(Error::Shape(format!(
            "prediction [{}, {}] vs target [{}, {}]",
            pred.batch(),
            pred.seq_len(),
            target.batch(),
            target.seq_len()
        )));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| smooth_l1_elem(p - t, beta))
        .sum();
    Ok(total / pred.data().len() as f64)
}

/// Loss and exact analytic gradients of `smooth_l1(seh_forward(..))` with
/// respect to every parameter.
pub fn seh_backward(
    batch: &AttentionBatch,
    params: &SehParams,
    target: &SalienceVector,
    beta: f64,
) -> Result<(f64, SehGrads)> {
    check_width(batch, params)?;
    params.check_finite()?;
    if beta <= 0.0 {
        return Err(Error::Argument("smooth_l1 beta must be > 0".into()));
    }
    let (b, l) = (batch.batch(), batch.q_len());
    if target.batch() != b || target.seq_len() != l {
        return Err(Error::Shape(format!(
            "target [{}, {}] vs batch [{b}, {l}]",
            target.batch(),
            target.seq_len()
        )));
    }

    let features = seh_features(batch)?;
    let (d_in, d_h, d_out) = (params.d_in, params.d_hidden, params.d_out);
    let count = (b * l) as f64;

    let mut grads = SehGrads::zeros_like(params);
    let mut loss = 0.0;

    // Row sums of w2 are reused for every token: dL/da1 factorizes because
    // the prediction is a channel mean.
    let mut w2_row_sum = vec![0.0; d_h];
    for (h, slot) in w2_row_sum.iter_mut().enumerate() {
        let mut s = 0.0;
        for c in 0..d_out {
            s += params.w2[h * d_out + c];
        }
        *slot = s;
    }

    let mut z1 = vec![0.0; d_h];
    let mut a1 = vec![0.0; d_h];
    for t in 0..b * l {
        let x = &features.data()[t * d_in..(t + 1) * d_in];
        for h in 0..d_h {
            let mut z = params.b1[h];
            for (i, &xi) in x.iter().enumerate() {
                z += xi * params.w1[i * d_h + h];
            }
            z1[h] = z;
            a1[h] = silu(z);
        }
        let mut sum = 0.0;
        for c in 0..d_out {
            let mut o = params.b2[c];
            for (h, &a) in a1.iter().enumerate() {
                o += a * params.w2[h * d_out + c];
            }
            sum += o;
        }
        let pred = sum / d_out as f64;
        let diff = pred - target.data()[t];
        loss += smooth_l1_elem(diff, beta);

        // dL/dpred for this token, then one channel's share of it.
        let g_pred = smooth_l1_grad(diff, beta) / count;
        let g_out = g_pred / d_out as f64;

        for c in 0..d_out {
            grads.b2[c] += g_out;
        }
        for h in 0..d_h {
            for c in 0..d_out {
                grads.w2[h * d_out + c] += a1[h] * g_out;
            }
            let g_a1 = g_out * w2_row_sum[h];
            let g_z1 = g_a1 * silu_derivative(z1[h]);
            grads.b1[h] += g_z1;
            for (i, &xi) in x.iter().enumerate() {
                grads.w1[i * d_h + h] += xi * g_z1;
            }
        }
    }

    Ok((loss / count, grads))
}

/// Hyperparameters plus first/second moment accumulators for the decoupled
/// weight-decay adaptive update.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    m: SehGrads,
    v: SehGrads,
}

impl OptimizerState {
    pub fn new(
        params: &SehParams,
        lr: f64,
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
        epsilon: f64,
    ) -> Self {
        OptimizerState {
            step: 0,
            lr,
            beta1,
            beta2,
            weight_decay,
            epsilon,
            m: SehGrads::zeros_like(params),
            v: SehGrads::zeros_like(params),
        }
    }
}

/// One optimization step. Returns the pre-update loss.
pub fn seh_train_step(
    params: &mut SehParams,
    opt: &mut OptimizerState,
    batch: &AttentionBatch,
    target: &SalienceVector,
    beta: f64,
) -> Result<f64> {
    let (loss, grads) = seh_backward(batch, params, target, beta)?;
    opt.step += 1;
    let t = opt.step;
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);

    let apply = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.epsilon);
            p[i] -= opt.lr * opt.weight_decay * p[i];
        }
    };
    apply(&mut params.w1, &grads.w1, &mut opt.m.w1, &mut opt.v.w1);
    apply(&mut params.b1, &grads.b1, &mut opt.m.b1, &mut opt.v.b1);
    apply(&mut params.w2, &grads.w2, &mut opt.m.w2, &mut opt.v.w2);
    apply(&mut params.b2, &grads.b2, &mut opt.m.b2, &mut opt.v.b2);
    Ok(loss)
}
