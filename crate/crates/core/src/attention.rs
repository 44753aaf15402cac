//! Dense multi-head attention math.
//!
//! This is the reference path: plain loops over `[B, N, L, D]` tensors in
//! 64-bit floats, row-stabilized softmax, no masking. Causality enters the
//! system through what the cache contains, not through masks here.

use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_rows, Tensor};

/// Query/key/value activations of shape `[B, N, L, D]`. Queries may have a
/// different sequence length than keys/values.
#[derive(Debug, Clone)]
pub struct AttentionBatch {
    q: Tensor,
    k: Tensor,
    v: Tensor,
}

impl AttentionBatch {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        for (name, t) in [("q", &q), ("k", &k), ("v", &v)] {
            if t.dims().len() != 4 {
                return Err(Error::Shape(format!(
                    "{name} must be rank 4 [B, N, L, D], got {:?}",
                    t.dims()
                )));
            }
            t.ensure_finite(name)?;
        }
        let (qb, qn, _, qd) = dims4(&q);
        let (kb, kn, kl, kd) = dims4(&k);
        let (vb, vn, vl, vd) = dims4(&v);
        if (qb, qn, qd) != (kb, kn, kd) {
            return Err(Error::Shape(format!(
                "q {:?} and k {:?} disagree on batch/heads/head-dim",
                q.dims(),
                k.dims()
            )));
        }
        if (kb, kn, kl, kd) != (vb, vn, vl, vd) {
            return Err(Error::Shape(format!(
                "k {:?} and v {:?} must have identical shape",
                k.dims(),
                v.dims()
            )));
        }
        if qd == 0 {
            return Err(Error::Shape("head dimension D must be >= 1".into()));
        }
        Ok(AttentionBatch { q, k, v })
    }

    /// Salience-only batch: v is not consulted by the scoring path, so a
    /// zero tensor shaped like k stands in.
    pub fn from_qk(q: Tensor, k: Tensor) -> Result<Self> {
        let v = Tensor::zeros(k.dims());
        AttentionBatch::new(q, k, v)
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn k(&self) -> &Tensor {
        &self.k
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn batch(&self) -> usize {
        self.q.dims()[0]
    }

    pub fn heads(&self) -> usize {
        self.q.dims()[1]
    }

    pub fn q_len(&self) -> usize {
        self.q.dims()[2]
    }

    pub fn k_len(&self) -> usize {
        self.k.dims()[2]
    }

    pub fn head_dim(&self) -> usize {
        self.q.dims()[3]
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let d = t.dims();
    (d[0], d[1], d[2], d[3])
}

/// Row-stochastic attention probabilities of shape `[B, N, L_q, L_k]`.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    p: Tensor,
}

impl AttentionWeights {
    /// Validating constructor for externally supplied probabilities
    /// (e.g. tensors loaded from disk for the analyze commands).
    pub fn new(p: Tensor) -> Result<Self> {
        if p.dims().len() != 4 {
            return Err(Error::Shape(format!(
                "attention weights must be rank 4 [B, N, L_q, L_k], got {:?}",
                p.dims()
            )));
        }
        p.ensure_finite("attention weights")?;
        let l_k = p.dims()[3];
        for (r, row) in p.data().chunks(l_k).enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Argument(format!(
                        "attention weight out of [0,1] in row {r}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Argument(format!(
                    "attention row {r} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(AttentionWeights { p })
    }

    /// Construction from the softmax path, which guarantees the invariants.
    pub(crate) fn from_softmax(p: Tensor) -> Self {
        AttentionWeights { p }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.p
    }

    pub fn into_tensor(self) -> Tensor {
        self.p
    }

    pub fn batch(&self) -> usize {
        self.p.dims()[0]
    }

    pub fn heads(&self) -> usize {
        self.p.dims()[1]
    }

    pub fn q_len(&self) -> usize {
        self.p.dims()[2]
    }

    pub fn k_len(&self) -> usize {
        self.p.dims()[3]
    }
}

/// softmax(QK^T / sqrt(D)) per batch and head.
pub fn attention_weights(batch: &AttentionBatch) -> Result<AttentionWeights> {
    let (b, n, l_q, d) = dims4(batch.q());
    let l_k = batch.k_len();
    let scale = 1.0 / (d as f64).sqrt();

    let mut p = Tensor::zeros(&[b, n, l_q, l_k]);
    let q = batch.q().data();
    let k = batch.k().data();
    let out = p.data_mut();

    for bi in 0..b {
        for ni in 0..n {
            let q_base = (bi * n + ni) * l_q * d;
            let k_base = (bi * n + ni) * l_k * d;
            let p_base = (bi * n + ni) * l_q * l_k;
            for i in 0..l_q {
                let q_row = &q[q_base + i * d..q_base + (i + 1) * d];
                let p_row = &mut out[p_base + i * l_k..p_base + (i + 1) * l_k];
                for (j, slot) in p_row.iter_mut().enumerate() {
                    let k_row = &k[k_base + j * d..k_base + (j + 1) * d];
                    *slot = dot(q_row, k_row) * scale;
                }
                softmax_rows(p_row, l_k);
            }
        }
    }
    Ok(AttentionWeights::from_softmax(p))
}

/// `output[b,n,i,:] = sum_j p[b,n,i,j] * v[b,n,j,:]`
pub fn attention_output(p: &AttentionWeights, v: &Tensor) -> Result<Tensor> {
    if v.dims().len() != 4 {
        return Err(Error::Shape(format!(
            "v must be rank 4 [B, N, L_k, D], got {:?}",
            v.dims()
        )));
    }
    let (b, n, l_q, l_k) = dims4(p.tensor());
    let (vb, vn, vl, d) = dims4(v);
    if (vb, vn, vl) != (b, n, l_k) {
        return Err(Error::Shape(format!(
            "p {:?} incompatible with v {:?}",
            p.tensor().dims(),
            v.dims()
        )));
    }

    let mut out = Tensor::zeros(&[b, n, l_q, d]);
    let pd = p.tensor().data();
    let vd = v.data();
    let od = out.data_mut();

    for bi in 0..b {
        for ni in 0..n {
            let p_base = (bi * n + ni) * l_q * l_k;
            let v_base = (bi * n + ni) * l_k * d;
            let o_base = (bi * n + ni) * l_q * d;
            for i in 0..l_q {
                let o_row = &mut od[o_base + i * d..o_base + (i + 1) * d];
                for j in 0..l_k {
                    let w = pd[p_base + i * l_k + j];
                    let v_row = &vd[v_base + j * d..v_base + (j + 1) * d];
                    for dd in 0..d {
                        o_row[dd] += w * v_row[dd];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(q: Vec<f64>, k: Vec<f64>, dims_q: &[usize], dims_k: &[usize]) -> AttentionBatch {
        let q = Tensor::from_vec(dims_q, q).unwrap();
        let k = Tensor::from_vec(dims_k, k).unwrap();
        AttentionBatch::from_qk(q, k).unwrap()
    }

    #[test]
    fn single_key_gives_probability_one() {
        let b = batch(vec![0.37], vec![-2.4], &[1, 1, 1, 1], &[1, 1, 1, 1]);
        let p = attention_weights(&b).unwrap();
        assert_eq!(p.tensor().data(), &[1.0]);
    }

    #[test]
    fn zero_keys_give_uniform_rows() {
        // k all zeros, L_k = 4: every logit is 0, so every row is 1/4.
        let l_q = 3;
        let q: Vec<f64> = (0..l_q * 2).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b = batch(q, vec![0.0; 4 * 2], &[1, 1, l_q, 2], &[1, 1, 4, 2]);
        let p = attention_weights(&b).unwrap();
        for &x in p.tensor().data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_mismatched_head_dim() {
        let q = Tensor::zeros(&[1, 1, 2, 3]);
        let k = Tensor::zeros(&[1, 1, 2, 4]);
        assert!(matches!(
            AttentionBatch::from_qk(q, k),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut q = Tensor::zeros(&[1, 1, 1, 2]);
        q.data_mut()[0] = f64::INFINITY;
        let k = Tensor::zeros(&[1, 1, 1, 2]);
        assert!(matches!(
            AttentionBatch::from_qk(q, k),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn identity_weights_return_values_unchanged() {
        let l = 3;
        let d = 2;
        let mut p = Tensor::zeros(&[1, 1, l, l]);
        for i in 0..l {
            *p.at_mut(&[0, 0, i, i]) = 1.0;
        }
        let p = AttentionWeights::new(p).unwrap();
        let v = Tensor::from_vec(&[1, 1, l, d], (0..l * d).map(|x| x as f64).collect()).unwrap();
        let out = attention_output(&p, &v).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn uniform_weights_average_values() {
        let mut p = Tensor::zeros(&[1, 1, 2, 2]);
        p.data_mut().fill(0.5);
        let p = AttentionWeights::new(p).unwrap();
        let v = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = attention_output(&p, &v).unwrap();
        // every output row = (r0 + r1) / 2 = [3, 5]
        assert_eq!(out.data(), &[3.0, 5.0, 3.0, 5.0]);
    }

    #[test]
    fn output_rejects_shape_mismatch() {
        let p = AttentionWeights::new({
            let mut t = Tensor::zeros(&[1, 1, 1, 2]);
            t.data_mut().fill(0.5);
            t
        })
        .unwrap();
        let v = Tensor::zeros(&[1, 1, 3, 2]);
        assert!(matches!(attention_output(&p, &v), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_shift_invariance() {
        // Adding a constant to all logits of a row must not change p.
        // Constant key offsets along a direction shared by the query shift
        // every logit of that query's row equally.
        let d = 2;
        let q = Tensor::from_vec(&[1, 1, 2, d], vec![1.0, 0.5, -0.25, 2.0]).unwrap();
        let k1 = Tensor::from_vec(&[1, 1, 3, d], vec![0.1, 0.2, -0.4, 0.8, 0.9, -0.3]).unwrap();
        let p1 = attention_weights(&AttentionBatch::from_qk(q.clone(), k1.clone()).unwrap())
            .unwrap();

        // Shift every key by the same vector u: logit(i,j) changes by q_i . u,
        // which is constant along row i.
        let u = [10.0, -6.0];
        let mut shifted = k1.clone();
        for j in 0..3 {
            for (dd, &shift) in u.iter().enumerate() {
                *shifted.at_mut(&[0, 0, j, dd]) += shift;
            }
        }
        let p2 = attention_weights(&AttentionBatch::from_qk(q, shifted).unwrap()).unwrap();
        for (a, b) in p1.tensor().data().iter().zip(p2.tensor().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_are_stochastic_on_random_input() {
        let mut rng = crate::rng::Rng::new(5);
        let q = Tensor::randn(&[2, 3, 5, 4], 1.5, &mut rng);
        let k = Tensor::randn(&[2, 3, 7, 4], 1.5, &mut rng);
        let p = attention_weights(&AttentionBatch::from_qk(q, k).unwrap()).unwrap();
        for row in p.tensor().data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
