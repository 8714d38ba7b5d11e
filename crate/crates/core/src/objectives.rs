//! Loss functions shared by every training stage.
//!
//! All functions operate on candle tensors and are differentiable through
//! candle's autograd. They run in whatever float dtype the inputs carry:
//! training uses f32, gradient verification uses f64.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature, hinge margin and mirror weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub margin: f64,
    pub lambda_mc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            margin: 0.2,
            lambda_mc: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.lambda_mc >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_mc must be >= 0, got {}",
                self.lambda_mc
            )));
        }
        Ok(())
    }
}

fn rows_cols(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| Error::dim(format!("{what} must be rank 2, got {:?}", t.dims())))
}

/// Cosine similarity matrix `a bᵀ` of row-normalized batches.
pub fn similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, da) = rows_cols(a, "lhs")?;
    let (_, db) = rows_cols(b, "rhs")?;
    if da != db {
        return Err(Error::dim(format!("embedding dims differ: {da} vs {db}")));
    }
    Ok(a.matmul(&b.t()?)?)
}

/// Row-wise inner products of two equally shaped batches, shape `(N,)`.
pub fn paired_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "paired similarity shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    rows_cols(a, "embedding batch")?;
    Ok((a * b)?.sum(D::Minus1)?)
}

/// Symmetric InfoNCE over a positionally paired batch.
///
/// Row `i` of `v` is the positive for row `i` of `t`; every other row in the
/// batch is a negative. Returns `½ (L_v→t + L_t→v)` as a scalar tensor.
pub fn info_nce_symmetric(v: &Tensor, t: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("temperature must be > 0, got {tau}")));
    }
    let (n, _) = rows_cols(v, "v")?;
    let (m, _) = rows_cols(t, "t")?;
    if n != m {
        return Err(Error::dim(format!("batch sizes differ: {n} vs {m}")));
    }
    if n == 0 {
        return Err(Error::dim("empty batch"));
    }
    let logits = (similarity_matrix(v, t)? / tau)?;
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let v2t = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let t2v = candle_nn::ops::log_softmax(&logits.t()?, D::Minus1)?;
    let diag_v2t = (v2t * &eye)?.sum_all()?;
    let diag_t2v = (t2v * &eye)?.sum_all()?;
    Ok(((diag_v2t + diag_t2v)? * (-0.5 / n as f64))?)
}

/// Bidirectional hinge from precomputed similarities, per sample.
///
/// `max(0, m + s(v,t̃) − s(v,t)) + max(0, m + s(ṽ,t) − s(ṽ,t̃))`
pub fn mirror_hinge_from_sims(
    s_vt: &Tensor,
    s_vtm: &Tensor,
    s_vmt: &Tensor,
    s_vmtm: &Tensor,
    margin: f64,
) -> Result<Tensor> {
    let first = ((s_vtm - s_vt)? + margin)?.relu()?;
    let second = ((s_vmt - s_vmtm)? + margin)?.relu()?;
    Ok((first + second)?)
}

/// Bidirectional mirror-consistency hinge for batches of `(v, t, ṽ, t̃)`.
///
/// All inputs are `(N, d)` unit rows; returns the per-sample loss `(N,)`.
pub fn mirror_hinge_bidirectional(
    v: &Tensor,
    t: &Tensor,
    v_m: &Tensor,
    t_m: &Tensor,
    margin: f64,
) -> Result<Tensor> {
    let s_vt = paired_similarity(v, t)?;
    let s_vtm = paired_similarity(v, t_m)?;
    let s_vmt = paired_similarity(v_m, t)?;
    let s_vmtm = paired_similarity(v_m, t_m)?;
    mirror_hinge_from_sims(&s_vt, &s_vtm, &s_vmt, &s_vmtm, margin)
}

/// One-sided text mirror hinge `max(0, m + s(c,t̃) − s(c,t))` per sample.
pub fn mirror_hinge_text_only(c: &Tensor, t: &Tensor, t_m: &Tensor, margin: f64) -> Result<Tensor> {
    let s_ct = paired_similarity(c, t)?;
    let s_ctm = paired_similarity(c, t_m)?;
    Ok(((s_ctm - s_ct)? + margin)?.relu()?)
}

/// `con + λ·mc`. Serves both the teacher and the student objective.
pub fn teacher_total(con: &Tensor, mc: &Tensor, lambda_mc: f64) -> Result<Tensor> {
    Ok((con + (mc * lambda_mc)?)?)
}

/// Autoregressive negative log-likelihood.
///
/// `step_log_probs` is `(N, T)` holding `log p(y_t | y_<t, ·)` for each
/// target token; only the first `lengths[i]` positions of row `i` count.
/// Returns `−(1/N) Σ_i Σ_{t<len_i} log p`.
pub fn lm_nll(step_log_probs: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let (n, t) = rows_cols(step_log_probs, "step_log_probs")?;
    if lengths.len() != n {
        return Err(Error::dim(format!(
            "{} lengths for {n} sequences",
            lengths.len()
        )));
    }
    if n == 0 {
        return Err(Error::dim("empty batch"));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l > t) {
        return Err(Error::dim(format!(
            "sequence length {bad} exceeds {t} provided positions"
        )));
    }
    let mask = length_mask(lengths, t, step_log_probs.dtype(), step_log_probs.device())?;
    Ok(((step_log_probs * mask)?.sum_all()? * (-1.0 / n as f64))?)
}

/// `(N, T)` mask with ones on the first `lengths[i]` positions of row `i`.
pub fn length_mask(
    lengths: &[usize],
    t: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let data: Vec<f64> = lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |j| if j < l { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), t), device)?.to_dtype(dtype)?)
}
