//! Label-smoothed cross-entropy over the prediction heads, the pairwise
//! cosine contrastive loss, and their weighted sum.

use crate::error::{Error, Result};
use crate::params::Session;
use crate::tensor::{Tensor, Var};

pub const DEFAULT_BETAS: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];
/// Contrastive weight used for the gamma/alpha pairing.
pub const ALPHA_DEFAULT: f64 = 0.1;
/// Alternative contrastive weight from the training recipe.
pub const ALPHA_RECIPE: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Smoothing factor per head, in the order η₁..η₄, MR.
    pub betas: [f64; 5],
    pub alpha: f64,
    /// Use `β·onehot + (1−β)/n` (sums to one) instead of the literal target.
    pub normalized_smoothing: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            betas: DEFAULT_BETAS,
            alpha: ALPHA_DEFAULT,
            normalized_smoothing: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config(format!("loss.betas {:?} outside [0, 1]", self.betas)));
        }
        if self.betas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "loss.betas {:?} must be non-decreasing",
                self.betas
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("loss.alpha {} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// Smoothed target: `β` at the true class and `(1−β)/n` elsewhere.
///
/// The literal form does not sum to one; `normalized` switches to
/// `β·onehot + (1−β)/n`.
pub fn smooth_target(true_class: usize, beta: f64, n: usize, normalized: bool) -> Vec<f64> {
    let off = (1.0 - beta) / n as f64;
    (0..n)
        .map(|t| match (t == true_class, normalized) {
            (true, false) => beta,
            (true, true) => beta + off,
            (false, _) => off,
        })
        .collect()
}

/// `Σ_heads Σ_t −ŷ_β^t · log softmax(y)^t`, one `β` per head.
pub fn smoothed_ce(
    s: &mut Session,
    logits: &[Var],
    betas: &[f64],
    true_class: usize,
    normalized: bool,
) -> Result<Var> {
    if logits.is_empty() || logits.len() != betas.len() {
        return Err(Error::Contract(format!(
            "{} prediction heads but {} smoothing factors",
            logits.len(),
            betas.len()
        )));
    }
    let mut total = None;
    for (y, beta) in logits.iter().zip(betas) {
        let n = s.value(*y).numel();
        if true_class >= n {
            return Err(Error::Contract(format!("label {true_class} outside {n} classes")));
        }
        let target = smooth_target(true_class, *beta, n, normalized);
        let term = s.tape.soft_cross_entropy(*y, &target)?;
        total = Some(match total {
            None => term,
            Some(t) => s.tape.add(t, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Pairwise cosine loss over a batch of embeddings `[B, c]`:
/// `(1/B²)·[Σ_same (1 − cos) + Σ_diff max(cos, 0)]` over ordered pairs
/// including `i = j`.
pub fn contrastive(s: &mut Session, embeddings: Var, labels: &[usize]) -> Result<Var> {
    let shape = s.value(embeddings).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "contrastive loss over embeddings {shape:?} with {} labels",
            labels.len()
        )));
    }
    let b = labels.len();
    let e = s.tape.l2_normalize_rows(embeddings)?;
    let cos = s.tape.matmul_nt(e, e)?;
    let mut same = vec![0.0; b * b];
    let mut diff = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if labels[i] == labels[j] {
                same[i * b + j] = 1.0;
            } else {
                diff[i * b + j] = 1.0;
            }
        }
    }
    let n_same: f64 = same.iter().sum();
    let same_mask = s.constant(Tensor::new(&[b, b], same)?);
    let diff_mask = s.constant(Tensor::new(&[b, b], diff)?);
    let same_cos = s.tape.mul(cos, same_mask)?;
    let same_cos = s.tape.sum(same_cos);
    let pos = s.tape.relu(cos);
    let diff_cos = s.tape.mul(pos, diff_mask)?;
    let diff_cos = s.tape.sum(diff_cos);
    let count = s.constant(Tensor::scalar(n_same));
    let pull = s.tape.sub(count, same_cos)?;
    let total = s.tape.add(pull, diff_cos)?;
    Ok(s.tape.scale(total, 1.0 / (b * b) as f64))
}

/// `L = L_s + α·L_con`.
pub fn total_loss(s: &mut Session, ls: Var, lcon: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("alpha {alpha} must be >= 0")));
    }
    let weighted = s.tape.scale(lcon, alpha);
    s.tape.add(ls, weighted)
}
