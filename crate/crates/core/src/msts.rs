//! Multi-scale token selection and the per-stage recognition heads.

use rand::Rng;

use crate::backbone::{transformer_layer, LayerParams, Strides, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{Classifier, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MstsConfig {
    /// Fraction of merged tokens kept per stage.
    pub keep_ratio: [f64; 4],
    /// Share of a shallow stage's budget reserved for tokens propagated
    /// from the deep stage.
    pub deep_share: f64,
    /// Squeeze-excitation reduction ratio.
    pub se_ratio: usize,
}

impl Default for MstsConfig {
    fn default() -> Self {
        MstsConfig {
            keep_ratio: [0.25; 4],
            deep_share: 0.5,
            se_ratio: 4,
        }
    }
}

impl MstsConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.keep_ratio.iter().enumerate() {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::Config(format!(
                    "msts.keep_ratio.{} = {r} outside (0, 1]",
                    i + 1
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.deep_share) {
            return Err(Error::Config(format!(
                "msts.deep_share = {} outside [0, 1]",
                self.deep_share
            )));
        }
        if self.se_ratio == 0 {
            return Err(Error::Config("msts.se_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// `k = ceil(ratio · n)`, at least one and at most `n`.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Patch-merged tokens of one stage (cls excluded).
#[derive(Clone, Copy, Debug)]
pub struct MergedTokens {
    pub tokens: Var,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub scores: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Concatenate every 2×2 neighborhood (`(0,0), (0,1), (1,0), (1,1)` order)
/// and project `4c → c`.
pub fn patch_merge(s: &mut Session, seq: TokenSeq, proj: &Linear) -> Result<MergedTokens> {
    let (h, w) = seq.grid;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("cannot patch-merge a {h}x{w} grid")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let patches = s.tape.slice_rows(seq.tokens, 1, h * w)?;
    let mut parts = Vec::with_capacity(4);
    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let idx: Vec<usize> = (0..ho * wo)
            .map(|m| {
                let (r, c) = (m / wo, m % wo);
                (2 * r + dy) * w + 2 * c + dx
            })
            .collect();
        parts.push(s.tape.gather_rows(patches, &idx)?);
    }
    let cat = s.tape.concat_cols(&parts)?;
    let tokens = proj.forward(s, cat)?;
    Ok(MergedTokens {
        tokens,
        grid: (ho, wo),
    })
}

/// Channel mean of every token row.
pub fn token_scores(tokens: &Tensor) -> Vec<f64> {
    let c = tokens.cols() as f64;
    (0..tokens.rows())
        .map(|r| tokens.row(r).iter().sum::<f64>() / c)
        .collect()
}

/// Indices sorted by descending score, ties broken by smaller index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Indices of the `k` largest scores in descending order.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "top-k with k = {k} over {} scores",
            scores.len()
        )));
    }
    let mut idx = rank_desc(scores);
    idx.truncate(k);
    Ok(idx)
}

pub fn gather_tokens(s: &mut Session, merged: MergedTokens, indices: &[usize]) -> Result<Var> {
    s.tape.gather_rows(merged.tokens, indices)
}

/// Map deep-grid cells onto the blocks of shallow-grid cells they cover.
/// Returns the covered shallow indices in ascending order.
pub fn propagate_deep_indices(
    deep: &[usize],
    deep_grid: (usize, usize),
    shallow_grid: (usize, usize),
) -> Result<Vec<usize>> {
    let (dh, dw) = deep_grid;
    let (sh, sw) = shallow_grid;
    if dh == 0 || dw == 0 || sh % dh != 0 || sw % dw != 0 {
        return Err(Error::Config(format!(
            "shallow grid {sh}x{sw} is not an integer multiple of deep grid {dh}x{dw}"
        )));
    }
    let (my, mx) = (sh / dh, sw / dw);
    let mut out = Vec::with_capacity(deep.len() * my * mx);
    for &d in deep {
        if d >= dh * dw {
            return Err(Error::Contract(format!("deep index {d} outside {dh}x{dw}")));
        }
        let (r, c) = (d / dw, d % dw);
        for y in 0..my {
            for x in 0..mx {
                out.push((r * my + y) * sw + c * mx + x);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Final selection of a stage: up to `ceil(deep_share · k)` of the
/// propagated tokens (best scores first), the rest of the budget filled
/// from the stage's own ranking. Output is in descending score order.
pub fn combine_selection(
    scores: &[f64],
    k: usize,
    propagated: &[usize],
    deep_share: f64,
) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "selection budget {k} over {} tokens",
            scores.len()
        )));
    }
    let quota = ((deep_share * k as f64).ceil() as usize).min(k);
    let mut chosen = vec![false; scores.len()];
    let mut picked = Vec::with_capacity(k);
    if !propagated.is_empty() {
        let mut prop = propagated.to_vec();
        prop.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &i in prop.iter().take(quota) {
            if i >= scores.len() {
                return Err(Error::Contract(format!("propagated index {i} out of range")));
            }
            chosen[i] = true;
            picked.push(i);
        }
    }
    for i in rank_desc(scores) {
        if picked.len() == k {
            break;
        }
        if !chosen[i] {
            chosen[i] = true;
            picked.push(i);
        }
    }
    picked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(picked)
}

/// cls token transfer: `W1 · ReLU(BN(W0 · z))`.
#[derive(Clone, Debug)]
pub struct CttParams {
    pub w0: Linear,
    pub bn_gain: ParamId,
    pub bn_bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub w1: Linear,
}

impl CttParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
    ) -> Self {
        CttParams {
            w0: Linear::new(store, rng, &format!("{name}.w0"), c_in, hidden, false),
            bn_gain: store.add(&format!("{name}.bn.gain"), Tensor::ones(&[hidden])),
            bn_bias: store.add(&format!("{name}.bn.bias"), Tensor::zeros(&[hidden])),
            running_mean: store.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[hidden])),
            running_var: store.add_buffer(&format!("{name}.bn.running_var"), Tensor::ones(&[hidden])),
            w1: Linear::new(store, rng, &format!("{name}.w1"), hidden, c_out, true),
        }
    }
}

/// Project a batch of final-stage cls tokens `[B, c4]` to `[B, c_i]`.
///
/// In training mode with `B > 1` batch norm uses batch statistics and
/// queues a running-statistics update; otherwise running statistics are
/// used.
pub fn cls_token_transfer(s: &mut Session, z4_cls: Var, p: &CttParams) -> Result<Var> {
    let shape = s.value(z4_cls).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract(format!(
            "cls token transfer expects [B, c], got {shape:?}"
        )));
    }
    let batch = shape[0];
    let h = p.w0.forward(s, z4_cls)?;
    let gain = s.param(p.bn_gain);
    let bias = s.param(p.bn_bias);
    let normed = if s.training && batch > 1 {
        let (out, mean, var) = s.tape.batch_norm_train(h, gain, bias, BN_EPS)?;
        let rm = s.store().get(p.running_mean).data().to_vec();
        let rv = s.store().get(p.running_var).data().to_vec();
        let unbias = batch as f64 / (batch as f64 - 1.0);
        let new_mean = rm
            .iter()
            .zip(&mean)
            .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
            .collect();
        let new_var = rv
            .iter()
            .zip(&var)
            .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
            .collect();
        s.update_buffer(p.running_mean, Tensor::vector(new_mean));
        s.update_buffer(p.running_var, Tensor::vector(new_var));
        out
    } else {
        let rm = s.store().get(p.running_mean).data().to_vec();
        let rv = s.store().get(p.running_var).data().to_vec();
        let shift = s.constant(Tensor::vector(rm.iter().map(|m| -m).collect()));
        let inv = s.constant(Tensor::vector(
            rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
        ));
        let x = s.tape.add_row(h, shift)?;
        let x = s.tape.mul_row(x, inv)?;
        let x = s.tape.mul_row(x, gain)?;
        s.tape.add_row(x, bias)?
    };
    let act = s.tape.relu(normed);
    p.w1.forward(s, act)
}

/// Squeeze-and-excitation over token rows.
#[derive(Clone, Debug)]
pub struct SeParams {
    pub fc_a: Linear,
    pub fc_b: Linear,
}

impl SeParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 || c % ratio != 0 {
            return Err(Error::Config(format!(
                "channel count {c} not divisible by SE ratio {ratio}"
            )));
        }
        Ok(SeParams {
            fc_a: Linear::new(store, rng, &format!("{name}.fc_a"), c, c / ratio, true),
            fc_b: Linear::new(store, rng, &format!("{name}.fc_b"), c / ratio, c, true),
        })
    }
}

/// Scale every row channelwise by `sigmoid(W_b · ReLU(W_a · mean_rows(x)))`.
pub fn se_refine(s: &mut Session, tokens: Var, p: &SeParams) -> Result<Var> {
    let squeeze = s.tape.mean_rows(tokens);
    let a = p.fc_a.forward(s, squeeze)?;
    let a = s.tape.relu(a);
    let b = p.fc_b.forward(s, a)?;
    let excite = s.tape.sigmoid(b);
    s.tape.mul_row(tokens, excite)
}

#[derive(Clone, Debug)]
pub struct StageHead {
    pub se: SeParams,
    pub block: LayerParams,
    pub classifier: Classifier,
}

impl StageHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        heads: usize,
        mlp_ratio: usize,
        se_ratio: usize,
        n_classes: usize,
    ) -> Result<Self> {
        Ok(StageHead {
            se: SeParams::new(store, rng, &format!("{name}.se"), c, se_ratio)?,
            block: LayerParams::new(store, rng, &format!("{name}.block"), c, c, heads, mlp_ratio),
            classifier: Classifier::new(store, rng, &format!("{name}.classifier"), c, n_classes),
        })
    }
}

/// `Ẑ = Block(SE(Concat(cls, selected)))`; returns `(ẑ⁰, η)` with raw
/// logits `η = W·ẑ⁰`.
pub fn stage_head(s: &mut Session, cls: Var, selected: Var, head: &StageHead) -> Result<(Var, Var)> {
    let c = s.value(cls).numel();
    if s.value(selected).cols() != c {
        return Err(Error::shape("stage_head", s.value(cls).shape(), s.value(selected).shape()));
    }
    let z = s.tape.concat_rows(&[cls, selected])?;
    let z = se_refine(s, z, &head.se)?;
    let rows = s.value(z).rows();
    let seq = TokenSeq {
        tokens: z,
        grid: (rows - 1, 1),
    };
    let (out, _) = transformer_layer(s, seq, &head.block, Strides::NONE)?;
    let zhat = s.tape.row(out.tokens, 0)?;
    let eta = head.classifier.forward(s, zhat)?;
    Ok((zhat, eta))
}
