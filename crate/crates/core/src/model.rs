//! The full network: backbone with cue activation hooks, per-stage token
//! selection heads, gated aggregation, and the batch objective.

use rand::Rng;

use crate::backbone::{forward_stages, Backbone, BackboneConfig, StageOutput, TokenSeq, NUM_STAGES};
use crate::error::{Error, Result};
use crate::losses::{contrastive, smoothed_ce, total_loss, LossConfig};
use crate::msca::{accumulate_maps, apply_mask, resize_map, scale_mask, ActivationMap, MscaConfig, ScaleMask};
use crate::msda::{aggregate, aggregate_sum, build_feature, gating_weights, stack_logits, Aggregation, GateParams, MsdaConfig};
use crate::msts::{
    cls_token_transfer, combine_selection, keep_count, patch_merge, propagate_deep_indices, select_topk,
    stage_head, token_scores, CttParams, MergedTokens, MstsConfig, StageHead,
};
use crate::nn::{Classifier, Linear};
use crate::params::{ParamStore, Session};
use crate::tensor::{argmax, Tensor, Var};

/// Stage (0-based) whose selection is propagated to the shallower stages.
pub const DEEP_SOURCE_STAGE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationConfig {
    pub msts: bool,
    pub msda: bool,
    pub msca: bool,
}

impl AblationConfig {
    pub const BASELINE: AblationConfig = AblationConfig { msts: false, msda: false, msca: false };
    pub const MSTS: AblationConfig = AblationConfig { msts: true, msda: false, msca: false };
    pub const MSTS_MSDA: AblationConfig = AblationConfig { msts: true, msda: true, msca: false };
    pub const FULL: AblationConfig = AblationConfig { msts: true, msda: true, msca: true };

    pub fn validate(&self) -> Result<()> {
        if self.msda && !self.msts {
            return Err(Error::Config(
                "msda.enabled requires msts.enabled: the gate aggregates the per-stage heads".into(),
            ));
        }
        Ok(())
    }

    /// Short label used in ablation tables.
    pub fn label(&self) -> &'static str {
        match (self.msts, self.msda, self.msca) {
            (false, false, false) => "baseline",
            (true, false, false) => "msts",
            (true, true, false) => "msts+msda",
            (true, true, true) => "full",
            (false, false, true) => "msca",
            (true, false, true) => "msts+msca",
            (false, true, _) => "invalid",
        }
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::FULL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub msca: MscaConfig,
    pub msts: MstsConfig,
    pub msda: MsdaConfig,
    pub ablation: AblationConfig,
    /// Aggregation used for the trained final head when the gate is on.
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            msca: MscaConfig::default(),
            msts: MstsConfig::default(),
            msda: MsdaConfig::default(),
            ablation: AblationConfig::default(),
            aggregation: Aggregation::Gate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.msts.validate()?;
        self.ablation.validate()?;
        if !(self.msca.min_factor >= 0.0) || !self.msca.gamma.is_finite() {
            return Err(Error::Config("msca gamma must be finite and min factor >= 0".into()));
        }
        if self.ablation.msts {
            for (i, c) in self.backbone.stage_dims.iter().enumerate() {
                if c % self.msts.se_ratio != 0 {
                    return Err(Error::Config(format!(
                        "stage {} dim {c} not divisible by SE ratio {}",
                        i + 1,
                        self.msts.se_ratio
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MstsParams {
    pub merge: Vec<Linear>,
    /// Transfers for stages 1–3; stage 4 uses its own cls token.
    pub ctt: Vec<CttParams>,
    pub heads: Vec<StageHead>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub msts: Option<MstsParams>,
    pub gate: Option<GateParams>,
    pub baseline: Option<Classifier>,
}

impl Model {
    /// Build the model and register all of its parameters in a fresh store.
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, rng)?;
        let dims = cfg.backbone.stage_dims;
        let n = cfg.backbone.n_classes;
        let c4 = dims[NUM_STAGES - 1];
        let (msts, gate, baseline) = if cfg.ablation.msts {
            let mut merge = Vec::with_capacity(NUM_STAGES);
            let mut ctt = Vec::with_capacity(NUM_STAGES - 1);
            let mut heads = Vec::with_capacity(NUM_STAGES);
            for (i, &c) in dims.iter().enumerate() {
                merge.push(Linear::new(&mut store, rng, &format!("msts.stage{}.merge", i + 1), 4 * c, c, true));
                if i + 1 < NUM_STAGES {
                    ctt.push(CttParams::new(&mut store, rng, &format!("msts.stage{}.ctt", i + 1), c4, c, c));
                }
                heads.push(StageHead::new(
                    &mut store,
                    rng,
                    &format!("msts.stage{}.head", i + 1),
                    c,
                    cfg.backbone.stage_heads[i],
                    cfg.backbone.mlp_ratio,
                    cfg.msts.se_ratio,
                    n,
                )?);
            }
            let gate = cfg
                .ablation
                .msda
                .then(|| GateParams::new(&mut store, rng, dims.iter().sum(), n));
            (Some(MstsParams { merge, ctt, heads }), gate, None)
        } else {
            let head = Classifier::new(&mut store, rng, "baseline.classifier", c4, n);
            (None, None, Some(head))
        };
        Ok((
            Model {
                cfg: cfg.clone(),
                backbone,
                msts,
                gate,
                baseline,
            },
            store,
        ))
    }

    /// Budget `k_i` of every stage.
    pub fn keep_counts(&self) -> [usize; NUM_STAGES] {
        std::array::from_fn(|i| {
            let (h, w) = self.backbone.cfg.stage_grid(i);
            keep_count(self.cfg.msts.keep_ratio[i], (h / 2) * (w / 2))
        })
    }
}

/// Data-dependent discrete choices of one forward pass. Replaying them
/// makes the forward a smooth function of the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decisions {
    /// Per sample, the masks applied after stages 1–3.
    pub masks: Vec<Vec<ScaleMask>>,
    /// Per sample, the selected merged-token indices of each stage.
    pub selections: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug)]
pub struct SampleOutputs {
    /// Stage logits `η₁..η₄` (empty for the baseline).
    pub etas: Vec<Var>,
    /// Final prediction trained with the last smoothing factor.
    pub final_logits: Var,
    /// Gated aggregation, when the gate exists.
    pub mr_gate: Option<Var>,
    /// Plain-sum aggregation, when stage heads exist.
    pub mr_sum: Option<Var>,
    pub mg: Option<Var>,
    /// Stage cls embeddings `ẑ₁..ẑ₄` (empty for the baseline).
    pub zhat: Vec<Var>,
    /// Activation maps after accumulation, stages 1–3.
    pub maps: Vec<ActivationMap>,
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    pub samples: Vec<SampleOutputs>,
    pub decisions: Decisions,
}

struct Backbone1 {
    outputs: Vec<StageOutput>,
    masks: Vec<ScaleMask>,
    maps: Vec<ActivationMap>,
}

fn run_backbone(
    s: &mut Session,
    model: &Model,
    image: &Tensor,
    frozen_masks: Option<&[ScaleMask]>,
) -> Result<Backbone1> {
    let use_msca = model.cfg.ablation.msca;
    let mcfg = model.cfg.msca.clone();
    let mut history: Vec<ActivationMap> = Vec::new();
    let mut masks = Vec::new();
    let mut maps = Vec::new();
    let outputs = forward_stages(s, image, &model.backbone, |s, out| {
        if !use_msca || out.stage_index == NUM_STAGES {
            return Ok(None);
        }
        let current = resize_map(&out.cls_attention, out.seq.grid)?;
        let acc = accumulate_maps(&history, &current)?;
        let mask = match frozen_masks {
            Some(f) => f
                .get(out.stage_index - 1)
                .cloned()
                .ok_or_else(|| Error::Contract("frozen decisions lack a mask".into()))?,
            None => scale_mask(&acc, mcfg.gamma)?,
        };
        let seq = apply_mask(s, out.seq, &mask, mcfg.min_factor)?;
        history.push(current);
        masks.push(mask);
        maps.push(acc);
        Ok(Some(seq))
    })?;
    Ok(Backbone1 { outputs, masks, maps })
}

fn select_stages(
    model: &Model,
    s: &Session,
    merged: &[MergedTokens],
) -> Result<Vec<Vec<usize>>> {
    let ks = model.keep_counts();
    let scores: Vec<Vec<f64>> = merged.iter().map(|m| token_scores(s.value(m.tokens))).collect();
    let mut sel = vec![Vec::new(); NUM_STAGES];
    sel[NUM_STAGES - 1] = select_topk(&scores[NUM_STAGES - 1], ks[NUM_STAGES - 1])?;
    sel[DEEP_SOURCE_STAGE] = select_topk(&scores[DEEP_SOURCE_STAGE], ks[DEEP_SOURCE_STAGE])?;
    for i in 0..DEEP_SOURCE_STAGE {
        let prop = propagate_deep_indices(&sel[DEEP_SOURCE_STAGE], merged[DEEP_SOURCE_STAGE].grid, merged[i].grid)?;
        sel[i] = combine_selection(&scores[i], ks[i], &prop, model.cfg.msts.deep_share)?;
    }
    Ok(sel)
}

/// Forward a batch of images. With `frozen`, masks and selections are
/// replayed instead of recomputed.
pub fn forward_batch(
    s: &mut Session,
    model: &Model,
    images: &[Tensor],
    frozen: Option<&Decisions>,
) -> Result<BatchForward> {
    if images.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if let Some(f) = frozen {
        if (model.cfg.ablation.msca && f.masks.len() != images.len())
            || (model.cfg.ablation.msts && f.selections.len() != images.len())
        {
            return Err(Error::Contract("frozen decisions do not match the batch".into()));
        }
    }
    let mut decisions = Decisions::default();
    let mut backbones = Vec::with_capacity(images.len());
    for (b, image) in images.iter().enumerate() {
        let frozen_masks = frozen.filter(|_| model.cfg.ablation.msca).map(|f| f.masks[b].as_slice());
        let bb = run_backbone(s, model, image, frozen_masks)?;
        if model.cfg.ablation.msca {
            decisions.masks.push(bb.masks.clone());
        }
        backbones.push(bb);
    }

    let Some(mp) = &model.msts else {
        let head = model.baseline.as_ref().expect("baseline head without token selection");
        let mut samples = Vec::with_capacity(images.len());
        for bb in backbones {
            let last = bb.outputs[NUM_STAGES - 1].seq.tokens;
            let cls = s.tape.row(last, 0)?;
            let logits = head.forward(s, cls)?;
            samples.push(SampleOutputs {
                etas: Vec::new(),
                final_logits: logits,
                mr_gate: None,
                mr_sum: None,
                mg: None,
                zhat: Vec::new(),
                maps: bb.maps,
            });
        }
        return Ok(BatchForward { samples, decisions });
    };

    let mut cls4 = Vec::with_capacity(images.len());
    for bb in &backbones {
        cls4.push(s.tape.slice_rows(bb.outputs[NUM_STAGES - 1].seq.tokens, 0, 1)?);
    }
    let cls4_batch = s.tape.concat_rows(&cls4)?;
    let mut transferred = Vec::with_capacity(NUM_STAGES - 1);
    for ctt in &mp.ctt {
        transferred.push(cls_token_transfer(s, cls4_batch, ctt)?);
    }

    let dims = model.backbone.cfg.stage_dims;
    let mut samples = Vec::with_capacity(images.len());
    for (b, bb) in backbones.into_iter().enumerate() {
        let mut merged = Vec::with_capacity(NUM_STAGES);
        for (i, out) in bb.outputs.iter().enumerate() {
            let seq = TokenSeq {
                tokens: out.seq.tokens,
                grid: out.seq.grid,
            };
            merged.push(patch_merge(s, seq, &mp.merge[i])?);
        }
        let sel = match frozen {
            Some(f) => f.selections[b].clone(),
            None => select_stages(model, s, &merged)?,
        };
        let mut etas = Vec::with_capacity(NUM_STAGES);
        let mut zhat = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let cls = if i + 1 < NUM_STAGES {
                s.tape.row(transferred[i], b)?
            } else {
                s.tape.row(bb.outputs[i].seq.tokens, 0)?
            };
            let selected = s.tape.gather_rows(merged[i].tokens, &sel[i])?;
            let (z, eta) = stage_head(s, cls, selected, &mp.heads[i])?;
            zhat.push(z);
            etas.push(eta);
        }
        decisions.selections.push(sel);
        let eta4: [Var; 4] = [etas[0], etas[1], etas[2], etas[3]];
        let mc = stack_logits(s, &eta4, model.cfg.msda.pre_softmax)?;
        let mr_sum = aggregate_sum(s, mc)?;
        let (mr_gate, mg) = match &model.gate {
            Some(gate) => {
                let z4: [Var; 4] = [zhat[0], zhat[1], zhat[2], zhat[3]];
                let mf = build_feature(s, &z4, &dims)?;
                let mg = gating_weights(s, mf, gate)?;
                (Some(aggregate(s, mc, mg)?), Some(mg))
            }
            None => (None, None),
        };
        let final_logits = match (mr_gate, model.cfg.aggregation) {
            (Some(g), Aggregation::Gate) => g,
            _ => mr_sum,
        };
        samples.push(SampleOutputs {
            etas,
            final_logits,
            mr_gate,
            mr_sum: Some(mr_sum),
            mg,
            zhat,
            maps: bb.maps,
        });
    }
    Ok(BatchForward { samples, decisions })
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub loss: Var,
    /// Batch mean of the smoothed cross-entropy.
    pub ls: f64,
    /// Summed contrastive terms (before `α`).
    pub lcon: f64,
}

/// `mean_b L_s + α·(L_con(ẑ₃) + L_con(ẑ₄))`.
pub fn batch_loss(
    s: &mut Session,
    model: &Model,
    fwd: &BatchForward,
    labels: &[usize],
    loss_cfg: &LossConfig,
) -> Result<BatchLoss> {
    if labels.len() != fwd.samples.len() {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {}",
            labels.len(),
            fwd.samples.len()
        )));
    }
    let b = labels.len() as f64;
    let mut ls_total = None;
    for (out, &y) in fwd.samples.iter().zip(labels) {
        let (heads, betas): (Vec<Var>, Vec<f64>) = if out.etas.is_empty() {
            (vec![out.final_logits], vec![loss_cfg.betas[4]])
        } else {
            let mut h = out.etas.clone();
            h.push(out.final_logits);
            (h, loss_cfg.betas.to_vec())
        };
        let term = smoothed_ce(s, &heads, &betas, y, loss_cfg.normalized_smoothing)?;
        ls_total = Some(match ls_total {
            None => term,
            Some(t) => s.tape.add(t, term)?,
        });
    }
    let ls = s.tape.scale(ls_total.expect("non-empty batch"), 1.0 / b);
    let ls_value = s.value(ls).item();
    if !model.cfg.ablation.msts {
        return Ok(BatchLoss { loss: ls, ls: ls_value, lcon: 0.0 });
    }
    let mut lcon = None;
    for stage in [2usize, 3] {
        let rows: Vec<Var> = fwd.samples.iter().map(|o| o.zhat[stage]).collect();
        let emb = s.tape.concat_rows(&rows)?;
        let term = contrastive(s, emb, labels)?;
        lcon = Some(match lcon {
            None => term,
            Some(t) => s.tape.add(t, term)?,
        });
    }
    let lcon = lcon.expect("two stages");
    let lcon_value = s.value(lcon).item();
    let loss = total_loss(s, ls, lcon, loss_cfg.alpha)?;
    Ok(BatchLoss {
        loss,
        ls: ls_value,
        lcon: lcon_value,
    })
}

/// Argmax predictions of one sample: `η₁..η₄`, the final head, and both
/// aggregations when available.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub stages: Option<[usize; 4]>,
    pub final_class: usize,
    pub gate: Option<usize>,
    pub sum: Option<usize>,
}

pub fn predictions(s: &Session, out: &SampleOutputs) -> Prediction {
    let am = |v: Var| argmax(s.value(v).data());
    Prediction {
        stages: (out.etas.len() == 4).then(|| std::array::from_fn(|i| am(out.etas[i]))),
        final_class: am(out.final_logits),
        gate: out.mr_gate.map(am),
        sum: out.mr_sum.map(am),
    }
}

/// Evaluation-mode prediction for one image.
pub fn predict(model: &Model, store: &ParamStore, image: &Tensor) -> Result<(Prediction, Vec<Vec<usize>>)> {
    let mut s = Session::new(store, false);
    let fwd = forward_batch(&mut s, model, std::slice::from_ref(image), None)?;
    let pred = predictions(&s, &fwd.samples[0]);
    let sel = fwd.decisions.selections.into_iter().next().unwrap_or_default();
    Ok((pred, sel))
}

/// Finite-difference check of the batch objective with respect to the
/// parameters. Up to `per_param` coordinates of every trainable parameter
/// are probed; masks and selections are frozen at the unperturbed
/// forward pass.
pub fn check_param_gradients(
    model: &Model,
    store: &ParamStore,
    images: &[Tensor],
    labels: &[usize],
    loss_cfg: &LossConfig,
    per_param: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradReport> {
    use crate::tensor::rel_err;

    let (analytic, decisions) = {
        let mut s = Session::new(store, true);
        let fwd = forward_batch(&mut s, model, images, None)?;
        let bl = batch_loss(&mut s, model, &fwd, labels, loss_cfg)?;
        let g = s.tape.backward(bl.loss)?;
        (s.param_grads(&g), fwd.decisions)
    };
    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::new(st, true);
        let fwd = forward_batch(&mut s, model, images, Some(&decisions))?;
        let bl = batch_loss(&mut s, model, &fwd, labels, loss_cfg)?;
        Ok(s.value(bl.loss).item())
    };
    let mut probe = store.clone();
    let mut report = GradReport::default();
    for id in store.trainable_ids() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, per_param).into_vec()
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let e = rel_err(a, numeric);
            if e > report.worst {
                report.worst = e;
                report.worst_param = store.entry(id).name.clone();
            }
            report.probes += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    /// Largest relative error over all probes.
    pub worst: f64,
    pub worst_param: String,
    pub probes: usize,
}
