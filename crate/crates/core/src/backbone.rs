//! Pooled-attention multi-stage vision transformer.
//!
//! Four stages of pre-norm transformer layers. The first layer of stages
//! 2–4 pools queries with stride 2 (halving the grid side) and doubles the
//! channel count; the cls token is never pooled.

use rand::Rng;

use crate::error::{Error, Result};
use crate::msca::{cls_attention_map, ActivationMap};
use crate::nn::{LayerNorm, Linear, INIT_STD};
use crate::params::{trunc_normal, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Channel count per stage; the patch embedding width is `stage_dims[0]`.
    pub stage_dims: [usize; NUM_STAGES],
    pub stage_depths: [usize; NUM_STAGES],
    pub stage_heads: [usize; NUM_STAGES],
    pub n_classes: usize,
    pub kv_pool_stride: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_h: 64,
            image_w: 64,
            channels: 3,
            patch_size: 4,
            stage_dims: [16, 32, 64, 128],
            stage_depths: [1, 1, 2, 1],
            stage_heads: [1, 2, 4, 8],
            n_classes: 8,
            kv_pool_stride: 1,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn embed_dim(&self) -> usize {
        self.stage_dims[0]
    }

    /// Patch grid of stage 1.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    /// Patch grid at the output of stage `i` (0-based).
    pub fn stage_grid(&self, i: usize) -> (usize, usize) {
        let (h, w) = self.grid();
        (h >> i, w >> i)
    }

    pub fn validate(&self) -> Result<()> {
        let o = self.patch_size;
        if o == 0 || self.image_h % o != 0 || self.image_w % o != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {o}",
                self.image_h, self.image_w
            )));
        }
        let (h, w) = self.grid();
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "patch grid {h}x{w} must have sides divisible by 8"
            )));
        }
        if self.channels == 0 || self.n_classes < 2 {
            return Err(Error::Config("need at least one channel and two classes".into()));
        }
        for i in 0..NUM_STAGES {
            if self.stage_heads[i] == 0 || self.stage_dims[i] % self.stage_heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {} dim {} not divisible by {} heads",
                    i + 1,
                    self.stage_dims[i],
                    self.stage_heads[i]
                )));
            }
            if self.stage_depths[i] == 0 {
                return Err(Error::Config(format!("stage {} has depth 0", i + 1)));
            }
            if i > 0 && self.stage_dims[i] <= self.stage_dims[i - 1] {
                return Err(Error::Config("stage dims must be strictly increasing".into()));
            }
        }
        let s = self.kv_pool_stride;
        let (h4, w4) = self.stage_grid(NUM_STAGES - 1);
        if s == 0 || h4 % s != 0 || w4 % s != 0 {
            return Err(Error::Config(format!(
                "kv pool stride {s} does not divide the final grid {h4}x{w4}"
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Token matrix with the cls token in row 0 and patch tokens in raster
/// order of `grid` after it.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub tokens: Var,
    pub grid: (usize, usize),
}

impl TokenSeq {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub seq: TokenSeq,
    /// 1-based stage number.
    pub stage_index: usize,
    pub cls_attention: ActivationMap,
}

/// Parameters of one transformer layer (attention plus MLP sub-blocks).
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    /// Present when the layer changes width; applied to the pooled residual.
    pub residual_proj: Option<Linear>,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl LayerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = mlp_ratio * dim_out;
        LayerParams {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim_in),
            qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), dim_in, 3 * dim_out, true),
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), dim_out, dim_out, true),
            residual_proj: (dim_in != dim_out).then(|| {
                Linear::new(store, rng, &format!("{name}.attn.residual"), dim_in, dim_out, true)
            }),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim_out),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim_out, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, dim_out, true),
            heads,
            dim_in,
            dim_out,
        }
    }
}

/// Pooling strides used by one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Strides {
    pub q: usize,
    pub kv: usize,
}

impl Strides {
    pub const NONE: Strides = Strides { q: 1, kv: 1 };
}

/// Multi-head pooling attention sub-block with its residual:
/// `Z' = MHPA(LN(Z)) + pool(Z)`.
///
/// Returns the new sequence and the cls query's attention over the patch
/// keys (head-averaged, cls entry dropped and renormalized).
pub fn mhpa(
    s: &mut Session,
    seq: TokenSeq,
    p: &LayerParams,
    strides: Strides,
) -> Result<(TokenSeq, ActivationMap)> {
    let (h, w) = seq.grid;
    for (name, st) in [("q", strides.q), ("kv", strides.kv)] {
        if st == 0 || h % st != 0 || w % st != 0 {
            return Err(Error::Dimension(format!(
                "{name} pool stride {st} does not divide grid {h}x{w}"
            )));
        }
    }
    let c = p.dim_out;
    let d = c / p.heads;
    let x = p.norm1.forward(s, seq.tokens)?;
    let qkv = p.qkv.forward(s, x)?;
    let q = s.tape.slice_cols(qkv, 0, c)?;
    let k = s.tape.slice_cols(qkv, c, c)?;
    let v = s.tape.slice_cols(qkv, 2 * c, c)?;
    let q = s.tape.pool_tokens(q, h, w, strides.q)?;
    let k = s.tape.pool_tokens(k, h, w, strides.kv)?;
    let v = s.tape.pool_tokens(v, h, w, strides.kv)?;
    let kv_grid = (h / strides.kv, w / strides.kv);
    let out_grid = (h / strides.q, w / strides.q);

    let scale = 1.0 / (d as f64).sqrt();
    let n_keys = kv_grid.0 * kv_grid.1 + 1;
    let mut cls_row = vec![0.0; n_keys];
    let mut head_outs = Vec::with_capacity(p.heads);
    for head in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                s.tape.slice_cols(q, head * d, d)?,
                s.tape.slice_cols(k, head * d, d)?,
                s.tape.slice_cols(v, head * d, d)?,
            )
        };
        let scores = s.tape.matmul_nt(qh, kh)?;
        let scores = s.tape.scale(scores, scale);
        let attn = s.tape.softmax(scores);
        for (acc, a) in cls_row.iter_mut().zip(s.value(attn).row(0)) {
            *acc += a / p.heads as f64;
        }
        head_outs.push(s.tape.matmul(attn, vh)?);
    }
    let merged = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        s.tape.concat_cols(&head_outs)?
    };
    let attn_out = p.proj.forward(s, merged)?;

    let mut residual = s.tape.pool_tokens(seq.tokens, h, w, strides.q)?;
    if let Some(rp) = &p.residual_proj {
        residual = rp.forward(s, residual)?;
    }
    let tokens = s.tape.add(attn_out, residual)?;
    let map = cls_attention_map(&cls_row, kv_grid)?;
    Ok((
        TokenSeq {
            tokens,
            grid: out_grid,
        },
        map,
    ))
}

/// Full layer: attention sub-block then `Z = MLP(LN(Z')) + Z'`.
pub fn transformer_layer(
    s: &mut Session,
    seq: TokenSeq,
    p: &LayerParams,
    strides: Strides,
) -> Result<(TokenSeq, ActivationMap)> {
    let (seq, map) = mhpa(s, seq, p, strides)?;
    let x = p.norm2.forward(s, seq.tokens)?;
    let hdn = p.fc1.forward(s, x)?;
    let hdn = s.tape.gelu(hdn);
    let y = p.fc2.forward(s, hdn)?;
    let tokens = s.tape.add(y, seq.tokens)?;
    Ok((
        TokenSeq {
            tokens,
            grid: seq.grid,
        },
        map,
    ))
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    /// `stages[i][l]` is layer `l` of stage `i + 1`.
    pub stages: Vec<Vec<LayerParams>>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let o = cfg.patch_size;
        let dim = cfg.embed_dim();
        let (gh, gw) = cfg.grid();
        let patch = Linear::new(store, rng, "backbone.patch_embed", o * o * cfg.channels, dim, true);
        let cls = store.add("backbone.cls_token", trunc_normal(rng, &[dim], 1.0));
        let pos = store.add("backbone.pos_embed", trunc_normal(rng, &[gh * gw + 1, dim], INIT_STD));
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut prev = dim;
        for i in 0..NUM_STAGES {
            let mut layers = Vec::with_capacity(cfg.stage_depths[i]);
            for l in 0..cfg.stage_depths[i] {
                let dim_in = if l == 0 { prev } else { cfg.stage_dims[i] };
                layers.push(LayerParams::new(
                    store,
                    rng,
                    &format!("backbone.stage{}.layer{l}", i + 1),
                    dim_in,
                    cfg.stage_dims[i],
                    cfg.stage_heads[i],
                    cfg.mlp_ratio,
                ));
            }
            prev = cfg.stage_dims[i];
            stages.push(layers);
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            patch,
            cls,
            pos,
            stages,
        })
    }

    /// Strides of layer `l` in 0-based stage `i`.
    pub fn strides(&self, i: usize, l: usize) -> Strides {
        Strides {
            q: if i > 0 && l == 0 { 2 } else { 1 },
            kv: self.cfg.kv_pool_stride,
        }
    }
}

/// Pixel normalization applied before the patch embedding.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Rearrange an `h×w×c` image into normalized patch rows of length
/// `o·o·c`, raster order over the patch grid, `(row, col, channel)` order
/// inside a patch.
pub fn image_to_patches(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let expect = [cfg.image_h, cfg.image_w, cfg.channels];
    if image.shape() != expect {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured {expect:?}",
            image.shape()
        )));
    }
    let (o, c, w) = (cfg.patch_size, cfg.channels, cfg.image_w);
    let (gh, gw) = cfg.grid();
    let mut data = Vec::with_capacity(image.numel());
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..o {
                let start = ((pr * o + y) * w + pc * o) * c;
                data.extend(
                    image.data()[start..start + o * c]
                        .iter()
                        .map(|v| (v - INPUT_MEAN) / INPUT_STD),
                );
            }
        }
    }
    Tensor::new(&[gh * gw, o * o * c], data)
}

/// `Z = [cls, patches·E] + E_pos`.
pub fn patch_embed(s: &mut Session, image: &Tensor, bb: &Backbone) -> Result<TokenSeq> {
    let patches = image_to_patches(image, &bb.cfg)?;
    let patches = s.constant(patches);
    let emb = bb.patch.forward(s, patches)?;
    let cls = s.param(bb.cls);
    let z = s.tape.concat_rows(&[cls, emb])?;
    let pos = s.param(bb.pos);
    let tokens = s.tape.add(z, pos)?;
    Ok(TokenSeq {
        tokens,
        grid: bb.cfg.grid(),
    })
}

/// Run all four stages. `between` is called after the last layer of every
/// stage with the stage output and may replace the tokens handed to the
/// next stage (cue activation hooks in here).
pub fn forward_stages<F>(
    s: &mut Session,
    image: &Tensor,
    bb: &Backbone,
    mut between: F,
) -> Result<Vec<StageOutput>>
where
    F: FnMut(&mut Session, &StageOutput) -> Result<Option<TokenSeq>>,
{
    let mut seq = patch_embed(s, image, bb)?;
    let mut outputs = Vec::with_capacity(NUM_STAGES);
    for (i, layers) in bb.stages.iter().enumerate() {
        let mut last_map = None;
        for (l, layer) in layers.iter().enumerate() {
            let (next, map) = transformer_layer(s, seq, layer, bb.strides(i, l))?;
            seq = next;
            last_map = Some(map);
        }
        let out = StageOutput {
            seq,
            stage_index: i + 1,
            cls_attention: last_map.expect("stage depth validated positive"),
        };
        if let Some(replaced) = between(s, &out)? {
            seq = replaced;
        }
        outputs.push(StageOutput {
            seq,
            ..out
        });
    }
    Ok(outputs)
}
