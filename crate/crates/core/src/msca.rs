//! Multi-scale cue activation.
//!
//! The cls query's attention over patch keys is read as a token-importance
//! map, averaged with the (resized) maps of earlier stages, turned into a
//! z-score mask and applied multiplicatively to the patch tokens. The mask
//! is a measurement: it carries no gradient.

use crate::backbone::TokenSeq;
use crate::error::{Error, Result};
use crate::params::Session;

/// Importance over the patch tokens of a `grid`, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub values: Vec<f64>,
    pub grid: (usize, usize),
}

/// Signed per-token weights from the z-score of an [`ActivationMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMask {
    pub weights: Vec<f64>,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MscaConfig {
    pub gamma: f64,
    /// Lower clamp on the multiplicative factor `1 + m`.
    pub min_factor: f64,
}

impl Default for MscaConfig {
    fn default() -> Self {
        MscaConfig {
            gamma: 0.3,
            min_factor: 0.05,
        }
    }
}

/// Build an activation map from a cls attention row. The row may include
/// the cls self-attention entry first (length `N + 1`), which is dropped.
pub fn cls_attention_map(attn_row: &[f64], grid: (usize, usize)) -> Result<ActivationMap> {
    let n = grid.0 * grid.1;
    let patches = if attn_row.len() == n + 1 {
        &attn_row[1..]
    } else if attn_row.len() == n {
        attn_row
    } else {
        return Err(Error::Dimension(format!(
            "attention row of length {} does not fit a {}x{} grid",
            attn_row.len(),
            grid.0,
            grid.1
        )));
    };
    let total: f64 = patches.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract(
            "attention row has no mass on patch keys".into(),
        ));
    }
    Ok(ActivationMap {
        values: patches.iter().map(|v| v / total).collect(),
        grid,
    })
}

fn align_corner_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len <= 1 || src_len <= 1 {
        0.0
    } else {
        dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

/// Corner-aligned bilinear resize of a row-major `from` grid to `to`.
pub fn resize_bilinear(values: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let (h, w) = from;
    let mut out = Vec::with_capacity(to.0 * to.1);
    for y in 0..to.0 {
        let sy = align_corner_coord(y, h, to.0);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..to.1 {
            let sx = align_corner_coord(x, w, to.1);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn normalized(mut values: Vec<f64>, grid: (usize, usize)) -> Result<ActivationMap> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract("activation map has no mass".into()));
    }
    values.iter_mut().for_each(|v| *v /= total);
    Ok(ActivationMap { values, grid })
}

/// Resize a map onto another grid and renormalize it.
pub fn resize_map(map: &ActivationMap, grid: (usize, usize)) -> Result<ActivationMap> {
    if map.grid == grid {
        return Ok(map.clone());
    }
    normalized(resize_bilinear(&map.values, map.grid, grid), grid)
}

/// Average `current` with every map in `history` resized onto its grid.
pub fn accumulate_maps(history: &[ActivationMap], current: &ActivationMap) -> Result<ActivationMap> {
    if history.is_empty() {
        return Ok(current.clone());
    }
    let mut acc = current.values.clone();
    for m in history {
        if m.grid.0 < current.grid.0 || m.grid.1 < current.grid.1 {
            return Err(Error::Dimension(format!(
                "history map grid {:?} is coarser than current grid {:?}",
                m.grid, current.grid
            )));
        }
        let resized = resize_bilinear(&m.values, m.grid, current.grid);
        acc.iter_mut().zip(&resized).for_each(|(a, r)| *a += r);
    }
    let k = (history.len() + 1) as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    normalized(acc, current.grid)
}

/// `m_k = (a_k − mean) / std^γ` with the population standard deviation.
/// A constant map gives the zero mask.
pub fn scale_mask(map: &ActivationMap, gamma: f64) -> Result<ScaleMask> {
    let a = &map.values;
    if a.len() < 2 {
        return Err(Error::Contract(format!(
            "scale mask needs at least 2 tokens, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale_ref = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let weights = if std <= 1e-12 * scale_ref || std == 0.0 {
        vec![0.0; a.len()]
    } else {
        let denom = std.powf(gamma);
        a.iter().map(|v| (v - mean) / denom).collect()
    };
    Ok(ScaleMask { weights, gamma })
}

/// Multiply patch token `k` by `max(1 + m_k, min_factor)`; the cls token
/// is left alone and no gradient reaches the mask.
pub fn apply_mask(
    s: &mut Session,
    seq: TokenSeq,
    mask: &ScaleMask,
    min_factor: f64,
) -> Result<TokenSeq> {
    let n = seq.num_patches();
    if mask.weights.len() != n {
        return Err(Error::Dimension(format!(
            "mask of length {} applied to {n} patch tokens",
            mask.weights.len()
        )));
    }
    let mut factors = Vec::with_capacity(n + 1);
    factors.push(1.0);
    factors.extend(mask.weights.iter().map(|m| (1.0 + m).max(min_factor)));
    let tokens = s.tape.scale_rows(seq.tokens, factors)?;
    Ok(TokenSeq {
        tokens,
        grid: seq.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[f64], grid: (usize, usize)) -> ActivationMap {
        ActivationMap {
            values: values.to_vec(),
            grid,
        }
    }

    #[test]
    fn uniform_row_gives_uniform_map() {
        let m = cls_attention_map(&[0.25; 4], (2, 2)).unwrap();
        assert_eq!(m.values, vec![0.25; 4]);
    }

    #[test]
    fn cls_entry_dropped_and_renormalized() {
        let m = cls_attention_map(&[0.5, 0.25, 0.25], (1, 2)).unwrap();
        assert_eq!(m.values, vec![0.5, 0.5]);
    }

    #[test]
    fn all_zero_row_is_rejected() {
        assert!(matches!(
            cls_attention_map(&[0.0; 5], (2, 2)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            cls_attention_map(&[0.1; 7], (2, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn accumulate_empty_history_is_identity() {
        let cur = map(&[0.1, 0.2, 0.3, 0.4], (2, 2));
        assert_eq!(accumulate_maps(&[], &cur).unwrap(), cur);
    }

    #[test]
    fn accumulate_uniform_maps_stays_uniform() {
        let hist = map(&[1.0 / 16.0; 16], (4, 4));
        let cur = map(&[0.25; 4], (2, 2));
        let out = accumulate_maps(&[hist], &cur).unwrap();
        for v in out.values {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn accumulate_rejects_coarser_history() {
        let hist = map(&[0.5, 0.5], (1, 2));
        let cur = map(&[0.25; 4], (2, 2));
        assert!(accumulate_maps(&[hist], &cur).is_err());
    }

    #[test]
    fn degenerate_map_gives_zero_mask() {
        let m = scale_mask(&map(&[0.25; 4], (2, 2)), 0.3).unwrap();
        assert_eq!(m.weights, vec![0.0; 4]);
    }

    #[test]
    fn scale_mask_hand_values() {
        // mean 1/3, population std sqrt(0.062/0.9)
        let m = scale_mask(&map(&[0.1, 0.2, 0.7], (1, 3)), 1.0).unwrap();
        let mean = 1.0 / 3.0;
        let std = (((0.1 - mean) * (0.1f64 - mean)
            + (0.2 - mean) * (0.2f64 - mean)
            + (0.7 - mean) * (0.7f64 - mean))
            / 3.0)
            .sqrt();
        assert!((std - 0.262467).abs() < 1e-6);
        let expect = [-0.8891, -0.5080, 1.3970];
        for (w, e) in m.weights.iter().zip(expect) {
            assert!((w - e).abs() < 1e-3, "{w} vs {e}");
        }
    }

    #[test]
    fn gamma_zero_only_centers() {
        let a = [0.1, 0.2, 0.7];
        let m = scale_mask(&map(&a, (1, 3)), 0.0).unwrap();
        let mean = a.iter().sum::<f64>() / 3.0;
        for (w, v) in m.weights.iter().zip(a) {
            assert_eq!(*w, v - mean);
        }
    }

    #[test]
    fn single_token_mask_is_rejected() {
        assert!(scale_mask(&map(&[1.0], (1, 1)), 0.3).is_err());
    }
}
