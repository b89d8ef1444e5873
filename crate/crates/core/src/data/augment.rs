//! Resize, crop and flip augmentation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side of the intermediate resized image.
pub const RESIZE_TO: usize = 72;
/// Side of the crop fed to the network.
pub const CROP: usize = 64;

/// Bilinear resize of an `[h, w, c]` image with half-pixel centers.
pub fn resize_image(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!("expected [h, w, c], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

pub fn crop(image: &Tensor, y0: usize, x0: usize, size: usize) -> Result<Tensor> {
    let shape = image.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if y0 + size > h || x0 + size > w {
        return Err(Error::Contract(format!(
            "crop {size} at ({y0}, {x0}) outside {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(size * size * c);
    for y in y0..y0 + size {
        let start = (y * w + x0) * c;
        out.extend_from_slice(&image.data()[start..start + size * c]);
    }
    Tensor::new(&[size, size, c], out)
}

pub fn hflip(image: &Tensor) -> Tensor {
    let shape = image.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(image.numel());
    for y in 0..h {
        for x in (0..w).rev() {
            let start = (y * w + x) * c;
            out.extend_from_slice(&image.data()[start..start + c]);
        }
    }
    Tensor::new(shape, out).expect("same shape")
}

/// Crop offsets and flip drawn for one training view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewParams {
    pub y0: usize,
    pub x0: usize,
    pub flip: bool,
}

pub fn draw_view(rng: &mut impl Rng, flip_p: f64) -> ViewParams {
    let max = RESIZE_TO - CROP;
    ViewParams {
        y0: rng.random_range(0..=max),
        x0: rng.random_range(0..=max),
        flip: rng.random_bool(flip_p),
    }
}

pub fn apply_view(image: &Tensor, view: ViewParams) -> Result<Tensor> {
    let big = resize_image(image, RESIZE_TO, RESIZE_TO)?;
    let out = crop(&big, view.y0, view.x0, CROP)?;
    Ok(if view.flip { hflip(&out) } else { out })
}

/// Training: resize, random crop, flip with probability 1/2. Evaluation:
/// resize and center crop.
pub fn augment(image: &Tensor, train: bool, rng: &mut impl Rng) -> Result<Tensor> {
    let view = if train {
        draw_view(rng, 0.5)
    } else {
        let m = (RESIZE_TO - CROP) / 2;
        ViewParams {
            y0: m,
            x0: m,
            flip: false,
        }
    };
    apply_view(image, view)
}
