//! Procedural fine-grained dataset: a shared elliptical body whose class is
//! carried only by a small 3×3 color glyph, at three object scales, over a
//! cluttered background.

pub mod augment;
pub mod manifest;
pub mod ppm;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;

/// Saturated glyph colors; bodies and clutter stay in a muted range.
pub const PALETTE: [[f64; 3]; 4] = [
    [0.95, 0.1, 0.1],
    [0.1, 0.85, 0.15],
    [0.1, 0.25, 0.95],
    [0.95, 0.85, 0.1],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bucket {
    Small,
    Medium,
    Large,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Small, Bucket::Medium, Bucket::Large];

    /// Object side as a fraction of the image side: `[lo, hi)`, with the
    /// large bucket closed at `hi`.
    pub fn fraction_range(self) -> (f64, f64) {
        match self {
            Bucket::Small => (0.15, 0.3),
            Bucket::Medium => (0.3, 0.55),
            Bucket::Large => (0.55, 0.85),
        }
    }

    pub fn contains(self, fraction: f64) -> bool {
        let (lo, hi) = self.fraction_range();
        fraction >= lo && (fraction < hi || (self == Bucket::Large && fraction <= hi))
    }

    pub fn from_fraction(fraction: f64) -> Option<Bucket> {
        Bucket::ALL.into_iter().find(|b| b.contains(fraction))
    }

    /// Integer side lengths (pixels) whose fraction of `image` falls in the
    /// bucket.
    pub fn side_range(self, image: usize) -> (usize, usize) {
        let sides: Vec<usize> = (1..=image)
            .filter(|&s| self.contains(s as f64 / image as f64))
            .collect();
        (sides[0], sides[sides.len() - 1])
    }

    pub fn code(self) -> char {
        match self {
            Bucket::Small => 'S',
            Bucket::Medium => 'M',
            Bucket::Large => 'L',
        }
    }

    pub fn from_code(c: &str) -> Option<Bucket> {
        match c {
            "S" => Some(Bucket::Small),
            "M" => Some(Bucket::Medium),
            "L" => Some(Bucket::Large),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Small => "small",
            Bucket::Medium => "medium",
            Bucket::Large => "large",
        }
    }
}

/// Pixel rectangle `(x, y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub image_size: usize,
    /// Expected background rectangles per image is `12 · density`; noise
    /// standard deviation is `0.04 · density`.
    pub clutter_density: f64,
    /// Glyph cell side as a fraction of the object side.
    pub glyph_cell: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 8,
            image_size: IMAGE_SIZE,
            clutter_density: 0.5,
            glyph_cell: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let max = glyph_patterns().len();
        if self.n_classes < 2 || self.n_classes > max {
            return Err(Error::Config(format!(
                "data.classes must be in 2..={max}, got {}",
                self.n_classes
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "data.image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if !(0.0..=4.0).contains(&self.clutter_density) {
            return Err(Error::Config(format!(
                "data.clutter_density {} outside [0, 4]",
                self.clutter_density
            )));
        }
        if !(self.glyph_cell > 0.0 && self.glyph_cell <= 0.25) {
            return Err(Error::Config(format!(
                "data.glyph_cell {} outside (0, 0.25]",
                self.glyph_cell
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[size, size, 3]`, values in `[0, 1]` on the 1/255 lattice.
    pub image: Tensor,
    pub label: usize,
    pub bucket: Bucket,
    pub bbox: Rect,
    pub glyph: Rect,
}

/// Glyph color indices `(corner, edge, center)`; mirror symmetric so that
/// horizontal flips keep the class. The first twelve patterns have distinct
/// `(center, absent color)` pairs; the last twelve swap corner and edge
/// colors of the first twelve.
pub fn glyph_patterns() -> Vec<[usize; 3]> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for c in 0..4 {
        for missing in 0..4 {
            if missing == c {
                continue;
            }
            let rest: Vec<usize> = (0..4).filter(|&k| k != c && k != missing).collect();
            first.push([rest[0], rest[1], c]);
            second.push([rest[1], rest[0], c]);
        }
    }
    first.extend(second);
    first
}

/// Color of glyph cell `(r, c)` for a class.
pub fn glyph_cell_color(class_id: usize, r: usize, c: usize) -> [f64; 3] {
    let [o, e, center] = glyph_patterns()[class_id];
    let idx = match (r == 1, c == 1) {
        (true, true) => center,
        (false, false) => o,
        _ => e,
    };
    PALETTE[idx]
}

fn muted(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.random_range(0.25..0.7),
        rng.random_range(0.25..0.7),
        rng.random_range(0.25..0.7),
    ]
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render one sample. Every random draw is made in the same order
/// regardless of `class_id`, so two classes rendered from the same stream
/// differ only inside the glyph.
pub fn generate_sample(spec: &SynthSpec, class_id: usize, bucket: Bucket, rng: &mut impl Rng) -> Result<Sample> {
    if class_id >= spec.n_classes {
        return Err(Error::Contract(format!(
            "class {class_id} outside {} classes",
            spec.n_classes
        )));
    }
    let size = spec.image_size;
    let mut img = vec![0.0; size * size * CHANNELS];
    let background = muted(rng);
    for px in img.chunks_mut(CHANNELS) {
        px.copy_from_slice(&background);
    }

    let n_rects = (spec.clutter_density * 12.0).round() as usize;
    for _ in 0..n_rects {
        let w = rng.random_range(3..=size / 4);
        let h = rng.random_range(3..=size / 4);
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        let color = muted(rng);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img[(y * size + x) * CHANNELS..][..CHANNELS].copy_from_slice(&color);
            }
        }
    }

    let (lo, hi) = bucket.side_range(size);
    let side = rng.random_range(lo..=hi);
    let bx = rng.random_range(0..=size - side);
    let by = rng.random_range(0..=size - side);
    let aspect = rng.random_range(0.7..1.0);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let body = muted(rng);
    let half = side as f64 / 2.0;
    let (cx, cy) = (bx as f64 + half, by as f64 + half);
    let (a, b) = (half, half * aspect);
    let (sin, cos) = theta.sin_cos();
    for y in by..by + side {
        for x in bx..bx + side {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                img[(y * size + x) * CHANNELS..][..CHANNELS].copy_from_slice(&body);
            }
        }
    }

    let cell = ((spec.glyph_cell * side as f64).round() as usize).max(2);
    let gside = 3 * cell;
    let gx = (cx - gside as f64 / 2.0).round() as usize;
    let gy = (cy - gside as f64 / 2.0).round() as usize;
    let glyph = Rect {
        x: gx,
        y: gy,
        w: gside,
        h: gside,
    };
    for r in 0..3 {
        for c in 0..3 {
            let color = glyph_cell_color(class_id, r, c);
            for y in gy + r * cell..gy + (r + 1) * cell {
                for x in gx + c * cell..gx + (c + 1) * cell {
                    img[(y * size + x) * CHANNELS..][..CHANNELS].copy_from_slice(&color);
                }
            }
        }
    }

    let sigma = 0.04 * spec.clutter_density;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        for v in img.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    img.iter_mut().for_each(|v| *v = quantize(*v));

    let bbox = Rect {
        x: bx,
        y: by,
        w: side,
        h: side,
    };
    debug_assert_eq!(Bucket::from_fraction(side as f64 / size as f64), Some(bucket));
    Ok(Sample {
        image: Tensor::new(&[size, size, CHANNELS], img)?,
        label: class_id,
        bucket,
        bbox,
        glyph,
    })
}
