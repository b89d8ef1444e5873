//! Balanced train/test splits, their on-disk layout and manifests.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! dataset.meta        key = value generation parameters
//! train.tsv test.tsv  <path>\t<label>\t<S|M|L>\t<x> <y> <w> <h>
//! train/NNNNNN.ppm test/NNNNNN.ppm
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::ppm::{load_ppm, write_ppm};
use super::{generate_sample, Bucket, Rect, Sample, SynthSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 40,
        }
    }
}

/// Class and bucket of sample `index`: classes cycle fastest, then buckets,
/// so per-class bucket counts differ by at most one.
pub fn slot(index: usize, n_classes: usize) -> (usize, Bucket) {
    (index % n_classes, Bucket::ALL[(index / n_classes) % 3])
}

/// Random stream of one sample; train and test streams never overlap.
pub fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream_base() + index as u64);
    rng
}

pub fn generate_split(spec: &SynthSpec, split: Split, count: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let (class, bucket) = slot(i, spec.n_classes);
            generate_sample(spec, class, bucket, &mut sample_rng(seed, split, i))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub bucket: Bucket,
    pub bbox: Rect,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{} {} {} {}",
            e.path,
            e.label,
            e.bucket.code(),
            e.bbox.x,
            e.bbox.y,
            e.bbox.w,
            e.bbox.h
        );
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        let bad = |m: &str| Error::Parse {
            offset,
            message: format!("manifest line `{trimmed}`: {m}"),
        };
        if !trimmed.is_empty() {
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let label = fields[1].parse().map_err(|_| bad("bad label"))?;
            let bucket = Bucket::from_code(fields[2]).ok_or_else(|| bad("bad bucket"))?;
            let nums: Vec<usize> = fields[3]
                .split(' ')
                .map(|v| v.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad bbox"))?;
            if nums.len() != 4 {
                return Err(bad("bbox needs 4 numbers"));
            }
            out.push(ManifestEntry {
                path: fields[0].to_string(),
                label,
                bucket,
                bbox: Rect {
                    x: nums[0],
                    y: nums[1],
                    w: nums[2],
                    h: nums[3],
                },
            });
        }
        offset += line.len();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub spec: SynthSpec,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl DatasetMeta {
    fn render(&self) -> String {
        format!(
            "seed = {}\nclasses = {}\nimage_size = {}\nclutter_density = {}\nglyph_cell = {}\ntrain = {}\ntest = {}\n",
            self.seed,
            self.spec.n_classes,
            self.spec.image_size,
            self.spec.clutter_density,
            self.spec.glyph_cell,
            self.n_train,
            self.n_test
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let mut meta = DatasetMeta {
            spec: SynthSpec::default(),
            seed: 0,
            n_train: 0,
            n_test: 0,
        };
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let t = line.trim();
            if !t.is_empty() {
                let bad = |m: String| Error::Parse { offset, message: m };
                let (k, v) = t.split_once('=').ok_or_else(|| bad(format!("expected key = value: `{t}`")))?;
                let (k, v) = (k.trim(), v.trim());
                let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number for {k}: `{v}`")));
                let int = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("bad integer for {k}: `{v}`")));
                match k {
                    "seed" => meta.seed = int(v)?,
                    "classes" => meta.spec.n_classes = int(v)? as usize,
                    "image_size" => meta.spec.image_size = int(v)? as usize,
                    "clutter_density" => meta.spec.clutter_density = num(v)?,
                    "glyph_cell" => meta.spec.glyph_cell = num(v)?,
                    "train" => meta.n_train = int(v)? as usize,
                    "test" => meta.n_test = int(v)? as usize,
                    _ => return Err(bad(format!("unknown key `{k}`"))),
                }
            }
            offset += line.len();
        }
        Ok(meta)
    }
}

pub const META_FILE: &str = "dataset.meta";

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.tsv", split.name()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generate and write a dataset; returns the hex SHA-256 content hash.
pub fn build_split(dir: &Path, meta: &DatasetMeta) -> Result<String> {
    meta.spec.validate()?;
    if meta.n_train < meta.spec.n_classes || meta.n_test < meta.spec.n_classes {
        return Err(Error::Config(format!(
            "train and test counts must be at least the class count {}",
            meta.spec.n_classes
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(META_FILE), meta.render().as_bytes())?;
    for (split, count) in [(Split::Train, meta.n_train), (Split::Test, meta.n_test)] {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let (class, bucket) = slot(i, meta.spec.n_classes);
            let sample = generate_sample(&meta.spec, class, bucket, &mut sample_rng(meta.seed, split, i))?;
            let rel = format!("{}/{i:06}.ppm", split.name());
            write_file(&dir.join(&rel), &write_ppm(&sample.image)?)?;
            entries.push(ManifestEntry {
                path: rel,
                label: sample.label,
                bucket: sample.bucket,
                bbox: sample.bbox,
            });
        }
        write_file(&manifest_path(dir, split), format_manifest(&entries).as_bytes())?;
    }
    content_hash(dir)
}

/// SHA-256 over the metadata, both manifests and every listed image, in
/// manifest order.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    h.update(read(&dir.join(META_FILE))?);
    for split in [Split::Train, Split::Test] {
        let mpath = manifest_path(dir, split);
        let text = read(&mpath)?;
        h.update(&text);
        let entries = parse_manifest(&String::from_utf8_lossy(&text))?;
        for e in entries {
            h.update(read(&dir.join(&e.path))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let p = dir.join(META_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    DatasetMeta::parse(&text)
}

/// One loaded split: images in manifest order with their entries.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<Tensor>,
}

impl LoadedSplit {
    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn from_samples(samples: Vec<Sample>, split: Split) -> Self {
        let mut entries = Vec::with_capacity(samples.len());
        let mut images = Vec::with_capacity(samples.len());
        for (i, s) in samples.into_iter().enumerate() {
            entries.push(ManifestEntry {
                path: format!("{}/{i:06}.ppm", split.name()),
                label: s.label,
                bucket: s.bucket,
                bbox: s.bbox,
            });
            images.push(s.image);
        }
        LoadedSplit { entries, images }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_split(dir: &Path, split: Split) -> Result<LoadedSplit> {
    let mpath = manifest_path(dir, split);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries = parse_manifest(&text)?;
    let images = entries
        .iter()
        .map(|e| load_ppm(&dir.join(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSplit { entries, images })
}
