//! Checkpoint format: a text header listing every tensor, then the
//! tensors as little-endian `f64` in header order.
//!
//! ```text
//! MDCM-CHECKPOINT 1
//! step 480 960
//! tensors 3
//! param backbone.cls_token 16 0
//! buffer msts.stage1.ctt.bn.running_mean 16 128
//! velocity backbone.cls_token 16 256
//! end
//! <payload>
//! ```
//!
//! Each entry is `kind name shape offset`: shape is comma separated (`-`
//! for a scalar) and offset is the byte offset into the payload, which
//! starts right after the `end` line. The step line holds the optimizer
//! step and the schedule length it was saved under.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "MDCM-CHECKPOINT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Param,
    Buffer,
    Velocity,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Param => "param",
            Kind::Buffer => "buffer",
            Kind::Velocity => "velocity",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub total_steps: usize,
    pub tensors: Vec<(Kind, String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, optim: &OptimState) -> Self {
        let mut tensors = Vec::new();
        for e in store.entries() {
            let kind = if e.trainable { Kind::Param } else { Kind::Buffer };
            tensors.push((kind, e.name.clone(), e.value.clone()));
        }
        for (e, v) in store.entries().iter().zip(&optim.velocity) {
            if let Some(v) = v {
                tensors.push((Kind::Velocity, e.name.clone(), v.clone()));
            }
        }
        Checkpoint {
            step: optim.step,
            total_steps: optim.total_steps,
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nstep {} {}\ntensors {}\n", self.step, self.total_steps, self.tensors.len());
        let mut offset = 0;
        for (kind, name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let shape = if shape.is_empty() { "-".to_string() } else { shape.join(",") };
            head.push_str(&format!("{} {name} {shape} {offset}\n", kind.name()));
            offset += 8 * t.numel();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, _, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut pos = 0;
        let mut next_line = |what: &str| -> Result<(usize, String)> {
            let start = pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Parse {
                    offset: start,
                    message: format!("unterminated header while reading {what}"),
                })?;
            pos = start + end + 1;
            let line = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| Error::Parse {
                offset: start,
                message: "header is not UTF-8".into(),
            })?;
            Ok((start, line.to_string()))
        };
        let bad = |offset: usize, m: String| Error::Parse { offset, message: m };

        let (off, magic) = next_line("magic")?;
        if magic != MAGIC {
            return Err(bad(off, format!("not a checkpoint (header `{magic}`)")));
        }
        let (off, step_line) = next_line("step")?;
        let nums: Vec<usize> = step_line
            .strip_prefix("step ")
            .map(|r| r.split(' ').filter_map(|v| v.parse().ok()).collect())
            .unwrap_or_default();
        if nums.len() != 2 {
            return Err(bad(off, format!("bad step line `{step_line}`")));
        }
        let (off, count_line) = next_line("tensor count")?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(off, format!("bad tensor count `{count_line}`")))?;
        let mut header = Vec::with_capacity(count);
        for _ in 0..count {
            let (off, line) = next_line("tensor entry")?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 {
                return Err(bad(off, format!("bad tensor entry `{line}`")));
            }
            let kind = match parts[0] {
                "param" => Kind::Param,
                "buffer" => Kind::Buffer,
                "velocity" => Kind::Velocity,
                k => return Err(bad(off, format!("unknown tensor kind `{k}`"))),
            };
            let shape: Vec<usize> = if parts[2] == "-" {
                Vec::new()
            } else {
                parts[2]
                    .split(',')
                    .map(|d| d.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(off, format!("bad shape `{}`", parts[2])))?
            };
            let offset: usize = parts[3]
                .parse()
                .map_err(|_| bad(off, format!("bad offset `{}`", parts[3])))?;
            header.push((kind, parts[1].to_string(), shape, offset));
        }
        let (off, end) = next_line("end marker")?;
        if end != "end" {
            return Err(bad(off, format!("expected `end`, got `{end}`")));
        }
        let payload = pos;
        let mut tensors = Vec::with_capacity(count);
        for (kind, name, shape, offset) in header {
            if payload + offset != pos {
                return Err(bad(pos, format!("offset of `{name}` is {offset}, expected {}", pos - payload)));
            }
            let n: usize = shape.iter().product();
            let need = n * 8;
            if bytes.len() < pos + need {
                return Err(bad(bytes.len(), format!("payload truncated in `{name}`")));
            }
            let data = bytes[pos..pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += need;
            tensors.push((kind, name, Tensor::new(&shape, data)?));
        }
        if pos != bytes.len() {
            return Err(bad(pos, format!("{} trailing bytes after payload", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            step: nums[0],
            total_steps: nums[1],
            tensors,
        })
    }

    /// Copy parameters and buffers into `store`, and velocities and the
    /// step counter into `optim`. Every store entry must be present with
    /// the same shape. The schedule length stays that of `optim`.
    pub fn restore(&self, store: &mut ParamStore, optim: Option<&mut OptimState>) -> Result<()> {
        let mut mismatches = Vec::new();
        let mut values = Vec::with_capacity(store.len());
        for id in store.ids().collect::<Vec<_>>() {
            let e = store.entry(id);
            let want = if e.trainable { Kind::Param } else { Kind::Buffer };
            match self.tensors.iter().find(|(k, n, _)| *k == want && *n == e.name) {
                None => mismatches.push(format!("{} missing", e.name)),
                Some((_, _, t)) if t.shape() != e.value.shape() => mismatches.push(format!(
                    "{} has shape {:?} in the checkpoint, model expects {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )),
                Some((_, _, t)) => values.push((id, t.clone())),
            }
        }
        let known: Vec<&str> = store.entries().iter().map(|e| e.name.as_str()).collect();
        for (_, n, _) in &self.tensors {
            if !known.contains(&n.as_str()) {
                mismatches.push(format!("{n} not in the model"));
            }
        }
        if !mismatches.is_empty() {
            mismatches.dedup();
            return Err(Error::Checkpoint(mismatches.join("; ")));
        }
        for (id, t) in values {
            store.set(id, t)?;
        }
        if let Some(optim) = optim {
            optim.step = self.step;
            optim.velocity = vec![None; store.len()];
            for (k, n, t) in &self.tensors {
                if *k == Kind::Velocity {
                    let id = store.find(n).expect("checked above");
                    optim.velocity[id.index()] = Some(t.clone());
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}
