//! Binary P6 portable pixmap I/O (8-bit, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encode an `[h, w, 3]` image with values in `[0, 1]`.
pub fn write_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Contract(format!(
            "PPM needs an [h, w, 3] image, got {shape:?}"
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", shape[1], shape[0]).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

/// Decode a P6 image into `[h, w, 3]` with values `byte / 255`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(cur.err("missing P6 magic"));
    }
    cur.pos = 2;
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(cur.err("zero image extent"));
    }
    match bytes.get(cur.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => cur.pos += 1,
        _ => return Err(cur.err("expected a single whitespace byte after maxval")),
    }
    let need = w * h * 3;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "pixel payload has {} bytes, expected {need}",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[h, w, 3], data)
}

pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, write_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_ppm(&bytes)
}
