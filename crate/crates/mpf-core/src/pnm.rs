//! Binary portable pixmap (P6) and graymap (P5) reading and writing.
//!
//! Images are stored as P6 with maxval 255; label maps as P5 with maxval 255,
//! where 255 is the void label. Both are trivially parseable and auditable
//! with a hex dump. Readers insist on maxval 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Precision, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    /// P6: 3 bytes per pixel.
    Pixmap,
    /// P5: 1 byte per pixel.
    Graymap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PnmHeader {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderParser<'a> {
    fn skip_separators(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => {
                    return Err(Error::format(self.path, "truncated header"));
                }
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators()?;
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(self.path, "empty header token"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::format(self.path, format!("bad {what} '{}'", String::from_utf8_lossy(tok)))
            })
    }
}

fn parse_header<'a>(bytes: &'a [u8], path: &'a Path) -> Result<(PnmHeader, usize)> {
    let mut p = HeaderParser { bytes, pos: 0, path };
    let magic = p.token()?;
    let kind = match magic {
        b"P6" => PnmKind::Pixmap,
        b"P5" => PnmKind::Graymap,
        other => {
            return Err(Error::format(
                path,
                format!("bad magic '{}' (want P5 or P6)", String::from_utf8_lossy(other)),
            ));
        }
    };
    let width = p.number("width")?;
    let height = p.number("height")?;
    let maxval = p.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval} (want 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero width or height"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(p.pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((
            PnmHeader { kind, width, height },
            p.pos + 1,
        )),
        _ => Err(Error::format(path, "missing separator before pixel data")),
    }
}

/// Reads only the header; used for cheap manifest validation.
pub fn read_header(path: &Path) -> Result<PnmHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes, path).map(|(h, _)| h)
}

/// Reads a P6 pixmap into a `(1, 3, h, w)` double-precision tensor with
/// values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, offset) = parse_header(&bytes, path)?;
    if header.kind != PnmKind::Pixmap {
        return Err(Error::format(path, "expected a P6 pixmap"));
    }
    let n = header.width * header.height;
    let payload = &bytes[offset..];
    if payload.len() != 3 * n {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), 3 * n),
        ));
    }
    let shape = Shape::new(1, 3, header.height, header.width)?;
    let mut data = vec![0.0; shape.numel()];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = payload[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(shape, Precision::Double, data)
}

/// Writes a `(1, 1|3, h, w)` tensor as a P6 pixmap, clamping values to
/// `[0, 1]` and rounding to 8 bits. Single-channel tensors are replicated
/// to gray.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.batch != 1 || (s.channels != 1 && s.channels != 3) {
        return Err(Error::InvalidArgument(format!(
            "write_image wants (1,1|3,h,w), got {s}"
        )));
    }
    let n = s.height * s.width;
    let mut payload = Vec::with_capacity(3 * n);
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..n {
        for c in 0..3 {
            let ch = if s.channels == 3 { c } else { 0 };
            payload.push(byte(image.data()[ch * n + i]));
        }
    }
    let mut out = Vec::new();
    write!(out, "P6\n{} {}\n255\n", s.width, s.height).expect("in-memory write");
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a P5 graymap as a label map (255 = void).
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, offset) = parse_header(&bytes, path)?;
    if header.kind != PnmKind::Graymap {
        return Err(Error::format(path, "expected a P5 graymap"));
    }
    let n = header.width * header.height;
    let payload = &bytes[offset..];
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {n}", payload.len()),
        ));
    }
    LabelMap::new(header.height, header.width, payload.iter().map(|b| *b as u16).collect())
}

/// Writes a label map as a P5 graymap; every label must fit in a byte.
pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut payload = Vec::with_capacity(labels.data.len());
    for &l in &labels.data {
        if l > 255 {
            return Err(Error::InvalidArgument(format!("label {l} does not fit in a graymap byte")));
        }
        payload.push(l as u8);
    }
    let mut out = Vec::new();
    write!(out, "P5\n{} {}\n255\n", labels.width, labels.height).expect("in-memory write");
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
