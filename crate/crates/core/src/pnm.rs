//! Binary PPM (P6) and PGM (P5) reading and writing, maxval 255.
//!
//! Images round-trip bit-exactly: pixel bytes are written verbatim and the
//! header uses a fixed single-space layout.

use crate::tensor::Tensor;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed {kind} file {path}: {detail}")]
    Malformed { kind: &'static str, path: String, detail: String },
}

fn io_err(path: &Path, source: io::Error) -> PnmError {
    PnmError::Io { path: path.display().to_string(), source }
}

/// Writes a 3HW tensor with values in [0,1] as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), PnmError> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "write_ppm expects 3HW, got {s:?}");
    let (h, w) = (s[1], s[2]);
    let mut buf = Vec::with_capacity(20 + 3 * h * w);
    write!(buf, "P6 {w} {h} 255\n").unwrap();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push(quantize(d[c * h * w + y * w + x]));
            }
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Writes a 1HW (or HW) tensor with values in [0,1] as binary PGM (P5).
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<(), PnmError> {
    let s = map.shape();
    let (h, w) = match s {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        _ => panic!("write_pgm expects 1HW or HW, got {s:?}"),
    };
    let mut buf = Vec::with_capacity(20 + h * w);
    write!(buf, "P5 {w} {h} 255\n").unwrap();
    for &v in map.data() {
        buf.push(quantize(v));
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Reads a binary PPM into a 3HW tensor with values in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor, PnmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, offset) = parse_header(&bytes, "P6", path)?;
    let need = 3 * w * h;
    let pixels = bytes
        .get(offset..offset + need)
        .ok_or_else(|| malformed("PPM", path, "truncated pixel data"))?;
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = pixels[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// Reads a binary PGM into a 1HW tensor with values in [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor, PnmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, offset) = parse_header(&bytes, "P5", path)?;
    let pixels = bytes
        .get(offset..offset + w * h)
        .ok_or_else(|| malformed("PGM", path, "truncated pixel data"))?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![1, h, w], data))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn malformed(kind: &'static str, path: &Path, detail: &str) -> PnmError {
    PnmError::Malformed { kind, path: path.display().to_string(), detail: detail.to_string() }
}

/// Parses "magic W H MAXVAL" with arbitrary whitespace and # comments,
/// returning (w, h, pixel data offset).
fn parse_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize), PnmError> {
    let kind = if magic == "P6" { "PPM" } else { "PGM" };
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(malformed(kind, path, "bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(malformed(kind, path, "missing header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| malformed(kind, path, "bad header field"))?;
    }
    if fields[2] != 255 {
        return Err(malformed(kind, path, "maxval must be 255"));
    }
    // exactly one whitespace byte separates header from pixel data
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(malformed(kind, path, "missing header terminator"));
    }
    Ok((fields[0], fields[1], pos + 1))
}
