//! Binary greyscale PGM (`P5`, maxval 255).
//!
//! Images are quantized as `round(v·255)`; masks are stored as 0 / 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

pub fn encode(width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    debug_assert_eq!(payload.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

/// Parses a `P5` file with maxval 255, returning `(width, height, pixels)`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(path, "missing P5 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, format!("malformed header field {k}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(path, format!("header field {k} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(path, "header not terminated by whitespace")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(path, "image size overflows"))?;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("{width}×{height} image needs {expected} payload bytes, found {}", payload.len()),
        ));
    }
    Ok((width, height, payload.to_vec()))
}

fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes a `1×1×H×W` image with values in `[0, 1]`.
pub fn write_image(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.batch() != 1 || s.channels() != 1 {
        return Err(Error::dim("write_image", "batch/channels (axes 0,1)", format!("expected 1×1×H×W, got {s}")));
    }
    let payload: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    fs::write(path, encode(s.width(), s.height(), &payload)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let (w, h, px) = read(path)?;
    Tensor::from_vec(
        Shape::new(1, 1, h, w),
        px.into_iter().map(|b| f64::from(b) / 255.0).collect(),
    )
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let payload: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    fs::write(path, encode(mask.width(), mask.height(), &payload)).map_err(|e| Error::io(path, e))
}

/// Reads a mask; every pixel must be exactly 0 or 255.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (w, h, px) = read(path)?;
    let bits = px
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::format(path, format!("mask pixel value {other} is not 0 or 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(h, w, bits)
}
