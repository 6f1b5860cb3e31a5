//! Binary PGM (P5) reading and writing.
//!
//! Images are stored with maxval 65535 (two big-endian bytes per pixel),
//! masks with maxval 1 (one byte per pixel).

use std::path::Path;

use crate::error::{DecodeError, Error, Result};
use crate::grid::{Grid, Image, MaskImage};

pub const IMAGE_MAXVAL: u32 = 65535;
pub const MASK_MAXVAL: u32 = 1;

/// Encodes raw samples. Values must not exceed `maxval`.
pub fn encode_pgm(width: usize, height: usize, maxval: u32, samples: &[u32]) -> Vec<u8> {
    assert!((1..=65535).contains(&maxval), "PGM maxval out of range");
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval < 256 {
        out.extend(samples.iter().map(|&s| s as u8));
    } else {
        for &s in samples {
            out.extend_from_slice(&(s as u16).to_be_bytes());
        }
    }
    out
}

/// Decoded header plus raw samples.
#[derive(Debug)]
pub struct RawPgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u32>,
}

fn header_token(buf: &[u8], pos: &mut usize) -> Result<u32, DecodeError> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(DecodeError::Malformed("expected a number in PGM header".into()));
    }
    std::str::from_utf8(&buf[start..*pos])
        .unwrap()
        .parse()
        .map_err(|e| DecodeError::Malformed(format!("PGM header: {e}")))
}

pub fn decode_pgm(buf: &[u8]) -> Result<RawPgm, DecodeError> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(DecodeError::NotP5);
    }
    let mut pos = 2;
    let width = header_token(buf, &mut pos)? as usize;
    let height = header_token(buf, &mut pos)? as usize;
    let maxval = header_token(buf, &mut pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(DecodeError::Malformed(format!("bad PGM header {width}x{height} maxval {maxval}")));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(DecodeError::ShortPayload {
            found: 0,
            expected: width * height,
        });
    }
    pos += 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let expected = width * height * bytes_per;
    let payload = &buf[pos..];
    if payload.len() < expected {
        return Err(DecodeError::ShortPayload {
            found: payload.len(),
            expected,
        });
    }
    let samples = if bytes_per == 1 {
        payload[..expected].iter().map(|&b| b as u32).collect()
    } else {
        payload[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    };
    Ok(RawPgm {
        width,
        height,
        maxval,
        samples,
    })
}

pub fn image_to_pgm(image: &Image) -> Vec<u8> {
    let samples: Vec<u32> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * IMAGE_MAXVAL as f64).round() as u32)
        .collect();
    encode_pgm(image.width(), image.height(), IMAGE_MAXVAL, &samples)
}

pub fn mask_to_pgm(mask: &MaskImage) -> Vec<u8> {
    let samples: Vec<u32> = mask.data().iter().map(|&b| b as u32).collect();
    encode_pgm(mask.width(), mask.height(), MASK_MAXVAL, &samples)
}

fn expect_maxval(raw: &RawPgm, expected: u32) -> Result<(), DecodeError> {
    if raw.maxval != expected {
        return Err(DecodeError::MaxvalMismatch {
            found: raw.maxval,
            expected,
        });
    }
    Ok(())
}

pub fn image_from_pgm(buf: &[u8]) -> Result<Image> {
    let raw = decode_pgm(buf).map_err(Error::decode)?;
    expect_maxval(&raw, IMAGE_MAXVAL).map_err(Error::decode)?;
    let scale = IMAGE_MAXVAL as f64;
    Grid::new(raw.height, raw.width, raw.samples.iter().map(|&s| s as f64 / scale).collect())
}

pub fn mask_from_pgm(buf: &[u8]) -> Result<MaskImage> {
    let raw = decode_pgm(buf).map_err(Error::decode)?;
    expect_maxval(&raw, MASK_MAXVAL).map_err(Error::decode)?;
    Grid::new(raw.height, raw.width, raw.samples.iter().map(|&s| s != 0).collect())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_image_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &image_to_pgm(image))
}

pub fn write_mask_pgm(mask: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &mask_to_pgm(mask))
}

pub fn read_image_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    image_from_pgm(&read(path)?).map_err(|e| e.with_path(path))
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<MaskImage> {
    let path = path.as_ref();
    mask_from_pgm(&read(path)?).map_err(|e| e.with_path(path))
}
