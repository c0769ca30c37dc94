//! 8-bit raster output (binary PGM / PPM).

use std::path::Path;

use crate::binio::write_file;
use crate::error::{DdnError, Result};

/// Maps a unit-interval intensity to 0..=255 with round-half-up.
pub fn quantize_unit(v: f64) -> u8 {
    let q = (255.0 * v + 0.5).floor();
    q.clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    /// Interleaved R, G, B.
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pgm())
    }
}

impl Rgb8 {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_ppm())
    }
}

/// Parses a binary P5 file as written by [`Gray8::to_pgm`].
pub fn parse_pgm(bytes: &[u8]) -> Result<Gray8> {
    let (header, body) = split_header(bytes, b"P5")?;
    let (width, height) = header;
    if body.len() != width * height {
        return Err(DdnError::format(
            (bytes.len() - body.len()) as u64,
            format!("expected {} pixels, found {}", width * height, body.len()),
        ));
    }
    Ok(Gray8 {
        width,
        height,
        pixels: body.to_vec(),
    })
}

fn split_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<((usize, usize), &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DdnError::format(0, "bad netpbm magic"));
    }
    // magic, width, height, maxval separated by single whitespace characters
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        let v: usize = text
            .parse()
            .map_err(|_| DdnError::format(start as u64, "bad netpbm header field"))?;
        fields.push(v);
    }
    if fields[2] != 255 {
        return Err(DdnError::format(pos as u64, "only maxval 255 is supported"));
    }
    if pos >= bytes.len() {
        return Err(DdnError::format(pos as u64, "missing raster"));
    }
    Ok(((fields[0], fields[1]), &bytes[pos + 1..]))
}
