//! Binary Netpbm (P5 greymap / P6 pixmap) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

impl PnmKind {
    fn magic(self) -> &'static str {
        match self {
            PnmKind::Gray => "P5",
            PnmKind::Rgb => "P6",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

/// Interleaved 8-bit samples plus header fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub samples: Vec<u8>,
}

impl PnmImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!(
            "{}\n{} {}\n{}\n",
            self.kind.magic(),
            self.width,
            self.height,
            self.maxval
        )
        .into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let kind = match magic.as_str() {
            "P5" => PnmKind::Gray,
            "P6" => PnmKind::Rgb,
            other => return Err(Error::data(format!("unsupported netpbm magic {other:?}"))),
        };
        let width = parse_header_int(bytes, &mut pos, "width")?;
        let height = parse_header_int(bytes, &mut pos, "height")?;
        let maxval = parse_header_int(bytes, &mut pos, "maxval")?;
        if width == 0 || height == 0 {
            return Err(Error::data(format!("netpbm size {width}x{height} is empty")));
        }
        if maxval == 0 || maxval > 255 {
            return Err(Error::data(format!("netpbm maxval {maxval} outside 1..=255")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::data("netpbm header not terminated by whitespace"));
        }
        pos += 1;
        let expected = width * height * kind.channels();
        let raster = &bytes[pos..];
        if raster.len() != expected {
            return Err(Error::data(format!(
                "netpbm raster has {} bytes, header implies {expected}",
                raster.len()
            )));
        }
        if let Some(i) = raster.iter().position(|&v| v as usize > maxval) {
            let pixel = i / kind.channels();
            return Err(Error::data(format!(
                "sample {} at pixel ({}, {}) exceeds maxval {maxval}",
                raster[i],
                pixel % width,
                pixel / width
            )));
        }
        Ok(Self {
            kind,
            width,
            height,
            maxval: maxval as u8,
            samples: raster.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::data("malformed netpbm header: missing field"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_int(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::data(format!("malformed netpbm header: {field} {tok:?}")))
}

/// Maps [0, 1] to 0..=255 with rounding.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
