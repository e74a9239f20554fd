use std::path::Path;

use super::image::GrayImage;
use crate::error::{Error, Result};

fn pgm_err(msg: impl Into<String>) -> Error {
    Error::Parse {
        format: "pgm",
        line: 0,
        msg: msg.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
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
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pgm_err(format!("missing or invalid {what} at byte {start}")))
    }
}

/// Decodes a binary (P5) graymap; samples become `v / maxval`.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(pgm_err("not a binary graymap (missing P5 magic)"));
    }
    let mut hd = Header { bytes, pos: 2 };
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval = hd.number("maxval")?;
    if w == 0 || h == 0 || !(1..=65535).contains(&maxval) {
        return Err(pgm_err(format!("invalid header {w}x{h} maxval {maxval}")));
    }
    if hd.pos >= bytes.len() || !bytes[hd.pos].is_ascii_whitespace() {
        return Err(pgm_err("header must end with a single whitespace byte"));
    }
    let data = &bytes[hd.pos + 1..];
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(bps)).ok_or_else(|| pgm_err("image too large"))?;
    if data.len() < need {
        return Err(pgm_err(format!("truncated raster: {} of {need} bytes", data.len())));
    }
    let m = maxval as f64;
    let px = if bps == 1 {
        data[..need].iter().map(|&b| (b as f64 / m).min(1.0)).collect()
    } else {
        data[..need]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / m).min(1.0))
            .collect()
    };
    GrayImage::from_vec(w, h, px)
}

/// Encodes with the given maxval (1..=65535), rounding to the nearest level.
pub fn write_pgm(img: &GrayImage, maxval: u16) -> Vec<u8> {
    let maxval = maxval.max(1);
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    let m = maxval as f64;
    for &v in img.pixels() {
        let q = (v.clamp(0.0, 1.0) * m).round() as u16;
        if maxval < 256 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    out
}

/// Binary (P6) pixmap from interleaved RGB bytes.
pub fn write_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&bytes).map_err(|e| match e {
        Error::Parse { format, line, msg } => Error::Parse {
            format,
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        e => e,
    })
}

pub fn save_pgm(img: &GrayImage, maxval: u16, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_pgm(img, maxval)).map_err(|e| Error::io(path, e))
}
