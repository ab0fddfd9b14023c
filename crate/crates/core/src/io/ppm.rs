//! Binary PPM (`P6`, maxval 255) decoding and normalisation.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Interleaved RGB bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PpmImage {
    /// `[1, 3, H, W]` with `(x/255 − mean) / std` per channel.
    pub fn to_tensor(&self, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
        if std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::arg("normalisation std must be finite and non-zero"));
        }
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = (px[c] as f32 / 255.0 - mean[c]) / std[c];
            }
        }
        Tensor::new(&[1, 3, self.height, self.width], data)
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("bad PPM header: expected {what}")))
    }
}

pub fn parse_ppm(bytes: &[u8]) -> Result<PpmImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::format(0, "not a binary PPM (expected magic P6)"));
    }
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::format(2, "bad PPM header: missing separator after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos as u64;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at, format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(3, format!("empty {width}x{height} image")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(h.pos as u64, "bad PPM header: expected whitespace before pixel data"));
    }
    let start = h.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format(3, "image dimensions overflow"))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("short pixel payload: {have} of {need} bytes"),
        ));
    }
    Ok(PpmImage {
        width,
        height,
        pixels: bytes[start..start + need].to_vec(),
    })
}

pub fn encode_ppm(img: &PpmImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn load_image_ppm(path: impl AsRef<Path>, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    parse_ppm(&fs::read(path)?)?.to_tensor(mean, std)
}
