//! Binary 8-bit graymap (P5) reading and writing.
//!
//! Pixel byte `b` maps to `b / 255` exactly as computed in the target float
//! type; writing maps `v` back with `round(v * 255)` after clamping to [0,1],
//! which recovers every byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decoded graymap, row-major bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
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

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("missing {what} in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("unreadable {what} in header"))
    }
}

/// Parses a P5 file with maxval 255. The error is a human-readable reason.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(format!("bad magic {magic:?}, expected binary graymap \"P5\""));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported, only 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("missing raster separator".into()),
    }
    let need = width * height;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(format!("truncated raster: {} of {need} bytes", raster.len()));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: raster[..need].to_vec(),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|reason| Error::Image {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn to_unit<T: Scalar>(pixels: &[u8]) -> Vec<T> {
    let d = T::of(255.0);
    pixels.iter().map(|&b| T::of(f64::from(b)) / d).collect()
}

pub fn to_bytes<T: Scalar>(values: &[T]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// `[1, H, W]` with values in [0,1].
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let g = read_pgm(path)?;
    Tensor::constant(&[1, g.height, g.width], to_unit(&g.pixels))
}

/// Writes a `[1, H, W]` (or `[H, W]`) tensor.
pub fn write_image<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w) = match *img.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => {
            return Err(Error::Contract(format!(
                "write_image needs a [1, H, W] tensor, got {:?}",
                img.shape()
            )))
        }
    };
    write_pgm(
        path,
        &GrayImage {
            width: w,
            height: h,
            pixels: to_bytes(img.data()),
        },
    )
}

/// Binary mask: bytes >= 128 are foreground.
pub fn load_mask(path: &Path) -> Result<GrayImage> {
    let mut g = read_pgm(path)?;
    for p in &mut g.pixels {
        *p = u8::from(*p >= 128);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p5(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        encode_pgm(&GrayImage {
            width: w,
            height: h,
            pixels: px.to_vec(),
        })
    }

    #[test]
    fn two_by_two_values() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.pgm");
        std::fs::write(&f, p5(2, 2, &[0, 255, 128, 64])).unwrap();
        let t = load_image::<f64>(&f).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn rejections() {
        let mut bad = p5(2, 2, &[1, 2, 3, 4]);
        bad[1] = b'6';
        assert!(decode_pgm(&bad).unwrap_err().contains("magic"));
        let full = p5(2, 2, &[1, 2, 3, 4]);
        assert!(decode_pgm(&full[..full.len() - 1]).unwrap_err().contains("truncated"));
        assert!(decode_pgm(b"P5 2 2 65535\n\0\0\0\0\0\0\0\0").unwrap_err().contains("maxval"));
        assert!(decode_pgm(b"").is_err());
    }

    #[test]
    fn comments_in_header() {
        let g = decode_pgm(b"P5\n# made by hand\n1 2\n255\n\x07\x08").unwrap();
        assert_eq!((g.width, g.height, g.pixels), (1, 2, vec![7, 8]));
    }

    #[test]
    fn write_load_round_trip_all_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("all.pgm");
        let px: Vec<u8> = (0..=255).collect();
        let bytes = p5(16, 16, &px);
        std::fs::write(&f, &bytes).unwrap();
        let g = dir.path().join("again.pgm");
        write_image(&g, &load_image::<f32>(&f).unwrap()).unwrap();
        assert_eq!(std::fs::read(&g).unwrap(), bytes);
    }

    #[test]
    fn masks_threshold_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("m.pgm");
        std::fs::write(&f, p5(4, 1, &[0, 127, 128, 255])).unwrap();
        assert_eq!(load_mask(&f).unwrap().pixels, vec![0, 0, 1, 1]);
    }
}
