//! Binary 8-bit PGM (P5) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!(Format, "truncated PGM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| crate::Error::Format("non-ascii PGM header".into()))?);
    }
    if fields[0] != "P5" {
        bail!(Format, "expected P5 magic, found {}", fields[0]);
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| crate::Error::Format(format!("bad PGM number {s}")));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        bail!(Format, "only 8-bit PGM supported (maxval {maxval})");
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        bail!(Format, "PGM raster truncated: {} of {n} bytes", bytes.len().saturating_sub(pos));
    }
    Ok(GrayImage { width, height, pixels: bytes[pos..pos + n].to_vec() })
}

pub fn write(path: &Path, img: &GrayImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(img))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<GrayImage> {
    decode(&fs::read(path)?)
}

/// Maps real values to 8 bits by linear scaling of `[lo, hi]` onto `[0, 255]`.
pub fn from_real(values: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> GrayImage {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = values.iter().map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    GrayImage { width, height, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_roundtrip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
            let pixels = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = GrayImage { width: w, height: h, pixels };
            prop_assert_eq!(decode(&encode(&img)).unwrap(), img);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        let img = decode(bytes).unwrap();
        assert_eq!(img.pixels, vec![1, 2]);
    }

    #[test]
    fn rejects_ascii_variant() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
    }
}
