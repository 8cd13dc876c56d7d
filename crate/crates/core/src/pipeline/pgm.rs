//! Binary PGM (P5, maxval 255) reading and writing for images and masks.
//! Parse failures report the byte offset of the offending content.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

pub fn encode_pgm(data: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::dimension(format!(
            "pgm payload {} != {width}x{height}",
            data.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start, format!("invalid {what}")))
    }
}

/// Parse a P5 PGM with maxval 255; other maxvals are rejected.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::format(0, "expected P5 magic"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval_pos = {
        cur.skip_ws_and_comments();
        cur.pos
    };
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_pos, format!("maxval {maxval}, only 255 supported")));
    }
    // exactly one whitespace byte separates header and payload
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::format(cur.pos, "expected whitespace before payload"));
    }
    cur.pos += 1;
    let expected = width * height;
    let payload = &bytes[cur.pos..];
    if payload.len() != expected {
        return Err(Error::format(
            bytes.len().min(cur.pos + expected),
            format!("payload {} bytes, expected {expected}", payload.len()),
        ));
    }
    Ok((payload.to_vec(), width, height))
}

pub fn write_pgm(path: impl AsRef<Path>, data: &[u8], width: usize, height: usize) -> Result<()> {
    fs::write(path, encode_pgm(data, width, height)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize)> {
    decode_pgm(&fs::read(path)?)
}

/// Save a `[3,H,W]` [0,1] image as 8-bit grayscale (first channel).
pub fn save_image_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dimension(format!("expected [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let gray: Vec<u8> = image.data()[..h * w]
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_pgm(path, &gray, w, h)
}

/// Load a grayscale PGM as a `[3,H,W]` [0,1] tensor (channel-replicated).
pub fn load_image_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let (raw, w, h) = read_pgm(path)?;
    let gray: Vec<f64> = raw.iter().map(|&v| v as f64 / 255.0).collect();
    let mut data = Vec::with_capacity(3 * gray.len());
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    Tensor::new(data, &[3, h, w])
}

/// Save a mask with foreground 255, background 0.
pub fn save_mask_pgm(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    write_pgm(path, &data, mask.width(), mask.height())
}

/// Load a mask; any pixel other than 0 or 255 is a format error whose offset
/// points at the offending payload byte.
pub fn load_mask_pgm(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let bytes = fs::read(&path)?;
    let (raw, w, h) = decode_pgm(&bytes)?;
    let header = bytes.len() - raw.len();
    for (i, &v) in raw.iter().enumerate() {
        if v != 0 && v != 255 {
            return Err(Error::format(
                header + i,
                format!("mask value {v} is neither 0 nor 255"),
            ));
        }
    }
    BinaryMask::new(raw.into_iter().map(|v| (v == 255) as u8).collect(), w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_plus_payload_size() {
        let bytes = encode_pgm(&vec![0u8; 64 * 64], 64, 64).unwrap();
        assert_eq!(bytes.len(), "P5\n64 64\n255\n".len() + 4096);
    }

    #[test]
    fn roundtrip_is_exact() {
        let data: Vec<u8> = (0..20 * 10).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = encode_pgm(&data, 20, 10).unwrap();
        let (back, w, h) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (20, 10));
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_wrong_maxval_and_truncation() {
        let bytes = b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0".to_vec();
        match decode_pgm(&bytes) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 7);
                assert!(msg.contains("65535"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let ok = encode_pgm(&[1, 2, 3, 4], 2, 2).unwrap();
        assert!(matches!(decode_pgm(&ok[..ok.len() - 1]), Err(Error::Format { .. })));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P5\n# generated\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        let (data, w, h) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h, data), (3, 1, vec![9, 8, 7]));
    }

    #[test]
    fn mask_roundtrip_and_nonbinary_rejection() {
        let dir = std::env::temp_dir().join("fuseseg_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let m = BinaryMask::from_fn(6, 4, |x, y| (x + y) % 2 == 0);
        let p = dir.join("m.pgm");
        save_mask_pgm(&p, &m).unwrap();
        assert_eq!(load_mask_pgm(&p).unwrap(), m);

        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 1] = 77;
        let bad = dir.join("bad.pgm");
        std::fs::write(&bad, &bytes).unwrap();
        match load_mask_pgm(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, n - 1),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
