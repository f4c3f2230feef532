//! Binary PGM ("P5") reading and writing.
//!
//! Depth frames use maxval 65535 with big-endian two-byte samples; masks use
//! maxval 255. The writer emits a canonical header (`P5\n{w} {h}\n{maxval}\n`)
//! so decode/encode round trips are byte-identical; the reader additionally
//! accepts arbitrary whitespace and `#` comments per the format family.

use super::{io_err, DepthImage, IngestError, MaskImage};
use std::path::Path;

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn err(&self, detail: impl Into<String>) -> IngestError {
        IngestError::PgmParse {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn skip_separators(&mut self) {
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

    fn read_number(&mut self, what: &str) -> Result<u64, IngestError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| self.err(format!("{what} out of range")))
    }
}

fn parse_header(bytes: &[u8]) -> Result<(u32, u32, u32, usize), IngestError> {
    let mut r = HeaderReader::new(bytes);
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(r.err("not a binary PGM (magic must be P5)"));
    }
    r.pos = 2;
    let width = r.read_number("width")?;
    let height = r.read_number("height")?;
    let maxval = r.read_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(r.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(r.err(format!("maxval {maxval} outside 1..=65535")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if r.pos >= bytes.len() || !matches!(bytes[r.pos], b' ' | b'\t' | b'\r' | b'\n') {
        return Err(r.err("expected single whitespace before payload"));
    }
    Ok((width as u32, height as u32, maxval as u32, r.pos + 1))
}

pub fn decode_depth_pgm(bytes: &[u8]) -> Result<DepthImage, IngestError> {
    let (width, height, maxval, payload) = parse_header(bytes)?;
    if maxval != 65535 {
        return Err(IngestError::PgmParse {
            offset: 0,
            detail: format!("depth frames require maxval 65535, got {maxval}"),
        });
    }
    let n = (width as usize) * (height as usize);
    let expected = n * 2;
    let actual = bytes.len() - payload;
    if actual != expected {
        return Err(IngestError::PgmParse {
            offset: bytes.len(),
            detail: format!("payload holds {actual} bytes, {width}x{height}x2 needs {expected}"),
        });
    }
    let data = bytes[payload..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    DepthImage::new(width, height, data)
}

pub fn encode_depth_pgm(image: &DepthImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", image.width, image.height).into_bytes();
    out.reserve(image.data().len() * 2);
    for sample in image.data() {
        out.extend_from_slice(&sample.to_be_bytes());
    }
    out
}

pub fn decode_mask_pgm(bytes: &[u8]) -> Result<MaskImage, IngestError> {
    let (width, height, maxval, payload) = parse_header(bytes)?;
    if maxval != 255 {
        return Err(IngestError::PgmParse {
            offset: 0,
            detail: format!("mask frames require maxval 255, got {maxval}"),
        });
    }
    let n = (width as usize) * (height as usize);
    let actual = bytes.len() - payload;
    if actual != n {
        return Err(IngestError::PgmParse {
            offset: bytes.len(),
            detail: format!("payload holds {actual} bytes, {width}x{height} needs {n}"),
        });
    }
    MaskImage::new(width, height, bytes[payload..].to_vec()).map_err(|e| match e {
        // Re-anchor code errors at their absolute file offset.
        IngestError::BadMaskCode { offset, code } => IngestError::BadMaskCode {
            offset: payload + offset,
            code,
        },
        other => other,
    })
}

pub fn encode_mask_pgm(mask: &MaskImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(mask.data());
    out
}

pub fn load_depth_pgm(path: impl AsRef<Path>) -> Result<DepthImage, IngestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_depth_pgm(&bytes)
}

pub fn save_depth_pgm(image: &DepthImage, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    std::fs::write(path, encode_depth_pgm(image)).map_err(|e| io_err(path, e))
}

pub fn load_mask_pgm(path: impl AsRef<Path>) -> Result<MaskImage, IngestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_mask_pgm(&bytes)
}

pub fn save_mask_pgm(mask: &MaskImage, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask_pgm(mask)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_depth_bytes_decode_and_round_trip() {
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x01, 0x02, 0x00, 0xFF, 0xAB, 0xCD, 0x00, 0x00]);
        let img = decode_depth_pgm(&bytes).unwrap();
        assert_eq!(img.data(), &[0x0102, 0x00FF, 0xABCD, 0x0000]);
        assert_eq!(encode_depth_pgm(&img), bytes, "byte-identical round trip");
    }

    #[test]
    fn frozen_mask_bytes_decode_and_round_trip() {
        let mut bytes = b"P5\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2]);
        let mask = decode_mask_pgm(&bytes).unwrap();
        assert_eq!(mask.data(), &[0, 1, 2]);
        assert_eq!(encode_mask_pgm(&mask), bytes);
    }

    #[test]
    fn random_images_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(1..40u32), rng.gen_range(1..40u32));
            let depth_data: Vec<u16> = (0..w * h).map(|_| rng.gen()).collect();
            let depth = DepthImage::new(w, h, depth_data).unwrap();
            assert_eq!(decode_depth_pgm(&encode_depth_pgm(&depth)).unwrap(), depth);
            let mask_data: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..4)).collect();
            let mask = MaskImage::new(w, h, mask_data).unwrap();
            assert_eq!(decode_mask_pgm(&encode_mask_pgm(&mask)).unwrap(), mask);
        }
    }

    #[test]
    fn comments_and_loose_whitespace_parse() {
        let mut bytes = b"P5 # camera0\n# another comment\n 2\t1 \n65535\n".to_vec();
        bytes.extend_from_slice(&[0x00, 0x10, 0x00, 0x20]);
        let img = decode_depth_pgm(&bytes).unwrap();
        assert_eq!(img.data(), &[0x10, 0x20]);
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let err = decode_depth_pgm(b"P6\n1 1\n65535\nxx").unwrap_err();
        match err {
            IngestError::PgmParse { offset, detail } => {
                assert_eq!(offset, 0);
                assert!(detail.contains("P5"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x01, 0x02, 0x00]);
        let err = decode_depth_pgm(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 bytes"), "{msg}");
        assert!(msg.contains("needs 8"), "{msg}");
    }

    #[test]
    fn depth_rejects_wrong_maxval() {
        let mut bytes = b"P5\n1 1\n255\n".to_vec();
        bytes.push(7);
        assert!(decode_depth_pgm(&bytes).is_err());
    }

    #[test]
    fn mask_rejects_wrong_maxval_and_bad_codes() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 1]);
        assert!(decode_mask_pgm(&bytes).is_err());

        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        let payload_start = bytes.len();
        bytes.extend_from_slice(&[1, 9]);
        let err = decode_mask_pgm(&bytes).unwrap_err();
        match err {
            IngestError::BadMaskCode { offset, code } => {
                assert_eq!(offset, payload_start + 1);
                assert_eq!(code, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.pgm");
        let depth = DepthImage::new(3, 2, vec![1, 2, 3, 4, 5, 60000]).unwrap();
        save_depth_pgm(&depth, &path).unwrap();
        assert_eq!(load_depth_pgm(&path).unwrap(), depth);
    }
}
