//! Binary grayscale PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use super::ImageRecord;
use crate::error::{Error, Result};

/// Row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "pixel buffer size");
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.data.chunks(self.width).map(<[u8]>::to_vec).collect()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedFormat(format!("malformed PGM header: bad {what}")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(m) if m[0] == b'P' => {
            return Err(Error::UnsupportedFormat(format!(
                "only binary PGM (P5) is supported, found {}",
                String::from_utf8_lossy(m)
            )))
        }
        _ => return Err(Error::UnsupportedFormat("malformed PGM header: missing magic".into())),
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PGM maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::UnsupportedFormat("malformed PGM header".into())),
    }
    let data = &bytes[h.pos..];
    if width == 0 || height == 0 || data.len() < width * height {
        return Err(Error::UnsupportedFormat(format!(
            "PGM raster too short: {} bytes for {width}x{height}",
            data.len()
        )));
    }
    Ok(GrayImage::new(width, height, data[..width * height].to_vec()))
}

/// Reads the record's pixels; relative paths are resolved against `base_dir`.
pub fn load_image_pixels(record: &ImageRecord, base_dir: &Path) -> Result<GrayImage> {
    let rel = record.pixel_path.as_ref().ok_or_else(|| {
        Error::invalid(format!("image `{}` has no pixel path", record.image_id))
    })?;
    let path = base_dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let img = parse_pgm(&bytes)?;
    if img.width != record.width || img.height != record.height {
        return Err(Error::DimensionMismatch {
            image_id: record.image_id.clone(),
            expected_width: record.width,
            expected_height: record.height,
            width: img.width,
            height: img.height,
        });
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(w: usize, h: usize) -> ImageRecord {
        ImageRecord {
            pixel_path: Some("x.pgm".into()),
            ..ImageRecord::new("x", w, h)
        }
    }

    #[test]
    fn two_by_two_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        fs::write(dir.path().join("x.pgm"), &bytes).unwrap();
        let img = load_image_pixels(&record(2, 2), dir.path()).unwrap();
        assert_eq!(img.rows(), vec![vec![0, 64], vec![128, 255]]);
    }

    #[test]
    fn dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::new(4, 4, vec![7; 16])
            .save_pgm(&dir.path().join("x.pgm"))
            .unwrap();
        assert!(matches!(
            load_image_pixels(&record(8, 8), dir.path()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ascii_pgm_unsupported() {
        assert!(matches!(
            parse_pgm(b"P2\n2 1\n255\n0 255\n"),
            Err(Error::UnsupportedFormat(m)) if m.contains("P2")
        ));
        assert!(parse_pgm(b"P5\n2 x\n255\n").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x01").is_err());
    }

    #[test]
    fn comments_in_header_and_roundtrip() {
        let mut bytes = b"P5 # made by hand\n3 1\n# maxval next\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.data, vec![1, 2, 3]);
        assert_eq!(parse_pgm(&img.to_pgm()).unwrap(), img);
    }
}
