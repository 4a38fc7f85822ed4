//! Grayscale raster images and portable graymap (PGM) files.
//!
//! Pixels are f64 in [0, 1], row-major. Files are binary P5 with a 16-bit
//! maxval; generated images quantize onto the 16-bit grid at creation time,
//! so a write/read round trip reproduces the in-memory pixels exactly.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

const MAXVAL: f64 = 65535.0;

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Adds `v` at (x, y), clamping into [0, 1].
    pub fn splat(&mut self, x: usize, y: usize, v: f64) {
        let p = &mut self.pixels[y * self.width + x];
        *p = (*p + v).clamp(0.0, 1.0);
    }

    /// Fills the axis-aligned rectangle [x0, x1) x [y0, y1).
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: f64) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set(x, y, v);
            }
        }
    }

    /// Snaps every pixel onto the 16-bit PGM grid.
    pub fn quantize16(&mut self) {
        for p in &mut self.pixels {
            *p = (*p * MAXVAL).round().clamp(0.0, MAXVAL) / MAXVAL;
        }
    }

    /// Mirror around the vertical axis.
    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = GrayImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Nearest-neighbor resize to (num/den) of the original extent.
    pub fn scale(&self, num: usize, den: usize) -> GrayImage {
        let w = (self.width * num) / den;
        let h = (self.height * num) / den;
        let mut out = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x * den / num, y * den / num));
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &p in &self.pixels {
            let v = (p * MAXVAL).round().clamp(0.0, MAXVAL) as u16;
            // PGM stores the most significant byte first.
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<GrayImage> {
        let mut file = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        parse_pgm(&bytes).map_err(|m| Error::Input(format!("{}: {m}", path.display())))
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err("not a binary PGM (P5) file".into());
    }
    pos += 2;
    // Header: width, height, maxval as whitespace-separated tokens,
    // '#' comments run to end of line.
    while fields.len() < 3 {
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
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| "bad header")?;
        fields.push(token.parse::<usize>().map_err(|_| "bad header number")?);
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err("zero extent".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let two_byte = maxval > 255;
    let need = width * height * if two_byte { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(format!("expected {need} sample bytes, found {}", bytes.len() - pos));
    }
    let mut img = GrayImage::new(width, height);
    for i in 0..width * height {
        let raw = if two_byte {
            u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]) as f64
        } else {
            bytes[pos + i] as f64
        };
        img.pixels[i] = raw / maxval as f64;
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = GrayImage::new(7, 5);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i as f64 * 0.031) % 1.0;
        }
        img.quantize16();
        let path = dir.path().join("x.pgm");
        img.write_pgm(&path).unwrap();
        let back = GrayImage::read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn eight_bit_pgm_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 64]);
        std::fs::write(&path, bytes).unwrap();
        let img = GrayImage::read_pgm(&path).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(0, 1), 1.0);
    }

    #[test]
    fn truncated_pgm_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        std::fs::write(&path, b"P5\n4 4\n65535\nxx").unwrap();
        assert!(GrayImage::read_pgm(&path).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let mut img = GrayImage::new(5, 3);
        img.set(1, 2, 0.5);
        img.set(0, 0, 1.0);
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.get(3, 2), 0.5);
        assert_eq!(flipped.get(4, 0), 1.0);
        assert_eq!(flipped.flip_horizontal(), img);
    }

    #[test]
    fn scale_produces_expected_extent() {
        let img = GrayImage::new(32, 32);
        assert_eq!(img.scale(3, 4).width(), 24);
        assert_eq!(img.scale(1, 2).height(), 16);
    }
}
