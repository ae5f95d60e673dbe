//! RGB float images and binary PPM (P6) encoding.

use std::fs;
use std::path::Path;

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![[0.0; 3]; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(shape_err("image", format!("{} pixels for {width}x{height}", pixels.len())));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn grayscale(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().flatten().all(|v| v.is_finite())
    }

    /// P6 with 8-bit channels, `round(255 * clamp(v, 0, 1))`.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten().map(|&v| quantize(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
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
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("bad PPM header".into()))?);
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("expected P6, got {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {s:?}")));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
        }
        pos += 1;
        let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::Format("truncated PPM data".into()))?;
        let pixels =
            body.chunks_exact(3).map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]).collect();
        Image::from_pixels(w, h, pixels)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ppm(&fs::read(path)?)
    }

    /// Quantizes to 8 bits and back, as a PPM round trip would.
    pub fn quantized(&self) -> Image {
        let pixels = self.pixels.iter().map(|p| p.map(|v| quantize(v) as f64 / 255.0)).collect();
        Image { width: self.width, height: self.height, pixels }
    }
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Grayscale image from one scalar per pixel.
pub fn gray(width: usize, height: usize, values: &[f64]) -> Result<Image> {
    if values.len() != width * height {
        return Err(invalid("grayscale value count does not match image size"));
    }
    Image::from_pixels(width, height, values.iter().map(|&v| [v, v, v]).collect())
}
