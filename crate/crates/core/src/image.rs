//! RGB images in `[0,1]`, stored row-major HWC, with binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Input(format!("{} values for a {height}x{width} RGB image", pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("pixel values must lie in [0,1]".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    /// Builds from arbitrary floats, clamping into range.
    pub fn from_clamped(height: usize, width: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), height * width * 3);
        Self { height, width, pixels: values.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self { height, width, pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect() }
    }

    /// Rounds through 8-bit storage so in-memory values match what a PPM holds.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.height, self.width, &self.to_bytes())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn from_ppm(data: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Input("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Input(format!("unsupported image magic `{}`", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Input(format!("bad PPM field `{s}`")));
        let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max != 255 {
            return Err(Error::Input("only 8-bit PPM images are supported".into()));
        }
        let need = w * h * 3;
        if data.len() < pos + need {
            return Err(Error::Input("truncated PPM payload".into()));
        }
        Ok(Self::from_bytes(h, w, &data[pos..pos + need]))
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&data)
    }

    pub fn mse(&self, other: &ImageTensor) -> f64 {
        let n = self.pixels.len() as f64;
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n
    }
}
