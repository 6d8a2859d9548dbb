//! Dense H×W×C images with unit-interval intensities, plus PPM (P6) I/O.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad ppm file {path}: {reason}")]
    BadPpm { path: String, reason: String },
    #[error("image dimensions must be positive, got {height}x{width}x{channels}")]
    BadDims {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("pixel data length {got} does not match {height}x{width}x{channels}")]
    BadLen {
        got: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("non-finite pixel value")]
    NonFinite,
}

/// Row-major H×W×C image; values live in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ImageError::BadDims { height, width, channels });
        }
        if data.len() != height * width * channels {
            return Err(ImageError::BadLen { got: data.len(), height, width, channels });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite);
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Writes the image as an 8-bit binary PPM (P6).
    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        assert_eq!(self.channels, 3, "ppm output requires 3 channels");
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.reserve(self.data.len());
        for v in &self.data {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        crate::util::atomic_write(path, &bytes)
            .map_err(|source| ImageError::Io { path: path.display().to_string(), source })
    }

    /// Reads an 8-bit binary PPM (P6); values map to [0, 1] via /255.
    pub fn read_ppm(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path)
            .map_err(|source| ImageError::Io { path: path.display().to_string(), source })?;
        let bad = |reason: &str| ImageError::BadPpm { path: path.display().to_string(), reason: reason.to_string() };

        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String, ImageError> {
            while pos < bytes.len() {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::BadPpm { path: String::new(), reason: "truncated header".into() });
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };

        if token(&bytes).map_err(|_| bad("truncated header"))? != "P6" {
            return Err(bad("not a P6 ppm"));
        }
        let width: usize = token(&bytes).map_err(|_| bad("truncated header"))?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token(&bytes).map_err(|_| bad("truncated header"))?.parse().map_err(|_| bad("bad height"))?;
        let maxval: usize = token(&bytes).map_err(|_| bad("truncated header"))?.parse().map_err(|_| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        let data = bytes[pos..pos + need].iter().map(|&b| f32::from(b) / 255.0).collect();
        Image::new(height, width, 3, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_for_8bit_values() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x + c * 11) % 256) as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        img.write_ppm(&p).unwrap();
        let back = Image::read_ppm(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_mismatched_length() {
        assert!(Image::new(2, 2, 3, vec![0.0; 11]).is_err());
    }
}
