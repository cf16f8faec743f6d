//! Grayscale frames and their on-disk forms (`FRM1` lossless, 8-bit PGM).

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("frame data length {len} does not match {height}x{width}")]
    BadLength { len: usize, height: usize, width: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

/// `height` x `width` intensities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, FrameError> {
        if data.len() != height * width {
            return Err(FrameError::BadLength {
                len: data.len(),
                height,
                width,
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn check_same_shape(&self, other: &Frame) -> Result<(), FrameError> {
        if self.shape() != other.shape() {
            return Err(FrameError::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn write_frm(&self, path: impl AsRef<Path>) -> Result<(), FrameError> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + 4 * self.data.len());
        buf.extend_from_slice(b"FRM1");
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|source| FrameError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_frm(path: impl AsRef<Path>) -> Result<Self, FrameError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| FrameError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.len() < 12 || &bytes[..4] != b"FRM1" {
            return Err(FrameError::Format(format!("{}: missing FRM1 magic", path.display())));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * h * w {
            return Err(FrameError::Format(format!(
                "{}: payload does not match {h}x{w}",
                path.display()
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Frame::new(h, w, data)
    }

    /// 8-bit binary PGM; values are clamped to [0, 1] and rounded.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<(), FrameError> {
        let path = path.as_ref();
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        std::fs::write(path, buf).map_err(|source| FrameError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
