//! Three-channel square images in `[0,1]`, channel-major.

use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Real, Tensor};

pub const CHANNELS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image data has {got} values, expected {expected} for size {size}")]
    Length { size: usize, expected: usize, got: usize },
    #[error("pixel value {value} at index {index} is outside [0,1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("image sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
}

/// `[3, size, size]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        let expected = CHANNELS * size * size;
        if data.len() != expected || size == 0 {
            return Err(ImageError::Length {
                size,
                expected,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self { size, data })
    }

    /// Builds an image from arbitrary values, clamping into `[0,1]`.
    /// NaN maps to 0.
    pub fn from_clamped(size: usize, mut data: Vec<f32>) -> Result<Self, ImageError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(size, data)
    }

    pub fn filled(size: usize, value: f32) -> Self {
        Self {
            size,
            data: vec![value.clamp(0.0, 1.0); CHANNELS * size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.size + y) * self.size + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Rec. 601 luma per pixel, row-major.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.size * self.size;
        (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect()
    }

    pub fn mse(&self, other: &Image) -> Result<f64, ImageError> {
        if self.size != other.size {
            return Err(ImageError::SizeMismatch(self.size, other.size));
        }
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(total / self.data.len() as f64)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![CHANNELS, self.size, self.size],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("image layout is a valid tensor")
    }

    /// Converts a `[3,S,S]` tensor, clamping into `[0,1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self, ImageError> {
        let size = t.shape().last().copied().unwrap_or(0);
        Self::from_clamped(size, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.size, self.size)?;
        let n = self.size * self.size;
        let mut bytes = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..CHANNELS {
                bytes.push((self.data[c * n + i] * 255.0).round() as u8);
            }
        }
        w.write_all(&bytes)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_ppm(io::BufWriter::new(file))
    }
}
