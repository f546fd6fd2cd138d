//! Dense row-major 2-D grids and multi-channel images.

use crate::error::{Error, Result};

/// A row-major `height × width` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Planar multi-channel image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, width: usize, height: usize) -> Self {
        Self::filled(channels, width, height, 0.0)
    }

    pub fn filled(channels: usize, width: usize, height: usize, value: f32) -> Self {
        Self {
            channels,
            width,
            height,
            data: vec![value; channels * width * height],
        }
    }

    pub fn from_planar(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * width * height {
            return Err(Error::shape(channels * width * height, data.len()));
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    /// Builds an image from interleaved 8-bit samples (`RGBRGB...`).
    pub fn from_interleaved_u8(channels: usize, width: usize, height: usize, raw: &[u8]) -> Result<Self> {
        if raw.len() != channels * width * height {
            return Err(Error::shape(channels * width * height, raw.len()));
        }
        let plane = width * height;
        let mut data = vec![0.0; channels * plane];
        for (i, px) in raw.chunks_exact(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * plane + i] = f32::from(v) / 255.0;
            }
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn to_interleaved_u8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..plane {
            for c in 0..self.channels {
                let v = self.data[c * plane + i].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Per-channel mean, used as the fill colour for out-of-frame samples.
    pub fn channel_means(&self) -> Vec<f32> {
        let n = (self.width * self.height).max(1) as f64;
        (0..self.channels)
            .map(|c| (self.plane(c).iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32)
            .collect()
    }

    /// Multiplies every channel by a per-pixel weight in `[0, 1]`.
    pub fn masked(&self, weights: &Grid<f64>) -> Result<Self> {
        if weights.shape() != (self.width, self.height) {
            return Err(Error::shape((self.width, self.height), weights.shape()));
        }
        let plane = self.width * self.height;
        let mut out = self.clone();
        for c in 0..self.channels {
            for (v, &w) in out.data[c * plane..(c + 1) * plane].iter_mut().zip(weights.as_slice()) {
                *v *= w as f32;
            }
        }
        Ok(out)
    }
}
