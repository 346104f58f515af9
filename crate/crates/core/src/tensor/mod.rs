//! Dense `H×W×C` float32 grid and the 2× resampling operators.

mod io;

pub use io::{read_pfm, read_pfm_header, write_pfm, write_png, ImageFormat, ImageHeader};

use crate::{Error, Result};

/// Row-major image with interleaved channels: index `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "buffer of {} floats does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(y, x, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_size(&self, other: &Tensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.same_size(other) && self.channels == other.channels
    }

    /// Errors unless `other` has the same height and width.
    pub fn expect_size(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn expect_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    pub fn expect_channels(&self, channels: usize, what: &str) -> Result<()> {
        if self.channels == channels {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: expected {channels} channels, got {}",
                self.channels
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies channels `[start, start + count)` into a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.channels || count == 0 {
            return Err(Error::Dimension(format!(
                "channel slice {start}..{} out of {}",
                start + count,
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.pixels() * count);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..start + count]);
        }
        Tensor::from_vec(self.height, self.width, count, data)
    }

    /// Concatenates tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("nothing to concatenate".into()))?;
        for p in parts {
            first.expect_size(p, "concat_channels")?;
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(first.pixels() * channels);
        for i in 0..first.pixels() {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Tensor::from_vec(first.height, first.width, channels, data)
    }

    /// Crops a `h×w` window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[row..row + w * self.channels]);
        }
        Tensor::from_vec(h, w, self.channels, data)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Averages each 2×2 block.
pub fn downsample_2x2(img: &Tensor) -> Result<Tensor> {
    if img.height % 2 != 0 || img.width % 2 != 0 {
        return Err(Error::Dimension(format!(
            "downsample_2x2 needs even dimensions, got {}x{}",
            img.height, img.width
        )));
    }
    let (h, w, c) = (img.height / 2, img.width / 2, img.channels);
    let mut out = Tensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (img.pixel(2 * y, 2 * x), img.pixel(2 * y, 2 * x + 1));
            let (d, e) = (img.pixel(2 * y + 1, 2 * x), img.pixel(2 * y + 1, 2 * x + 1));
            let o = out.pixel_mut(y, x);
            for ch in 0..c {
                o[ch] = ((a[ch] + b[ch]) + (d[ch] + e[ch])) * 0.25;
            }
        }
    }
    Ok(out)
}

/// Replicates each pixel into a 2×2 block.
pub fn upsample_nearest(img: &Tensor) -> Tensor {
    let (h, w, c) = (img.height * 2, img.width * 2, img.channels);
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(img.pixel(y / 2, x / 2));
        }
    }
    Tensor {
        height: h,
        width: w,
        channels: c,
        data,
    }
}
