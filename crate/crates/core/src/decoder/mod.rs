//! Parameter-free decoder from importance maps to filtered images.
//!
//! Each importance map is unfolded over a `k×k` window and softmax-normalized
//! per pixel into a filtering kernel; kernels of several sizes filter the same
//! input and the results are blended with per-pixel softmax weights.
//! [`filter_fuse_streaming`] does all of this in one pass per pixel without
//! ever materializing a `k²`-channel kernel map.

mod explicit;
mod multires;
mod streaming;

pub use explicit::{apply_kernel_map, construct_kernel_map, fuse, unfold_importance, window_offsets};
pub use multires::{combine_resolutions, combine_resolutions_backward};
pub use streaming::{filter_fuse_backward, filter_fuse_streaming, filter_single};

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

/// Kernel-size schedule: `k_i = base_size + i * step` for `i < kernel_count`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kernel_count: usize,
    pub base_size: usize,
    pub step: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kernel_count: 6,
            base_size: 3,
            step: 2,
        }
    }
}

impl FusionConfig {
    pub fn new(kernel_count: usize, base_size: usize, step: usize) -> Result<Self> {
        let cfg = Self {
            kernel_count,
            base_size,
            step,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_count == 0 {
            return Err(Error::Config("kernel_count must be at least 1".into()));
        }
        if self.base_size % 2 == 0 {
            return Err(Error::Config(format!("base kernel size {} is even", self.base_size)));
        }
        if self.step < 2 || self.step % 2 != 0 {
            return Err(Error::Config(format!("kernel step {} must be even and >= 2", self.step)));
        }
        Ok(())
    }

    /// Also checks that the largest window fits the image.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        let k = self.max_size();
        if k > height.min(width) {
            return Err(Error::Config(format!(
                "kernel size {k} exceeds image {height}x{width}"
            )));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.kernel_count)
            .map(|i| self.base_size + i * self.step)
            .collect()
    }

    pub fn max_size(&self) -> usize {
        self.base_size + (self.kernel_count - 1) * self.step
    }

    /// Total taps per pixel, `Σ k_i²`.
    pub fn total_taps(&self) -> usize {
        self.sizes().iter().map(|k| k * k).sum()
    }
}

/// `H×W×M` importance terms, one channel per kernel size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMaps(pub Tensor);

/// `H×W×M` pre-softmax blend weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendLogits(pub Tensor);

/// `H×W×k²` per-pixel weights, offsets in row-major order from `(-r, -r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMap {
    pub weights: Tensor,
    pub size: usize,
}

pub(crate) fn check_odd(k: usize) -> Result<()> {
    if k % 2 == 0 {
        Err(Error::Config(format!("kernel size {k} must be odd")))
    } else {
        Ok(())
    }
}

/// Softmax of a short slice into `out`, max-subtracted.
#[inline]
pub(crate) fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Per-pixel softmax over channels.
pub fn softmax_channels(t: &Tensor) -> Tensor {
    let c = t.channels();
    let mut out = t.clone();
    for (src, dst) in t.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
        softmax_into(src, dst);
    }
    out
}

#[inline]
pub(crate) fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}
