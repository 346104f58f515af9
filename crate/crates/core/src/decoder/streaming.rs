//! One-pass construct/filter/fuse and its adjoint.

use rayon::prelude::*;

use super::{check_odd, softmax_into, BlendLogits, FusionConfig, ImportanceMaps};
use crate::{Error, Result, Tensor};

/// Online softmax over the clamp-to-edge window of pixel `(y, x)` using
/// channel `i` (of `stride`) of `imaps` as logits. Returns the filtered color
/// and the window's log-sum-exp.
#[inline]
fn window_filter(
    imaps: &[f32],
    stride: usize,
    i: usize,
    noisy: &[f32],
    (h, w): (usize, usize),
    (y, x): (usize, usize),
    r: isize,
) -> ([f32; 3], f32) {
    let mut max = f32::NEG_INFINITY;
    let mut sum = 0.0f32;
    let mut acc = [0.0f32; 3];
    let (hm, wm) = (h as isize - 1, w as isize - 1);
    for dy in -r..=r {
        let row = (y as isize + dy).clamp(0, hm) as usize * w;
        for dx in -r..=r {
            let q = row + (x as isize + dx).clamp(0, wm) as usize;
            let v = imaps[q * stride + i];
            if v > max {
                let scale = (max - v).exp();
                sum *= scale;
                acc[0] *= scale;
                acc[1] *= scale;
                acc[2] *= scale;
                max = v;
            }
            let e = (v - max).exp();
            let c = &noisy[q * 3..q * 3 + 3];
            sum += e;
            acc[0] += e * c[0];
            acc[1] += e * c[1];
            acc[2] += e * c[2];
        }
    }
    let inv = 1.0 / sum;
    ([acc[0] * inv, acc[1] * inv, acc[2] * inv], max + sum.ln())
}

fn check_inputs(
    imaps: &ImportanceMaps,
    blend: &BlendLogits,
    noisy: &Tensor,
    cfg: &FusionConfig,
) -> Result<()> {
    cfg.validate_for(noisy.height(), noisy.width())?;
    noisy.expect_channels(3, "noisy color")?;
    noisy.expect_size(&imaps.0, "importance maps")?;
    noisy.expect_size(&blend.0, "blend logits")?;
    if imaps.0.channels() != cfg.kernel_count || blend.0.channels() != cfg.kernel_count {
        return Err(Error::Config(format!(
            "{} importance / {} blend channels for {} kernels",
            imaps.0.channels(),
            blend.0.channels(),
            cfg.kernel_count
        )));
    }
    Ok(())
}

/// Builds every kernel on the fly, filters `noisy` with it and blends the
/// results. Equivalent to `construct_kernel_map` → `apply_kernel_map` →
/// `fuse`, with only the `H×W×3` output allocated.
pub fn filter_fuse_streaming(
    imaps: &ImportanceMaps,
    blend: &BlendLogits,
    noisy: &Tensor,
    cfg: &FusionConfig,
) -> Result<Tensor> {
    check_inputs(imaps, blend, noisy, cfg)?;
    let (h, w, m) = (noisy.height(), noisy.width(), cfg.kernel_count);
    let radii: Vec<isize> = cfg.sizes().iter().map(|&k| (k / 2) as isize).collect();
    let (imap, logits, color) = (imaps.0.data(), blend.0.data(), noisy.data());
    let mut out = Tensor::zeros(h, w, 3);
    out.data_mut()
        .par_chunks_mut(w * 3)
        .enumerate()
        .for_each(|(y, row)| {
            let mut alpha = vec![0.0f32; m];
            for x in 0..w {
                let p = y * w + x;
                softmax_into(&logits[p * m..(p + 1) * m], &mut alpha);
                let o = &mut row[x * 3..x * 3 + 3];
                for (i, &r) in radii.iter().enumerate() {
                    let (rgb, _) = window_filter(imap, m, i, color, (h, w), (y, x), r);
                    o[0] += alpha[i] * rgb[0];
                    o[1] += alpha[i] * rgb[1];
                    o[2] += alpha[i] * rgb[2];
                }
            }
        });
    Ok(out)
}

/// Streaming filter with a single `k×k` kernel built from a one-channel map.
pub fn filter_single(imap: &Tensor, noisy: &Tensor, k: usize) -> Result<Tensor> {
    check_odd(k)?;
    imap.expect_channels(1, "filter_single")?;
    noisy.expect_channels(3, "filter_single")?;
    imap.expect_size(noisy, "filter_single")?;
    let (h, w) = (noisy.height(), noisy.width());
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(h, w, 3);
    out.data_mut()
        .par_chunks_mut(w * 3)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let (rgb, _) = window_filter(imap.data(), 1, 0, noisy.data(), (h, w), (y, x), r);
                row[x * 3..x * 3 + 3].copy_from_slice(&rgb);
            }
        });
    Ok(out)
}

/// Gradients of `filter_fuse_streaming` with respect to the importance maps
/// and the blend logits. The noisy color is treated as a constant.
pub fn filter_fuse_backward(
    grad_out: &Tensor,
    imaps: &ImportanceMaps,
    blend: &BlendLogits,
    noisy: &Tensor,
    cfg: &FusionConfig,
) -> Result<(Tensor, Tensor)> {
    check_inputs(imaps, blend, noisy, cfg)?;
    grad_out.expect_shape(noisy, "grad_out")?;
    let (h, w, m) = (noisy.height(), noisy.width(), cfg.kernel_count);
    let n = h * w;
    let radii: Vec<isize> = cfg.sizes().iter().map(|&k| (k / 2) as isize).collect();
    let (imap, logits, color, g) = (imaps.0.data(), blend.0.data(), noisy.data(), grad_out.data());

    // Per-kernel filtered colors and window log-sum-exps.
    let forward: Vec<(Vec<f32>, Vec<f32>)> = radii
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut rgb = vec![0.0f32; n * 3];
            let mut lse = vec![0.0f32; n];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let (c, l) = window_filter(imap, m, i, color, (h, w), (y, x), r);
                    rgb[p * 3..p * 3 + 3].copy_from_slice(&c);
                    lse[p] = l;
                }
            }
            (rgb, lse)
        })
        .collect();

    let mut alpha = vec![0.0f32; n * m];
    let mut grad_logits = Tensor::zeros(h, w, m);
    let mut dots = vec![0.0f32; m];
    for p in 0..n {
        let a = &mut alpha[p * m..(p + 1) * m];
        softmax_into(&logits[p * m..(p + 1) * m], a);
        let gp = &g[p * 3..p * 3 + 3];
        let mut mean = 0.0;
        for (i, (rgb, _)) in forward.iter().enumerate() {
            let r = &rgb[p * 3..p * 3 + 3];
            dots[i] = gp[0] * r[0] + gp[1] * r[1] + gp[2] * r[2];
            mean += a[i] * dots[i];
        }
        let gl = grad_logits.pixel_mut(p / w, p % w);
        for i in 0..m {
            gl[i] = a[i] * (dots[i] - mean);
        }
    }

    // Scatter each window's softmax adjoint back onto the importance samples.
    let planes: Vec<Vec<f32>> = radii
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let (rgb, lse) = &forward[i];
            let mut grad = vec![0.0f32; n];
            let (hm, wm) = (h as isize - 1, w as isize - 1);
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let ai = alpha[p * m + i];
                    let gp = [ai * g[p * 3], ai * g[p * 3 + 1], ai * g[p * 3 + 2]];
                    if gp == [0.0; 3] {
                        continue;
                    }
                    let rp = &rgb[p * 3..p * 3 + 3];
                    let l = lse[p];
                    for dy in -r..=r {
                        let row = (y as isize + dy).clamp(0, hm) as usize * w;
                        for dx in -r..=r {
                            let q = row + (x as isize + dx).clamp(0, wm) as usize;
                            let wt = (imap[q * m + i] - l).exp();
                            let c = &color[q * 3..q * 3 + 3];
                            let b = gp[0] * (c[0] - rp[0]) + gp[1] * (c[1] - rp[1]) + gp[2] * (c[2] - rp[2]);
                            grad[q] += wt * b;
                        }
                    }
                }
            }
            grad
        })
        .collect();

    let mut grad_imaps = Tensor::zeros(h, w, m);
    for (i, plane) in planes.iter().enumerate() {
        for (p, &v) in plane.iter().enumerate() {
            grad_imaps.data_mut()[p * m + i] = v;
        }
    }
    Ok((grad_imaps, grad_logits))
}
