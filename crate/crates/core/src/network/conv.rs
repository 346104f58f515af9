//! Same-size 2-D convolution with clamp-to-edge borders, lowered to
//! im2col + SGEMM over row bands.

use rand::Rng;
use rayon::prelude::*;

use crate::{Error, Result, Tensor};

/// Upper bound on im2col scratch per band, in floats.
const BAND_FLOATS: usize = 1 << 20;

/// Convolution weights laid out `out × in × k × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub out_ch: usize,
    pub in_ch: usize,
    pub ksize: usize,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn zeros(out_ch: usize, in_ch: usize, ksize: usize) -> Self {
        Self {
            out_ch,
            in_ch,
            ksize,
            kernel: vec![0.0; out_ch * in_ch * ksize * ksize],
            bias: vec![0.0; out_ch],
        }
    }

    /// Uniform in `±1/sqrt(in·k·k)` for weights and bias.
    pub fn uniform(out_ch: usize, in_ch: usize, ksize: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_ch * ksize * ksize) as f32).sqrt();
        let mut p = Self::zeros(out_ch, in_ch, ksize);
        for v in p.kernel.iter_mut().chain(p.bias.iter_mut()) {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn taps(&self) -> usize {
        self.ksize * self.ksize
    }

    /// Rows of the lowered weight matrix, `in · k · k`.
    pub fn fan_in(&self) -> usize {
        self.in_ch * self.taps()
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.kernel[((o * self.in_ch + i) * self.ksize + ky) * self.ksize + kx]
    }

    #[inline]
    pub fn weight_mut(&mut self, o: usize, i: usize, ky: usize, kx: usize) -> &mut f32 {
        &mut self.kernel[((o * self.in_ch + i) * self.ksize + ky) * self.ksize + kx]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ksize % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size {} is even", self.ksize)));
        }
        if self.kernel.len() != self.out_ch * self.fan_in() || self.bias.len() != self.out_ch {
            return Err(Error::Dimension("conv parameter buffers do not match shape".into()));
        }
        Ok(())
    }

    /// Copies this kernel into the center of a larger odd `ksize` kernel.
    pub fn center_pad(&self, ksize: usize) -> ConvParams {
        let off = (ksize - self.ksize) / 2;
        let mut out = ConvParams::zeros(self.out_ch, self.in_ch, ksize);
        out.bias.copy_from_slice(&self.bias);
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                for ky in 0..self.ksize {
                    for kx in 0..self.ksize {
                        *out.weight_mut(o, i, ky + off, kx + off) = self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        out
    }

    /// Extracts the centered `ksize` sub-kernel (adjoint of [`center_pad`](Self::center_pad)).
    pub fn center_crop(&self, ksize: usize) -> ConvParams {
        let off = (self.ksize - ksize) / 2;
        let mut out = ConvParams::zeros(self.out_ch, self.in_ch, ksize);
        out.bias.copy_from_slice(&self.bias);
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                for ky in 0..ksize {
                    for kx in 0..ksize {
                        *out.weight_mut(o, i, ky, kx) = self.weight(o, i, ky + off, kx + off);
                    }
                }
            }
        }
        out
    }
}

/// Gradients of one convolution layer.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

fn check(input: &Tensor, params: &ConvParams) -> Result<()> {
    params.validate()?;
    if input.channels() != params.in_ch {
        return Err(Error::Dimension(format!(
            "conv expects {} input channels, got {}",
            params.in_ch,
            input.channels()
        )));
    }
    Ok(())
}

fn band_rows(width: usize, fan_in: usize) -> usize {
    (BAND_FLOATS / (width * fan_in).max(1)).max(1)
}

/// Lowers rows `[y0, y0 + rows)` into a `(rows·W) × (C·k·k)` matrix; column
/// index is `channel · k² + tap`.
fn im2col(input: &Tensor, ksize: usize, y0: usize, rows: usize, col: &mut Vec<f32>) {
    let (h, w, c) = (input.height(), input.width(), input.channels());
    let taps = ksize * ksize;
    let fan_in = c * taps;
    let r = (ksize / 2) as isize;
    col.clear();
    col.resize(rows * w * fan_in, 0.0);
    let data = input.data();
    for by in 0..rows {
        let y = y0 + by;
        for x in 0..w {
            let dst = &mut col[(by * w + x) * fan_in..][..fan_in];
            for ky in 0..ksize {
                let qy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                for kx in 0..ksize {
                    let qx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                    let src = &data[(qy * w + qx) * c..][..c];
                    let tap = ky * ksize + kx;
                    for (i, &v) in src.iter().enumerate() {
                        dst[i * taps + tap] = v;
                    }
                }
            }
        }
    }
}

/// Scatter-adds a lowered gradient back onto the input grid (adjoint of im2col).
fn col2im(grad_col: &[f32], ksize: usize, y0: usize, rows: usize, grad_in: &mut Tensor) {
    let (h, w, c) = (grad_in.height(), grad_in.width(), grad_in.channels());
    let taps = ksize * ksize;
    let fan_in = c * taps;
    let r = (ksize / 2) as isize;
    let data = grad_in.data_mut();
    for by in 0..rows {
        let y = y0 + by;
        for x in 0..w {
            let src = &grad_col[(by * w + x) * fan_in..][..fan_in];
            for ky in 0..ksize {
                let qy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                for kx in 0..ksize {
                    let qx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                    let dst = &mut data[(qy * w + qx) * c..][..c];
                    let tap = ky * ksize + kx;
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += src[i * taps + tap];
                    }
                }
            }
        }
    }
}

/// `C[m×n] = beta·C + A[m×k]·B[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds cover every element the kernel touches and
    // the three slices do not alias (c is a unique borrow).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `out(p, o) = bias_o + Σ_{i,dy,dx} K(o, i, dy, dx) · in(clamp(p + (dy, dx)), i)`.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    check(input, params)?;
    let (h, w) = (input.height(), input.width());
    let (fan_in, cout) = (params.fan_in(), params.out_ch);
    let rows = band_rows(w, fan_in);
    let mut out = Tensor::zeros(h, w, cout);
    out.data_mut()
        .par_chunks_mut(rows * w * cout)
        .enumerate()
        .for_each_init(Vec::new, |col, (band, dst)| {
            let y0 = band * rows;
            let nrows = dst.len() / (w * cout);
            im2col(input, params.ksize, y0, nrows, col);
            for px in dst.chunks_exact_mut(cout) {
                px.copy_from_slice(&params.bias);
            }
            gemm(
                nrows * w,
                fan_in,
                cout,
                col,
                (fan_in, 1),
                &params.kernel,
                (1, fan_in),
                1.0,
                dst,
                (cout, 1),
            );
        });
    Ok(out)
}

/// Adjoint of [`conv2d`]. Skips the input gradient when `want_input` is false.
pub fn conv2d_backward_opt(
    grad_out: &Tensor,
    input: &Tensor,
    params: &ConvParams,
    want_input: bool,
) -> Result<ConvGrads> {
    check(input, params)?;
    if !grad_out.same_size(input) || grad_out.channels() != params.out_ch {
        return Err(Error::Dimension("conv grad_out shape mismatch".into()));
    }
    let (h, w) = (input.height(), input.width());
    let (fan_in, cout) = (params.fan_in(), params.out_ch);
    let rows = band_rows(w, fan_in);
    let mut grad_kernel = vec![0.0f32; params.kernel.len()];
    let mut grad_bias = vec![0.0f32; cout];
    for px in grad_out.data().chunks_exact(cout) {
        for (b, g) in grad_bias.iter_mut().zip(px) {
            *b += g;
        }
    }
    let mut grad_in = want_input.then(|| Tensor::zeros(h, w, params.in_ch));
    let mut col = Vec::new();
    let mut grad_col = Vec::new();
    let mut y0 = 0;
    while y0 < h {
        let nrows = rows.min(h - y0);
        let np = nrows * w;
        let g = &grad_out.data()[y0 * w * cout..(y0 * w + np) * cout];
        im2col(input, params.ksize, y0, nrows, &mut col);
        // dK[o, k] += Σ_p col[p, k] · g[p, o]
        gemm(
            fan_in,
            np,
            cout,
            &col,
            (1, fan_in),
            g,
            (cout, 1),
            1.0,
            &mut grad_kernel,
            (1, fan_in),
        );
        if let Some(gi) = grad_in.as_mut() {
            grad_col.clear();
            grad_col.resize(np * fan_in, 0.0);
            gemm(
                np,
                cout,
                fan_in,
                g,
                (cout, 1),
                &params.kernel,
                (fan_in, 1),
                0.0,
                &mut grad_col,
                (fan_in, 1),
            );
            col2im(&grad_col, params.ksize, y0, nrows, gi);
        }
        y0 += nrows;
    }
    Ok(ConvGrads {
        input: grad_in,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    params: &ConvParams,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let g = conv2d_backward_opt(grad_out, input, params, true)?;
    Ok((g.input.expect("input gradient requested"), g.kernel, g.bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn naive(input: &Tensor, p: &ConvParams) -> Vec<f64> {
        let (h, w) = (input.height() as isize, input.width() as isize);
        let r = (p.ksize / 2) as isize;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for o in 0..p.out_ch {
                    let mut s = p.bias[o] as f64;
                    for i in 0..p.in_ch {
                        for ky in 0..p.ksize {
                            for kx in 0..p.ksize {
                                let qy = (y + ky as isize - r).clamp(0, h - 1) as usize;
                                let qx = (x + kx as isize - r).clamp(0, w - 1) as usize;
                                s += p.weight(o, i, ky, kx) as f64 * input.at(qy, qx, i) as f64;
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(5, 6, 1, &mut rng);
        let mut id = ConvParams::zeros(1, 1, 1);
        id.kernel[0] = 1.0;
        assert_eq!(conv2d(&x, &id).unwrap(), x);

        let mut bx = ConvParams::zeros(1, 1, 3);
        bx.kernel.iter_mut().for_each(|v| *v = 1.0 / 9.0);
        let out = conv2d(&Tensor::filled(4, 4, 1, 0.6), &bx).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, cin, cout) in &[(1, 3, 4), (3, 2, 5), (5, 4, 3)] {
            let x = random(7, 9, cin, &mut rng);
            let p = ConvParams::uniform(cout, cin, k, &mut rng);
            let fast = conv2d(&x, &p).unwrap();
            for (a, b) in fast.data().iter().zip(naive(&x, &p)) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn banded_path_matches_single_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // wide enough that one band cannot hold the whole lowered image
        let x = random(40, 300, 16, &mut rng);
        let p = ConvParams::uniform(4, 16, 5, &mut rng);
        assert!(band_rows(300, p.fan_in()) < 40);
        let fast = conv2d(&x, &p).unwrap();
        let slow = naive(&x, &p);
        for (a, b) in fast.data().iter().zip(slow) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
        let g = random(40, 300, 4, &mut rng);
        let grads = conv2d_backward_opt(&g, &x, &p, true).unwrap();
        assert!(grads.input.unwrap().is_finite());
    }

    #[test]
    fn backward_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(6, 6, 2, &mut rng);
        let p = ConvParams::uniform(3, 2, 3, &mut rng);
        let g = random(6, 6, 3, &mut rng);
        let (_, _, gb) = conv2d_backward(&g, &x, &p).unwrap();
        for o in 0..3 {
            let s: f32 = g.data().iter().skip(o).step_by(3).sum();
            assert!((gb[o] - s).abs() < 1e-5);
        }
        let (gi, gk, gb) = conv2d_backward(&Tensor::zeros(6, 6, 3), &x, &p).unwrap();
        assert!(gi.data().iter().chain(&gk).chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch() {
        let p = ConvParams::zeros(2, 3, 3);
        assert!(matches!(conv2d(&Tensor::zeros(4, 4, 2), &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn pad_crop_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ConvParams::uniform(2, 3, 3, &mut rng);
        assert_eq!(p.center_pad(5).center_crop(3), p);
    }
}
