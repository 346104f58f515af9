//! Float64 reference implementations written directly from the defining
//! formulas, independent of the library code paths.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wskp::network::{ConvParams, Model, RepVggBlockParams};
use wskp::Tensor;

/// Dense f64 image, row-major `(y, x, c)`.
#[derive(Clone, Debug)]
pub struct Img {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Img {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Img { h, w, c, d: vec![0.0; h * w * c] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Img {
            h: t.height(),
            w: t.width(),
            c: t.channels(),
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.d[(y * self.w + x) * self.c + c]
    }

    /// Clamp-to-edge read.
    pub fn clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.at(y, x, c)
    }

    pub fn channel(&self, c: usize) -> Img {
        let mut out = Img::zeros(self.h, self.w, 1);
        for p in 0..self.h * self.w {
            out.d[p] = self.d[p * self.c + c];
        }
        out
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi))
}

/// Direct softmax kernel weights at pixel `(y, x)` for a window of size `k`;
/// the weight of neighbor `q` uses `I(q)`.
pub fn kernel_weights(imap: &Img, y: usize, x: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut vals = Vec::with_capacity(k * k);
    for dy in -r..=r {
        for dx in -r..=r {
            vals.push(imap.clamped(y as isize + dy, x as isize + dx, 0));
        }
    }
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Filter-and-fuse reconstruction in f64.
pub fn filter_fuse(imaps: &Img, logits: &Img, noisy: &Img, sizes: &[usize]) -> Img {
    let (h, w) = (noisy.h, noisy.w);
    let maps: Vec<Img> = (0..sizes.len()).map(|i| imaps.channel(i)).collect();
    let mut out = Img::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let l: Vec<f64> = (0..sizes.len()).map(|i| logits.at(y, x, i)).collect();
            let alpha = softmax(&l);
            for (i, &k) in sizes.iter().enumerate() {
                let wts = kernel_weights(&maps[i], y, x, k);
                let r = (k / 2) as isize;
                let mut t = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        for c in 0..3 {
                            out.d[(y * w + x) * 3 + c] +=
                                alpha[i] * wts[t] * noisy.clamped(y as isize + dy, x as isize + dx, c);
                        }
                        t += 1;
                    }
                }
            }
        }
    }
    out
}

/// Clamp-to-edge "same" convolution (cross-correlation) in f64 with
/// kernel layout `out × in × k × k`.
pub fn conv(input: &Img, kernel: &[f64], bias: &[f64], out_ch: usize, k: usize) -> Img {
    let r = (k / 2) as isize;
    let cin = input.c;
    let mut out = Img::zeros(input.h, input.w, out_ch);
    for y in 0..input.h {
        for x in 0..input.w {
            for o in 0..out_ch {
                let mut s = bias[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = kernel[((o * cin + i) * k + ky) * k + kx];
                            s += wv * input.clamped(y as isize + ky as isize - r, x as isize + kx as isize - r, i);
                        }
                    }
                }
                out.d[(y * input.w + x) * out_ch + o] = s;
            }
        }
    }
    out
}

pub fn smape(den: &Img, reference: &Img, eps: f64) -> f64 {
    den.d
        .iter()
        .zip(&reference.d)
        .map(|(d, r)| (d - r).abs() / (d.abs() + r.abs() + eps))
        .sum::<f64>()
        / den.d.len() as f64
}

fn conv_params(p: &ConvParams, flat: &mut impl Iterator<Item = f64>) -> (Vec<f64>, Vec<f64>) {
    let k: Vec<f64> = (0..p.kernel.len()).map(|_| flat.next().unwrap()).collect();
    let b: Vec<f64> = (0..p.bias.len()).map(|_| flat.next().unwrap()).collect();
    (k, b)
}

/// Branch-by-branch RepVGG block; `signs` records every pre-activation sign.
fn block(input: &Img, b: &RepVggBlockParams, flat: &mut impl Iterator<Item = f64>, signs: &mut Vec<bool>) -> Img {
    let mut branches = Vec::new();
    if let Some(c1) = &b.conv1x1 {
        let (k, bias) = conv_params(c1, flat);
        branches.push(conv(input, &k, &bias, c1.out_ch, 1));
    }
    if let Some(c3) = &b.conv3x3 {
        let (k, bias) = conv_params(c3, flat);
        branches.push(conv(input, &k, &bias, c3.out_ch, 3));
    }
    let (k, bias) = conv_params(&b.conv5x5, flat);
    let mut sum = conv(input, &k, &bias, b.conv5x5.out_ch, 5);
    for br in &branches {
        for (s, v) in sum.d.iter_mut().zip(&br.d) {
            *s += v;
        }
    }
    if b.use_identity {
        for (s, v) in sum.d.iter_mut().zip(&input.d) {
            *s += v;
        }
    }
    for v in sum.d.iter_mut() {
        signs.push(*v > 0.0);
        *v = v.max(0.0);
    }
    sum
}

pub struct PatchF64 {
    pub packed: Img,
    pub irradiance: Img,
    pub albedo: Img,
    pub reference: Img,
}

/// Single-resolution pipeline loss (radiance space) for the parameters in
/// `flat`, laid out like `Model::trainable`. Also returns ReLU signs.
pub fn pipeline_loss(model: &Model, flat: &[f64], p: &PatchF64, eps: f64) -> (f64, Vec<bool>) {
    assert_eq!(model.nets.len(), 1);
    let net = &model.nets[0];
    let mut it = flat.iter().cloned();
    let mut signs = Vec::new();
    let mut x = p.packed.clone();
    for b in &net.blocks {
        x = block(&x, b, &mut it, &mut signs);
    }
    let (k, bias) = conv_params(&net.head, &mut it);
    let head = conv(&x, &k, &bias, net.head.out_ch, net.head.ksize);
    let m = model.config.fusion.kernel_count;
    let mut imaps = Img::zeros(head.h, head.w, m);
    let mut logits = Img::zeros(head.h, head.w, m);
    for px in 0..head.h * head.w {
        for i in 0..m {
            imaps.d[px * m + i] = head.d[px * 2 * m + i];
            logits.d[px * m + i] = head.d[px * 2 * m + m + i];
        }
    }
    let filtered = filter_fuse(&imaps, &logits, &p.irradiance, &model.config.fusion.sizes());
    let mut den = filtered;
    for (d, a) in den.d.iter_mut().zip(&p.albedo.d) {
        *d *= a;
    }
    (smape(&den, &p.reference, eps), signs)
}

/// `|a - n| / (|n| + floor)`, the floor being 1% of the largest numerical
/// gradient magnitude in the instance.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + floor)
}
