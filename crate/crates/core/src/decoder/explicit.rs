//! Materializing path: unfold, softmax, apply, fuse. Used as the reference
//! for the streaming operator and by the explicit kernel-map baseline.

use super::{check_odd, clamp_index, softmax_into, BlendLogits, KernelMap};
use crate::{Error, Result, Tensor};

/// Window offsets `(dy, dx)` in row-major order starting at `(-r, -r)`.
pub fn window_offsets(k: usize) -> Vec<(isize, isize)> {
    let r = (k / 2) as isize;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .collect()
}

/// Gathers each pixel's clamp-to-edge `k×k` neighborhood of a single-channel
/// map into `k²` channels.
pub fn unfold_importance(imap: &Tensor, k: usize) -> Result<Tensor> {
    check_odd(k)?;
    imap.expect_channels(1, "unfold_importance")?;
    let (h, w) = (imap.height(), imap.width());
    let offsets = window_offsets(k);
    let mut data = Vec::with_capacity(h * w * offsets.len());
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx) in &offsets {
                let qy = clamp_index(y as isize + dy, h);
                let qx = clamp_index(x as isize + dx, w);
                data.push(imap.data()[qy * w + qx]);
            }
        }
    }
    Tensor::from_vec(h, w, offsets.len(), data)
}

/// Unfold followed by a per-pixel softmax along the channel axis.
pub fn construct_kernel_map(imap: &Tensor, k: usize) -> Result<KernelMap> {
    let mut weights = unfold_importance(imap, k)?;
    let kk = k * k;
    let mut scratch = vec![0.0; kk];
    for px in weights.data_mut().chunks_exact_mut(kk) {
        scratch.copy_from_slice(px);
        softmax_into(&scratch, px);
    }
    Ok(KernelMap { weights, size: k })
}

/// Weighted sum over each pixel's window with the same weights for every
/// color channel.
pub fn apply_kernel_map(kmap: &KernelMap, noisy: &Tensor) -> Result<Tensor> {
    kmap.weights.expect_size(noisy, "apply_kernel_map")?;
    let k = kmap.size;
    check_odd(k)?;
    if kmap.weights.channels() != k * k {
        return Err(Error::Dimension(format!(
            "kernel map has {} channels, expected {}",
            kmap.weights.channels(),
            k * k
        )));
    }
    let (h, w, c) = (noisy.height(), noisy.width(), noisy.channels());
    let offsets = window_offsets(k);
    let mut out = Tensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let wts = kmap.weights.pixel(y, x);
            let o = out.pixel_mut(y, x);
            for (&wt, &(dy, dx)) in wts.iter().zip(&offsets) {
                let q = noisy.pixel(clamp_index(y as isize + dy, h), clamp_index(x as isize + dx, w));
                for ch in 0..c {
                    o[ch] += wt * q[ch];
                }
            }
        }
    }
    Ok(out)
}

/// Blends filtered images with per-pixel softmax weights.
pub fn fuse(filtered: &[Tensor], blend: &BlendLogits) -> Result<Tensor> {
    let m = filtered.len();
    if m == 0 || blend.0.channels() != m {
        return Err(Error::Config(format!(
            "{m} filtered images but {} blend channels",
            blend.0.channels()
        )));
    }
    for f in filtered {
        filtered[0].expect_shape(f, "fuse inputs")?;
    }
    filtered[0].expect_size(&blend.0, "fuse blend")?;
    let c = filtered[0].channels();
    let mut out = Tensor::zeros(filtered[0].height(), filtered[0].width(), c);
    let mut alpha = vec![0.0; m];
    for p in 0..out.pixels() {
        softmax_into(&blend.0.data()[p * m..(p + 1) * m], &mut alpha);
        let o = &mut out.data_mut()[p * c..(p + 1) * c];
        for (a, f) in alpha.iter().zip(filtered) {
            for ch in 0..c {
                o[ch] += a * f.data()[p * c + ch];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn unfold_constant_and_identity() {
        let c = Tensor::filled(6, 6, 1, 1.5);
        assert!(unfold_importance(&c, 5).unwrap().data().iter().all(|&v| v == 1.5));
        let r = random(4, 5, 1, 1);
        assert_eq!(unfold_importance(&r, 1).unwrap(), r);
        assert!(matches!(unfold_importance(&r, 2), Err(Error::Config(_))));
    }

    #[test]
    fn unfold_interior_order() {
        let r = random(5, 5, 1, 2);
        let u = unfold_importance(&r, 3).unwrap();
        let expect: Vec<f32> = [(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3), (3, 1), (3, 2), (3, 3)]
            .iter()
            .map(|&(y, x)| r.at(y, x, 0))
            .collect();
        assert_eq!(u.pixel(2, 2), &expect[..]);
        // corner clamps to the edge
        assert_eq!(u.pixel(0, 0)[0], r.at(0, 0, 0));
    }

    #[test]
    fn kernel_map_uniform_and_dominant() {
        let km = construct_kernel_map(&Tensor::filled(5, 5, 1, 0.3), 3).unwrap();
        assert!(km.weights.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-7));

        let mut spike = Tensor::zeros(5, 5, 1);
        spike.set(1, 2, 0, 40.0);
        let km = construct_kernel_map(&spike, 3).unwrap();
        // (1, 2) is offset (-1, 0) from (2, 2): channel 1
        assert!(km.weights.pixel(2, 2)[1] as f64 > 1.0 - 1e-10);
    }

    #[test]
    fn kernel_map_matches_direct_softmax() {
        let r = random(12, 10, 1, 3);
        let km = construct_kernel_map(&r, 5).unwrap();
        for y in 0..12 {
            for x in 0..10 {
                let e: Vec<f64> = window_offsets(5)
                    .iter()
                    .map(|&(dy, dx)| {
                        let qy = (y as isize + dy).clamp(0, 11) as usize;
                        let qx = (x as isize + dx).clamp(0, 9) as usize;
                        (r.at(qy, qx, 0) as f64).exp()
                    })
                    .collect();
                let s: f64 = e.iter().sum();
                let px = km.weights.pixel(y, x);
                let total: f64 = px.iter().map(|&v| v as f64).sum();
                assert!((total - 1.0).abs() < 1e-6);
                for (a, b) in px.iter().zip(&e) {
                    assert!((*a as f64 - b / s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn apply_conserves_constants_and_identity() {
        let km = construct_kernel_map(&random(6, 6, 1, 4), 3).unwrap();
        let out = apply_kernel_map(&km, &Tensor::filled(6, 6, 3, 0.7)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let noisy = random(6, 6, 3, 5);
        let id = construct_kernel_map(&random(6, 6, 1, 6), 1).unwrap();
        assert_eq!(apply_kernel_map(&id, &noisy).unwrap(), noisy);
        assert!(matches!(
            apply_kernel_map(&id, &Tensor::zeros(5, 6, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn uniform_kernel_is_box_filter() {
        let noisy = random(7, 8, 3, 7);
        let km = construct_kernel_map(&Tensor::zeros(7, 8, 1), 3).unwrap();
        let out = apply_kernel_map(&km, &noisy).unwrap();
        for y in 0..7 {
            for x in 0..8 {
                for c in 0..3 {
                    let mut s = 0.0f64;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let qy = (y as isize + dy).clamp(0, 6) as usize;
                            let qx = (x as isize + dx).clamp(0, 7) as usize;
                            s += noisy.at(qy, qx, c) as f64;
                        }
                    }
                    assert!((out.at(y, x, c) as f64 - s / 9.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fuse_cases() {
        let a = random(4, 4, 3, 8);
        let b = random(4, 4, 3, 9);
        let one = fuse(std::slice::from_ref(&a), &BlendLogits(random(4, 4, 1, 10))).unwrap();
        assert_eq!(one, a);

        let dominant = Tensor::from_fn(4, 4, 3, |_, _, c| if c == 0 { 40.0 } else { 0.0 });
        let out = fuse(&[a.clone(), b.clone(), b.clone()], &BlendLogits(dominant)).unwrap();
        assert!(out.max_abs_diff(&a) < 1e-8);

        let out = fuse(&[a.clone(), b.clone()], &BlendLogits(Tensor::zeros(4, 4, 2))).unwrap();
        for i in 0..out.data().len() {
            assert!((out.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-6);
        }
        assert!(matches!(
            fuse(&[a.clone(), b], &BlendLogits(Tensor::zeros(4, 4, 3))),
            Err(Error::Config(_))
        ));
    }
}
