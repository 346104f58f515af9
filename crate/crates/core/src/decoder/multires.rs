//! Progressive coarse-to-fine combination of filtered images.

use crate::tensor::{downsample_2x2, upsample_nearest};
use crate::{Error, Result, Tensor};

fn check(fine: &Tensor, coarse: &Tensor, alpha: &Tensor) -> Result<()> {
    if coarse.height() * 2 != fine.height()
        || coarse.width() * 2 != fine.width()
        || coarse.channels() != fine.channels()
    {
        return Err(Error::Dimension(format!(
            "coarse {}x{}x{} is not half of fine {}x{}x{}",
            coarse.height(),
            coarse.width(),
            coarse.channels(),
            fine.height(),
            fine.width(),
            fine.channels()
        )));
    }
    fine.expect_size(alpha, "combine alpha")?;
    alpha.expect_channels(1, "combine alpha")
}

/// `fine - alpha * U(D(fine)) + alpha * U(coarse)`: replaces the low band of
/// `fine` with `coarse` by a per-pixel amount `alpha`.
pub fn combine_resolutions(fine: &Tensor, coarse: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    check(fine, coarse, alpha)?;
    let low = upsample_nearest(&downsample_2x2(fine)?);
    let up = upsample_nearest(coarse);
    let c = fine.channels();
    let mut out = fine.clone();
    for (p, &a) in alpha.data().iter().enumerate() {
        for ch in 0..c {
            let i = p * c + ch;
            out.data_mut()[i] += a * (up.data()[i] - low.data()[i]);
        }
    }
    Ok(out)
}

/// Adjoint of [`combine_resolutions`]: gradients for fine, coarse and alpha.
pub fn combine_resolutions_backward(
    grad_out: &Tensor,
    fine: &Tensor,
    coarse: &Tensor,
    alpha: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check(fine, coarse, alpha)?;
    grad_out.expect_shape(fine, "combine grad")?;
    let c = fine.channels();
    let low = upsample_nearest(&downsample_2x2(fine)?);
    let up = upsample_nearest(coarse);
    let mut scaled = grad_out.clone();
    let mut grad_alpha = Tensor::zeros(fine.height(), fine.width(), 1);
    for (p, &a) in alpha.data().iter().enumerate() {
        let mut ga = 0.0;
        for ch in 0..c {
            let i = p * c + ch;
            ga += grad_out.data()[i] * (up.data()[i] - low.data()[i]);
            scaled.data_mut()[i] *= a;
        }
        grad_alpha.data_mut()[p] = ga;
    }
    // U^T sums each 2x2 block; (U D)^T = U D.
    let block_sum = downsample_2x2(&scaled)?.map(|v| v * 4.0);
    let spread = upsample_nearest(&downsample_2x2(&scaled)?);
    let mut grad_fine = grad_out.clone();
    for (g, s) in grad_fine.data_mut().iter_mut().zip(spread.data()) {
        *g -= s;
    }
    Ok((grad_fine, block_sum, grad_alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn algebraic_cases() {
        let fine = random(8, 6, 3, 1);
        let coarse = random(4, 3, 3, 2);
        let zero = Tensor::zeros(8, 6, 1);
        assert_eq!(combine_resolutions(&fine, &coarse, &zero).unwrap(), fine);

        let own = downsample_2x2(&fine).unwrap();
        let out = combine_resolutions(&fine, &own, &random(8, 6, 1, 3)).unwrap();
        assert!(out.max_abs_diff(&fine) < 1e-6);

        let out = combine_resolutions(
            &Tensor::filled(4, 4, 3, 0.2),
            &Tensor::filled(2, 2, 3, 0.9),
            &Tensor::filled(4, 4, 1, 1.0),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.9).abs() < 1e-6));

        assert!(matches!(
            combine_resolutions(&fine, &random(3, 3, 3, 4), &zero),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let fine = random(4, 4, 3, 5);
        let coarse = random(2, 2, 3, 6);
        let alpha = random(4, 4, 1, 7);
        let g = random(4, 4, 3, 8);
        let loss = |f: &Tensor, c: &Tensor, a: &Tensor| -> f64 {
            let o = combine_resolutions(f, c, a).unwrap();
            o.data().iter().zip(g.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
        };
        let (gf, gc, ga) = combine_resolutions_backward(&g, &fine, &coarse, &alpha).unwrap();
        let h = 1e-2f32;
        let check = |t: &Tensor, grad: &Tensor, which: usize| {
            for i in 0..t.data().len() {
                let mut plus = t.clone();
                plus.data_mut()[i] += h;
                let mut minus = t.clone();
                minus.data_mut()[i] -= h;
                let (lp, lm) = match which {
                    0 => (loss(&plus, &coarse, &alpha), loss(&minus, &coarse, &alpha)),
                    1 => (loss(&fine, &plus, &alpha), loss(&fine, &minus, &alpha)),
                    _ => (loss(&fine, &coarse, &plus), loss(&fine, &coarse, &minus)),
                };
                let fd = (lp - lm) / (2.0 * h as f64);
                assert!((fd - grad.data()[i] as f64).abs() < 1e-4, "{which}/{i}");
            }
        };
        check(&fine, &gf, 0);
        check(&coarse, &gc, 1);
        check(&alpha, &ga, 2);
    }
}
