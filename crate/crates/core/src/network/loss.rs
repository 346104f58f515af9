use crate::{Error, Result, Tensor};

pub const SMAPE_EPS: f32 = 0.01;

/// Symmetric mean absolute percentage error and its subgradient with respect
/// to `denoised`. The subgradient of `|x|` at zero is taken as 0.
pub fn smape_loss(denoised: &Tensor, reference: &Tensor, eps: f32) -> Result<(f32, Tensor)> {
    denoised.expect_shape(reference, "smape_loss")?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("smape eps must be positive, got {eps}")));
    }
    let n = denoised.data().len();
    let scale = 1.0 / n as f64;
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(denoised.height(), denoised.width(), denoised.channels());
    for ((g, &r), &t) in grad.data_mut().iter_mut().zip(denoised.data()).zip(reference.data()) {
        let (r, t) = (r as f64, t as f64);
        let d = r - t;
        let denom = r.abs() + t.abs() + eps as f64;
        total += d.abs() / denom;
        let sd = sign(d);
        let sr = sign(r);
        *g = ((sd / denom - d.abs() * sr / (denom * denom)) * scale) as f32;
    }
    Ok(((total * scale) as f32, grad))
}

/// Loss value only.
pub fn smape(denoised: &Tensor, reference: &Tensor, eps: f32) -> Result<f32> {
    denoised.expect_shape(reference, "smape")?;
    let total: f64 = denoised
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&r, &t)| {
            let (r, t) = (r as f64, t as f64);
            (r - t).abs() / (r.abs() + t.abs() + eps as f64)
        })
        .sum();
    Ok((total / denoised.data().len() as f64) as f32)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
