//! PSNR, SSIM and SMAPE over frames and sequences, plus JSON reports.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::preprocess::{tone_map, DEFAULT_GAMMA};
use crate::tensor::read_pfm;
use crate::{Error, Result, Tensor};

pub use crate::network::{smape, SMAPE_EPS};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `-10 log10(MSE / peak²)`; `+inf` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.expect_shape(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("psnr peak {peak} must be positive")));
    }
    if a.data().is_empty() {
        return Err(Error::Dimension("psnr of empty images".into()));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (mse / (peak * peak)).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region filtering of a `h × w` plane.
fn blur_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM, Gaussian 11×11 window (σ 1.5), valid windows only,
/// averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b, "ssim")?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let per_channel: Vec<f64> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let pa: Vec<f64> = (0..h * w).map(|p| a.data()[p * c + ch] as f64).collect();
            let pb: Vec<f64> = (0..h * w).map(|p| b.data()[p * c + ch] as f64).collect();
            let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<f64>>();
            let mu_a = blur_valid(&pa, h, w, &g);
            let mu_b = blur_valid(&pb, h, w, &g);
            let e_aa = blur_valid(&prod(&pa, &pa), h, w, &g);
            let e_bb = blur_valid(&prod(&pb, &pb), h, w, &g);
            let e_ab = blur_valid(&prod(&pa, &pb), h, w, &g);
            let mut sum = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            sum / mu_a.len() as f64
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub tone_gamma: f32,
    pub psnr_peak: f64,
    /// Color space of PSNR/SSIM; SMAPE is always HDR.
    pub color_space: String,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub smape_eps: f32,
}

impl MetricConfig {
    pub fn new(tone_gamma: f32) -> Self {
        Self {
            tone_gamma,
            psnr_peak: 1.0,
            color_space: "ldr".into(),
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            smape_eps: SMAPE_EPS,
        }
    }
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self::new(DEFAULT_GAMMA)
    }
}

/// `psnr_db` is `None` when the images are identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub psnr_db: Option<f64>,
    pub identical: bool,
    pub ssim: f64,
    pub smape: f64,
}

impl FrameMetrics {
    pub fn psnr(&self) -> f64 {
        self.psnr_db.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_db: Option<f64>,
    pub identical: bool,
    pub ssim: f64,
    pub smape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricConfig,
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: Aggregate,
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Metrics of one HDR frame against its HDR reference.
pub fn frame_metrics(frame_index: usize, denoised: &Tensor, reference: &Tensor, cfg: &MetricConfig) -> Result<FrameMetrics> {
    denoised.expect_shape(reference, "evaluated frame")?;
    let a = tone_map(&denoised.map(|v| v.max(0.0)), cfg.tone_gamma)?;
    let b = tone_map(&reference.map(|v| v.max(0.0)), cfg.tone_gamma)?;
    let p = psnr(&a, &b, cfg.psnr_peak)?;
    Ok(FrameMetrics {
        frame_index,
        psnr_db: finite_or_none(p),
        identical: p.is_infinite(),
        ssim: ssim(&a, &b)?,
        smape: smape(denoised, reference, cfg.smape_eps)? as f64,
    })
}

pub fn aggregate(per_frame: &[FrameMetrics]) -> Aggregate {
    let n = per_frame.len().max(1) as f64;
    let psnr = per_frame.iter().map(|f| f.psnr()).sum::<f64>() / n;
    Aggregate {
        psnr_db: finite_or_none(psnr),
        identical: psnr.is_infinite(),
        ssim: per_frame.iter().map(|f| f.ssim).sum::<f64>() / n,
        smape: per_frame.iter().map(|f| f.smape).sum::<f64>() / n,
    }
}

pub fn evaluate_frames(frames: &[(usize, Tensor, Tensor)], cfg: &MetricConfig) -> Result<MetricReport> {
    let per_frame = frames
        .par_iter()
        .map(|(i, d, r)| frame_metrics(*i, d, r, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        config: cfg.clone(),
        aggregate: aggregate(&per_frame),
        per_frame,
    })
}

fn frame_number(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?;
    let digits = digits.strip_suffix(".pfm").unwrap_or(digits);
    (!digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

/// Frames in a directory, either `frame_####.pfm` files or
/// `frame_####/<inner>` files, sorted by index.
pub fn list_frames(dir: impl AsRef<Path>, inner: &str) -> Result<Vec<(usize, PathBuf)>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(idx) = frame_number(&name) else { continue };
        let path = e.path();
        if name.ends_with(".pfm") && path.is_file() {
            out.push((idx, path));
        } else if path.is_dir() && path.join(inner).is_file() {
            out.push((idx, path.join(inner)));
        }
    }
    out.sort();
    out.dedup_by_key(|f| f.0);
    Ok(out)
}

pub fn evaluate_sequence(
    denoised_dir: impl AsRef<Path>,
    reference_dir: impl AsRef<Path>,
    tone_gamma: f32,
) -> Result<MetricReport> {
    let den = list_frames(denoised_dir, "denoised.pfm")?;
    let refs = list_frames(reference_dir, "reference.pfm")?;
    if den.len() != refs.len() || den.iter().zip(&refs).any(|(a, b)| a.0 != b.0) {
        return Err(Error::Config(format!(
            "{} denoised frames do not match {} reference frames",
            den.len(),
            refs.len()
        )));
    }
    if den.is_empty() {
        return Err(Error::Config("no frames to evaluate".into()));
    }
    let frames = den
        .iter()
        .zip(&refs)
        .map(|((i, d), (_, r))| Ok((*i, read_pfm(d)?, read_pfm(r)?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_frames(&frames, &MetricConfig::new(tone_gamma))
}

pub fn write_report(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::write_pfm;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_closed_form() {
        let a = Tensor::filled(4, 4, 3, 0.25);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::zeros(4, 4, 1), 1.0).is_err());
        assert!(matches!(psnr(&a, &b, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn psnr_matches_f64_oracle() {
        let (a, b) = (random(9, 7, 3, 1), random(9, 7, 3, 2));
        let n = a.data().len() as f64;
        let mse: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
        let oracle = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn psnr_decreases_with_shift() {
        let a = random(8, 8, 3, 3);
        let mut last = f64::INFINITY;
        for d in [0.001f32, 0.01, 0.05, 0.2] {
            let p = psnr(&a, &a.map(|v| v + d), 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    /// Per-window SSIM in f64 straight from the definition.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w, c) = (a.height(), a.width(), a.channels());
        let mut g = [[0.0f64; 11]; 11];
        let mut gs = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
                gs += *v;
            }
        }
        let mut total = 0.0;
        for ch in 0..c {
            let mut sum = 0.0;
            let mut count = 0.0;
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i][j] / gs;
                            ma += wt * a.at(y + i, x + j, ch) as f64;
                            mb += wt * b.at(y + i, x + j, ch) as f64;
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i][j] / gs;
                            let da = a.at(y + i, x + j, ch) as f64 - ma;
                            let db = b.at(y + i, x + j, ch) as f64 - mb;
                            va += wt * da * da;
                            vb += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    sum += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                        / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                    count += 1.0;
                }
            }
            total += sum / count;
        }
        total / c as f64
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let (a, b) = (random(16, 16, 3, 4), random(16, 16, 3, 5));
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
        let c = a.map(|v| (v * 0.8 + 0.1).min(1.0));
        assert!((ssim(&a, &c).unwrap() - ssim_oracle(&a, &c)).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = random(12, 13, 3, 6);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let k = Tensor::filled(11, 11, 1, 0.5);
        assert_eq!(ssim(&k, &k).unwrap(), 1.0);
        assert!(matches!(ssim(&Tensor::zeros(10, 20, 1), &Tensor::zeros(10, 20, 1)), Err(Error::Dimension(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ssim_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (random(12, 12, 2, s1), random(12, 12, 2, s2 + 5000));
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn smape_is_the_network_one() {
        let (a, b) = (random(5, 5, 3, 7), random(5, 5, 3, 8));
        assert_eq!(smape(&a, &b, SMAPE_EPS).unwrap(), crate::network::smape(&a, &b, SMAPE_EPS).unwrap());
    }

    #[test]
    fn aggregate_is_mean() {
        let r = random(12, 12, 3, 9);
        let d1 = r.map(|v| v * 0.9);
        let d2 = r.map(|v| v * 0.5);
        let rep = evaluate_frames(&[(0, d1, r.clone()), (1, d2, r.clone())], &MetricConfig::default()).unwrap();
        let f = &rep.per_frame;
        assert!((rep.aggregate.ssim - (f[0].ssim + f[1].ssim) / 2.0).abs() < 1e-12);
        assert!((rep.aggregate.smape - (f[0].smape + f[1].smape) / 2.0).abs() < 1e-12);
        assert!((rep.aggregate.psnr_db.unwrap() - (f[0].psnr() + f[1].psnr()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_report_identical_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (den, refd) = (dir.path().join("den"), dir.path().join("ref"));
        std::fs::create_dir_all(den.clone()).unwrap();
        std::fs::create_dir_all(refd.join("frame_0000")).unwrap();
        let img = random(12, 12, 3, 10).map(|v| v * 3.0);
        write_pfm(&img, den.join("frame_0000.pfm")).unwrap();
        write_pfm(&img, refd.join("frame_0000").join("reference.pfm")).unwrap();
        let rep = evaluate_sequence(&den, &refd, 2.2).unwrap();
        let f = &rep.per_frame[0];
        assert_eq!((f.smape, f.ssim, f.psnr_db, f.identical), (0.0, 1.0, None, true));
        let p = dir.path().join("report.json");
        write_report(&rep, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&first).unwrap();
        assert!(json["per_frame"][0]["psnr_db"].is_null());
        assert_eq!(json["per_frame"][0]["identical"], true);
        assert_eq!(json["config"]["color_space"], "ldr");
        write_report(&evaluate_sequence(&den, &refd, 2.2).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);

        write_pfm(&img, den.join("frame_0001.pfm")).unwrap();
        assert!(matches!(evaluate_sequence(&den, &refd, 2.2), Err(Error::Config(_))));
    }
}
