//! Procedural scenes with analytic reference radiance, multiplicative
//! Monte Carlo style noise, noise-free auxiliary buffers and integer camera
//! motion.

use std::f32::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::preprocess::{frame_dir_name, DatasetMeta, FrameBundle};
use crate::tensor::write_pfm;
use crate::{Error, Result, Tensor};

pub const MIN_SIZE: usize = 64;
const HEIGHT_AMPLITUDE: f32 = 0.05;
const GAUSS_SIGMA: f32 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseModel {
    /// `s ~ Exp(1)`.
    #[default]
    #[serde(rename = "exponential_1spp")]
    Exponential,
    /// `s = 1 + 0.3 z`, `z` standard normal truncated to ±3.
    #[serde(rename = "gaussian")]
    Gaussian,
}

impl NoiseModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseModel::Exponential => "exponential_1spp",
            NoiseModel::Gaussian => "gaussian",
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f32 {
        match self {
            NoiseModel::Exponential => Exp1.sample(rng),
            NoiseModel::Gaussian => loop {
                let z: f32 = StandardNormal.sample(rng);
                if z.abs() <= 3.0 {
                    break 1.0 + GAUSS_SIGMA * z;
                }
            },
        }
    }

    /// Standard deviation of `s`.
    pub fn std_dev(&self) -> f64 {
        match self {
            NoiseModel::Exponential => 1.0,
            // Variance of a standard normal truncated to ±3.
            NoiseModel::Gaussian => {
                let phi3 = (-4.5f64).exp() / (std::f64::consts::TAU).sqrt();
                let mass = 0.997_300_203_936_740;
                GAUSS_SIGMA as f64 * (1.0 - 6.0 * phi3 / mass).sqrt()
            }
        }
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" | "exponential" | "exponential_1spp" => Ok(NoiseModel::Exponential),
            "gauss" | "gaussian" => Ok(NoiseModel::Gaussian),
            other => Err(Error::Config(format!("unknown noise model {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub noise_model: NoiseModel,
    /// Pixels per frame along +x.
    pub camera_speed: i32,
    /// Albedo texture cycles per image width.
    pub texture_freq: f32,
    /// Seed for the noise only; defaults to `seed`.
    pub noise_seed: Option<u64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 256,
            height: 256,
            frames: 8,
            noise_model: NoiseModel::Exponential,
            camera_speed: 1,
            texture_freq: 8.0,
            noise_seed: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_SIZE || self.height < MIN_SIZE {
            return Err(Error::Config(format!(
                "scene {}x{} smaller than {MIN_SIZE}x{MIN_SIZE}",
                self.width, self.height
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("at least one frame required".into()));
        }
        if !(self.texture_freq.is_finite() && self.texture_freq >= 0.0) {
            return Err(Error::Config("texture frequency must be non-negative".into()));
        }
        Ok(())
    }

    pub fn effective_noise_seed(&self) -> u64 {
        self.noise_seed.unwrap_or(self.seed)
    }
}

struct Lobe {
    center: (f32, f32),
    inv_two_sigma2: f32,
    amp: [f32; 3],
}

struct Shadow {
    center: (f32, f32),
    radius: f32,
    factor: f32,
}

struct Wave {
    amp: f32,
    freq: (f32, f32),
    phase: f32,
}

/// Noise-free content of one frame.
#[derive(Clone, Debug)]
pub struct CleanFrame {
    pub irradiance: Tensor,
    pub albedo: Tensor,
    pub normal: Tensor,
    pub depth: Tensor,
    pub world_pos: Tensor,
    pub motion: Tensor,
}

impl CleanFrame {
    pub fn reference(&self) -> Tensor {
        product(&self.irradiance, &self.albedo)
    }
}

fn product(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.height(), a.width(), a.channels(), data).expect("same shape")
}

/// A procedural scene; world coordinates are measured in pixels with the
/// camera at `x + camera_speed · frame`.
pub struct Scene {
    cfg: SceneConfig,
    lobes: Vec<Lobe>,
    shadows: Vec<Shadow>,
    height: Vec<Wave>,
    tex_phase: [f32; 6],
    tex_tint: [[f32; 3]; 2],
    light: [f32; 3],
    ambient: f32,
}

impl Scene {
    pub fn new(cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (w, h) = (cfg.width as f32, cfg.height as f32);
        let span = w + (cfg.camera_speed.unsigned_abs() as f32) * (cfg.frames as f32 - 1.0);
        let dir = if cfg.camera_speed < 0 { -1.0 } else { 1.0 };
        let rand_u = |rng: &mut ChaCha8Rng| dir * rng.random_range(0.0..span.max(1.0));
        let lobes = (0..rng.random_range(3..=5))
            .map(|_| {
                let sigma = rng.random_range(0.15..0.4) * h;
                let strength = rng.random_range(0.6..2.0);
                Lobe {
                    center: (rand_u(&mut rng), rng.random_range(0.0..h)),
                    inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                    amp: [0; 3].map(|_| strength * rng.random_range(0.6..1.0)),
                }
            })
            .collect();
        let shadows = (0..rng.random_range(2..=4))
            .map(|_| Shadow {
                center: (rand_u(&mut rng), rng.random_range(0.0..h)),
                radius: rng.random_range(0.08..0.2) * h,
                factor: rng.random_range(0.15..0.45),
            })
            .collect();
        let height = (0..4)
            .map(|i| Wave {
                amp: HEIGHT_AMPLITUDE / (i as f32 + 1.0),
                freq: (
                    rng.random_range(0.5..3.0) * (i as f32 + 1.0) / w,
                    rng.random_range(0.5..3.0) * (i as f32 + 1.0) / w,
                ),
                phase: rng.random_range(0.0..TAU),
            })
            .collect();
        let tex_phase = [0.0; 6].map(|_| rng.random_range(0.0..TAU));
        let tex_tint = [[0.0; 3]; 2].map(|t| t.map(|_| rng.random_range(0.3..1.0)));
        let (lx, ly) = (rng.random_range(-0.5f32..0.5), rng.random_range(-0.5f32..0.5));
        let ln = (lx * lx + ly * ly + 1.0).sqrt();
        Ok(Self {
            cfg: cfg.clone(),
            lobes,
            shadows,
            height,
            tex_phase,
            tex_tint,
            light: [lx / ln, ly / ln, 1.0 / ln],
            ambient: rng.random_range(0.1..0.2),
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    /// Diagonal of the bounding box of every visible world position.
    pub fn scene_scale(&self) -> f32 {
        let w = self.cfg.width as f32;
        let span = w + self.cfg.camera_speed.unsigned_abs() as f32 * (self.cfg.frames as f32 - 1.0);
        let (dx, dy) = (span / w, self.cfg.height as f32 / w);
        let dz = 2.0 * self.max_height();
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn max_height(&self) -> f32 {
        self.height.iter().map(|h| h.amp).sum()
    }

    /// Height (scene units) and its gradient per scene unit.
    fn surface(&self, u: f32, v: f32) -> (f32, f32, f32) {
        let w = self.cfg.width as f32;
        let (mut z, mut gu, mut gv) = (0.0, 0.0, 0.0);
        for wave in &self.height {
            let arg = TAU * (wave.freq.0 * u + wave.freq.1 * v) + wave.phase;
            z += wave.amp * arg.sin();
            let d = wave.amp * arg.cos() * TAU * w;
            gu += d * wave.freq.0;
            gv += d * wave.freq.1;
        }
        (z, gu, gv)
    }

    fn albedo_at(&self, u: f32, v: f32) -> [f32; 3] {
        let f = self.cfg.texture_freq / self.cfg.width as f32;
        let p = &self.tex_phase;
        let fine = (TAU * f * u + p[0]).sin() * (TAU * f * v + p[1]).sin();
        let mid = (TAU * 0.37 * f * (u + v) + p[2]).sin();
        let checker = (TAU * 0.125 * f * u + p[3]).sin() * (TAU * 0.125 * f * v + p[4]).sin() > 0.0;
        let tint = self.tex_tint[usize::from(checker)];
        let base = 0.55 + 0.25 * fine + 0.15 * mid;
        [0, 1, 2].map(|c| (base * tint[c] + 0.05 * (p[5] + c as f32).sin()).clamp(0.05, 1.0))
    }

    /// Noise-free buffers of frame `frame_index`.
    pub fn clean_frame(&self, frame_index: usize) -> Result<CleanFrame> {
        if frame_index >= self.cfg.frames {
            return Err(Error::Config(format!(
                "frame {frame_index} outside 0..{}",
                self.cfg.frames
            )));
        }
        let (h, w) = (self.cfg.height, self.cfg.width);
        let wf = w as f32;
        let shift = self.cfg.camera_speed as f32 * frame_index as f32;
        let amax = self.max_height();
        let mut out = CleanFrame {
            irradiance: Tensor::zeros(h, w, 3),
            albedo: Tensor::zeros(h, w, 3),
            normal: Tensor::zeros(h, w, 3),
            depth: Tensor::zeros(h, w, 1),
            world_pos: Tensor::zeros(h, w, 3),
            motion: Tensor::zeros(h, w, 2),
        };
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 + shift, y as f32);
                let (z, gu, gv) = self.surface(u, v);
                let nl = (gu * gu + gv * gv + 1.0).sqrt();
                let n = [-gu / nl, -gv / nl, 1.0 / nl];
                let ndotl = (n[0] * self.light[0] + n[1] * self.light[1] + n[2] * self.light[2]).max(0.0);
                let shade = 0.5 + 0.5 * ndotl;
                let shadow: f32 = self
                    .shadows
                    .iter()
                    .filter(|s| {
                        let (du, dv) = (u - s.center.0, v - s.center.1);
                        du * du + dv * dv < s.radius * s.radius
                    })
                    .map(|s| s.factor)
                    .product();
                let mut irr = [self.ambient; 3];
                for l in &self.lobes {
                    let (du, dv) = (u - l.center.0, v - l.center.1);
                    let g = (-(du * du + dv * dv) * l.inv_two_sigma2).exp();
                    for c in 0..3 {
                        irr[c] += l.amp[c] * g;
                    }
                }
                out.irradiance.pixel_mut(y, x).copy_from_slice(&irr.map(|i| i * shade * shadow));
                out.albedo.pixel_mut(y, x).copy_from_slice(&self.albedo_at(u, v));
                out.normal.pixel_mut(y, x).copy_from_slice(&n.map(|c| 0.5 * c + 0.5));
                out.depth.set(y, x, 0, (amax - z) / (2.0 * amax));
                out.world_pos.pixel_mut(y, x).copy_from_slice(&[u / wf, v / wf, z]);
                out.motion.pixel_mut(y, x).copy_from_slice(&[self.cfg.camera_speed as f32, 0.0]);
            }
        }
        Ok(out)
    }

    /// Noisy radiance `albedo · irradiance · s` with a fresh `s` per pixel.
    pub fn noisy_radiance(&self, clean: &CleanFrame, rng: &mut impl Rng) -> Tensor {
        let model = self.cfg.noise_model;
        let mut out = product(&clean.irradiance, &clean.albedo);
        for px in out.data_mut().chunks_exact_mut(3) {
            let s = model.sample(rng);
            px.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    fn noise_rng(&self, frame_index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.effective_noise_seed());
        rng.set_stream(frame_index as u64);
        rng
    }

    pub fn generate_frame(&self, frame_index: usize) -> Result<FrameBundle> {
        let clean = self.clean_frame(frame_index)?;
        let radiance = self.noisy_radiance(&clean, &mut self.noise_rng(frame_index));
        Ok(FrameBundle {
            radiance,
            reference: Some(clean.reference()),
            albedo: clean.albedo,
            normal: clean.normal,
            depth: clean.depth,
            world_pos: clean.world_pos,
            motion: clean.motion,
            frame_index,
        })
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            seed: self.cfg.seed,
            width: self.cfg.width,
            height: self.cfg.height,
            frames: self.cfg.frames,
            noise_model: self.cfg.noise_model.as_str().into(),
            camera_speed: self.cfg.camera_speed,
            scene_scale: self.scene_scale(),
            noise_seed: Some(self.cfg.effective_noise_seed()),
            texture_freq: Some(self.cfg.texture_freq),
        }
    }
}

pub fn generate_frame(cfg: &SceneConfig, frame_index: usize) -> Result<FrameBundle> {
    Scene::new(cfg)?.generate_frame(frame_index)
}

fn write_frame(bundle: &FrameBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let motion3 = Tensor::concat_channels(&[&bundle.motion, &Tensor::zeros(bundle.height(), bundle.width(), 1)])?;
    write_pfm(&bundle.radiance, dir.join("color.pfm"))?;
    write_pfm(&bundle.albedo, dir.join("albedo.pfm"))?;
    write_pfm(&bundle.normal, dir.join("normal.pfm"))?;
    write_pfm(&bundle.depth, dir.join("depth.pfm"))?;
    write_pfm(&bundle.world_pos, dir.join("world_pos.pfm"))?;
    write_pfm(&motion3, dir.join("motion.pfm"))?;
    if let Some(r) = &bundle.reference {
        write_pfm(r, dir.join("reference.pfm"))?;
    }
    Ok(())
}

/// Writes every frame plus `meta.json`; returns the metadata.
pub fn write_dataset(cfg: &SceneConfig, out_dir: impl AsRef<Path>) -> Result<DatasetMeta> {
    let out_dir = out_dir.as_ref();
    let scene = Scene::new(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    (0..cfg.frames).into_par_iter().try_for_each(|f| {
        let bundle = scene.generate_frame(f)?;
        write_frame(&bundle, &out_dir.join(frame_dir_name(f)))
    })?;
    let meta = scene.meta();
    let path = out_dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            width: 64,
            height: 64,
            frames: 3,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(matches!(Scene::new(&SceneConfig { width: 63, ..small(0) }), Err(Error::Config(_))));
        assert!(matches!(Scene::new(&SceneConfig { frames: 0, ..small(0) }), Err(Error::Config(_))));
        assert!(matches!(generate_frame(&small(0), 3), Err(Error::Config(_))));
        assert_eq!("gauss".parse::<NoiseModel>().unwrap(), NoiseModel::Gaussian);
        assert!("poisson".parse::<NoiseModel>().is_err());
    }

    #[test]
    fn buffers_are_in_range() {
        let b = generate_frame(&small(1), 1).unwrap();
        b.validate().unwrap();
        for t in [&b.albedo, &b.normal, &b.depth] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(b.albedo.data().iter().all(|&v| v >= 0.05));
        assert!(b.radiance.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        assert!(b.reference.unwrap().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn camera_shift_and_motion() {
        let scene = Scene::new(&small(2)).unwrap();
        let f0 = scene.clean_frame(0).unwrap();
        let f1 = scene.clean_frame(1).unwrap();
        let (r0, r1) = (f0.reference(), f1.reference());
        for y in 0..64 {
            for x in 0..63 {
                assert_eq!(r1.pixel(y, x), r0.pixel(y, x + 1));
                assert_eq!(f1.world_pos.pixel(y, x), f0.world_pos.pixel(y, x + 1));
                assert_eq!(f1.motion.pixel(y, x), &[1.0, 0.0]);
            }
        }
    }

    #[test]
    fn same_seed_same_data_noise_seed_only_changes_noise() {
        let a = generate_frame(&small(3), 2).unwrap();
        let b = generate_frame(&small(3), 2).unwrap();
        assert_eq!(a.radiance, b.radiance);
        let c = generate_frame(&SceneConfig { noise_seed: Some(99), ..small(3) }, 2).unwrap();
        assert_ne!(a.radiance, c.radiance);
        assert_eq!(a.reference, c.reference);
        assert_eq!(a.normal, c.normal);
        assert_eq!(a.world_pos, c.world_pos);
        assert_eq!(a.albedo, c.albedo);
    }

    #[test]
    fn gaussian_std_matches_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| NoiseModel::Gaussian.sample(&mut rng) as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.005);
        assert!((var.sqrt() - NoiseModel::Gaussian.std_dev()).abs() < 0.005);
    }

    #[test]
    fn noisy_mean_converges_to_reference() {
        let scene = Scene::new(&small(5)).unwrap();
        let clean = scene.clean_frame(0).unwrap();
        let reference = clean.reference();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let mut sum = vec![0.0f64; reference.data().len()];
        for _ in 0..n {
            for (s, v) in sum.iter_mut().zip(scene.noisy_radiance(&clean, &mut rng).data()) {
                *s += *v as f64;
            }
        }
        // Pixels share one `s` across channels, so test the first channel.
        let z: Vec<f64> = sum
            .iter()
            .zip(reference.data())
            .step_by(3)
            .map(|(s, &r)| (s / n as f64 - r as f64) / (r as f64 / (n as f64).sqrt()))
            .collect();
        // 0.27% of pixels are expected outside 3σ by chance alone.
        let outside = z.iter().filter(|v| v.abs() > 3.0).count();
        assert!(outside as f64 <= 0.01 * z.len() as f64, "{outside} of {} beyond 3σ", z.len());
        assert!(z.iter().all(|v| v.abs() < 5.0));
    }

    #[test]
    fn variance_shrinks_like_one_over_n() {
        let scene = Scene::new(&small(7)).unwrap();
        let clean = scene.clean_frame(0).unwrap();
        let reference = clean.reference();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mse = |n: usize, rng: &mut ChaCha8Rng| {
            let mut sum = vec![0.0f64; reference.data().len()];
            for _ in 0..n {
                for (s, v) in sum.iter_mut().zip(scene.noisy_radiance(&clean, rng).data()) {
                    *s += *v as f64;
                }
            }
            sum.iter()
                .zip(reference.data())
                .map(|(s, &r)| ((s / n as f64 - r as f64) / r as f64).powi(2))
                .sum::<f64>()
                / sum.len() as f64
        };
        let base = mse(1, &mut rng);
        for n in [16usize, 256] {
            let ratio = base / mse(n, &mut rng) / n as f64;
            assert!((0.5..=2.0).contains(&ratio), "n={n} ratio {ratio}");
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_dataset(&small(9), dir.path()).unwrap();
        let read_meta = DatasetMeta::read(dir.path()).unwrap();
        assert_eq!(meta, read_meta);
        assert!(read_meta.scene_scale > 1.0);
        for f in 0..3 {
            let d = dir.path().join(frame_dir_name(f));
            assert_eq!(std::fs::read_dir(&d).unwrap().count(), 7);
            let b = FrameBundle::read(dir.path(), f).unwrap();
            let g = generate_frame(&small(9), f).unwrap();
            assert_eq!(b.radiance, g.radiance);
            assert_eq!(b.motion, g.motion);
            assert_eq!(b.reference, g.reference);
        }
    }
}
