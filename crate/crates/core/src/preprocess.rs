//! Renderer-to-network glue: tone mapping, albedo demodulation, temporal
//! reprojection/accumulation and packing of the 10-channel network input.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_pfm, Tensor};
use crate::{Error, Result};

pub const PACKED_CHANNELS: usize = 10;
pub const DEFAULT_GAMMA: f32 = 2.2;
pub const DEFAULT_BLEND_ALPHA: f32 = 0.2;
pub const DEFAULT_ALBEDO_EPS: f32 = 1e-3;
pub const DEFAULT_NORMAL_TOL: f32 = 0.9;
/// Position tolerance as a fraction of the scene bounding-box diagonal.
pub const DEFAULT_POS_TOL_FRACTION: f32 = 0.01;

/// One rendered frame plus its noise-free auxiliary buffers.
#[derive(Clone, Debug)]
pub struct FrameBundle {
    pub radiance: Tensor,
    pub albedo: Tensor,
    /// Unit normals mapped from [-1, 1] to [0, 1].
    pub normal: Tensor,
    /// Depth linearly scaled to [0, 1].
    pub depth: Tensor,
    pub world_pos: Tensor,
    /// Per-pixel `(dx, dy)` offset to the same surface point in the previous frame.
    pub motion: Tensor,
    pub reference: Option<Tensor>,
    pub frame_index: usize,
}

impl FrameBundle {
    pub fn height(&self) -> usize {
        self.radiance.height()
    }

    pub fn width(&self) -> usize {
        self.radiance.width()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.radiance;
        r.expect_channels(3, "radiance")?;
        for (t, c, name) in [
            (&self.albedo, 3, "albedo"),
            (&self.normal, 3, "normal"),
            (&self.depth, 1, "depth"),
            (&self.world_pos, 3, "world_pos"),
            (&self.motion, 2, "motion"),
        ] {
            r.expect_size(t, name)?;
            t.expect_channels(c, name)?;
        }
        if let Some(reference) = &self.reference {
            r.expect_shape(reference, "reference")?;
        }
        Ok(())
    }

    /// Reads `frame_####/` from a dataset directory.
    pub fn read(dir: impl AsRef<Path>, frame_index: usize) -> Result<Self> {
        let frame_dir = dir.as_ref().join(frame_dir_name(frame_index));
        let load = |name: &str| read_pfm(frame_dir.join(format!("{name}.pfm")));
        let reference_path = frame_dir.join("reference.pfm");
        let motion3 = load("motion")?;
        let bundle = FrameBundle {
            radiance: load("color")?,
            albedo: load("albedo")?,
            normal: load("normal")?,
            depth: load("depth")?,
            world_pos: load("world_pos")?,
            motion: motion3.slice_channels(0, 2)?,
            reference: if reference_path.exists() {
                Some(read_pfm(reference_path)?)
            } else {
                None
            },
            frame_index,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn frame_dir_name(frame_index: usize) -> String {
    format!("frame_{frame_index:04}")
}

/// Dataset-level `meta.json`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub noise_model: String,
    pub camera_speed: i32,
    /// Diagonal of the scene bounding box in scene units.
    pub scene_scale: f32,
    #[serde(default)]
    pub noise_seed: Option<u64>,
    #[serde(default)]
    pub texture_freq: Option<f32>,
}

impl DatasetMeta {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("meta.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Boolean per-pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// History carried between consecutive frames.
#[derive(Clone, Debug)]
pub struct TemporalState {
    pub accum_radiance: Tensor,
    pub prev_world_pos: Tensor,
    pub prev_normal: Tensor,
    pub valid: Mask,
}

impl TemporalState {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            accum_radiance: Tensor::zeros(height, width, 3),
            prev_world_pos: Tensor::zeros(height, width, 3),
            prev_normal: Tensor::zeros(height, width, 3),
            valid: Mask::filled(height, width, false),
        }
    }
}

/// Output of [`reproject`].
#[derive(Clone, Debug)]
pub struct Reprojected {
    pub radiance: Tensor,
    pub world_pos: Tensor,
    pub normal: Tensor,
    pub in_bounds: Mask,
}

/// `clamp(hdr, 0, 1)^(1/gamma)`.
pub fn tone_map(hdr: &Tensor, gamma: f32) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    if let Some(v) = hdr.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::Domain(format!("negative radiance {v}")));
    }
    let inv = 1.0 / gamma;
    Ok(hdr.map(|v| v.min(1.0).powf(inv)))
}

pub fn demodulate_albedo(radiance: &Tensor, albedo: &Tensor, eps: f32) -> Result<Tensor> {
    radiance.expect_shape(albedo, "demodulate_albedo")?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("albedo eps must be positive, got {eps}")));
    }
    let data = radiance
        .data()
        .iter()
        .zip(albedo.data())
        .map(|(&r, &a)| r / a.max(eps))
        .collect();
    Tensor::from_vec(radiance.height(), radiance.width(), radiance.channels(), data)
}

pub fn remodulate_albedo(irradiance: &Tensor, albedo: &Tensor) -> Result<Tensor> {
    irradiance.expect_shape(albedo, "remodulate_albedo")?;
    let data = irradiance
        .data()
        .iter()
        .zip(albedo.data())
        .map(|(&e, &a)| e * a)
        .collect();
    Tensor::from_vec(irradiance.height(), irradiance.width(), irradiance.channels(), data)
}

/// Nearest-pixel warp of the previous frame's buffers along `motion`.
pub fn reproject(prev: &TemporalState, motion: &Tensor) -> Result<Reprojected> {
    let (h, w) = (prev.accum_radiance.height(), prev.accum_radiance.width());
    prev.accum_radiance.expect_size(motion, "reproject")?;
    motion.expect_channels(2, "motion")?;
    let mut out = Reprojected {
        radiance: Tensor::zeros(h, w, 3),
        world_pos: Tensor::zeros(h, w, 3),
        normal: Tensor::zeros(h, w, 3),
        in_bounds: Mask::filled(h, w, false),
    };
    for y in 0..h {
        for x in 0..w {
            let m = motion.pixel(y, x);
            let sx = (x as f32 + m[0]).round();
            let sy = (y as f32 + m[1]).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f32 || sy >= h as f32 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            out.radiance
                .pixel_mut(y, x)
                .copy_from_slice(prev.accum_radiance.pixel(sy, sx));
            out.world_pos
                .pixel_mut(y, x)
                .copy_from_slice(prev.prev_world_pos.pixel(sy, sx));
            out.normal
                .pixel_mut(y, x)
                .copy_from_slice(prev.prev_normal.pixel(sy, sx));
            out.in_bounds.data[y * w + x] = prev.valid.get(sy, sx);
        }
    }
    Ok(out)
}

fn unscaled_unit(n: &[f32]) -> [f32; 3] {
    let v = [2.0 * n[0] - 1.0, 2.0 * n[1] - 1.0, 2.0 * n[2] - 1.0];
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if len > 0.0 {
        [v[0] / len, v[1] / len, v[2] / len]
    } else {
        v
    }
}

/// Geometry test: world positions closer than `pos_tol` and shading normals
/// (stored in [0, 1]) with cosine above `normal_tol`.
pub fn consistency_test(
    cur_pos: &Tensor,
    cur_normal: &Tensor,
    warped_pos: &Tensor,
    warped_normal: &Tensor,
    pos_tol: f32,
    normal_tol: f32,
) -> Result<Mask> {
    cur_pos.expect_shape(cur_normal, "consistency_test normal")?;
    cur_pos.expect_shape(warped_pos, "consistency_test warped_pos")?;
    cur_pos.expect_shape(warped_normal, "consistency_test warped_normal")?;
    if !(pos_tol > 0.0) || !(normal_tol > 0.0 && normal_tol <= 1.0) {
        return Err(Error::Config(format!(
            "bad tolerances pos_tol={pos_tol} normal_tol={normal_tol}"
        )));
    }
    let (h, w) = (cur_pos.height(), cur_pos.width());
    let mut mask = Mask::filled(h, w, false);
    for i in 0..h * w {
        let (a, b) = (&cur_pos.data()[i * 3..i * 3 + 3], &warped_pos.data()[i * 3..i * 3 + 3]);
        let d2: f32 = (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum();
        let na = unscaled_unit(&cur_normal.data()[i * 3..i * 3 + 3]);
        let nb = unscaled_unit(&warped_normal.data()[i * 3..i * 3 + 3]);
        let cos = na[0] * nb[0] + na[1] * nb[1] + na[2] * nb[2];
        mask.data[i] = d2.sqrt() < pos_tol && cos > normal_tol;
    }
    Ok(mask)
}

/// Blends history into the current frame where `mask` holds; other pixels
/// keep the current sample. Returns the accumulated radiance and the mask of
/// pixels that actually used history.
pub fn temporal_accumulate(
    cur_radiance: &Tensor,
    warped_radiance: &Tensor,
    mask: &Mask,
    blend_alpha: f32,
) -> Result<(Tensor, Mask)> {
    cur_radiance.expect_shape(warped_radiance, "temporal_accumulate")?;
    if !(blend_alpha > 0.0 && blend_alpha <= 1.0) {
        return Err(Error::Config(format!("blend_alpha {blend_alpha} not in (0, 1]")));
    }
    let c = cur_radiance.channels();
    let mut accum = cur_radiance.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            let out = &mut accum.data_mut()[i * c..(i + 1) * c];
            let prev = &warped_radiance.data()[i * c..(i + 1) * c];
            for (o, &p) in out.iter_mut().zip(prev) {
                *o = (1.0 - blend_alpha) * p + blend_alpha * *o;
            }
        }
    }
    Ok((accum, mask.clone()))
}

/// Network input: tone-mapped accumulated color, albedo, normal, depth.
pub fn pack_inputs(bundle: &FrameBundle, accum_radiance: &Tensor, gamma: f32) -> Result<Tensor> {
    bundle.validate()?;
    bundle.radiance.expect_shape(accum_radiance, "pack_inputs")?;
    let color = tone_map(accum_radiance, gamma)?;
    Tensor::concat_channels(&[&color, &bundle.albedo, &bundle.normal, &bundle.depth])
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TemporalConfig {
    pub enabled: bool,
    pub blend_alpha: f32,
    pub pos_tol: f32,
    pub normal_tol: f32,
}

impl TemporalConfig {
    pub fn for_scene(scene_scale: f32) -> Self {
        Self {
            enabled: true,
            blend_alpha: DEFAULT_BLEND_ALPHA,
            pos_tol: DEFAULT_POS_TOL_FRACTION * scene_scale,
            normal_tol: DEFAULT_NORMAL_TOL,
        }
    }
}

/// Everything the denoiser needs for one frame after preprocessing.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub packed: Tensor,
    /// Demodulated HDR irradiance to be filtered.
    pub irradiance: Tensor,
    pub albedo: Tensor,
    pub accum_radiance: Tensor,
    pub noisy_radiance: Tensor,
    pub reference: Option<Tensor>,
    pub frame_index: usize,
}

/// Runs temporal accumulation over a frame sequence and prepares network
/// inputs for every frame.
pub struct SequencePreprocessor {
    cfg: TemporalConfig,
    gamma: f32,
    albedo_eps: f32,
    state: Option<TemporalState>,
}

impl SequencePreprocessor {
    pub fn new(cfg: TemporalConfig) -> Self {
        Self {
            cfg,
            gamma: DEFAULT_GAMMA,
            albedo_eps: DEFAULT_ALBEDO_EPS,
            state: None,
        }
    }

    pub fn push(&mut self, bundle: &FrameBundle) -> Result<PreparedFrame> {
        bundle.validate()?;
        let (h, w) = (bundle.height(), bundle.width());
        let accum = if self.cfg.enabled {
            let state = self
                .state
                .get_or_insert_with(|| TemporalState::empty(h, w));
            let warped = reproject(state, &bundle.motion)?;
            let consistent = consistency_test(
                &bundle.world_pos,
                &bundle.normal,
                &warped.world_pos,
                &warped.normal,
                self.cfg.pos_tol,
                self.cfg.normal_tol,
            )?;
            let mask = Mask {
                height: h,
                width: w,
                data: consistent
                    .data
                    .iter()
                    .zip(&warped.in_bounds.data)
                    .map(|(&a, &b)| a && b)
                    .collect(),
            };
            let (accum, _) =
                temporal_accumulate(&bundle.radiance, &warped.radiance, &mask, self.cfg.blend_alpha)?;
            *state = TemporalState {
                accum_radiance: accum.clone(),
                prev_world_pos: bundle.world_pos.clone(),
                prev_normal: bundle.normal.clone(),
                valid: Mask::filled(h, w, true),
            };
            accum
        } else {
            bundle.radiance.clone()
        };
        Ok(PreparedFrame {
            packed: pack_inputs(bundle, &accum, self.gamma)?,
            irradiance: demodulate_albedo(&accum, &bundle.albedo, self.albedo_eps)?,
            albedo: bundle.albedo.clone(),
            accum_radiance: accum,
            noisy_radiance: bundle.radiance.clone(),
            reference: bundle.reference.clone(),
            frame_index: bundle.frame_index,
        })
    }
}

/// Frame indices present in a dataset directory (`frame_####/color.pfm`).
pub fn dataset_frames(dir: impl AsRef<Path>) -> Result<Vec<usize>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(digits) = name.strip_prefix("frame_") else { continue };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        if e.path().join("color.pfm").is_file() {
            out.push(digits.parse().map_err(|_| Error::Parse(format!("bad frame directory {name}")))?);
        }
    }
    out.sort_unstable();
    if out.is_empty() {
        return Err(Error::Config(format!("no frames in {}", dir.display())));
    }
    Ok(out)
}

/// Bounding-box diagonal of a world-position buffer.
pub fn world_extent(world_pos: &Tensor) -> f32 {
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for p in world_pos.data().chunks_exact(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    (0..3).map(|c| (hi[c] - lo[c]).max(0.0).powi(2)).sum::<f32>().sqrt()
}

/// Reads and preprocesses a whole dataset in frame order. The scene scale
/// comes from `meta.json` when present, else from the first frame.
pub fn prepare_dataset(dir: impl AsRef<Path>, temporal: bool) -> Result<Vec<PreparedFrame>> {
    let dir = dir.as_ref();
    let frames = dataset_frames(dir)?;
    let bundles = frames
        .iter()
        .map(|&f| FrameBundle::read(dir, f))
        .collect::<Result<Vec<_>>>()?;
    let scale = if dir.join("meta.json").is_file() {
        DatasetMeta::read(dir)?.scene_scale
    } else {
        world_extent(&bundles[0].world_pos)
    };
    let mut cfg = TemporalConfig::for_scene(scale);
    cfg.enabled = temporal;
    let mut pre = SequencePreprocessor::new(cfg);
    bundles.iter().map(|b| pre.push(b)).collect()
}
