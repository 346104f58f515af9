//! ImportanceNet stacks and the full denoising pipeline around them.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d, conv2d_backward_opt, ConvParams};
use super::loss::{smape, smape_loss};
use super::repvgg::{block_backward, block_forward_train, repvgg_forward, reparameterize, RepVggBlockParams};
use crate::decoder::{
    combine_resolutions, combine_resolutions_backward, filter_fuse_backward, filter_fuse_streaming,
    BlendLogits, FusionConfig, ImportanceMaps,
};
use crate::preprocess::{demodulate_albedo, remodulate_albedo, PreparedFrame, DEFAULT_ALBEDO_EPS, PACKED_CHANNELS};
use crate::tensor::downsample_2x2;
use crate::{Error, Result, Tensor};

pub const DEFAULT_WIDTH: usize = 32;
pub const DEFAULT_HEAD_KSIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "6layer")]
    SixLayer,
    #[serde(rename = "3layer")]
    ThreeLayer,
    #[serde(rename = "mr")]
    MultiRes,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::SixLayer => "6layer",
            Architecture::ThreeLayer => "3layer",
            Architecture::MultiRes => "mr",
        }
    }

    pub(crate) fn code(&self) -> u32 {
        match self {
            Architecture::SixLayer => 0,
            Architecture::ThreeLayer => 1,
            Architecture::MultiRes => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Architecture::SixLayer),
            1 => Ok(Architecture::ThreeLayer),
            2 => Ok(Architecture::MultiRes),
            c => Err(Error::Parse(format!("unknown architecture code {c}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6layer" => Ok(Architecture::SixLayer),
            "3layer" => Ok(Architecture::ThreeLayer),
            "mr" => Ok(Architecture::MultiRes),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Which side of albedo remodulation the training loss sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSpace {
    #[default]
    Radiance,
    Irradiance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub in_channels: usize,
    /// Output width of each RepVGG block, per resolution level.
    pub widths: Vec<usize>,
    pub head_ksize: usize,
    /// Multi-branch RepVGG blocks (`false`: plain 5×5 conv blocks).
    pub multi_branch: bool,
    pub fusion: FusionConfig,
    /// Resolution levels; 1 for the single-resolution nets.
    pub scales: usize,
}

impl ModelConfig {
    pub fn for_arch(arch: Architecture) -> Self {
        let (blocks, scales, fusion) = match arch {
            Architecture::SixLayer => (6, 1, FusionConfig::default()),
            Architecture::ThreeLayer => (3, 1, FusionConfig::default()),
            Architecture::MultiRes => (3, 3, FusionConfig { kernel_count: 2, base_size: 3, step: 2 }),
        };
        Self {
            arch,
            in_channels: PACKED_CHANNELS,
            widths: vec![DEFAULT_WIDTH; blocks],
            head_ksize: DEFAULT_HEAD_KSIZE,
            multi_branch: true,
            fusion,
            scales,
        }
    }

    pub fn with_fusion(mut self, fusion: FusionConfig) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("bad block widths {:?}", self.widths)));
        }
        if self.head_ksize % 2 == 0 {
            return Err(Error::Config("head kernel size must be odd".into()));
        }
        if self.scales == 0 || self.in_channels == 0 {
            return Err(Error::Config("scales and in_channels must be positive".into()));
        }
        if (self.scales > 1) != (self.arch == Architecture::MultiRes) {
            return Err(Error::Config("only the mr architecture uses several scales".into()));
        }
        Ok(())
    }

    /// Head channels at level `scale`: M importance maps, M blend logits and,
    /// below the coarsest level, one combine weight.
    pub fn head_channels(&self, scale: usize) -> usize {
        2 * self.fusion.kernel_count + usize::from(scale + 1 < self.scales)
    }

    /// Image sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }
}

/// One convolutional stack: RepVGG blocks then a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub blocks: Vec<RepVggBlockParams>,
    pub head: ConvParams,
}

impl NetworkParams {
    pub fn new(
        in_channels: usize,
        widths: &[usize],
        head_out: usize,
        head_ksize: usize,
        multi_branch: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut cin = in_channels;
        for &w in widths {
            blocks.push(RepVggBlockParams::new(cin, w, multi_branch, rng));
            cin = w;
        }
        let head = ConvParams::uniform(head_out, cin, head_ksize, rng);
        Self { blocks, head }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks.first().map_or(self.head.in_ch, |b| b.in_ch())
    }

    pub fn out_channels(&self) -> usize {
        self.head.out_ch
    }

    pub fn validate(&self) -> Result<()> {
        let mut cin = self.in_channels();
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_ch() != cin {
                return Err(Error::Config(format!("block {i} expects {} channels, gets {cin}", b.in_ch())));
            }
            cin = b.out_ch();
        }
        self.head.validate()?;
        if self.head.in_ch != cin {
            return Err(Error::Config("head input width mismatch".into()));
        }
        Ok(())
    }

    pub fn trainable(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = self.blocks.iter().flat_map(|b| b.trainable()).collect();
        v.push(&self.head.kernel);
        v.push(&self.head.bias);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = self.blocks.iter_mut().flat_map(|b| b.trainable_mut()).collect();
        v.push(&mut self.head.kernel);
        v.push(&mut self.head.bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn is_fused(&self) -> bool {
        self.blocks.iter().all(|b| b.fused.is_some())
    }

    pub fn reparameterize(&mut self) -> Result<()> {
        for b in &mut self.blocks {
            b.fused = Some(reparameterize(b)?);
        }
        Ok(())
    }

    /// Inference: fused blocks use their single conv, others all branches.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for b in &self.blocks {
            x = repvgg_forward(&x, b, b.fused.is_none())?;
        }
        conv2d(&x, &self.head)
    }

    /// Training forward; keeps the input of every layer.
    pub(crate) fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        acts.push(input.clone());
        for b in &self.blocks {
            let next = block_forward_train(acts.last().expect("non-empty"), b)?;
            acts.push(next);
        }
        let out = conv2d(acts.last().expect("non-empty"), &self.head)?;
        Ok((out, acts))
    }

    /// Parameter gradients (ordered like [`trainable`](Self::trainable)) given
    /// the gradient of the head output.
    pub(crate) fn backward(&self, acts: &[Tensor], grad_head: &Tensor) -> Result<Vec<Vec<f32>>> {
        let n = self.blocks.len();
        let head = conv2d_backward_opt(grad_head, &acts[n], &self.head, n > 0)?;
        let mut per_block: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
        let mut g = head.input;
        for i in (0..n).rev() {
            let go = g.take().expect("gradient flows into every block");
            let (gi, grads) = block_backward(&go, &acts[i], &acts[i + 1], &self.blocks[i], i > 0)?;
            per_block[i] = grads;
            g = gi;
        }
        let mut out: Vec<Vec<f32>> = per_block.into_iter().flatten().collect();
        out.push(head.kernel);
        out.push(head.bias);
        Ok(out)
    }
}

/// Runs one stack and splits its head into importance maps and blend logits.
pub fn importance_net_forward(
    packed: &Tensor,
    params: &NetworkParams,
    cfg: &FusionConfig,
) -> Result<(ImportanceMaps, BlendLogits)> {
    let m = cfg.kernel_count;
    if params.out_channels() != 2 * m {
        return Err(Error::Config(format!(
            "head emits {} channels, {} kernels need {}",
            params.out_channels(),
            m,
            2 * m
        )));
    }
    let head = params.forward(packed)?;
    Ok((
        ImportanceMaps(head.slice_channels(0, m)?),
        BlendLogits(head.slice_channels(m, m)?),
    ))
}

/// One training/validation sample.
#[derive(Clone, Debug)]
pub struct TrainPatch {
    pub packed: Tensor,
    pub irradiance: Tensor,
    pub albedo: Tensor,
    pub reference: Tensor,
}

fn sigmoid(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 / (1.0 + (-v).exp()))
}

struct LevelForward {
    imaps: ImportanceMaps,
    blend: BlendLogits,
    alpha: Option<Tensor>,
    filtered: Tensor,
    irradiance: Tensor,
    acts: Option<Vec<Tensor>>,
}

/// Complete denoiser: one network per resolution level.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub nets: Vec<NetworkParams>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = (0..config.scales)
            .map(|s| {
                NetworkParams::new(
                    config.in_channels,
                    &config.widths,
                    config.head_channels(s),
                    config.head_ksize,
                    config.multi_branch,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self { config, nets })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.nets.len() != self.config.scales {
            return Err(Error::Config("network count does not match scales".into()));
        }
        for (s, n) in self.nets.iter().enumerate() {
            n.validate()?;
            if n.out_channels() != self.config.head_channels(s) || n.in_channels() != self.config.in_channels {
                return Err(Error::Config(format!("network {s} channel plan mismatch")));
            }
        }
        Ok(())
    }

    pub fn trainable(&self) -> Vec<&[f32]> {
        self.nets.iter().flat_map(|n| n.trainable()).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f32]> {
        self.nets.iter_mut().flat_map(|n| n.trainable_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| n.param_count()).sum()
    }

    pub fn is_fused(&self) -> bool {
        self.nets.iter().all(|n| n.is_fused())
    }

    pub fn reparameterize(&mut self) -> Result<()> {
        self.nets.iter_mut().try_for_each(|n| n.reparameterize())
    }

    fn check_input(&self, packed: &Tensor, irradiance: &Tensor) -> Result<()> {
        packed.expect_size(irradiance, "packed vs irradiance")?;
        packed.expect_channels(self.config.in_channels, "packed input")?;
        irradiance.expect_channels(3, "irradiance")?;
        let k = self.config.size_multiple();
        if packed.height() % k != 0 || packed.width() % k != 0 {
            return Err(Error::Dimension(format!(
                "image {}x{} not divisible by {k}",
                packed.height(),
                packed.width()
            )));
        }
        self.config
            .fusion
            .validate_for(packed.height() / k, packed.width() / k)
    }

    fn forward_levels(&self, packed: &Tensor, irradiance: &Tensor, keep: bool) -> Result<Vec<LevelForward>> {
        self.check_input(packed, irradiance)?;
        let m = self.config.fusion.kernel_count;
        let mut levels = Vec::with_capacity(self.config.scales);
        let (mut p, mut irr) = (packed.clone(), irradiance.clone());
        for (s, net) in self.nets.iter().enumerate() {
            if s > 0 {
                p = downsample_2x2(&p)?;
                irr = downsample_2x2(&irr)?;
            }
            let (head, acts) = if keep {
                let (h, a) = net.forward_cached(&p)?;
                (h, Some(a))
            } else {
                (net.forward(&p)?, None)
            };
            let imaps = ImportanceMaps(head.slice_channels(0, m)?);
            let blend = BlendLogits(head.slice_channels(m, m)?);
            let alpha = if s + 1 < self.config.scales {
                Some(sigmoid(&head.slice_channels(2 * m, 1)?))
            } else {
                None
            };
            let filtered = filter_fuse_streaming(&imaps, &blend, &irr, &self.config.fusion)?;
            levels.push(LevelForward {
                imaps,
                blend,
                alpha,
                filtered,
                irradiance: irr.clone(),
                acts,
            });
        }
        Ok(levels)
    }

    /// Combined outputs per level, finest first.
    fn combine(levels: &[LevelForward]) -> Result<Vec<Tensor>> {
        let n = levels.len();
        let mut outs = vec![Tensor::zeros(0, 0, 0); n];
        outs[n - 1] = levels[n - 1].filtered.clone();
        for s in (0..n - 1).rev() {
            let alpha = levels[s].alpha.as_ref().expect("alpha below coarsest level");
            outs[s] = combine_resolutions(&levels[s].filtered, &outs[s + 1], alpha)?;
        }
        Ok(outs)
    }

    /// Filters demodulated irradiance; returns filtered irradiance.
    pub fn denoise_irradiance(&self, packed: &Tensor, irradiance: &Tensor) -> Result<Tensor> {
        let levels = self.forward_levels(packed, irradiance, false)?;
        Ok(Self::combine(&levels)?.swap_remove(0))
    }

    /// Full pipeline for a prepared frame; returns denoised radiance.
    pub fn denoise_frame(&self, frame: &PreparedFrame) -> Result<Tensor> {
        let irr = self.denoise_irradiance(&frame.packed, &frame.irradiance)?;
        remodulate_albedo(&irr, &frame.albedo)
    }

    fn loss_target(patch: &TrainPatch, space: LossSpace) -> Result<Tensor> {
        match space {
            LossSpace::Radiance => Ok(patch.reference.clone()),
            LossSpace::Irradiance => demodulate_albedo(&patch.reference, &patch.albedo, DEFAULT_ALBEDO_EPS),
        }
    }

    fn loss_input(filtered: &Tensor, patch: &TrainPatch, space: LossSpace) -> Result<Tensor> {
        match space {
            LossSpace::Radiance => remodulate_albedo(filtered, &patch.albedo),
            LossSpace::Irradiance => Ok(filtered.clone()),
        }
    }

    pub fn loss(&self, patch: &TrainPatch, space: LossSpace, eps: f32) -> Result<f32> {
        let filtered = self.denoise_irradiance(&patch.packed, &patch.irradiance)?;
        smape(&Self::loss_input(&filtered, patch, space)?, &Self::loss_target(patch, space)?, eps)
    }

    /// Loss and gradients ordered like [`trainable`](Self::trainable).
    pub fn loss_and_grad(&self, patch: &TrainPatch, space: LossSpace, eps: f32) -> Result<(f32, Vec<Vec<f32>>)> {
        let levels = self.forward_levels(&patch.packed, &patch.irradiance, true)?;
        let outs = Self::combine(&levels)?;
        let (loss, mut g) = smape_loss(
            &Self::loss_input(&outs[0], patch, space)?,
            &Self::loss_target(patch, space)?,
            eps,
        )?;
        if space == LossSpace::Radiance {
            for (gv, a) in g.data_mut().iter_mut().zip(patch.albedo.data()) {
                *gv *= a;
            }
        }
        let n = levels.len();
        let mut grads = Vec::new();
        for (s, level) in levels.iter().enumerate() {
            let (g_filtered, g_alpha) = if s + 1 < n {
                let alpha = level.alpha.as_ref().expect("alpha below coarsest level");
                let (gf, gc, ga) = combine_resolutions_backward(&g, &level.filtered, &outs[s + 1], alpha)?;
                let ga_logit = Tensor::from_vec(
                    ga.height(),
                    ga.width(),
                    1,
                    ga.data().iter().zip(alpha.data()).map(|(g, a)| g * a * (1.0 - a)).collect(),
                )?;
                g = gc;
                (gf, Some(ga_logit))
            } else {
                (g.clone(), None)
            };
            let (gi, gb) = filter_fuse_backward(
                &g_filtered,
                &level.imaps,
                &level.blend,
                &level.irradiance,
                &self.config.fusion,
            )?;
            let grad_head = match &g_alpha {
                Some(ga) => Tensor::concat_channels(&[&gi, &gb, ga])?,
                None => Tensor::concat_channels(&[&gi, &gb])?,
            };
            let acts = level.acts.as_ref().expect("cached activations");
            grads.extend(self.nets[s].backward(acts, &grad_head)?);
        }
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{apply_kernel_map, construct_kernel_map};
    use rand::Rng;

    fn random(h: usize, w: usize, c: usize, lo: f32, hi: f32, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi))
    }

    fn patch(h: usize, w: usize, seed: u64) -> TrainPatch {
        TrainPatch {
            packed: random(h, w, 10, 0.0, 1.0, seed),
            irradiance: random(h, w, 3, 0.0, 4.0, seed + 1),
            albedo: random(h, w, 3, 0.1, 1.0, seed + 2),
            reference: random(h, w, 3, 0.1, 2.0, seed + 3),
        }
    }

    #[test]
    fn architecture_names_round_trip() {
        for a in [Architecture::SixLayer, Architecture::ThreeLayer, Architecture::MultiRes] {
            assert_eq!(a.as_str().parse::<Architecture>().unwrap(), a);
            assert_eq!(Architecture::from_code(a.code()).unwrap(), a);
        }
        assert!("7layer".parse::<Architecture>().is_err());
    }

    #[test]
    fn parameter_count_matches_channel_plan() {
        let model = Model::new(ModelConfig::for_arch(Architecture::SixLayer), 1).unwrap();
        let block = |i: usize, o: usize| 35 * i * o + 3 * o;
        let expected = block(10, 32) + 5 * block(32, 32) + 9 * 32 * 12 + 12;
        assert_eq!(model.param_count(), expected);
        let three = Model::new(ModelConfig::for_arch(Architecture::ThreeLayer), 1).unwrap();
        assert_eq!(three.param_count(), block(10, 32) + 2 * block(32, 32) + 9 * 32 * 12 + 12);
    }

    #[test]
    fn output_split_shapes() {
        let cfg = ModelConfig::for_arch(Architecture::ThreeLayer).with_widths(vec![8, 8, 8]);
        let model = Model::new(cfg.clone(), 2).unwrap();
        let (im, bl) = importance_net_forward(&random(16, 16, 10, 0.0, 1.0, 3), &model.nets[0], &cfg.fusion).unwrap();
        assert_eq!((im.0.height(), im.0.width(), im.0.channels()), (16, 16, 6));
        assert_eq!(bl.0.channels(), 6);
        let wrong = FusionConfig::new(2, 3, 2).unwrap();
        assert!(matches!(
            importance_net_forward(&random(16, 16, 10, 0.0, 1.0, 3), &model.nets[0], &wrong),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_head_gives_uniform_box_fusion() {
        let cfg = ModelConfig::for_arch(Architecture::ThreeLayer)
            .with_widths(vec![8, 8, 8])
            .with_fusion(FusionConfig::new(3, 3, 2).unwrap());
        let mut model = Model::new(cfg, 4).unwrap();
        model.nets[0].head = ConvParams::zeros(6, 8, 3);
        let p = patch(16, 16, 10);
        let (_, bl) = importance_net_forward(&p.packed, &model.nets[0], &model.config.fusion).unwrap();
        assert!(bl.0.data().iter().all(|&v| v == 0.0));
        let out = model.denoise_irradiance(&p.packed, &p.irradiance).unwrap();
        let boxes: Vec<Tensor> = [3, 5, 7]
            .iter()
            .map(|&k| apply_kernel_map(&construct_kernel_map(&Tensor::zeros(16, 16, 1), k).unwrap(), &p.irradiance).unwrap())
            .collect();
        let mean = Tensor::from_fn(16, 16, 3, |y, x, c| boxes.iter().map(|b| b.at(y, x, c)).sum::<f32>() / 3.0);
        assert!(out.max_abs_diff(&mean) < 1e-5);
    }

    #[test]
    fn fused_inference_matches_branches() {
        let cfg = ModelConfig::for_arch(Architecture::ThreeLayer).with_widths(vec![8, 8, 8]);
        let model = Model::new(cfg, 5).unwrap();
        let mut fused = model.clone();
        fused.reparameterize().unwrap();
        assert!(fused.is_fused() && !model.is_fused());
        let p = patch(16, 16, 20);
        let a = model.denoise_irradiance(&p.packed, &p.irradiance).unwrap();
        let b = fused.denoise_irradiance(&p.packed, &p.irradiance).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-4);
    }

    #[test]
    fn multires_pipeline_runs_and_has_gradients() {
        let cfg = ModelConfig::for_arch(Architecture::MultiRes).with_widths(vec![4, 4]);
        let model = Model::new(cfg, 6).unwrap();
        assert_eq!(model.nets.len(), 3);
        assert_eq!(model.nets[0].out_channels(), 5);
        assert_eq!(model.nets[2].out_channels(), 4);
        let p = patch(24, 24, 30);
        let (loss, grads) = model.loss_and_grad(&p, LossSpace::Radiance, 0.01).unwrap();
        assert!(loss > 0.0 && loss < 1.0);
        assert_eq!(grads.len(), model.trainable().len());
        assert!(grads.iter().flatten().any(|&g| g != 0.0));
        let bad = patch(18, 18, 31);
        assert!(matches!(model.denoise_irradiance(&bad.packed, &bad.irradiance), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_layout_matches_params() {
        let cfg = ModelConfig::for_arch(Architecture::ThreeLayer).with_widths(vec![4, 4, 4]);
        let model = Model::new(cfg, 7).unwrap();
        let (_, grads) = model.loss_and_grad(&patch(16, 16, 40), LossSpace::Irradiance, 0.01).unwrap();
        let shapes: Vec<usize> = model.trainable().iter().map(|t| t.len()).collect();
        assert_eq!(grads.iter().map(|g| g.len()).collect::<Vec<_>>(), shapes);
    }
}
