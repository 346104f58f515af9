//! Patch sampling and the Adam training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::loss::SMAPE_EPS;
use super::model::{LossSpace, Model, TrainPatch};
use crate::preprocess::PreparedFrame;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub patch_size: usize,
    pub train_patches_per_frame: usize,
    pub val_patches_per_frame: usize,
    pub loss_space: LossSpace,
    pub smape_eps: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            patch_size: 128,
            train_patches_per_frame: 80,
            val_patches_per_frame: 20,
            loss_space: LossSpace::Radiance,
            smape_eps: SMAPE_EPS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("batch and patch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.smape_eps > 0.0) {
            return Err(Error::Config("smape eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the untrained model.
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f32,
}

/// Random square crops from a frame that carries a reference.
pub fn extract_patches(
    frame: &PreparedFrame,
    size: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainPatch>> {
    let reference = frame.reference.as_ref().ok_or_else(|| {
        Error::Config(format!("frame {} has no reference", frame.frame_index))
    })?;
    let (h, w) = (frame.packed.height(), frame.packed.width());
    if size > h || size > w {
        return Err(Error::Dimension(format!("patch {size} larger than frame {h}x{w}")));
    }
    (0..count)
        .map(|_| {
            let y = rng.random_range(0..=h - size);
            let x = rng.random_range(0..=w - size);
            Ok(TrainPatch {
                packed: frame.packed.crop(y, x, size, size)?,
                irradiance: frame.irradiance.crop(y, x, size, size)?,
                albedo: frame.albedo.crop(y, x, size, size)?,
                reference: reference.crop(y, x, size, size)?,
            })
        })
        .collect()
}

/// Training and validation patches drawn from every frame.
pub fn sample_dataset(frames: &[PreparedFrame], cfg: &TrainConfig) -> Result<(Vec<TrainPatch>, Vec<TrainPatch>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_9a7c4);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for f in frames {
        train.extend(extract_patches(f, cfg.patch_size, cfg.train_patches_per_frame, &mut rng)?);
        val.extend(extract_patches(f, cfg.patch_size, cfg.val_patches_per_frame, &mut rng)?);
    }
    Ok((train, val))
}

fn check_loss(loss: f32) -> Result<f32> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Domain("training loss is not finite".into()))
    }
}

/// Mean loss over a set of patches; deterministic regardless of threads.
pub fn evaluate_loss(model: &Model, patches: &[TrainPatch], space: LossSpace, eps: f32) -> Result<f32> {
    if patches.is_empty() {
        return Ok(f32::NAN);
    }
    let losses: Vec<f32> = patches
        .par_iter()
        .map(|p| model.loss(p, space, eps))
        .collect::<Result<_>>()?;
    check_loss((losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64) as f32)
}

/// Trains in place and leaves the best-validation weights in `model`.
/// `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &[TrainPatch],
    val_set: &[TrainPatch],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let (space, eps) = (cfg.loss_space, cfg.smape_eps);
    let val_or_train = if val_set.is_empty() { train_set } else { val_set };
    let shapes: Vec<usize> = model.trainable().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(&shapes, AdamHyper { lr: cfg.lr, ..AdamHyper::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let first = EpochRecord {
        epoch: 0,
        train_loss: evaluate_loss(model, train_set, space, eps)?,
        val_loss: evaluate_loss(model, val_or_train, space, eps)?,
    };
    on_epoch(&first);
    let mut curve = vec![first];
    let mut best = (0, first.val_loss, model.clone());

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f32, Vec<Vec<f32>>)> = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(&train_set[i], space, eps))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            let mut total: Vec<Vec<f32>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            for (loss, grads) in &results {
                loss_sum += check_loss(*loss)? as f64;
                for (t, g) in total.iter_mut().zip(grads) {
                    for (a, b) in t.iter_mut().zip(g) {
                        *a += b * scale;
                    }
                }
            }
            adam_step(&mut model.trainable_mut(), &total, &mut adam)?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: (loss_sum / train_set.len() as f64) as f32,
            val_loss: evaluate_loss(model, val_or_train, space, eps)?,
        };
        on_epoch(&record);
        curve.push(record);
        if record.val_loss < best.1 {
            best = (epoch, record.val_loss, model.clone());
        }
    }
    *model = best.2;
    Ok(TrainReport {
        curve,
        best_epoch: best.0,
        best_val_loss: best.1,
    })
}

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in curve {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
