use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::augment::{rgb_planes, warp_window, Transform};
use super::loss::huber_loss_into;
use super::net::{MiniDetector, PARAM_COUNT};
use crate::error::{Error, Result};
use crate::labels::LabeledPatch;
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of the second stage of two-stage regimes; `None` reuses `epochs`.
    pub finetune_epochs: Option<usize>,
    pub huber_delta: f32,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub folds: usize,
    /// Side of the random training window cut from each augmented patch;
    /// 0 trains on whole patches.
    pub crop_size: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 30,
            finetune_epochs: None,
            huber_delta: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            validation_fraction: 0.15,
            folds: 3,
            crop_size: 64,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.folds == 0 {
            return bad("folds must be at least 1");
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MiniDetector<f32>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Index into the loss curves of the epoch whose weights were kept.
    pub best_epoch: Option<usize>,
}

/// Everything the inner loop needs from one patch, precomputed once.
struct Prepared {
    rgb: Vec<f32>,
    label: Vec<f32>,
    size: usize,
}

fn prepare(p: &LabeledPatch) -> Result<Prepared> {
    let (w, h) = (p.image.width(), p.image.height());
    if w != h || (p.label.width, p.label.height) != (w, h) {
        return Err(Error::ShapeMismatch(format!("training patches must be square with matching labels, got {w}x{h}")));
    }
    Ok(Prepared { rgb: rgb_planes(&p.image), label: p.label.to_planar(), size: w })
}

fn window_for(size: usize, crop: usize, rng: &mut crate::rng::Rng) -> (usize, usize, usize, usize) {
    if crop == 0 || crop >= size {
        return (0, 0, size, size);
    }
    (rng.gen_range(0..=size - crop), rng.gen_range(0..=size - crop), crop, crop)
}

/// Loss and parameter gradient of one sample.
fn sample_grad(
    model: &MiniDetector<f32>,
    input: Vec<f32>,
    target: &[f32],
    side: (usize, usize),
    delta: f32,
) -> Result<(f64, Vec<f32>)> {
    let cache = model.forward_planar(input, side.0, side.1);
    let mut d_out = vec![0.0f32; target.len()];
    let loss = huber_loss_into(&cache.output, target, delta, &mut d_out)?;
    Ok((loss, model.backward(&cache, &d_out)))
}

/// Mean-reduced loss and gradient over a batch of `(input, target)` windows.
pub fn batch_gradient(
    model: &MiniDetector<f32>,
    batch: Vec<(Vec<f32>, Vec<f32>, (usize, usize))>,
    delta: f32,
) -> Result<(f64, Vec<f32>)> {
    let n = batch.len() as f32;
    let mut grad = vec![0.0f32; PARAM_COUNT];
    let mut loss = 0.0;
    for (input, target, side) in batch {
        let (l, g) = sample_grad(model, input, &target, side, delta)?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / n;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Trains `model` on `data`, holding out a seeded validation split, and
/// returns the weights of the epoch with the lowest validation loss.
///
/// `epochs = 0` returns the model unchanged.
pub fn train(model: MiniDetector<f32>, data: &[&LabeledPatch], cfg: &TrainConfig, epochs: usize) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if epochs == 0 {
        return Ok(TrainOutcome { model, train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: None });
    }
    let prepared: Vec<Prepared> = data.iter().map(|p| prepare(p)).collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut substream(cfg.seed, "train/split"));
    let n_val = if data.len() < 2 {
        0
    } else {
        ((data.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, data.len() - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    // too small to split: validate on the training pool
    let val_idx: Vec<usize> = if val_idx.is_empty() { train_idx.clone() } else { val_idx.to_vec() };

    let mut crop_rng = substream(cfg.seed, "train/val-windows");
    let val_windows: Vec<(usize, (usize, usize, usize, usize))> =
        val_idx.iter().map(|&i| (i, window_for(prepared[i].size, cfg.crop_size, &mut crop_rng))).collect();

    let mut model = model;
    let mut params = model.params();
    let mut adam = AdamState::new(params.len());
    let adam_cfg = cfg.adam();
    let mut rng = substream(cfg.seed, "train/epochs");
    let mut out = TrainOutcome { model: model.clone(), train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: None };
    let mut best = f64::INFINITY;

    for epoch in 0..epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let p = &prepared[i];
                let t = if cfg.augment { Transform::sample(&mut rng) } else { Transform::IDENTITY };
                let win = window_for(p.size, cfg.crop_size, &mut rng);
                let (input, target) = warp_window(&p.rgb, &p.label, p.size, p.size, &t, win)?;
                batch.push((input, target, (win.2, win.3)));
            }
            let (loss, grad) = batch_gradient(&model, batch, cfg.huber_delta)?;
            adam_step(&mut params, &grad, &mut adam, &adam_cfg);
            model.set_params(&params)?;
            epoch_loss += loss;
            batches += 1;
        }
        out.train_loss.push(epoch_loss / batches as f64);

        let mut val = 0.0;
        for &(i, win) in &val_windows {
            let p = &prepared[i];
            let (input, target) = warp_window(&p.rgb, &p.label, p.size, p.size, &Transform::IDENTITY, win)?;
            let cache = model.forward_planar(input, win.2, win.3);
            let mut scratch = vec![0.0f32; target.len()];
            val += huber_loss_into(&cache.output, &target, cfg.huber_delta, &mut scratch)?;
        }
        let val = val / val_windows.len() as f64;
        out.val_loss.push(val);
        log::debug!("epoch {epoch}: train {:.6} val {:.6}", out.train_loss[epoch], val);
        if val < best {
            best = val;
            out.best_epoch = Some(epoch);
            out.model = model.clone();
        }
    }
    Ok(out)
}
