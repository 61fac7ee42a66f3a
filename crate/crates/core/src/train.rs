//! Training loop: AdamW with a one-cycle learning rate, global-norm gradient
//! clipping, and the sequence loss.

use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::metrics::{ErrorAccumulator, EvalReport, PixelDomain};
use crate::model::{sequence_loss, Batch, StereoModel};
use crate::nn::all_finite;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub total_steps: usize,
    pub batch_size: usize,
    /// Fraction of the steps spent ramping up to the peak rate.
    pub warmup_frac: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    /// The warmup starts at `peak_lr / div_factor`.
    pub div_factor: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every_epochs: usize,
    /// Horizontal-crop jitter: train on windows of this width at a seeded
    /// random column offset. Off when unset.
    pub crop_width: Option<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            batch_size: 2,
            warmup_frac: 0.01,
            peak_lr: 2e-4,
            final_lr: 1e-4,
            div_factor: 25.0,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            eval_every_epochs: 1,
            crop_width: None,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if !(self.peak_lr > 0.0 && self.final_lr > 0.0 && self.div_factor >= 1.0) {
            return bad("learning rates must be positive and div_factor >= 1");
        }
        if !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("clip_norm must be positive and weight_decay non-negative");
        }
        if self.crop_width == Some(0) {
            return bad("crop_width must be positive");
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).round() as usize
    }

    /// Learning rate at `step` (0-based): linear ramp from
    /// `peak/div_factor` to the peak, then linear decay to `final_lr` at the
    /// last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            let start = self.peak_lr / self.div_factor;
            return start + (self.peak_lr - start) * step as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(warm);
        if span == 0 {
            return self.peak_lr;
        }
        let t = ((step - warm) as f64 / span as f64).min(1.0);
        self.peak_lr + (self.final_lr - self.peak_lr) * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub report: EvalReport,
    /// Validation samples dropped because the prediction was not finite.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Seeded epoch-by-epoch batch order. Within an epoch indices are shuffled
/// and the trailing partial batch is dropped, unless the dataset is smaller
/// than one batch, in which case every batch is the whole set.
pub struct BatchOrder {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
    queue: Vec<Vec<usize>>,
    epoch: usize,
}

impl BatchOrder {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch,
            queue: Vec::new(),
            epoch: 0,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.n / self.batch).max(1)
    }

    /// Next batch and whether it closes an epoch.
    pub fn next_batch(&mut self) -> (Vec<usize>, bool) {
        if self.queue.is_empty() {
            let mut idx: Vec<usize> = (0..self.n).collect();
            idx.shuffle(&mut self.rng);
            self.queue = if self.n < self.batch {
                vec![idx]
            } else {
                idx.chunks_exact(self.batch).rev().map(<[usize]>::to_vec).collect()
            };
            self.epoch += 1;
        }
        let b = self.queue.pop().expect("refilled above");
        (b, self.queue.is_empty())
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

fn global_norm(grads: &GradStore, model: &StereoModel) -> Result<f64> {
    let mut sq = 0.0;
    for v in model.var_store().vars() {
        if let Some(g) = grads.get(v.as_tensor()) {
            let s: f64 = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar()?;
            sq += s;
        }
    }
    Ok(sq.sqrt())
}

fn clip_gradients(grads: &mut GradStore, model: &StereoModel, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads, model)?;
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in model.var_store().vars() {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn random_crop(s: &StereoSample, width: usize, rng: &mut ChaCha8Rng) -> Result<StereoSample> {
    if width > s.width() {
        return Err(Error::Config(format!(
            "crop_width {width} exceeds sample width {}",
            s.width()
        )));
    }
    s.crop_columns(rng.gen_range(0..=s.width() - width), width)
}

/// Loss and gradients for one batch.
pub fn loss_and_grads(model: &StereoModel, batch: &Batch, iterations: usize) -> Result<(f64, GradStore)> {
    let out = model.forward(&batch.left, &batch.right, iterations)?;
    let loss = sequence_loss(&out.predictions, &batch.gt, &batch.valid, model.config().loss_gamma)?;
    let value: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            iteration: iterations,
            resolution: 1,
            what: "training loss".into(),
        });
    }
    let grads = loss.backward()?;
    Ok((value, grads))
}

/// Evaluate the model on samples over all valid pixels. Samples whose
/// prediction fails numerically are skipped and counted.
pub fn evaluate_model(model: &StereoModel, samples: &[StereoSample]) -> Result<(EvalReport, usize)> {
    let mut acc = ErrorAccumulator::new(PixelDomain::AllValid);
    let mut skipped = 0;
    for s in samples {
        match model.predict(&s.left, &s.right) {
            Ok(pred) if pred.iter().all(|v| v.is_finite()) => {
                acc.add(pred.view(), s.gt_disparity.view(), s.valid.view(), None)?;
            }
            Ok(_) => skipped += 1,
            Err(e) if e.is_numeric() => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((acc.finish()?, skipped))
}

/// Train `model` in place.
///
/// Every step and every validation pass is reported through `on_event`
/// as it happens. A non-finite loss or gradient aborts with
/// [`Error::NonFinite`] before the optimizer touches the weights, so the
/// model still holds the last good parameters.
pub fn train_loop(
    model: &StereoModel,
    train: &[StereoSample],
    val: &[StereoSample],
    schedule: &Schedule,
    seed: u64,
    mut on_event: impl FnMut(&TrainEvent) -> Result<()>,
) -> Result<()> {
    schedule.validate()?;
    if schedule.total_steps == 0 {
        return Ok(());
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let cfg = model.config().clone();
    let params = ParamsAdamW {
        lr: schedule.lr_at(0),
        weight_decay: schedule.weight_decay,
        ..ParamsAdamW::default()
    };
    let mut opt = AdamW::new(model.var_store().vars(), params)?;
    let mut order = BatchOrder::new(train.len(), schedule.batch_size, seed);
    // separate stream so that enabling jitter leaves the batch order alone
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x6a69_7474_6572);
    let start = Instant::now();
    for step in 0..schedule.total_steps {
        let (idx, epoch_end) = order.next_batch();
        let batch = match schedule.crop_width {
            None => {
                let samples: Vec<&StereoSample> = idx.iter().map(|&i| &train[i]).collect();
                Batch::from_samples(&samples, cfg.max_disparity_clip, model.dtype(), model.device())?
            }
            Some(cw) => {
                let crops = idx
                    .iter()
                    .map(|&i| random_crop(&train[i], cw, &mut jitter))
                    .collect::<Result<Vec<_>>>()?;
                let samples: Vec<&StereoSample> = crops.iter().collect();
                Batch::from_samples(&samples, cfg.max_disparity_clip, model.dtype(), model.device())?
            }
        };
        let (loss, mut grads) = loss_and_grads(model, &batch, cfg.refinement.iterations_train)?;
        let norm = clip_gradients(&mut grads, model, schedule.clip_norm)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: step,
                resolution: 1,
                what: "gradient norm".into(),
            });
        }
        let lr = schedule.lr_at(step);
        opt.set_learning_rate(lr);
        opt.step(&grads)?;
        on_event(&TrainEvent::Step(StepRecord {
            step,
            lr,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        }))?;
        log::debug!("step {step} lr {lr:.3e} loss {loss:.4} |g| {norm:.3}");

        let epoch = order.epoch();
        if epoch_end && !val.is_empty() && schedule.eval_every_epochs > 0 && epoch % schedule.eval_every_epochs == 0 {
            let (report, skipped) = evaluate_model(model, val)?;
            on_event(&TrainEvent::Epoch(EpochRecord {
                epoch,
                step,
                report,
                skipped,
            }))?;
        }
    }
    Ok(())
}

/// Whether every parameter is finite.
pub fn parameters_finite(model: &StereoModel) -> Result<bool> {
    for v in model.var_store().vars() {
        if !all_finite(v.as_tensor())? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_scene, ToySceneSpec};

    #[test]
    fn crop_jitter_is_seeded_and_consistent() {
        let s = generate_toy_scene(5, &ToySceneSpec::default()).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..8 {
            let c = random_crop(&s, 96, &mut a).unwrap();
            assert_eq!(c, random_crop(&s, 96, &mut b).unwrap());
            c.check_consistent().unwrap();
            assert_eq!((c.height(), c.width(), c.rig.width), (64, 96, 96));
            let x0 = (s.rig.cx - c.rig.cx) as usize;
            assert_eq!(c.left.get_pixel(0, 10), s.left.get_pixel(x0 as u32, 10));
            assert_eq!(c.gt_disparity[[10, 5]].to_bits(), s.gt_disparity[[10, x0 + 5]].to_bits());
        }
        assert!(random_crop(&s, 129, &mut a).is_err());
        assert!(s.crop_columns(100, 29).is_err());
    }

    #[test]
    fn one_cycle_endpoints() {
        let s = Schedule {
            total_steps: 101,
            warmup_frac: 0.1,
            ..Default::default()
        };
        assert!((s.lr_at(0) - 2e-4 / 25.0).abs() < 1e-15);
        assert!((s.lr_at(10) - 2e-4).abs() < 1e-15);
        assert!((s.lr_at(100) - 1e-4).abs() < 1e-15);
        let peak = (0..101).map(|i| s.lr_at(i)).fold(0.0, f64::max);
        assert!((peak - 2e-4).abs() < 1e-15);
        for i in 10..100 {
            assert!(s.lr_at(i + 1) <= s.lr_at(i));
        }
    }

    #[test]
    fn degenerate_schedules() {
        let s = Schedule {
            total_steps: 1,
            warmup_frac: 0.0,
            ..Default::default()
        };
        assert_eq!(s.lr_at(0), 2e-4);
        assert!(Schedule {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn batch_order_is_seeded_and_covers_epoch() {
        let mut a = BatchOrder::new(7, 2, 3);
        let mut b = BatchOrder::new(7, 2, 3);
        let mut seen = Vec::new();
        for i in 0..3 {
            let (x, end) = a.next_batch();
            let (y, _) = b.next_batch();
            assert_eq!(x, y);
            assert_eq!(end, i == 2);
            seen.extend(x);
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        assert_eq!(a.epoch(), 1);
        let mut small = BatchOrder::new(1, 4, 0);
        assert_eq!(small.next_batch(), (vec![0], true));
    }
}
