use log::{debug, info};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::default_notes;
use super::data::SliceBank;
use super::{Checkpoint, EpochRecord, History, Stage, StepRecord, TrainConfig};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{kd_loss_grad, soft_dice_loss_grad, LossWeights};
use crate::metrics::{dice_coeff, hd95, sensitivity, MetricsReport, VolumeMetrics};
use crate::model::{CoordDrUNet, ModelConfig, Trainable};
use crate::nn::{Mode, Tensor};
use crate::optim::{Adam, EarlyStopping, ReduceOnPlateau};
use crate::preprocess::extract_stack;
use crate::volume::{Dataset, MaskVolume, Volume};

const EVAL_BATCH: usize = 16;

/// Volume-level split; the last `round(f · n)` cases of a seeded shuffle validate.
pub(crate) fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    if data.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    if fraction <= 0.0 {
        return Ok((data.clone(), None));
    }
    let n = data.len();
    let n_val = ((fraction * n as f64).round() as usize).max(1);
    if n_val >= n {
        return Err(Error::Invalid(format!(
            "validation split of {fraction} leaves no training volumes out of {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let (tr, va) = idx.split_at(n - n_val);
    let (mut tr, mut va) = (tr.to_vec(), va.to_vec());
    tr.sort_unstable();
    va.sort_unstable();
    Ok((data.select(&tr), Some(data.select(&va))))
}

struct Objective<'a> {
    teacher: Option<&'a mut CoordDrUNet<f32>>,
    lambda: f64,
    /// Batch-norm mode of the student while training; frozen bodies use running statistics.
    mode: Mode,
}

impl Objective<'_> {
    /// Forward, loss and backward for one batch; gradients are left on the student.
    fn step(&mut self, student: &mut CoordDrUNet<f32>, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(f64, f64)> {
        student.zero_grad();
        let out = student.forward(x, self.mode)?;
        let (seg, g) = soft_dice_loss_grad(y, &out.probs)?;
        let (kd, gl) = match self.teacher.as_deref_mut() {
            Some(t) => {
                let zt = t.encode_latent(x, Mode::Eval)?;
                let (kd, mut gl) = kd_loss_grad(&out.latent, &zt, x.batch())?;
                gl.scale(self.lambda as f32);
                (kd as f64, Some(gl))
            }
            None => (0.0, None),
        };
        student.backward(&g, gl.as_ref());
        Ok((seg as f64, kd))
    }

    fn eval(&mut self, student: &mut CoordDrUNet<f32>, bank: &SliceBank, k: usize) -> Result<f64> {
        let n = bank.len();
        let (mut seg, mut kd) = (0.0, 0.0);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, y) = bank.batch(chunk, k, None)?;
            let out = student.forward(&x, Mode::Eval)?;
            let (s, _) = soft_dice_loss_grad(&y, &out.probs)?;
            seg += s as f64 * chunk.len() as f64;
            if let Some(t) = self.teacher.as_deref_mut() {
                let zt = t.encode_latent(&x, Mode::Eval)?;
                let (d, _) = kd_loss_grad(&out.latent, &zt, x.batch())?;
                kd += d as f64 * chunk.len() as f64;
            }
        }
        Ok((seg + self.lambda * kd) / n as f64)
    }
}

/// Adam with plateau schedule and early stopping; restores the best weights.
fn fit(
    student: &mut CoordDrUNet<f32>,
    mut objective: Objective<'_>,
    data: &Dataset,
    cfg: &TrainConfig,
    aug: Option<&AugmentConfig>,
) -> Result<History> {
    cfg.validate()?;
    let mc = student.config().clone();
    let (train, val) = split(data, cfg.val_fraction, cfg.seed)?;
    let bank = SliceBank::build(&train, mc.in_channels, mc.input_height, mc.input_width)?;
    let val_bank = val
        .as_ref()
        .map(|v| SliceBank::build(v, mc.in_channels, mc.input_height, mc.input_width))
        .transpose()?;
    let aug = aug
        .map(|a| -> Result<AugmentConfig> {
            let mut a = a.canonical()?;
            a.seed = a.seed.wrapping_add(cfg.seed);
            Ok(a)
        })
        .transpose()?;

    let n = bank.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam());
    let mut plateau = ReduceOnPlateau::new(cfg.plateau_patience, cfg.plateau_factor);
    let mut early = EarlyStopping::new(cfg.early_stop_patience);
    let mut history = History::default();
    let mut best = student.state();
    let mut order: Vec<usize> = (0..n).collect();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut seg_sum, mut kd_sum, mut count) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if history.steps.len() >= max_steps {
                break;
            }
            let keys: Vec<u64> = (0..chunk.len())
                .map(|k| (epoch * n + b * cfg.batch_size + k) as u64)
                .collect();
            let (x, y) = bank.batch(chunk, mc.num_classes, aug.as_ref().map(|a| (a, keys.as_slice())))?;
            let (seg, kd) = objective.step(student, &x, &y)?;
            let total = seg + objective.lambda * kd;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("loss is {total} at step {} (seg {seg}, kd {kd})", history.steps.len()),
                });
            }
            opt.step(student);
            history.steps.push(StepRecord {
                step: history.steps.len(),
                seg,
                kd,
                total,
            });
            seg_sum += seg * chunk.len() as f64;
            kd_sum += kd * chunk.len() as f64;
            count += chunk.len();
        }
        if count == 0 {
            break;
        }
        let train_seg = seg_sum / count as f64;
        let train_kd = kd_sum / count as f64;
        let train_total = train_seg + objective.lambda * train_kd;
        let val_loss = match &val_bank {
            Some(vb) => Some(objective.eval(student, vb, mc.num_classes)?),
            None => None,
        };
        let monitored = val_loss.unwrap_or(train_total);
        if !monitored.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("monitored loss is {monitored}"),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_seg,
            train_kd,
            train_total,
            val_loss,
            lr: opt.lr,
        });
        info!(
            "epoch {epoch}: seg {train_seg:.5} kd {train_kd:.5} val {} lr {:.2e}",
            val_loss.map_or("-".to_string(), |v| format!("{v:.5}")),
            opt.lr
        );
        let (improved, stop) = early.observe(epoch, monitored);
        if improved {
            best = student.state();
            history.best_epoch = epoch;
        }
        let lr = plateau.observe(monitored, opt.lr);
        if lr != opt.lr {
            debug!("lr {} -> {lr}", opt.lr);
            opt.lr = lr;
        }
        if stop {
            history.stopped_early = true;
            break;
        }
        if history.steps.len() >= max_steps {
            break;
        }
    }
    student.load_state(&best)?;
    Ok(history)
}

fn from_scratch(data: &Dataset, cfg: &TrainConfig, mcfg: &ModelConfig, aug: Option<&AugmentConfig>, stage: Stage) -> Result<Checkpoint> {
    mcfg.validate()?;
    let mut model = CoordDrUNet::<f32>::new(mcfg.clone(), cfg.seed)?;
    let history = fit(&mut model, Objective { teacher: None, lambda: 0.0, mode: Mode::Train }, data, cfg, aug)?;
    Ok(Checkpoint {
        stage,
        model_config: mcfg.clone(),
        train_config: cfg.clone(),
        parent: None,
        weights: model.state(),
        history,
        notes: default_notes(None),
    })
}

/// Supervised soft-Dice training of the source model.
pub fn train_source(data: &Dataset, cfg: &TrainConfig, mcfg: &ModelConfig, aug: Option<&AugmentConfig>) -> Result<Checkpoint> {
    from_scratch(data, cfg, mcfg, aug, Stage::Ms)
}

/// Same as [`train_source`] but labelled as a from-scratch target baseline.
pub fn train_scratch(data: &Dataset, cfg: &TrainConfig, mcfg: &ModelConfig, aug: Option<&AugmentConfig>) -> Result<Checkpoint> {
    from_scratch(data, cfg, mcfg, aug, Stage::Scratch)
}

fn finetune(
    parent: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    aug: Option<&AugmentConfig>,
    stage: Stage,
    trainable: Trainable,
    lambda: Option<f64>,
) -> Result<Checkpoint> {
    parent.check_lineage()?;
    stage.check_parent(Some(parent.stage))?;
    let mut student = parent.model()?;
    student.set_trainable(trainable);
    let mut teacher = match lambda {
        Some(_) => {
            let mut t = parent.model()?;
            t.set_trainable(Trainable::None);
            Some(t)
        }
        None => None,
    };
    let objective = Objective {
        teacher: teacher.as_mut(),
        lambda: lambda.unwrap_or(0.0),
        mode: if trainable == Trainable::All { Mode::Train } else { Mode::Eval },
    };
    let history = fit(&mut student, objective, data, cfg, aug)?;
    let mut notes = default_notes(lambda);
    if trainable == Trainable::HeadOnly {
        notes.insert("trainable".into(), "head".into());
    }
    Ok(Checkpoint {
        stage,
        model_config: parent.model_config.clone(),
        train_config: cfg.clone(),
        parent: Some(parent.as_parent(None)),
        weights: student.state(),
        history,
        notes,
    })
}

/// Distillation finetuning: every student layer trains on
/// `soft_dice + λ · kd(z_student, z_parent)` with the parent frozen.
/// The output stage follows the parent (`M_s → M_t1 → M_t2`).
pub fn finetune_kd(parent: &Checkpoint, data: &Dataset, cfg: &TrainConfig, aug: Option<&AugmentConfig>) -> Result<Checkpoint> {
    LossWeights::new(cfg.lambda)?;
    let stage = parent.stage.kd_successor()?;
    finetune(parent, data, cfg, aug, stage, Trainable::All, Some(cfg.lambda))
}

/// Classical finetuning: only the final 1×1 convolution trains, on soft-Dice.
pub fn finetune_classic(parent: &Checkpoint, data: &Dataset, cfg: &TrainConfig, aug: Option<&AugmentConfig>) -> Result<Checkpoint> {
    finetune(parent, data, cfg, aug, Stage::ClassicFt, Trainable::HeadOnly, None)
}

/// Whole-network finetuning on soft-Dice without a teacher.
pub fn finetune_full(parent: &Checkpoint, data: &Dataset, cfg: &TrainConfig, aug: Option<&AugmentConfig>) -> Result<Checkpoint> {
    finetune(parent, data, cfg, aug, Stage::FullFt, Trainable::All, None)
}

/// Slice-wise argmax segmentation of a whole volume.
pub fn predict_volume(model: &mut CoordDrUNet<f32>, volume: &Volume) -> Result<MaskVolume> {
    let mc = model.config().clone();
    let (d, h, w) = volume.dims();
    if (h, w) != (mc.input_height, mc.input_width) {
        return Err(Error::Shape(format!(
            "volume slices are {h}x{w}, model expects {}x{}",
            mc.input_height, mc.input_width
        )));
    }
    let mut labels = Array3::<u8>::zeros((d, h, w));
    let zs: Vec<usize> = (0..d).collect();
    for chunk in zs.chunks(EVAL_BATCH) {
        let mut x = Vec::with_capacity(chunk.len() * mc.in_channels * h * w);
        for &z in chunk {
            x.extend(extract_stack(volume, z, mc.in_channels)?.channels.iter());
        }
        let x = Tensor::from_vec([chunk.len(), mc.in_channels, h, w], x)?;
        let probs = model.forward(&x, Mode::Eval)?.probs;
        for (n, &z) in chunk.iter().enumerate() {
            for yy in 0..h {
                for xx in 0..w {
                    let mut best = 0;
                    let mut pmax = probs.get(n, 0, yy, xx);
                    for k in 1..mc.num_classes {
                        let p = probs.get(n, k, yy, xx);
                        if p > pmax {
                            pmax = p;
                            best = k;
                        }
                    }
                    labels[[z, yy, xx]] = u8::from(best != 0);
                }
            }
        }
    }
    Ok(MaskVolume { labels })
}

pub fn evaluate_model(model: &mut CoordDrUNet<f32>, data: &Dataset) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(data.len());
    for case in &data.items {
        let pred = predict_volume(model, &case.volume)?;
        let spacing = &case.volume.spacing;
        let hd = if pred.is_empty() || case.mask.is_empty() {
            None
        } else {
            Some(hd95(&pred, &case.mask, spacing)?)
        };
        rows.push(VolumeMetrics {
            id: case.id.clone(),
            dice: dice_coeff(&pred, &case.mask)?,
            hd95_mm: hd,
            sensitivity: sensitivity(&pred, &case.mask).ok(),
        });
    }
    let mc = model.config();
    Ok(MetricsReport {
        domain_tag: data.domain_tag.clone(),
        per_volume: rows,
        note: format!("metrics at network resolution {}x{}", mc.input_height, mc.input_width),
    })
}

/// Per-volume Dice, HD95 and sensitivity of a checkpoint in eval mode.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<MetricsReport> {
    evaluate_model(&mut ckpt.model()?, data)
}
