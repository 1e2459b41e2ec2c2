//! Source training, distillation finetuning, baselines, evaluation,
//! forgetting matrices and ablation sweeps.

mod checkpoint;
mod data;
mod forgetting;
mod sweep;
mod trainer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ParentRef};
pub use data::SliceBank;
pub use forgetting::{forgetting_report, ForgettingMatrix};
pub use sweep::{default_grid, run_sweep, SweepContext, SweepKind, SweepReport, SweepRow};
pub use trainer::{
    evaluate, evaluate_model, finetune_classic, finetune_full, finetune_kd, predict_volume, train_scratch, train_source,
};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Distillation weight, used by KD finetuning only.
    pub lambda: f64,
    /// Fraction of volumes held out for validation; 0 monitors the training loss.
    pub val_fraction: f64,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            max_epochs: 500,
            batch_size: 64,
            plateau_patience: 30,
            plateau_factor: 0.5,
            early_stop_patience: 50,
            seed: 0,
            lambda: 0.2,
            val_fraction: 0.1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{n} must be in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return fail("max_epochs and batch_size must be positive".into());
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be positive".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail(format!("plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Role of a checkpoint in the continual protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "M_s")]
    Ms,
    #[serde(rename = "M_t1")]
    Mt1,
    #[serde(rename = "M_t2")]
    Mt2,
    #[serde(rename = "scratch")]
    Scratch,
    #[serde(rename = "classic_ft")]
    ClassicFt,
    #[serde(rename = "full_ft")]
    FullFt,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Ms, Stage::Mt1, Stage::Mt2, Stage::Scratch, Stage::ClassicFt, Stage::FullFt];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ms => "M_s",
            Stage::Mt1 => "M_t1",
            Stage::Mt2 => "M_t2",
            Stage::Scratch => "scratch",
            Stage::ClassicFt => "classic_ft",
            Stage::FullFt => "full_ft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }

    /// Stage produced by distillation finetuning from a parent of this stage.
    pub fn kd_successor(self) -> Result<Self> {
        match self {
            Stage::Ms => Ok(Stage::Mt1),
            Stage::Mt1 => Ok(Stage::Mt2),
            s => Err(Error::Checkpoint(format!("no distillation stage follows {}", s.as_str()))),
        }
    }

    /// Lineage rule between a stage and the stage of its parent.
    pub fn check_parent(self, parent: Option<Stage>) -> Result<()> {
        let ok = match (self, parent) {
            (Stage::Ms | Stage::Scratch, None) => true,
            (Stage::Mt1, Some(Stage::Ms)) => true,
            (Stage::Mt2, Some(Stage::Mt1)) => true,
            (Stage::ClassicFt | Stage::FullFt, Some(_)) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "stage {} cannot have parent {}",
                self.as_str(),
                parent.map_or("none", Stage::as_str)
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub seg: f64,
    pub kd: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_seg: f64,
    pub train_kd: f64,
    pub train_total: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_seg,train_kd,train_total,val_loss,lr\n");
        for e in &self.epochs {
            let val = e.val_loss.map_or("".to_string(), |v| format!("{v:.8}"));
            s.push_str(&format!(
                "{},{:.8},{:.8},{:.8},{val},{:e}\n",
                e.epoch, e.train_seg, e.train_kd, e.train_total, e.lr
            ));
        }
        s
    }
}
