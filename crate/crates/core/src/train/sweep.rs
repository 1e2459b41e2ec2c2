use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::trainer::{evaluate, finetune_kd, train_source};
use super::{Checkpoint, TrainConfig};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::volume::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Distillation weight of KD finetuning.
    Lambda,
    /// Number of stacked input slices.
    Slices,
    /// Number of target cases used for finetuning.
    Cases,
    /// Fraction of the source training set.
    TrainSize,
}

impl SweepKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "slices" => Ok(Self::Slices),
            "cases" => Ok(Self::Cases),
            "train_size" | "train-size" => Ok(Self::TrainSize),
            _ => Err(Error::Config(format!(
                "unknown sweep kind {s:?}, expected lambda, slices, cases or train_size"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Slices => "slices",
            Self::Cases => "cases",
            Self::TrainSize => "train_size",
        }
    }
}

pub fn default_grid(kind: SweepKind) -> Vec<f64> {
    match kind {
        SweepKind::Lambda => (0..=5).map(|i| i as f64 * 0.2).collect(),
        SweepKind::Slices => vec![1.0, 3.0, 5.0, 7.0],
        SweepKind::Cases => (0..=7).map(|i| 2.0 * i as f64).collect(),
        SweepKind::TrainSize => {
            let mut g = vec![0.01];
            g.extend((1..=10).map(|i| i as f64 / 10.0));
            g
        }
    }
}

/// Inputs shared by every grid point; which fields are needed depends on the kind.
#[derive(Clone, Debug)]
pub struct SweepContext<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: Option<AugmentConfig>,
    pub parent: Option<&'a Checkpoint>,
    pub source_train: Option<&'a Dataset>,
    pub source_test: Option<&'a Dataset>,
    pub target_train: Option<&'a Dataset>,
    pub target_test: Option<&'a Dataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Source-domain Dice for finetuning sweeps when a source test set is given.
    pub source_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Line-plot table of Dice against the grid value.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},dice_mean,dice_std,source_dice\n", self.kind.as_str());
        for r in &self.rows {
            let src = r.source_dice.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{:.6},{:.6},{src}", r.value, r.dice_mean, r.dice_std);
        }
        s
    }
}

fn need<'a, T>(v: Option<&'a T>, what: &str, kind: SweepKind) -> Result<&'a T> {
    v.ok_or_else(|| Error::Config(format!("{} sweep needs {what}", kind.as_str())))
}

pub fn run_sweep(kind: SweepKind, grid: &[f64], ctx: &SweepContext<'_>) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let aug = ctx.augment.as_ref();
    let mut rows = Vec::with_capacity(grid.len());
    for &g in grid {
        let (ckpt_owned, test): (Option<Checkpoint>, &Dataset) = match kind {
            SweepKind::Lambda => {
                let parent = need(ctx.parent, "a parent checkpoint", kind)?;
                let data = need(ctx.target_train, "target training data", kind)?;
                let cfg = TrainConfig { lambda: g, ..ctx.train.clone() };
                (Some(finetune_kd(parent, data, &cfg, aug)?), need(ctx.target_test, "target test data", kind)?)
            }
            SweepKind::Cases => {
                let parent = need(ctx.parent, "a parent checkpoint", kind)?;
                let data = need(ctx.target_train, "target training data", kind)?;
                let n = g as usize;
                if g < 0.0 || g.fract() != 0.0 || n > data.len() {
                    return Err(Error::Config(format!("case count {g} not available (have {})", data.len())));
                }
                let test = need(ctx.target_test, "target test data", kind)?;
                if n == 0 {
                    (None, test)
                } else {
                    (Some(finetune_kd(parent, &data.subset(0..n), &ctx.train, aug)?), test)
                }
            }
            SweepKind::Slices => {
                let data = need(ctx.source_train, "source training data", kind)?;
                if g < 1.0 || g.fract() != 0.0 {
                    return Err(Error::Config(format!("slice count {g} must be a positive odd integer")));
                }
                let mcfg = ModelConfig { in_channels: g as usize, ..ctx.model.clone() };
                (Some(train_source(data, &ctx.train, &mcfg, aug)?), need(ctx.source_test, "source test data", kind)?)
            }
            SweepKind::TrainSize => {
                let data = need(ctx.source_train, "source training data", kind)?;
                if !(g > 0.0 && g <= 1.0) {
                    return Err(Error::Config(format!("train fraction {g} outside (0, 1]")));
                }
                let n = ((g * data.len() as f64).round() as usize).max(1);
                (
                    Some(train_source(&data.subset(0..n), &ctx.train, &ctx.model, aug)?),
                    need(ctx.source_test, "source test data", kind)?,
                )
            }
        };
        let ckpt = match &ckpt_owned {
            Some(c) => c,
            None => need(ctx.parent, "a parent checkpoint", kind)?,
        };
        let rep = evaluate(ckpt, test)?;
        let source_dice = match (kind, ctx.source_test) {
            (SweepKind::Lambda | SweepKind::Cases, Some(src)) => Some(evaluate(ckpt, src)?.mean_dice()),
            _ => None,
        };
        let d = rep.dice();
        log::info!("{} = {g}: dice {:.4}", kind.as_str(), d.mean);
        rows.push(SweepRow {
            value: g,
            dice_mean: d.mean,
            dice_std: d.std,
            source_dice,
        });
    }
    Ok(SweepReport { kind, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(default_grid(SweepKind::Lambda).len(), 6);
        assert_eq!(default_grid(SweepKind::Slices), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(default_grid(SweepKind::Cases).last(), Some(&14.0));
        assert_eq!(default_grid(SweepKind::TrainSize)[0], 0.01);
        assert!(SweepKind::parse("depth").is_err());
        for k in [SweepKind::Lambda, SweepKind::Slices, SweepKind::Cases, SweepKind::TrainSize] {
            assert_eq!(SweepKind::parse(k.as_str()).unwrap(), k);
        }
    }
}
