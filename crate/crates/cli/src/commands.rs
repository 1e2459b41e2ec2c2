use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, LevelFilter};

use trus_seg::config::ExperimentConfig;
use trus_seg::io::{load_dataset, save_dataset};
use trus_seg::metrics::surface_distance_map;
use trus_seg::model::ModelConfig;
use trus_seg::phantom::{domain_by_name, generate_domain};
use trus_seg::preprocess::{preprocess_case, PreprocessConfig};
use trus_seg::train::{
    default_grid, evaluate, finetune_classic, finetune_full, finetune_kd, forgetting_report, predict_volume,
    run_sweep, train_scratch, train_source, Checkpoint, SweepContext, SweepKind,
};
use trus_seg::volume::Dataset;
use trus_seg::Error;

use crate::rundir::{self, LogSink};
use crate::{Cli, Command, FinetuneMode, RunArgs, SourceStage};

struct Ctx {
    cfg: ExperimentConfig,
    log: LogSink,
}

pub fn run(cli: Cli) -> Result<()> {
    let log = LogSink::default();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RUST_LOG")
        .target(env_logger::Target::Pipe(Box::new(log.clone())))
        .format_timestamp_secs()
        .init();

    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    let mut ctx = Ctx { cfg, log };

    match cli.command {
        Command::Preprocess(a) => {
            let mut p = ctx.cfg.preprocess.clone();
            if let Some(s) = a.spacing {
                p.spacing_mm = s;
            }
            if let Some(t) = a.clahe_tiles {
                p.clahe_tiles = t;
            }
            if let Some(c) = a.clahe_clip {
                p.clahe_clip = c;
            }
            if let Some(h) = a.height {
                p.out_height = h;
            }
            if let Some(w) = a.width {
                p.out_width = w;
            }
            if a.no_clahe {
                p.apply_clahe = false;
            }
            let ds = load_dataset(&a.input)?;
            let out = preprocess_dataset(&ds, &p)?;
            save_dataset(&a.out, &out)?;
            println!("{}", a.out.display());
        }
        Command::Phantom(a) => {
            let mut spec = domain_by_name(&a.domain)?;
            if a.desk {
                spec = spec.desk();
            } else if let Some(d) = &a.dims {
                spec = spec.resized([d[0], d[1], d[2]]);
            }
            let ds = generate_domain(&spec, a.n, a.seed)?;
            save_dataset(&a.out, &ds)?;
            println!("{}", a.out.display());
        }
        Command::Train(a) => {
            let path = a
                .data
                .clone()
                .or_else(|| ctx.cfg.data.train.clone())
                .ok_or_else(|| Error::Config("no training data: pass --data or set data.train".into()))?;
            ctx.cfg.data.train = Some(path.clone());
            apply_run_args(&mut ctx.cfg, &a.run);
            let model = ctx.cfg.model.clone();
            let data = load_data(&path, &ctx.cfg, &model)?;
            let stage = match a.stage {
                SourceStage::Ms => "M_s",
                SourceStage::Scratch => "scratch",
            };
            let dir = start_run(&ctx, stage, a.run.run_dir.as_deref())?;
            let aug = augment_of(&ctx.cfg);
            info!("training {stage} on {} volumes from {}", data.len(), path.display());
            let ckpt = match a.stage {
                SourceStage::Ms => train_source(&data, &ctx.cfg.training, &model, aug.as_ref())?,
                SourceStage::Scratch => train_scratch(&data, &ctx.cfg.training, &model, aug.as_ref())?,
            };
            finish_checkpoint(&ckpt, &dir)?;
        }
        Command::Finetune(a) => {
            let parent_dir = a.parent.canonicalize().with_context(|| format!("parent {}", a.parent.display()))?;
            let parent = Checkpoint::load(&parent_dir)?;
            let before = parent.hash();
            if ctx.cfg.model != ModelConfig::default() && ctx.cfg.model != parent.model_config {
                return Err(Error::Config("model section does not match the parent checkpoint architecture".into()).into());
            }
            ctx.cfg.model = parent.model_config.clone();
            if let Some(l) = a.lambda {
                ctx.cfg.training.lambda = l;
            }
            ctx.cfg.validate()?;
            let path = a
                .data
                .clone()
                .or_else(|| ctx.cfg.data.train.clone())
                .ok_or_else(|| Error::Config("no finetuning data: pass --data or set data.train".into()))?;
            ctx.cfg.data.train = Some(path.clone());
            apply_run_args(&mut ctx.cfg, &a.run);
            let data = load_data(&path, &ctx.cfg, &parent.model_config)?;
            let stage = match a.mode {
                FinetuneMode::Kd => parent.stage.kd_successor()?.as_str(),
                FinetuneMode::Classic => "classic_ft",
                FinetuneMode::Full => "full_ft",
            };
            let dir = start_run(&ctx, stage, a.run.run_dir.as_deref())?;
            let aug = augment_of(&ctx.cfg);
            let t = &ctx.cfg.training;
            let mut ckpt = match a.mode {
                FinetuneMode::Kd => finetune_kd(&parent, &data, t, aug.as_ref())?,
                FinetuneMode::Classic => finetune_classic(&parent, &data, t, aug.as_ref())?,
                FinetuneMode::Full => finetune_full(&parent, &data, t, aug.as_ref())?,
            };
            if let Some(p) = ckpt.parent.as_mut() {
                p.path = Some(parent_dir.display().to_string());
            }
            let after = Checkpoint::load(&parent_dir)?.hash();
            if after != before {
                bail!("parent checkpoint changed during finetuning ({before} -> {after})");
            }
            info!("parent {} unchanged ({before})", parent_dir.display());
            finish_checkpoint(&ckpt, &dir)?;
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let data = load_data(&a.data, &ctx.cfg, &ckpt.model_config)?;
            let report = evaluate(&ckpt, &data)?;
            let out = match &a.out {
                Some(p) => {
                    if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                        std::fs::create_dir_all(parent)?;
                    }
                    p.clone()
                }
                None => start_run(&ctx, "eval", None)?.join("metrics.csv"),
            };
            report.write_csv(&out)?;
            if let Some(sd) = &a.surface_dir {
                std::fs::create_dir_all(sd)?;
                let mut model = ckpt.model()?;
                for case in &data.items {
                    let pred = predict_volume(&mut model, &case.volume)?;
                    if pred.is_empty() || case.mask.is_empty() {
                        continue;
                    }
                    surface_distance_map(&pred, &case.mask, &case.volume.spacing)?
                        .write(sd.join(format!("{}_surface.csv", case.id)))?;
                }
            }
            let d = report.dice();
            println!("{} mean dice {:.4} ({} volumes)", out.display(), d.mean, d.n);
        }
        Command::Report(a) => {
            let ckpts = a.ckpts.iter().map(Checkpoint::load).collect::<trus_seg::Result<Vec<_>>>()?;
            let model = &ckpts[0].model_config;
            let domains = a
                .domains
                .iter()
                .map(|d| load_data(d, &ctx.cfg, model))
                .collect::<Result<Vec<_>>>()?;
            let mut labelled = Vec::new();
            for (i, c) in ckpts.iter().enumerate() {
                let base = c.stage.as_str().to_string();
                let dup = ckpts.iter().filter(|o| o.stage == c.stage).count() > 1;
                labelled.push((if dup { format!("{base}#{i}") } else { base }, c));
            }
            let m = forgetting_report(&labelled, &domains)?;
            let dir = start_run(&ctx, "report", a.run_dir.as_deref())?;
            std::fs::write(dir.join("forgetting.csv"), m.to_csv())?;
            std::fs::write(dir.join("forgetting_bars.csv"), m.to_bar_data())?;
            print!("{}", m.to_csv());
        }
        Command::Sweep(a) => {
            let kind = SweepKind::parse(&a.kind)?;
            let grid = a.grid.clone().unwrap_or_else(|| default_grid(kind));
            apply_run_args(&mut ctx.cfg, &a.run);
            let parent = a.parent.as_ref().map(Checkpoint::load).transpose()?;
            let model = parent.as_ref().map_or(ctx.cfg.model.clone(), |p| p.model_config.clone());
            let load = |p: &Option<PathBuf>| p.as_ref().map(|p| load_data(p, &ctx.cfg, &model)).transpose();
            let (st, ss, tt, ts) = (load(&a.source_train)?, load(&a.source_test)?, load(&a.target_train)?, load(&a.target_test)?);
            let dir = start_run(&ctx, "sweep", a.run.run_dir.as_deref())?;
            let sc = SweepContext {
                model: ctx.cfg.model.clone(),
                train: ctx.cfg.training.clone(),
                augment: augment_of(&ctx.cfg),
                parent: parent.as_ref(),
                source_train: st.as_ref(),
                source_test: ss.as_ref(),
                target_train: tt.as_ref(),
                target_test: ts.as_ref(),
            };
            let report = run_sweep(kind, &grid, &sc)?;
            std::fs::write(dir.join(format!("sweep_{}.csv", kind.as_str())), report.to_csv())?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn apply_run_args(cfg: &mut ExperimentConfig, r: &RunArgs) {
    if let Some(e) = r.epochs {
        cfg.training.max_epochs = e;
    }
    if r.no_augment {
        cfg.data.augment = false;
    }
}

fn augment_of(cfg: &ExperimentConfig) -> Option<trus_seg::augment::AugmentConfig> {
    cfg.data.augment.then(|| cfg.augmentation.clone())
}

fn preprocess_dataset(ds: &Dataset, p: &PreprocessConfig) -> Result<Dataset> {
    let items = ds
        .items
        .iter()
        .map(|c| preprocess_case(c, p).map(|r| r.0))
        .collect::<trus_seg::Result<Vec<_>>>()?;
    Ok(Dataset::new(items, ds.domain_tag.clone()))
}

fn load_data(path: &Path, cfg: &ExperimentConfig, model: &ModelConfig) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if !cfg.data.preprocess {
        return Ok(ds);
    }
    let p = PreprocessConfig {
        out_height: model.input_height,
        out_width: model.input_width,
        ..cfg.preprocess.clone()
    };
    preprocess_dataset(&ds, &p)
}

/// Creates the run directory, attaches the log file and echoes the resolved config.
fn start_run(ctx: &Ctx, stage: &str, explicit: Option<&Path>) -> Result<PathBuf> {
    let dir = rundir::create(&ctx.cfg.output.dir, stage, explicit)?;
    ctx.log.attach(&dir)?;
    std::fs::write(dir.join("config.toml"), ctx.cfg.to_toml()?)?;
    std::fs::write(dir.join("seed.txt"), format!("{}\n", ctx.cfg.training.seed))?;
    info!("run directory {}", dir.display());
    Ok(dir)
}

fn finish_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    ckpt.save(dir)?;
    std::fs::write(dir.join("history.csv"), ckpt.history.to_csv())?;
    println!("{}", dir.display());
    Ok(())
}
