//! Training and evaluation orchestration with on-disk artifacts.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vtn_core::model::{build_model, Model};
use vtn_core::synth::{make_dataset, Dataset, SceneSpec, Split};
use vtn_core::train::{evaluate, mean_intra_class_distance, warped_features, EvalMetrics, FitRecord, Trainer};
use vtn_core::Real;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Precision, RunConfig, VariantName};
use crate::dataset::{load_dir, SceneFile};
use crate::error::{AppError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const INIT_CKPT: &str = "init.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

/// Dataset described by a run config: loaded from `dataset_dir` or rendered.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(dir) = &cfg.dataset_dir {
        return load_dir(dir);
    }
    let spec = match &cfg.dataset_spec {
        Some(path) => SceneFile::load(path)?,
        None => SceneSpec::desk_default(),
    };
    Ok(make_dataset(&spec, cfg.n_train, cfg.n_test, cfg.data_seed)?)
}

pub fn build<R: Real>(cfg: &RunConfig, spec: &SceneSpec) -> Result<Model<R>> {
    let ms = cfg.model_spec(spec.class_count(), (spec.height, spec.width));
    Ok(build_model(&ms, cfg.vtn_config().as_ref())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub task_loss: f64,
    pub cons_loss: f64,
    pub accuracy: f64,
}

impl From<&EvalMetrics> for SplitMetrics {
    fn from(m: &EvalMetrics) -> Self {
        SplitMetrics {
            task_loss: m.task_loss,
            cons_loss: m.cons_loss,
            accuracy: m.accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub variant: VariantName,
    pub seed: u64,
    pub precision: Precision,
    pub epochs: usize,
    pub parameters: usize,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    /// Mean pairwise L2 distance between same-class warped test features.
    pub intra_class_distance: f64,
}

struct MetricsCsv {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl MetricsCsv {
    fn create(path: PathBuf) -> Result<Self> {
        let mut writer = csv::Writer::from_path(&path).map_err(|e| AppError::io(&path, e.into()))?;
        writer
            .write_record(["epoch", "split", "task_loss", "cons_loss", "accuracy"])
            .map_err(|e| AppError::io(&path, e.into()))?;
        Ok(MetricsCsv { writer, path })
    }

    fn row(&mut self, epoch: usize, split: &str, task: f64, cons: f64, acc: f64) -> Result<()> {
        let rec = [epoch.to_string(), split.to_string(), task.to_string(), cons.to_string(), acc.to_string()];
        self.writer.write_record(&rec).map_err(|e| AppError::io(&self.path, e.into()))?;
        self.writer.flush().map_err(|e| AppError::io(&self.path, e))
    }

    fn record(&mut self, r: &FitRecord) -> Result<()> {
        let t = &r.train;
        self.row(t.epoch, "train", t.task_loss, t.cons_loss, t.accuracy)?;
        if let Some(e) = &r.test {
            self.row(t.epoch, "test", e.task_loss, e.cons_loss, e.accuracy)?;
        }
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

/// Trains one configuration into `out`. With zero epochs only the
/// initialisation checkpoint is written and `None` is returned.
pub fn train_run(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Option<Report>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &data, out, log),
        Precision::F64 => train_typed::<f64>(cfg, &data, out, log),
    }
}

fn train_typed<R: Real>(cfg: &RunConfig, data: &Dataset, out: &Path, log: &mut dyn Write) -> Result<Option<Report>> {
    let mut model = build::<R>(cfg, &data.spec)?;
    create_dir(out)?;
    let snapshot = cfg.to_json();
    if cfg.epochs == 0 {
        let ckpt = Checkpoint::from_model(&model, snapshot, 0, &[]);
        save_checkpoint(&ckpt, &out.join(INIT_CKPT))?;
        return Ok(None);
    }
    let mut csv = MetricsCsv::create(out.join(METRICS_FILE))?;
    let mut trainer = Trainer::new(&model, &cfg.train_config())?;
    let mut history: Vec<FitRecord> = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);
    while !trainer.done() {
        let rec = trainer.step(&mut model, &data.train, Some(&data.test))?;
        csv.record(&rec)?;
        let test = rec.test.as_ref().expect("evaluated every epoch");
        let _ = writeln!(
            log,
            "[{} seed {}] epoch {:>3}  train loss {:.4} cons {:.4} acc {:.4} | test loss {:.4} acc {:.4}",
            cfg.variant.name(),
            cfg.seed,
            rec.train.epoch,
            rec.train.task_loss,
            rec.train.cons_loss,
            rec.train.accuracy,
            test.task_loss,
            test.accuracy
        );
        let improved = test.accuracy > best.1;
        if improved {
            best = (rec.train.epoch, test.accuracy);
        }
        history.push(rec);
        let ckpt = Checkpoint::from_model(&model, snapshot.clone(), trainer.epoch(), &history);
        save_checkpoint(&ckpt, &out.join(LAST_CKPT))?;
        if improved {
            save_checkpoint(&ckpt, &out.join(BEST_CKPT))?;
        }
    }
    let last = history.last().expect("at least one epoch");
    let features = warped_features(&mut model, &data.test, 100)?;
    let report = Report {
        config_hash: cfg.hash(),
        variant: cfg.variant,
        seed: cfg.seed,
        precision: cfg.precision,
        epochs: cfg.epochs,
        parameters: model.store.count(),
        train: SplitMetrics {
            task_loss: last.train.task_loss,
            cons_loss: last.train.cons_loss,
            accuracy: last.train.accuracy,
        },
        test: SplitMetrics::from(last.test.as_ref().expect("evaluated every epoch")),
        best_epoch: best.0,
        best_test_accuracy: best.1,
        intra_class_distance: mean_intra_class_distance(&features, &data.test.labels),
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(Some(report))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub variant: VariantName,
    pub seed: u64,
    pub dir: PathBuf,
    pub config_hash: String,
    pub test_accuracy: f64,
    pub intra_class_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: VariantName,
    pub runs: usize,
    pub mean_test_accuracy: f64,
    pub mean_intra_class_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub runs: Vec<GridEntry>,
    pub variants: Vec<VariantSummary>,
}

/// Runs every variant × seed combination of `cfg` into `<out>/<variant>-seed<k>`
/// and writes `<out>/summary.json`.
pub fn train_grid(cfg: &RunConfig, variants: &[VariantName], seeds: &[u64], log: &mut dyn Write) -> Result<GridSummary> {
    let mut runs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let run_cfg = RunConfig {
                variant,
                seed,
                ..cfg.clone()
            };
            let dir = cfg.out_dir.join(format!("{}-seed{}", variant.name(), seed));
            let Some(report) = train_run(&run_cfg, &dir, log)? else {
                continue;
            };
            runs.push(GridEntry {
                variant,
                seed,
                dir,
                config_hash: report.config_hash,
                test_accuracy: report.test.accuracy,
                intra_class_distance: report.intra_class_distance,
            });
        }
    }
    let variants = variants
        .iter()
        .filter_map(|&v| {
            let mine: Vec<&GridEntry> = runs.iter().filter(|r| r.variant == v).collect();
            let n = mine.len();
            (n > 0).then(|| VariantSummary {
                variant: v,
                runs: n,
                mean_test_accuracy: mine.iter().map(|r| r.test_accuracy).sum::<f64>() / n as f64,
                mean_intra_class_distance: mine.iter().map(|r| r.intra_class_distance).sum::<f64>() / n as f64,
            })
        })
        .collect();
    let summary = GridSummary { runs, variants };
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Restores the run config and model stored in a checkpoint.
pub fn restore<R: Real>(path: &Path) -> Result<(RunConfig, Dataset, Model<R>)> {
    restore_from(&load_checkpoint(path)?)
}

fn restore_from<R: Real>(ckpt: &Checkpoint) -> Result<(RunConfig, Dataset, Model<R>)> {
    let cfg = RunConfig::from_json(&ckpt.config)?;
    let data = load_data(&cfg)?;
    let mut model = build::<R>(&cfg, &data.spec)?;
    ckpt.apply_to(&mut model)?;
    Ok((cfg, data, model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub split: String,
    pub images: usize,
    pub task_loss: f64,
    pub cons_loss: f64,
    pub accuracy: f64,
    pub intra_class_distance: f64,
}

/// Evaluates a checkpoint in the precision it was trained with.
pub fn eval_checkpoint(path: &Path, use_train: bool) -> Result<EvalReport> {
    let ckpt = load_checkpoint(path)?;
    match RunConfig::from_json(&ckpt.config)?.precision {
        Precision::F32 => eval_typed::<f32>(&ckpt, use_train),
        Precision::F64 => eval_typed::<f64>(&ckpt, use_train),
    }
}

fn eval_typed<R: Real>(ckpt: &Checkpoint, use_train: bool) -> Result<EvalReport> {
    let (cfg, data, mut model) = restore_from::<R>(ckpt)?;
    let split: &Split = if use_train { &data.train } else { &data.test };
    let m = evaluate(&mut model, split, cfg.batch_size.max(64), cfg.alpha)?;
    let features = warped_features(&mut model, split, 100)?;
    Ok(EvalReport {
        config_hash: cfg.hash(),
        split: if use_train { "train" } else { "test" }.to_string(),
        images: split.len(),
        task_loss: m.task_loss,
        cons_loss: m.cons_loss,
        accuracy: m.accuracy,
        intra_class_distance: mean_intra_class_distance(&features, &split.labels),
    })
}
