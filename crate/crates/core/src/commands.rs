//! The `generate`, `train`, `eval`, `sweep` and `memreport` commands.
//!
//! Configuration is a TOML file with `[data]`, `[model]`, `[train]` and
//! `[memreport]` tables. Command-line flags override file values, which
//! override defaults.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_ultramnist, load_dataset, load_idx, procedural_digits, save_dataset, DigitBank, UltraConfig,
};
use crate::error::{Error, Result};
use crate::memcost::{estimate_gd, estimate_patchgd, human_bytes, max_feasible_batch, MemoryReport};
use crate::model::{CompositeKind, CompositeModel, ModelConfig};
use crate::patching::{GridSpec, Image};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{DType, ParamStore};
use crate::trainer::{read_runlog, LogRow, Mode, RunLog, TrainConfig, Trainer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MEMREPORT_FILE: &str = "memreport.csv";
pub const TRAIN_DIR: &str = "train";
pub const VAL_DIR: &str = "val";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `train/` and `val/`.
    pub root: PathBuf,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    /// MNIST IDX files; procedural glyphs are used when unset.
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub generator: UltraConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            seed: 0,
            train_count: 5000,
            val_count: 1000,
            idx_images: None,
            idx_labels: None,
            generator: UltraConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemReportConfig {
    /// Square image sides to report.
    pub sizes: Vec<usize>,
    pub batch: u64,
    pub dtype: DType,
    /// Budget for the feasible-batch table.
    pub budget_bytes: Option<u64>,
}

impl Default for MemReportConfig {
    fn default() -> Self {
        Self {
            sizes: vec![512, 1024, 2048],
            batch: 1,
            dtype: DType::F32,
            budget_bytes: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub memreport: MemReportConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    /// The defaults, or the file at `path` layered over them.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Flag values layered over a loaded [`RunConfig`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Training flags: `--seed` sets the training seed.
    pub fn apply_train(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.train.mode = m;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
    }

    /// Generation flags: `--seed` sets the dataset seed.
    pub fn apply_data(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.data.seed = s;
        }
    }
}

/// Everything needed to replay a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub config: RunConfig,
}

impl RunManifest {
    /// Dataset paths default to `data.root/train` and, when it exists,
    /// `data.root/val`. The output directory defaults to `runs/<run id>`.
    pub fn new(config: RunConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        let train_data = config.data.root.join(TRAIN_DIR);
        let val = config.data.root.join(VAL_DIR);
        let val_data = val.is_dir().then_some(val);
        let run_id = run_id(&config, &train_data, val_data.as_deref())?;
        let out_dir = out_dir.unwrap_or_else(|| Path::new("runs").join(&run_id));
        Ok(Self {
            run_id,
            seed: config.train.seed,
            out_dir,
            train_data,
            val_data,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
    }
}

/// First 12 hex digits of the SHA-256 of the resolved configuration and
/// dataset paths.
pub fn run_id(config: &RunConfig, train: &Path, val: Option<&Path>) -> Result<String> {
    let body = serde_json::to_vec(&(config, train, val)).map_err(|e| Error::Validation(e.to_string()))?;
    let digest = Sha256::digest(&body);
    Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
}

pub struct Split {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn load(dir: &Path) -> Result<Self> {
        let samples = load_dataset(dir)?;
        let labels = samples.iter().map(|s| s.label as usize).collect();
        let images = samples.into_iter().map(|s| s.image).collect();
        Ok(Self { images, labels })
    }

    pub fn refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }

    fn size(&self) -> Result<(usize, usize)> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Validation("dataset is empty".into()))?;
        if self
            .images
            .iter()
            .any(|i| (i.height, i.width) != (first.height, first.width))
        {
            return Err(Error::Validation("dataset images differ in size".into()));
        }
        Ok((first.height, first.width))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub train: usize,
    pub val: usize,
    pub label_counts: [usize; 10],
}

fn digit_bank(cfg: &DataConfig) -> Result<DigitBank> {
    match (&cfg.idx_images, &cfg.idx_labels) {
        (Some(i), Some(l)) => load_idx(i, l),
        (None, None) => Ok(procedural_digits()),
        _ => Err(Error::Config(
            "data.idx_images and data.idx_labels must be set together".into(),
        )),
    }
}

/// Writes `out/train` and (when `val_count > 0`) `out/val`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<GenerateSummary> {
    let d = &cfg.data;
    d.generator.validate()?;
    if d.train_count == 0 {
        return Err(Error::Config("data.train_count must be >= 1".into()));
    }
    let bank = digit_bank(d)?;
    let mut label_counts = [0; 10];
    for (dir, count, stream) in [(TRAIN_DIR, d.train_count, 0), (VAL_DIR, d.val_count, 1)] {
        if count == 0 {
            continue;
        }
        let samples = generate_ultramnist(&bank, count, &d.generator, derive_seed(d.seed, &[stream]))?;
        for s in &samples {
            label_counts[s.label as usize] += 1;
        }
        save_dataset(&out.join(dir), &samples)?;
    }
    Ok(GenerateSummary {
        train: d.train_count,
        val: d.val_count,
        label_counts,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` in the output directory.
    pub resume: bool,
    /// Refuse to train when the modeled peak exceeds this many bytes.
    pub enforce_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub peak_bytes: u64,
    pub last_train: Option<LogRow>,
    pub last_val: Option<LogRow>,
    pub best_val_accuracy: Option<f64>,
}

/// Refuses configurations whose modeled peak exceeds `budget`.
pub fn check_budget(trainer: &Trainer<f32>, height: usize, width: usize, budget: u64) -> Result<u64> {
    let batch = trainer.cfg.batch_size;
    let report = trainer.memory_report(height, width, batch)?;
    if report.peak_bytes <= budget {
        return Ok(report.peak_bytes);
    }
    let feasible = max_feasible_batch(|b| trainer.memory_report(height, width, b as usize), budget)?;
    Err(Error::Budget(format!(
        "memcost models a peak of {} ({} bytes) for {} at batch {batch} on {height}x{width} images, over the budget of {} ({budget} bytes); activations {}, parameters+gradients+optimizer {}, Z block {}; largest feasible batch {feasible}",
        human_bytes(report.peak_bytes),
        report.peak_bytes,
        trainer.cfg.mode,
        human_bytes(budget),
        human_bytes(report.activation_bytes),
        human_bytes(report.fixed_bytes()),
        human_bytes(report.z_bytes),
    )))
}

/// Trains per `manifest`, writing the manifest, `runlog.csv`, `last.ckpt`
/// and `best.ckpt` into its output directory.
pub fn cmd_train(manifest: &RunManifest, opts: &TrainOptions) -> Result<TrainSummary> {
    let cfg = &manifest.config;
    cfg.train.validate()?;
    let train = Split::load(&manifest.train_data)?;
    let val = manifest.val_data.as_deref().map(Split::load).transpose()?;
    let (h, w) = train.size()?;
    if cfg.train.mode == Mode::Patchgd {
        cfg.train.resolve(h, w)?;
    }
    let mut trainer = Trainer::<f32>::new(cfg.train.clone(), cfg.model.clone())?;
    let peak_bytes = match opts.enforce_budget {
        Some(b) => check_budget(&trainer, h, w, b)?,
        None => trainer.modeled_peak(h, w, cfg.train.batch_size)?,
    };

    let out = &manifest.out_dir;
    fs::create_dir_all(out)?;
    let log_path = out.join(RUNLOG_FILE);
    let last = out.join(LAST_CHECKPOINT);
    let mut log = if opts.resume && last.exists() {
        trainer.load_checkpoint(&last)?;
        log::info!("resuming after epoch {}", trainer.epoch);
        RunLog::append_to(&log_path)?
    } else {
        RunLog::create(&log_path)?
    };
    manifest.save(&out.join(MANIFEST_FILE))?;

    let train_refs = train.refs();
    let val_refs = val.as_ref().map(Split::refs);
    let val_pair = val
        .as_ref()
        .zip(val_refs.as_ref())
        .map(|(v, r)| (r.as_slice(), v.labels.as_slice()));
    trainer.fit((&train_refs, &train.labels), val_pair, &mut log, Some(out))?;
    Ok(TrainSummary {
        run_id: manifest.run_id.clone(),
        out_dir: out.clone(),
        epochs: trainer.epoch,
        peak_bytes,
        last_train: log.last("train").cloned(),
        last_val: log.last("val").cloned(),
        best_val_accuracy: trainer.best_val_accuracy,
    })
}

/// Evaluates a checkpoint of the run in `run_dir` and appends an
/// `eval_<checkpoint stem>` row to its run log.
pub fn cmd_eval(run_dir: &Path, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<LogRow> {
    let manifest = RunManifest::load(&run_dir.join(MANIFEST_FILE))?;
    let ckpt = checkpoint.map_or_else(|| run_dir.join(BEST_CHECKPOINT), Path::to_path_buf);
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => manifest
            .val_data
            .clone()
            .ok_or_else(|| Error::Config("run has no validation data; pass a dataset".into()))?,
    };
    let split = Split::load(&data)?;
    let (h, w) = split.size()?;
    let cfg = &manifest.config;
    let mut trainer = Trainer::<f32>::new(cfg.train.clone(), cfg.model.clone())?;
    trainer.load_checkpoint(&ckpt)?;
    let stats = trainer.evaluate(&split.refs(), &split.labels)?;
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let row = LogRow {
        epoch: trainer.epoch.saturating_sub(1),
        split: format!("eval_{stem}"),
        loss: stats.loss,
        accuracy: stats.accuracy,
        qwk: stats.qwk,
        lr: 0.0,
        peak_mem_bytes: trainer.modeled_peak(h, w, cfg.train.batch_size)?,
        seconds: 0.0,
    };
    let log_path = run_dir.join(RUNLOG_FILE);
    let mut log = if log_path.exists() {
        RunLog::append_to(&log_path)?
    } else {
        RunLog::create(&log_path)?
    };
    log.push(row.clone())?;
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// `train.sampling_fraction`
    Sampling,
    /// `train.max_coverage`
    MaxSampled,
    /// `train.grad_accum`
    Epsilon,
    /// `train.patch_size`
    PatchSize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Sampling => "sampling",
            SweepAxis::MaxSampled => "max_sampled",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::PatchSize => "patch_size",
        }
    }

    /// Applies `value` to `cfg`.
    pub fn apply(self, cfg: &mut TrainConfig, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("sweep value `{value}` for {}: {e}", self.name()));
        match self {
            SweepAxis::Sampling => {
                cfg.sampling_fraction = value.parse().map_err(|e| bad(&e))?;
                cfg.patches_per_step = None;
            }
            SweepAxis::MaxSampled => cfg.max_coverage = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::Epsilon => cfg.grad_accum = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::PatchSize => cfg.patch_size = value.parse().map_err(|e| bad(&e))?,
        }
        Ok(())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampling" => Ok(SweepAxis::Sampling),
            "max_sampled" => Ok(SweepAxis::MaxSampled),
            "epsilon" => Ok(SweepAxis::Epsilon),
            "patch_size" => Ok(SweepAxis::PatchSize),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}` (sampling, max_sampled, epsilon, patch_size)"
            ))),
        }
    }
}

/// One sweep run. `accuracy` and `qwk` come from the final validation row
/// and are empty when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub sampling: f64,
    pub max_sampled: f64,
    pub epsilon: usize,
    pub patch_size: usize,
    pub accuracy: Option<f64>,
    pub qwk: Option<f64>,
    pub run_id: String,
    pub status: String,
}

/// One training run per value under `out/<axis>_<value>`, aggregated into
/// `out/sweep.csv`. Failed runs are recorded and the sweep continues.
pub fn cmd_sweep(base: &RunConfig, axis: SweepAxis, values: &[String], out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        axis.apply(&mut cfg.train, value)?;
        let t = &cfg.train;
        let mut row = SweepRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            sampling: t.sampling_fraction,
            max_sampled: t.max_coverage,
            epsilon: t.grad_accum,
            patch_size: t.patch_size,
            accuracy: None,
            qwk: None,
            run_id: String::new(),
            status: "ok".to_string(),
        };
        let result = RunManifest::new(cfg, Some(out.join(format!("{}_{value}", axis.name())))).and_then(|m| {
            if m.val_data.is_none() {
                return Err(Error::Config("sweeps need validation data".into()));
            }
            let id = m.run_id.clone();
            cmd_train(&m, &TrainOptions::default()).map(|s| (id, s))
        });
        match result {
            Ok((id, s)) => {
                row.run_id = id;
                row.accuracy = s.last_val.as_ref().map(|r| r.accuracy);
                row.qwk = s.last_val.as_ref().map(|r| r.qwk);
            }
            Err(e) => {
                log::warn!("sweep run {}={value} failed: {e}", axis.name());
                row.status = format!("error: {e}");
            }
        }
        rows.push(row);
    }
    write_sweep(&out.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::load(path, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeasibleBatch {
    pub mode: String,
    pub size: usize,
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemReport {
    pub reports: Vec<MemoryReport>,
    /// Present when a budget is configured.
    pub feasible: Vec<FeasibleBatch>,
}

/// GD, GD-extended and PatchGD reports for every configured image size.
pub fn cmd_memreport(cfg: &RunConfig, budget: Option<u64>) -> Result<MemReport> {
    let m = &cfg.memreport;
    let t = &cfg.train;
    t.validate()?;
    let p = t.patch_size;
    // only shapes matter here
    let mut rng = rng_for(t.seed, &[]);
    let composite = |kind, rng: &mut _| CompositeModel::build(kind, &mut ParamStore::<f32>::new(), rng, &cfg.model, p);
    let gd = composite(CompositeKind::Gd, &mut rng)?;
    let gd_ext = composite(CompositeKind::GdExtended, &mut rng)?;
    let mut store = ParamStore::<f32>::new();
    let extractor = cfg.model.build_extractor(&mut store, &mut rng, p)?;
    let head = cfg.model.build_head(&mut store, &mut rng)?;

    let budget = budget.or(m.budget_bytes);
    let mut reports = Vec::new();
    let mut feasible = Vec::new();
    for &size in &m.sizes {
        let grid = GridSpec::padded(size, size, p)?;
        let k = t.resolve(size, size)?.patches_per_step;
        let (gh, gw) = (grid.height, grid.width);
        let patchgd = |b: u64| estimate_patchgd(&extractor, &head, size, size, k, b, m.dtype, t.optimizer);
        let whole = |model: &CompositeModel, b: u64| estimate_gd(model, gh, gw, b, m.dtype, t.optimizer);
        reports.push(whole(&gd, m.batch)?);
        reports.push(whole(&gd_ext, m.batch)?);
        reports.push(patchgd(m.batch)?);
        if let Some(budget) = budget {
            for (mode, b) in [
                ("gd", max_feasible_batch(|b| whole(&gd, b), budget)?),
                ("gd_extended", max_feasible_batch(|b| whole(&gd_ext, b), budget)?),
                ("patchgd", max_feasible_batch(patchgd, budget)?),
            ] {
                feasible.push(FeasibleBatch {
                    mode: mode.to_string(),
                    size,
                    batch: b,
                });
            }
        }
    }
    Ok(MemReport { reports, feasible })
}

/// Reads the run log of a finished run.
pub fn run_log(run_dir: &Path) -> Result<Vec<LogRow>> {
    read_runlog(&run_dir.join(RUNLOG_FILE))
}
