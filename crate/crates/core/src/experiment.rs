//! Experiment configs, single runs and config-directory grids.
//!
//! A config is a UTF-8 file of `key = value` lines; `#` starts a comment.
//! Relative paths resolve against the config file's directory.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::augment::{self, AffineRanges, PairSampler};
use crate::data::{self, LabeledDataset, NormKind, SplitDataset};
use crate::error::{Error, Result};
use crate::losses::{AugLoss, ClsLoss, LossConfig, Reduction};
use crate::models::{self, AugNet, InputSpec, ModelConfig};
use crate::seed;
use crate::tensor::Tensor;
use crate::train::{self, AdamConfig, EpochView, NeuralConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: [u8; 2],
    },
    ImageDir {
        root: PathBuf,
        classes: [String; 2],
        resize: Option<(usize, usize)>,
    },
    /// Generated hue/stripe images, see [`data::synthetic_two_class`].
    Synthetic { size: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugMode {
    None,
    Traditional,
    StyleBank,
    Neural,
    Control,
}

impl AugMode {
    pub fn is_neural(self) -> bool {
        matches!(self, AugMode::Neural | AugMode::Control)
    }
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AugMode::None,
            "traditional" => AugMode::Traditional,
            "style_bank" => AugMode::StyleBank,
            "neural" => AugMode::Neural,
            "control" => AugMode::Control,
            other => return Err(Error::Config(format!("unknown aug.mode {other:?}"))),
        })
    }
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugMode::None => "none",
            AugMode::Traditional => "traditional",
            AugMode::StyleBank => "style_bank",
            AugMode::Neural => "neural",
            AugMode::Control => "control",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub per_class: usize,
    pub test_fraction: f64,
    pub aug_mode: AugMode,
    pub aug_loss: AugLoss,
    pub style_dir: Option<PathBuf>,
    pub ranges: AffineRanges,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub norm: NormKind,
    pub cls_loss: ClsLoss,
    pub bn_eval_on_augmented: bool,
    pub loss_reduction: Reduction,
    pub samples_per_epoch: usize,
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

const KEYS: &[&str] = &[
    "name",
    "dataset.kind",
    "dataset.images",
    "dataset.labels",
    "dataset.root",
    "dataset.classes",
    "dataset.per_class",
    "dataset.resize",
    "dataset.test_fraction",
    "dataset.size",
    "dataset.seed",
    "aug.mode",
    "aug.loss",
    "aug.style_dir",
    "aug.shift",
    "aug.zoom_min",
    "aug.zoom_max",
    "aug.rotate",
    "aug.shear",
    "aug.hue",
    "alpha",
    "beta",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "output_dir",
    "norm",
    "cls_loss",
    "bn_eval_on_augmented",
    "loss_reduction",
    "samples_per_epoch",
];

struct Raw {
    values: HashMap<String, String>,
    base: PathBuf,
}

impl Raw {
    fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut values = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(Self {
            values,
            base: base.to_path_buf(),
        })
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.str(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.str(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(self.base.join(self.required(key)?))
    }

    fn pair(&self, key: &str) -> Result<[String; 2]> {
        let v = self.required(key)?;
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [a, b] if !a.is_empty() && !b.is_empty() => Ok([a.to_string(), b.to_string()]),
            _ => Err(Error::Config(format!("{key}: expected two comma-separated classes"))),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "experiment".into());
        Self::parse(&text, base, &stem)
    }

    /// Parses config text; `base` anchors relative paths and `stem` names
    /// the default output directory.
    pub fn parse(text: &str, base: &Path, stem: &str) -> Result<Self> {
        let raw = Raw::parse(text, base)?;
        let kind = raw.str("dataset.kind").unwrap_or("idx");
        let dataset = match kind {
            "idx" => {
                let [a, b] = raw.pair("dataset.classes")?;
                let digit = |s: &str| {
                    s.parse::<u8>()
                        .map_err(|_| Error::Config(format!("dataset.classes: {s:?} is not a digit")))
                };
                DatasetSource::Idx {
                    images: raw.path("dataset.images")?,
                    labels: raw.path("dataset.labels")?,
                    classes: [digit(&a)?, digit(&b)?],
                }
            }
            "image_dir" => {
                let resize = match raw.str("dataset.resize") {
                    None => None,
                    Some(v) => {
                        let (h, w) = v
                            .split_once('x')
                            .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
                            .ok_or_else(|| Error::Config(format!("dataset.resize: expected HxW, got {v:?}")))?;
                        Some((h, w))
                    }
                };
                DatasetSource::ImageDir {
                    root: raw.path("dataset.root")?,
                    classes: raw.pair("dataset.classes")?,
                    resize,
                }
            }
            "synthetic" => DatasetSource::Synthetic {
                size: raw.get("dataset.size", 64)?,
                seed: raw.get("dataset.seed", 0)?,
            },
            other => return Err(Error::Config(format!("unknown dataset.kind {other:?}"))),
        };
        let defaults = AffineRanges::default();
        let ranges = AffineRanges {
            shift: raw.get("aug.shift", defaults.shift)?,
            zoom: (
                raw.get("aug.zoom_min", defaults.zoom.0)?,
                raw.get("aug.zoom_max", defaults.zoom.1)?,
            ),
            rotate: raw.get("aug.rotate", defaults.rotate)?,
            shear: raw.get("aug.shear", defaults.shear)?,
            hue: raw.get("aug.hue", defaults.hue)?,
        };
        let aug_mode: AugMode = raw.get("aug.mode", AugMode::None)?;
        let cfg = Self {
            name: raw.str("name").unwrap_or(stem).to_string(),
            dataset,
            per_class: raw.get("dataset.per_class", 1000)?,
            test_fraction: raw.get("dataset.test_fraction", 0.0)?,
            aug_mode,
            aug_loss: raw.get("aug.loss", AugLoss::None)?,
            style_dir: raw.str("aug.style_dir").map(|p| base.join(p)),
            ranges,
            alpha: raw.get("alpha", 0.75)?,
            beta: raw.get("beta", 0.25)?,
            lr: raw.get("lr", 1e-4)?,
            epochs: raw.get("epochs", 40)?,
            batch_size: raw.get("batch_size", 32)?,
            seed: raw.get("seed", 0)?,
            output_dir: base.join(raw.str("output_dir").unwrap_or(&format!("runs/{stem}"))),
            norm: raw.get("norm", NormKind::Standardize)?,
            cls_loss: raw.get("cls_loss", ClsLoss::SigmoidBce)?,
            bn_eval_on_augmented: raw.get("bn_eval_on_augmented", false)?,
            loss_reduction: raw.get("loss_reduction", Reduction::Mean)?,
            samples_per_epoch: raw.get("samples_per_epoch", 4)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(e) = o.epochs {
            self.epochs = e;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.per_class == 0 {
            return bad("epochs, batch_size and dataset.per_class must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("dataset.test_fraction must be in [0, 1), got {}", self.test_fraction));
        }
        LossConfig::new(self.aug_loss, self.alpha, self.beta)?;
        self.ranges.validate()?;
        if self.aug_loss != AugLoss::None && !self.aug_mode.is_neural() {
            return bad(format!(
                "aug.loss = {} requires aug.mode neural or control, got {}",
                self.aug_loss, self.aug_mode
            ));
        }
        if self.aug_mode == AugMode::StyleBank && self.style_dir.is_none() {
            return bad("aug.mode = style_bank needs aug.style_dir".into());
        }
        if self.aug_loss == AugLoss::Style && matches!(self.dataset, DatasetSource::Idx { .. }) {
            return bad("aug.loss = style is undefined for single-channel images".into());
        }
        if let DatasetSource::Idx { classes, .. } = &self.dataset {
            if classes[0] == classes[1] || classes.iter().any(|&d| d > 9) {
                return bad(format!("dataset.classes must be two distinct digits, got {classes:?}"));
            }
        }
        Ok(())
    }
}

/// Where a failed run stopped, mapped to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Image { .. } => 2,
        _ => 3,
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    match exit_code(e) {
        1 => "config",
        2 => "data",
        _ => "training",
    }
}

/// `error kind=<kind> code=<n>: <message>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error kind={} code={}: {msg}", error_kind(e), exit_code(e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub aug_mode: AugMode,
    pub aug_loss: AugLoss,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub final_train_acc: f64,
    pub epochs: usize,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,aug_loss,train_acc,val_acc";

fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    match &cfg.dataset {
        DatasetSource::Idx {
            images,
            labels,
            classes,
        } => data::load_idx(images, labels, *classes, cfg.per_class),
        DatasetSource::ImageDir {
            root,
            classes,
            resize,
        } => data::load_image_dir(root, [&classes[0], &classes[1]], cfg.per_class, *resize),
        DatasetSource::Synthetic { size, seed } => data::synthetic_two_class(cfg.per_class, *size, *seed),
    }
}

/// Loads, splits, optionally augments (in [0, 1] pixel space) and
/// normalizes the data for `cfg`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<SplitDataset> {
    let ds = load_dataset(cfg)?;
    if cfg.aug_loss == AugLoss::Style && ds.image_shape()[2] == 1 {
        return Err(Error::Config(
            "aug.loss = style is undefined for single-channel images".into(),
        ));
    }
    let mut split = data::split(&ds, cfg.test_fraction, cfg.seed)?;
    match cfg.aug_mode {
        AugMode::Traditional => {
            let mut rng = seed::rng(cfg.seed, seed::stream::AUGMENT);
            split.train = augment::augment_dataset_traditional(&split.train, &cfg.ranges, &mut rng)?;
        }
        AugMode::StyleBank => {
            let dir = cfg.style_dir.as_ref().expect("validated");
            let mut rng = seed::rng(cfg.seed, seed::stream::STYLE_BANK);
            split.train = augment::load_style_bank(&split.train, dir, &mut rng)?;
        }
        _ => {}
    }
    split.normalize(cfg.norm)
}

struct Outputs {
    dir: PathBuf,
    created_dir: bool,
}

impl Outputs {
    const FILES: [&'static str; 3] = ["metrics.csv", "summary.txt", "checkpoint.bin"];

    fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        let out = Self {
            dir: dir.to_path_buf(),
            created_dir,
        };
        out.remove();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(out)
    }

    fn remove(&self) {
        if self.created_dir {
            let _ = fs::remove_dir_all(&self.dir);
            return;
        }
        for f in Self::FILES {
            let _ = fs::remove_file(self.dir.join(f));
        }
        let _ = fs::remove_dir_all(self.dir.join("samples"));
    }
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Source A, source B and the augmented image side by side, de-normalized
/// and clamped to [0, 1].
fn triptych(ds: &LabeledDataset, a: &Tensor, b: &Tensor, aug: &Tensor) -> Result<Tensor> {
    let stats = ds.norm_stats.as_ref();
    let show = |t: &Tensor| stats.map_or_else(|| t.clone(), |s| s.invert(t)).map(|v| v.clamp(0.0, 1.0));
    let (a, b, aug) = (show(a), show(b), show(aug));
    let [h, w, c] = ds.image_shape();
    let mut out = Vec::with_capacity(h * 3 * w * c);
    for y in 0..h {
        for img in [&a, &b, &aug] {
            out.extend_from_slice(&img.data()[y * w * c..(y + 1) * w * c]);
        }
    }
    Tensor::new(&[h, 3 * w, c], out)
}

fn write_samples(
    dir: &Path,
    epoch: usize,
    ds: &LabeledDataset,
    pairs: &[augment::PairSample],
    augnet: &AugNet,
) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    let (inputs, _) = augment::pair_batch(ds, pairs)?;
    let out = augnet.augment(&inputs)?;
    for (i, p) in pairs.iter().enumerate() {
        let img = triptych(ds, &ds.images[p.a], &ds.images[p.b], &out.index_first(i)?)?;
        data::write_png(&dir.join(format!("epoch_{epoch}_{i}.png")), &img)?;
    }
    Ok(())
}

/// Runs one experiment, writing outputs under `cfg.output_dir`. On failure
/// the outputs written so far are removed.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let outputs = Outputs::create(&cfg.output_dir)?;
    let result = run_inner(cfg, &outputs.dir);
    if result.is_err() {
        outputs.remove();
    }
    result
}

fn run_inner(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    let data = prepare_data(cfg)?;
    let [h, w, c] = data.train.image_shape();
    let spec = InputSpec::new(h, w, c).map_err(|e| Error::Data(e.to_string()))?;
    let (mut net, mut augnet) = models::build_models(spec, ModelConfig::default(), cfg.seed)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        cls_loss: cfg.cls_loss,
        seed: cfg.seed,
    };

    let metrics_path = out.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint_path = out.join("checkpoint.bin");
    let samples_dir = out.join("samples");
    let sample_pairs = if cfg.aug_mode.is_neural() {
        fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
        let sampler = PairSampler::new(&data.train, cfg.aug_mode == AugMode::Control);
        let mut rng = seed::rng(cfg.seed, seed::stream::SAMPLES);
        let classes: Vec<usize> = (0..cfg.samples_per_epoch).map(|i| i % 2).collect();
        sampler.sample_batch(&classes, &mut rng)?
    } else {
        Vec::new()
    };

    let mut hook = |v: EpochView<'_>| -> Result<()> {
        let r = v.record;
        writeln!(
            metrics,
            "{},{},{},{},{}",
            r.epoch,
            fmt_metric(r.train_loss),
            r.aug_loss.map(fmt_metric).unwrap_or_default(),
            fmt_metric(r.train_acc),
            fmt_metric(r.val_acc)
        )
        .and_then(|_| metrics.flush())
        .map_err(|e| Error::io(&metrics_path, e))?;
        if v.is_best {
            models::save_checkpoint(&checkpoint_path, v.smallnet, v.augnet)?;
        }
        if let Some(a) = v.augnet {
            write_samples(&samples_dir, r.epoch, &data.train, &sample_pairs, a)?;
        }
        Ok(())
    };

    let history = if cfg.aug_mode.is_neural() {
        let neural = NeuralConfig {
            loss: LossConfig::new(cfg.aug_loss, cfg.alpha, cfg.beta)?,
            reduction: cfg.loss_reduction,
            control: cfg.aug_mode == AugMode::Control,
            bn_eval_on_augmented: cfg.bn_eval_on_augmented,
        };
        train::train_neural(&mut net, &mut augnet, &data, &train_cfg, &neural, &mut hook)?
    } else {
        train::train_plain(&mut net, &data, &train_cfg, &mut hook)?
    };

    let summary = RunSummary {
        name: cfg.name.clone(),
        aug_mode: cfg.aug_mode,
        aug_loss: cfg.aug_loss,
        best_val_acc: history.best_val_acc,
        best_epoch: history.best_epoch,
        final_train_acc: history.records.last().map_or(0.0, |r| r.train_acc),
        epochs: cfg.epochs,
        seconds: start.elapsed().as_secs_f64(),
    };
    let text = format!(
        "name: {}\naug_mode: {}\naug_loss: {}\nbest_val_acc: {:.4}\nbest_epoch: {}\nepochs: {}\nseed: {}\ntrain_size: {}\nval_size: {}\nwall_time_s: {:.1}\n",
        summary.name,
        summary.aug_mode,
        summary.aug_loss,
        summary.best_val_acc,
        summary.best_epoch,
        cfg.epochs,
        cfg.seed,
        data.train.len(),
        data.val.len(),
        summary.seconds,
    );
    let summary_path = out.join("summary.txt");
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

/// Outcome of one config in a grid.
#[derive(Debug)]
pub struct GridRow {
    pub config: PathBuf,
    pub result: Result<RunSummary>,
}

pub const GRID_HEADER: &str = "name,aug_mode,aug_loss,best_val_acc,best_epoch,wall_time_s,status";

/// Runs every `*.conf` file in `dir` in name order and writes
/// `grid_summary.csv` there. Individual failures are recorded, not fatal.
pub fn grid(dir: &Path, overrides: &Overrides) -> Result<Vec<GridRow>> {
    let mut configs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "conf"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(Error::Config(format!("{} contains no .conf files", dir.display())));
    }
    let mut rows = Vec::new();
    let mut csv = format!("{GRID_HEADER}\n");
    for path in configs {
        let started = Instant::now();
        let result = ExperimentConfig::from_file(&path).and_then(|mut cfg| {
            cfg.apply(overrides);
            run(&cfg)
        });
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        match &result {
            Ok(s) => csv.push_str(&format!(
                "{},{},{},{:.4},{},{:.1},ok\n",
                s.name, s.aug_mode, s.aug_loss, s.best_val_acc, s.best_epoch, s.seconds
            )),
            Err(e) => {
                eprintln!("{}: {}", path.display(), error_line(e));
                csv.push_str(&format!(
                    "{stem},,,,,{:.1},FAILED\n",
                    started.elapsed().as_secs_f64()
                ))
            }
        }
        rows.push(GridRow {
            config: path,
            result,
        });
    }
    let summary = dir.join("grid_summary.csv");
    fs::write(&summary, csv).map_err(|e| Error::io(&summary, e))?;
    Ok(rows)
}
