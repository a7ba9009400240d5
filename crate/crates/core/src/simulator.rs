//! Seeded experiment sweeps over federation parameters.
//!
//! A sweep fixes a base [`RoundConfig`], varies exactly one axis (device
//! count, batch size, local episodes or head initialisation) and repeats each
//! point `R` times with seeds `base_seed..base_seed + R`. Per-epoch mean and
//! population standard deviation across repetitions are reported and written
//! as CSV.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{self, partition_indices, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::federation::{run_training, ModelBlob, RoundConfig, TrainingRun};
use crate::nn::{EmbeddingSample, HeadShape, InitMode};

pub const CSV_HEADER: &str =
    "sweep_param,sweep_value,epoch,examples_seen,val_acc_mean,val_acc_std,train_acc_mean,train_acc_std";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Random,
    Zeros,
    Pretrained,
}

impl InitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::Zeros => "zeros",
            InitKind::Pretrained => "pretrained",
        }
    }
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(InitKind::Random),
            "zeros" => Ok(InitKind::Zeros),
            "pretrained" => Ok(InitKind::Pretrained),
            other => Err(Error::usage(format!("unknown init mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub train: usize,
    pub validation: usize,
    pub margin: f64,
    pub seed: u64,
    /// When set, only this many dimensions carry signal (the rest are zero).
    pub active_dims: Option<usize>,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<EmbeddingDataset> {
        let n = self.train + self.validation;
        let ds = match self.active_dims {
            Some(k) => data::synth_sparse(self.embedding_dim, k, self.num_classes, n, self.seed)?,
            None => data::synth_separable(self.embedding_dim, self.num_classes, n, self.margin, self.seed)?,
        };
        ds.with_validation_tail(self.validation)
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            embedding_dim: HeadShape::PERF_MOBILENET.embedding_dim,
            num_classes: 2,
            train: 16_000,
            validation: 1_000,
            margin: data::DEFAULT_MARGIN,
            seed: 7,
            active_dims: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Devices(Vec<usize>),
    BatchSize(Vec<usize>),
    LocalEpisodes(Vec<usize>),
    InitMode(Vec<InitKind>),
}

impl SweepAxis {
    pub fn param_name(&self) -> &'static str {
        match self {
            SweepAxis::Devices(_) => "devices",
            SweepAxis::BatchSize(_) => "batch_size",
            SweepAxis::LocalEpisodes(_) => "local_episodes",
            SweepAxis::InitMode(_) => "init_mode",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Devices(v) | SweepAxis::BatchSize(v) | SweepAxis::LocalEpisodes(v) => v.len(),
            SweepAxis::InitMode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_labels(&self) -> Vec<String> {
        match self {
            SweepAxis::Devices(v) | SweepAxis::BatchSize(v) | SweepAxis::LocalEpisodes(v) => {
                v.iter().map(usize::to_string).collect()
            }
            SweepAxis::InitMode(v) => v.iter().map(|k| k.as_str().to_string()).collect(),
        }
    }

    fn parse(name: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let numbers = || -> Result<Vec<usize>> {
            items
                .iter()
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::usage(format!("bad sweep value '{s}'")))
                })
                .collect()
        };
        Ok(match name.trim() {
            "devices" => SweepAxis::Devices(numbers()?),
            "batch_size" => SweepAxis::BatchSize(numbers()?),
            "local_episodes" => SweepAxis::LocalEpisodes(numbers()?),
            "init_mode" => SweepAxis::InitMode(items.iter().map(|s| s.parse()).collect::<Result<_>>()?),
            other => return Err(Error::usage(format!("unknown sweep axis '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub base: RoundConfig,
    pub repetitions: usize,
    pub base_seed: u64,
    pub init: InitKind,
    pub dataset: DatasetSource,
    pub sweep: SweepAxis,
    /// Seed of the synthetic source task used to pretrain heads.
    pub pretrain_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let base = RoundConfig::default();
        Self {
            name: "custom".into(),
            sweep: SweepAxis::Devices(vec![base.num_devices]),
            base,
            repetitions: 10,
            base_seed: 0,
            init: InitKind::Random,
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            pretrain_seed: 1_000,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.repetitions == 0 {
            return Err(Error::usage("repetitions must be at least 1"));
        }
        if self.sweep.is_empty() {
            return Err(Error::usage("sweep has no values"));
        }
        let check = |name: &str, v: &[usize]| {
            if v.contains(&0) {
                Err(Error::usage(format!("{name} sweep values must be positive")))
            } else {
                Ok(())
            }
        };
        match &self.sweep {
            SweepAxis::Devices(v) => check("devices", v),
            SweepAxis::BatchSize(v) => check("batch_size", v),
            SweepAxis::LocalEpisodes(v) => check("local_episodes", v),
            SweepAxis::InitMode(_) => Ok(()),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::usage(format!("invalid value '{v}' for {key}")))
        }
        fn synth(ds: &mut DatasetSource) -> &mut SyntheticSpec {
            if let DatasetSource::File(_) = ds {
                *ds = DatasetSource::Synthetic(SyntheticSpec::default());
            }
            match ds {
                DatasetSource::Synthetic(s) => s,
                DatasetSource::File(_) => unreachable!(),
            }
        }
        match key.trim() {
            "name" => self.name = value.to_string(),
            "preset" => *self = preset(value)?,
            "devices" => self.base.num_devices = num(key, value)?,
            "batch_size" => self.base.batch_size = num(key, value)?,
            "local_episodes" => self.base.local_episodes = num(key, value)?,
            "learning_rate" => self.base.learning_rate = num(key, value)?,
            "epochs" => self.base.epochs = num(key, value)?,
            "repetitions" => self.repetitions = num(key, value)?,
            "base_seed" => self.base_seed = num(key, value)?,
            "pretrain_seed" => self.pretrain_seed = num(key, value)?,
            "init" => self.init = value.parse()?,
            "dataset" => {
                self.dataset = if value == "synthetic" {
                    DatasetSource::Synthetic(SyntheticSpec::default())
                } else {
                    DatasetSource::File(PathBuf::from(value))
                }
            }
            "synth_dim" => synth(&mut self.dataset).embedding_dim = num(key, value)?,
            "synth_classes" => synth(&mut self.dataset).num_classes = num(key, value)?,
            "synth_train" => synth(&mut self.dataset).train = num(key, value)?,
            "synth_validation" => synth(&mut self.dataset).validation = num(key, value)?,
            "synth_margin" => synth(&mut self.dataset).margin = num(key, value)?,
            "synth_seed" => synth(&mut self.dataset).seed = num(key, value)?,
            "synth_active_dims" => {
                synth(&mut self.dataset).active_dims = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            // A new axis starts from the current base value; `sweep_values` replaces it.
            "sweep" => {
                self.sweep = match value {
                    "devices" => SweepAxis::Devices(vec![self.base.num_devices]),
                    "batch_size" => SweepAxis::BatchSize(vec![self.base.batch_size]),
                    "local_episodes" => SweepAxis::LocalEpisodes(vec![self.base.local_episodes]),
                    "init_mode" => SweepAxis::InitMode(vec![self.init]),
                    other => return Err(Error::usage(format!("unknown sweep axis '{other}'"))),
                }
            }
            "sweep_values" => self.sweep = SweepAxis::parse(self.sweep.param_name(), value)?,
            other => return Err(Error::usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file on top of the defaults.
    ///
    /// Blank lines and lines starting with `#` are ignored. A `preset` key
    /// resets everything to that preset, so put it first.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv_str(text, "line")?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current settings. Errors
    /// name `origin` and the line number.
    pub fn apply_kv_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let location = format!("{origin} {}", lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(location.clone(), "expected key = value"))?;
            self.set(key, value).map_err(|e| match e {
                Error::Usage(msg) => Error::parse(location, msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv_str(&fs::read_to_string(path)?)
    }

    /// Every resolved setting as `key = value` lines, readable by [`Self::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        let mut lines = vec![
            format!("name = {}", self.name),
            format!("devices = {}", self.base.num_devices),
            format!("batch_size = {}", self.base.batch_size),
            format!("local_episodes = {}", self.base.local_episodes),
            format!("learning_rate = {}", self.base.learning_rate),
            format!("epochs = {}", self.base.epochs),
            format!("repetitions = {}", self.repetitions),
            format!("base_seed = {}", self.base_seed),
            format!("pretrain_seed = {}", self.pretrain_seed),
            format!("init = {}", self.init.as_str()),
        ];
        match &self.dataset {
            DatasetSource::File(p) => lines.push(format!("dataset = {}", p.display())),
            DatasetSource::Synthetic(s) => {
                lines.push("dataset = synthetic".into());
                lines.push(format!("synth_dim = {}", s.embedding_dim));
                lines.push(format!("synth_classes = {}", s.num_classes));
                lines.push(format!("synth_train = {}", s.train));
                lines.push(format!("synth_validation = {}", s.validation));
                lines.push(format!("synth_margin = {}", s.margin));
                lines.push(format!("synth_seed = {}", s.seed));
                lines.push(format!(
                    "synth_active_dims = {}",
                    s.active_dims.map_or("none".to_string(), |k| k.to_string())
                ));
            }
        }
        lines.push(format!("sweep = {}", self.sweep.param_name()));
        lines.push(format!("sweep_values = {}", self.sweep.value_labels().join(",")));
        lines.join("\n") + "\n"
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv_string())
    }
}

/// The four figure presets: `fig1` (init), `fig2` (devices), `fig3` (batch size), `fig4` (episodes).
pub fn default_presets() -> Vec<ExperimentConfig> {
    ["fig1", "fig2", "fig3", "fig4"]
        .iter()
        .map(|name| preset(name).expect("built-in preset"))
        .collect()
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        name: name.to_string(),
        ..ExperimentConfig::default()
    };
    Ok(match name {
        "fig1" => ExperimentConfig {
            sweep: SweepAxis::InitMode(vec![InitKind::Random, InitKind::Pretrained]),
            ..base
        },
        "fig2" => ExperimentConfig {
            sweep: SweepAxis::Devices(vec![1, 2, 4, 8]),
            ..base
        },
        "fig3" => ExperimentConfig {
            sweep: SweepAxis::BatchSize(vec![1, 5, 20, 50]),
            ..base
        },
        "fig4" => ExperimentConfig {
            repetitions: 20,
            sweep: SweepAxis::LocalEpisodes(vec![1, 3, 5, 6]),
            ..base
        },
        other => return Err(Error::usage(format!("unknown preset '{other}' (expected fig1..fig4)"))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub examples_seen: usize,
    pub val_acc_mean: f64,
    pub val_acc_std: f64,
    pub train_acc_mean: f64,
    pub train_acc_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub epochs: Vec<EpochStats>,
}

impl SweepPoint {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    /// Mean over epochs of the across-repetition validation std.
    pub fn mean_val_std(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_acc_std).sum::<f64>() / self.epochs.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub param: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn point(&self, value: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.value == value)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate(runs: &[TrainingRun]) -> Vec<EpochStats> {
    let epochs = runs[0].history.len();
    (0..epochs)
        .map(|t| {
            let val: Vec<f64> = runs.iter().map(|r| r.history[t].val_accuracy).collect();
            let train: Vec<f64> = runs.iter().map(|r| r.history[t].mean_train_accuracy).collect();
            let (val_acc_mean, val_acc_std) = mean_std(&val);
            let (train_acc_mean, train_acc_std) = mean_std(&train);
            EpochStats {
                epoch: runs[0].history[t].epoch,
                examples_seen: runs[0].history[t].examples_seen,
                val_acc_mean,
                val_acc_std,
                train_acc_mean,
                train_acc_std,
            }
        })
        .collect()
}

/// Trains a head centrally on a source task and returns it for reuse.
///
/// With a synthetic target the source task shares the target's class-0
/// cluster and swaps in fresh clusters for the other classes, the way two
/// "X versus everything else" tasks on one embedding space share their
/// negative class. Otherwise the source is an independent synthetic task.
pub fn pretrain_head(target: &DatasetSource, shape: HeadShape, base: &RoundConfig, seed: u64) -> Result<ModelBlob> {
    let cfg = RoundConfig {
        num_devices: 1,
        ..*base
    };
    let n = cfg.epochs * cfg.batch_size + PRETRAIN_VALIDATION;
    let source = match target {
        DatasetSource::Synthetic(spec) if spec.active_dims.is_none() => {
            data::synth_related_task(shape.embedding_dim, shape.num_classes, n, spec.margin, spec.seed, seed)?
        }
        _ => data::synth_separable(shape.embedding_dim, shape.num_classes, n, data::DEFAULT_MARGIN, seed)?,
    }
    .with_validation_tail(PRETRAIN_VALIDATION)?;
    let pool = source.train();
    let streams = partition_indices(pool.len(), 1, seed)?;
    let run = run_training(
        &cfg,
        shape,
        &InitMode::Random { seed },
        streams,
        &pool,
        &source.validation(),
    )?;
    Ok(run.global)
}

const PRETRAIN_VALIDATION: usize = 200;

fn load(source: &DatasetSource) -> Result<EmbeddingDataset> {
    match source {
        DatasetSource::File(path) => data::load_dataset(path),
        DatasetSource::Synthetic(spec) => spec.generate(),
    }
}

struct Point {
    label: String,
    cfg: RoundConfig,
    init: InitKind,
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let dataset = load(&cfg.dataset)?;
    let pool = dataset.train();
    let val = dataset.validation();
    if val.is_empty() {
        return Err(Error::usage("dataset has no validation samples"));
    }
    run_sweep_on(cfg, dataset.shape(), &pool, &val)
}

/// Runs the sweep on an already loaded training pool and validation set.
pub fn run_sweep_on(
    cfg: &ExperimentConfig,
    shape: HeadShape,
    pool: &[EmbeddingSample],
    val: &[EmbeddingSample],
) -> Result<SweepResult> {
    cfg.validate()?;
    let labels = cfg.sweep.value_labels();
    let points: Vec<Point> = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let mut round = cfg.base;
            let mut init = cfg.init;
            match &cfg.sweep {
                SweepAxis::Devices(v) => round.num_devices = v[i],
                SweepAxis::BatchSize(v) => round.batch_size = v[i],
                SweepAxis::LocalEpisodes(v) => round.local_episodes = v[i],
                SweepAxis::InitMode(v) => init = v[i],
            }
            Point {
                label: label.clone(),
                cfg: round,
                init,
            }
        })
        .collect();

    let needs_pretrained = points.iter().any(|p| p.init == InitKind::Pretrained);
    let pretrained = if needs_pretrained {
        Some(pretrain_head(&cfg.dataset, shape, &cfg.base, cfg.pretrain_seed)?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(points.len());
    for point in &points {
        let wrap = |e: Error| Error::Sweep {
            value: format!("{}={}", cfg.sweep.param_name(), point.label),
            source: Box::new(e),
        };
        let per_device = pool.len() / point.cfg.num_devices.max(1);
        let needed = point.cfg.epochs * point.cfg.batch_size;
        if per_device < needed {
            return Err(wrap(Error::DataExhausted {
                device: 0,
                needed,
                remaining: per_device,
            }));
        }
        let runs = (0..cfg.repetitions as u64)
            .into_par_iter()
            .map(|rep| {
                let seed = cfg.base_seed + rep;
                let init = match point.init {
                    InitKind::Random => InitMode::Random { seed },
                    InitKind::Zeros => InitMode::Zeros,
                    InitKind::Pretrained => InitMode::Pretrained(pretrained.clone().expect("pretrained head")),
                };
                let streams = partition_indices(pool.len(), point.cfg.num_devices, seed)?;
                run_training(&point.cfg, shape, &init, streams, pool, val)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        out.push(SweepPoint {
            value: point.label.clone(),
            epochs: aggregate(&runs),
        });
    }
    Ok(SweepResult {
        param: cfg.sweep.param_name().to_string(),
        points: out,
    })
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        return format!("{x:.5e}");
    }
    let s = format!("{:.*}", (5 - exp).max(0) as usize, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn to_csv(result: &SweepResult) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for point in &result.points {
        for e in &point.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                result.param,
                point.value,
                e.epoch,
                e.examples_seen,
                format_sig6(e.val_acc_mean),
                format_sig6(e.val_acc_std),
                format_sig6(e.train_acc_mean),
                format_sig6(e.train_acc_std),
            ));
        }
    }
    out
}

pub fn emit_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_csv(result))?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<SweepResult> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::parse("line 1", "missing or unexpected CSV header"));
    }
    let mut param: Option<String> = None;
    let mut points: Vec<SweepPoint> = Vec::new();
    for (i, line) in lines.enumerate() {
        let at = format!("line {}", i + 2);
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::parse(at, format!("expected 8 columns, got {}", cols.len())));
        }
        let f = |c: &str| {
            c.parse::<f64>()
                .map_err(|_| Error::parse(at.clone(), format!("bad number '{c}'")))
        };
        let u = |c: &str| {
            c.parse::<usize>()
                .map_err(|_| Error::parse(at.clone(), format!("bad integer '{c}'")))
        };
        match &param {
            None => param = Some(cols[0].to_string()),
            Some(p) if p != cols[0] => return Err(Error::parse(at, "mixed sweep parameters")),
            _ => {}
        }
        let stats = EpochStats {
            epoch: u(cols[2])?,
            examples_seen: u(cols[3])?,
            val_acc_mean: f(cols[4])?,
            val_acc_std: f(cols[5])?,
            train_acc_mean: f(cols[6])?,
            train_acc_std: f(cols[7])?,
        };
        match points.last_mut() {
            Some(p) if p.value == cols[1] => p.epochs.push(stats),
            _ => points.push(SweepPoint {
                value: cols[1].to_string(),
                epochs: vec![stats],
            }),
        }
    }
    Ok(SweepResult {
        param: param.unwrap_or_default(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            base: RoundConfig {
                num_devices: 2,
                batch_size: 4,
                local_episodes: 2,
                learning_rate: 0.05,
                epochs: 5,
            },
            repetitions: 3,
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                embedding_dim: 8,
                train: 200,
                validation: 50,
                ..SyntheticSpec::default()
            }),
            sweep: SweepAxis::Devices(vec![1, 2]),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn preset_parameters() {
        let p = default_presets();
        assert_eq!(
            p.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(),
            ["fig1", "fig2", "fig3", "fig4"]
        );
        let fig1 = &p[0];
        assert_eq!(
            (
                fig1.repetitions,
                fig1.base.local_episodes,
                fig1.base.batch_size,
                fig1.base.num_devices
            ),
            (10, 5, 20, 2)
        );
        assert_eq!(
            fig1.sweep,
            SweepAxis::InitMode(vec![InitKind::Random, InitKind::Pretrained])
        );
        assert_eq!(p[1].sweep, SweepAxis::Devices(vec![1, 2, 4, 8]));
        let fig3 = &p[2];
        assert_eq!((fig3.base.local_episodes, fig3.base.num_devices), (5, 2));
        assert!(matches!(fig3.sweep, SweepAxis::BatchSize(_)));
        let fig4 = &p[3];
        assert_eq!(
            (fig4.repetitions, fig4.base.batch_size, fig4.base.num_devices),
            (20, 20, 2)
        );
        assert_eq!(fig4.sweep, SweepAxis::LocalEpisodes(vec![1, 3, 5, 6]));
    }

    #[test]
    fn single_repetition_has_zero_std() {
        let cfg = ExperimentConfig {
            repetitions: 1,
            ..tiny_config()
        };
        let res = run_sweep(&cfg).unwrap();
        for p in &res.points {
            assert!(p.epochs.iter().all(|e| e.val_acc_std == 0.0 && e.train_acc_std == 0.0));
        }
    }

    #[test]
    fn examples_seen_accounting() {
        let res = run_sweep(&tiny_config()).unwrap();
        for (p, n) in res.points.iter().zip([1, 2]) {
            for e in &p.epochs {
                assert_eq!(e.examples_seen, n * 4 * e.epoch);
                assert!(e.val_acc_std >= 0.0 && (0.0..=1.0).contains(&e.val_acc_mean));
            }
        }
    }

    #[test]
    fn exhaustion_names_the_sweep_value() {
        let mut cfg = tiny_config();
        cfg.sweep = SweepAxis::BatchSize(vec![4, 40]);
        match run_sweep(&cfg) {
            Err(Error::Sweep { value, .. }) => assert_eq!(value, "batch_size=40"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_rows_and_round_trip() {
        let res = run_sweep(&tiny_config()).unwrap();
        let text = to_csv(&res);
        assert_eq!(text.lines().count(), 1 + 2 * 5);
        assert_eq!(text, to_csv(&run_sweep(&tiny_config()).unwrap()));
        let back = parse_csv(&text).unwrap();
        assert_eq!(back.param, "devices");
        for (a, b) in res.points.iter().zip(&back.points) {
            assert_eq!(a.value, b.value);
            for (x, y) in a.epochs.iter().zip(&b.epochs) {
                assert_eq!((x.epoch, x.examples_seen), (y.epoch, y.examples_seen));
                for (u, v) in [
                    (x.val_acc_mean, y.val_acc_mean),
                    (x.val_acc_std, y.val_acc_std),
                    (x.train_acc_mean, y.train_acc_mean),
                    (x.train_acc_std, y.train_acc_std),
                ] {
                    assert!((u - v).abs() <= 5e-6 * u.abs().max(1e-300), "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.5), "0.5");
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(0.00123456789), "0.00123457");
        assert_eq!(format_sig6(0.9999999), "1");
        assert_eq!(format_sig6(12345.678), "12345.7");
        assert_eq!(format_sig6(1.5e-9), "1.50000e-9");
    }

    #[test]
    fn kv_config_round_trip_and_overrides() {
        let cfg = preset("fig3").unwrap();
        let text = cfg.to_kv_string();
        assert_eq!(ExperimentConfig::from_kv_str(&text).unwrap(), cfg);

        let custom = ExperimentConfig::from_kv_str(
            "# comment\npreset = fig2\nrepetitions = 3\nsweep_values = 1,2\nsynth_dim = 16\n",
        )
        .unwrap();
        assert_eq!(custom.repetitions, 3);
        assert_eq!(custom.sweep, SweepAxis::Devices(vec![1, 2]));
        let switched = ExperimentConfig::from_kv_str("sweep = init_mode\nsweep_values = random,zeros").unwrap();
        assert_eq!(
            switched.sweep,
            SweepAxis::InitMode(vec![InitKind::Random, InitKind::Zeros])
        );

        assert!(matches!(
            ExperimentConfig::from_kv_str("bogus = 1"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_kv_str("epochs"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_kv_str("epochs = x"),
            Err(Error::Parse { .. })
        ));
    }
}
