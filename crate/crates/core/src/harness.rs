//! Experiment orchestration: dataset resolution, multi-seed runs, shift
//! suites, reports and hyperparameter sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{self, CurvatureError};
use crate::data::{
    self, DataError, EncodedDataset, FeatureSchema, Preprocessor, RawTable, ShiftKind, ShiftSpec, SynthSpec,
};
use crate::nn::{FairModel, NnError};
use crate::seed;
use crate::train::{self, EpochLog, EvalMetrics, LossBreakdown, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("input file {0} does not exist")]
    MissingInput(PathBuf),
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        train: PathBuf,
        test: PathBuf,
        schema: PathBuf,
    },
    Synthetic(SynthSpec),
}

/// An evaluation set beyond the in-distribution test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalSetSpec {
    /// The test split with additive noise; its seed derives from the run
    /// seed and the set name.
    Shift {
        name: String,
        noise: ShiftKind,
        #[serde(default = "default_std")]
        std: f64,
    },
    /// Another CSV encoded with the training statistics.
    Csv { name: String, path: PathBuf },
}

fn default_std() -> f64 {
    0.03
}

impl EvalSetSpec {
    pub fn name(&self) -> &str {
        match self {
            EvalSetSpec::Shift { name, .. } | EvalSetSpec::Csv { name, .. } => name,
        }
    }

    pub fn gaussian(name: &str) -> Self {
        EvalSetSpec::Shift {
            name: name.to_string(),
            noise: ShiftKind::Gaussian,
            std: default_std(),
        }
    }

    pub fn uniform(name: &str) -> Self {
        EvalSetSpec::Shift {
            name: name.to_string(),
            noise: ShiftKind::Uniform,
            std: default_std(),
        }
    }
}

pub const IN_DISTRIBUTION: &str = "test";

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub eval: Vec<EvalSetSpec>,
    /// Runs with seeds `train.seed`, `train.seed + 1`, ...
    #[serde(default = "one")]
    pub repeats: usize,
    /// Evaluate this checkpoint instead of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub dump_curvatures: bool,
    /// Not part of the experiment identity; never serialized.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(train: TrainConfig, data: DataSource) -> Self {
        Self {
            train,
            data,
            eval: Vec::new(),
            repeats: 1,
            checkpoint: None,
            dump_curvatures: false,
            output_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Names of every evaluation set, in report order.
    pub fn eval_names(&self) -> Vec<String> {
        std::iter::once(IN_DISTRIBUTION.to_string())
            .chain(self.eval.iter().map(|e| e.name().to_string()))
            .collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64)
            .map(|r| self.train.seed.wrapping_add(r))
            .collect()
    }

    /// Hex SHA-256 of the serialized spec (output directory excluded).
    pub fn fingerprint(&self) -> Result<String, HarnessError> {
        let text = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        if self.repeats == 0 {
            return Err(HarnessError::Spec("repeats must be at least 1".into()));
        }
        let names = self.eval_names();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(HarnessError::Spec(format!("evaluation set name {n:?} used twice")));
            }
        }
        for e in &self.eval {
            if let EvalSetSpec::Shift { std, .. } = e {
                if !(*std > 0.0) {
                    return Err(DataError::InvalidShift(*std).into());
                }
            }
        }
        for path in self.input_files() {
            if !path.exists() {
                return Err(HarnessError::MissingInput(path));
            }
        }
        Ok(())
    }

    fn input_files(&self) -> Vec<PathBuf> {
        let mut files = Vec::new();
        if let DataSource::Csv { train, test, schema } = &self.data {
            files.extend([train.clone(), test.clone(), schema.clone()]);
        }
        for e in &self.eval {
            if let EvalSetSpec::Csv { path, .. } = e {
                files.push(path.clone());
            }
        }
        files.extend(self.checkpoint.clone());
        files.extend(self.train.finetune_from.clone());
        files
    }
}

/// Training split, in-distribution test split and the fitted encoder.
pub struct LoadedData {
    pub preprocessor: Preprocessor,
    pub train: EncodedDataset,
    pub test: EncodedDataset,
}

pub fn load_data(source: &DataSource) -> Result<LoadedData, HarnessError> {
    match source {
        DataSource::Csv { train, test, schema } => {
            let schema = FeatureSchema::load(schema)?;
            let (preprocessor, train) = data::load_and_encode(train, &schema)?;
            let test = preprocessor.encode(&RawTable::read_csv(test)?)?;
            Ok(LoadedData {
                preprocessor,
                train,
                test,
            })
        }
        DataSource::Synthetic(spec) => {
            let synth = data::synth_biased(spec)?;
            Ok(LoadedData {
                preprocessor: synth.preprocessor,
                train: synth.train,
                test: synth.test,
            })
        }
    }
}

/// Every evaluation set for one run seed, in report order.
pub fn build_eval_sets(
    spec: &ExperimentSpec,
    loaded: &LoadedData,
    run_seed: u64,
) -> Result<Vec<(String, EncodedDataset)>, HarnessError> {
    let mut sets = vec![(IN_DISTRIBUTION.to_string(), loaded.test.clone())];
    for e in &spec.eval {
        let set = match e {
            EvalSetSpec::Shift { name, noise, std } => loaded.test.shifted(&ShiftSpec {
                kind: *noise,
                std: *std,
                seed: seed::substream(run_seed, &format!("shift:{name}")),
            })?,
            EvalSetSpec::Csv { path, .. } => loaded.preprocessor.encode(&RawTable::read_csv(path)?)?,
        };
        sets.push((e.name().to_string(), set));
    }
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub name: String,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub sets: Vec<SetResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_losses: Option<LossBreakdown>,
}

impl RunRecord {
    pub fn set(&self, name: &str) -> Option<&EvalMetrics> {
        self.sets.iter().find(|s| s.name == name).map(|s| &s.metrics)
    }
}

/// Mean and sample standard deviation (zero for a single run).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub name: String,
    pub accuracy: Summary,
    pub delta_eo: Summary,
    pub delta_dp: Summary,
}

/// Contents of `metrics.json`. Percent-valued metrics; no timing data, so
/// identical specs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fingerprint: String,
    pub eval_sets: Vec<String>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SetSummary>,
    pub spec: ExperimentSpec,
}

impl MetricsReport {
    pub fn summary(&self, name: &str) -> Option<&SetSummary> {
        self.summary.iter().find(|s| s.name == name)
    }
}

fn summarize(names: &[String], runs: &[RunRecord]) -> Vec<SetSummary> {
    names
        .iter()
        .map(|name| {
            let pick = |f: fn(&EvalMetrics) -> f64| {
                let v: Vec<f64> = runs.iter().filter_map(|r| r.set(name)).map(f).collect();
                Summary::of(&v)
            };
            SetSummary {
                name: name.clone(),
                accuracy: pick(|m| m.accuracy),
                delta_eo: pick(|m| m.delta_eo),
                delta_dp: pick(|m| m.delta_dp),
            }
        })
        .collect()
}

fn evaluate_sets(model: &FairModel, sets: &[(String, EncodedDataset)]) -> Result<Vec<SetResult>, HarnessError> {
    sets.iter()
        .map(|(name, set)| {
            Ok(SetResult {
                name: name.clone(),
                metrics: train::evaluate(model, set)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct EpochLine<'a> {
    seed: u64,
    #[serde(flatten)]
    log: &'a EpochLog,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Trains (or loads) one model per seed, evaluates every set and, with an
/// output directory, writes `metrics.json`, `epochs.jsonl`, one checkpoint
/// per seed, `timing.json` and optionally `curvatures.csv`.
pub fn run(spec: &ExperimentSpec) -> Result<MetricsReport, HarnessError> {
    spec.validate()?;
    let started = Instant::now();
    let loaded = load_data(&spec.data)?;
    if let Some(dir) = &spec.output_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut epochs_out = match &spec.output_dir {
        Some(dir) => {
            let path = dir.join("epochs.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(io_err(&path))?))
        }
        None => None,
    };
    let mut runs = Vec::with_capacity(spec.repeats);
    let mut first_model = None;
    for run_seed in spec.seeds() {
        let sets = build_eval_sets(spec, &loaded, run_seed)?;
        let (model, final_losses) = match &spec.checkpoint {
            Some(path) => (FairModel::load(path)?, None),
            None => {
                let config = TrainConfig {
                    seed: run_seed,
                    ..spec.train.clone()
                };
                let borrowed: Vec<(String, &EncodedDataset)> = sets.iter().map(|(n, s)| (n.clone(), s)).collect();
                let outcome = train::train(&config, &loaded.train, &borrowed)?;
                if let Some(out) = epochs_out.as_mut() {
                    for log in &outcome.epochs {
                        serde_json::to_writer(&mut *out, &EpochLine { seed: run_seed, log })?;
                        out.write_all(b"\n").map_err(io_err(Path::new("epochs.jsonl")))?;
                    }
                }
                let last = outcome.epochs.last().map(|e| e.losses);
                (outcome.model, last)
            }
        };
        if let (Some(dir), None) = (&spec.output_dir, &spec.checkpoint) {
            model.save(&dir.join(format!("model-seed{run_seed}.json")))?;
        }
        runs.push(RunRecord {
            seed: run_seed,
            sets: evaluate_sets(&model, &sets)?,
            final_losses,
        });
        if first_model.is_none() {
            first_model = Some(model);
        }
    }
    if let Some(out) = epochs_out.as_mut() {
        out.flush().map_err(io_err(Path::new("epochs.jsonl")))?;
    }
    let names = spec.eval_names();
    let report = MetricsReport {
        fingerprint: spec.fingerprint()?,
        summary: summarize(&names, &runs),
        eval_sets: names,
        runs,
        spec: spec.clone(),
    };
    if let Some(dir) = &spec.output_dir {
        write_json(&dir.join("metrics.json"), &report)?;
        let elapsed = started.elapsed().as_secs_f64();
        write_json(
            &dir.join("timing.json"),
            &serde_json::json!({ "wall_clock_seconds": elapsed }),
        )?;
        if spec.dump_curvatures {
            let model = first_model.as_ref().expect("at least one run");
            let rows: Vec<usize> = (0..loaded.test.len()).collect();
            let (g0, g1) = curvature::group_curvatures(model, &loaded.test, &rows, spec.train.h)?;
            let mut all = [g0, g1].concat();
            all.sort_by_key(|s| s.id);
            curvature::write_curvatures_csv(&dir.join("curvatures.csv"), &all)?;
        }
        log::info!("run finished in {elapsed:.1}s");
    }
    Ok(report)
}

/// Evaluates a saved model on the spec's evaluation sets.
pub fn evaluate(spec: &ExperimentSpec, checkpoint: &Path) -> Result<MetricsReport, HarnessError> {
    run(&ExperimentSpec {
        checkpoint: Some(checkpoint.to_path_buf()),
        ..spec.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub h: Vec<f64>,
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &a in &self.alpha {
            for &g in &self.gamma {
                for &h in &self.h {
                    out.push((a, g, h));
                }
            }
        }
        out
    }
}

/// One sweep cell: grid point and seed, with metrics or the failure.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub gamma: f64,
    pub h: f64,
    pub seed: u64,
    pub outcome: Result<RunRecord, String>,
}

impl SweepRow {
    /// ΔEO used for the trade-off frontier: the worst shifted set, or the
    /// in-distribution value when no shift is configured.
    pub fn robust_delta_eo(&self, shift_names: &[String]) -> Option<f64> {
        let record = self.outcome.as_ref().ok()?;
        if shift_names.is_empty() {
            return record.set(IN_DISTRIBUTION).map(|m| m.delta_eo);
        }
        shift_names
            .iter()
            .filter_map(|n| record.set(n).map(|m| m.delta_eo))
            .reduce(f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub eval_sets: Vec<String>,
    pub rows: Vec<SweepRow>,
    /// Indices into `rows` of the non-dominated successful cells.
    pub pareto: Vec<usize>,
}

/// Indices of points not dominated in (higher accuracy, lower gap).
pub fn pareto_front(points: &[(usize, f64, f64)]) -> Vec<usize> {
    points
        .iter()
        .filter(|&&(_, acc, gap)| {
            !points
                .iter()
                .any(|&(_, a2, g2)| a2 >= acc && g2 <= gap && (a2 > acc || g2 < gap))
        })
        .map(|&(i, _, _)| i)
        .collect()
}

/// One run per grid point and seed; cells run in parallel and are merged in
/// grid order. Failed cells are recorded and the sweep continues.
pub fn sweep(base: &ExperimentSpec, grid: &SweepGrid) -> Result<SweepTable, HarnessError> {
    let points = grid.points();
    if points.is_empty() {
        return Err(HarnessError::Spec("sweep grid is empty".into()));
    }
    base.validate()?;
    let cells: Vec<(f64, f64, f64, u64)> = points
        .iter()
        .flat_map(|&(a, g, h)| base.seeds().into_iter().map(move |s| (a, g, h, s)))
        .collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(alpha, gamma, h, seed)| {
            let spec = ExperimentSpec {
                train: TrainConfig {
                    alpha,
                    gamma,
                    h,
                    seed,
                    ..base.train.clone()
                },
                repeats: 1,
                dump_curvatures: false,
                output_dir: base
                    .output_dir
                    .as_ref()
                    .map(|d| d.join("cells").join(format!("a{alpha}_g{gamma}_h{h}_s{seed}"))),
                ..base.clone()
            };
            let outcome = run(&spec).map(|mut r| r.runs.remove(0)).map_err(|e| {
                log::warn!("sweep cell alpha={alpha} gamma={gamma} h={h} seed={seed} failed: {e}");
                e.to_string()
            });
            SweepRow {
                alpha,
                gamma,
                h,
                seed,
                outcome,
            }
        })
        .collect();
    let eval_sets = base.eval_names();
    let shifts: Vec<String> = eval_sets[1..].to_vec();
    let candidates: Vec<(usize, f64, f64)> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let acc = r.outcome.as_ref().ok()?.set(IN_DISTRIBUTION)?.accuracy;
            Some((i, acc, r.robust_delta_eo(&shifts)?))
        })
        .collect();
    let table = SweepTable {
        pareto: pareto_front(&candidates),
        eval_sets,
        rows,
    };
    if let Some(dir) = &base.output_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_sweep_csv(&dir.join("sweep.csv"), &table, None)?;
        write_sweep_csv(&dir.join("pareto.csv"), &table, Some(&table.pareto))?;
    }
    Ok(table)
}

/// Columns: alpha, gamma, h, seed, status, accuracy, delta_eo_<set>... and
/// the failure message.
pub fn write_sweep_csv(path: &Path, table: &SweepTable, only: Option<&[usize]>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["alpha", "gamma", "h", "seed", "status", "accuracy"]
        .map(String::from)
        .to_vec();
    header.extend(table.eval_sets.iter().map(|n| {
        if n == IN_DISTRIBUTION {
            "delta_eo_in".to_string()
        } else {
            format!("delta_eo_{n}")
        }
    }));
    header.push("error".into());
    w.write_record(&header)?;
    let selected: Vec<usize> = match only {
        Some(idx) => idx.to_vec(),
        None => (0..table.rows.len()).collect(),
    };
    for i in selected {
        let r = &table.rows[i];
        let mut rec = vec![
            r.alpha.to_string(),
            r.gamma.to_string(),
            r.h.to_string(),
            r.seed.to_string(),
        ];
        match &r.outcome {
            Ok(run) => {
                rec.push("ok".into());
                rec.push(
                    run.set(IN_DISTRIBUTION)
                        .map_or(String::new(), |m| m.accuracy.to_string()),
                );
                for n in &table.eval_sets {
                    rec.push(run.set(n).map_or(String::new(), |m| m.delta_eo.to_string()));
                }
                rec.push(String::new());
            }
            Err(e) => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), table.eval_sets.len() + 1));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
