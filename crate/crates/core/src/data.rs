//! Tabular ingestion: schema-driven encoding, whitening, label binarization,
//! covariate-shift noise, stratified batching and a synthetic biased
//! generator.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema: {0}")]
    Schema(String),
    #[error("csv header lacks schema column {0:?}")]
    MissingColumn(String),
    #[error("column {column:?} row {row}: cannot parse {value:?} as a number")]
    Parse { column: String, row: usize, value: String },
    #[error("column {column:?}: value {value:?} is in neither label list")]
    UnknownLabel { column: String, value: String },
    #[error("cannot binarize {0}: all values are equal")]
    Degenerate(String),
    #[error("fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("no usable rows ({rejected} rejected for missing values)")]
    NoRows { rejected: usize },
    #[error("shift standard deviation must be positive, got {0}")]
    InvalidShift(f64),
    #[error("batch size must be at least 4, got {0}")]
    BatchSize(usize),
    #[error("invalid generator parameters: {0}")]
    Generator(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Continuous,
    Categorical,
    Target,
    Sensitive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

/// How a target or sensitive column becomes {0, 1}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinarizeRule {
    Labels {
        zero: Vec<String>,
        one: Vec<String>,
    },
    /// The largest `fraction` of values get label 0.
    TopFraction {
        fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
    pub target_rule: BinarizeRule,
    pub sensitive_rule: BinarizeRule,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<(), DataError> {
        let count = |role| self.columns.iter().filter(|c| c.role == role).count();
        if count(Role::Target) != 1 || count(Role::Sensitive) != 1 {
            return Err(DataError::Schema(
                "exactly one target and one sensitive column are required".into(),
            ));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate column {:?}", c.name)));
            }
            if c.categories.is_some() && c.role != Role::Categorical {
                return Err(DataError::Schema(format!(
                    "column {:?} lists categories but is not categorical",
                    c.name
                )));
            }
        }
        for rule in [&self.target_rule, &self.sensitive_rule] {
            if let BinarizeRule::TopFraction { fraction } = rule {
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    return Err(DataError::InvalidFraction(*fraction));
                }
            }
        }
        Ok(())
    }

    fn column(&self, role: Role) -> &ColumnSpec {
        self.columns.iter().find(|c| c.role == role).expect("validated schema")
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let schema: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// CSV contents as strings, header first.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read_csv(path: &Path) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { headers, rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(&self.headers)?;
        for row in &self.rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    fn column_indices(&self, schema: &FeatureSchema) -> Result<Vec<usize>, DataError> {
        schema
            .columns
            .iter()
            .map(|c| {
                self.headers
                    .iter()
                    .position(|h| *h == c.name)
                    .ok_or_else(|| DataError::MissingColumn(c.name.clone()))
            })
            .collect()
    }
}

fn is_missing(v: &str) -> bool {
    matches!(v.trim(), "" | "?" | "NA" | "NaN" | "nan")
}

fn parse(column: &str, row: usize, value: &str) -> Result<f64, DataError> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::Parse {
            column: column.to_string(),
            row,
            value: value.to_string(),
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteningStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl WhiteningStats {
    /// Population statistics per column. Constant columns keep unit scale.
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut Tensor) {
        let d = self.mean.len();
        for row in x.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    /// Hex SHA-256 over the exact bit patterns of every statistic.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Binarized {
    pub labels: Vec<u8>,
    /// Smallest value that received label 0.
    pub threshold: f64,
}

/// Labels the ⌈fraction·n⌉ largest values 0 and the rest 1. Among equal
/// values the earlier index is labelled 0 first.
pub fn binarize_top_fraction(values: &[f64], fraction: f64) -> Result<Binarized, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let first = *values.first().ok_or(DataError::NoRows { rejected: 0 })?;
    if values.iter().all(|&v| v == first) {
        return Err(DataError::Degenerate("constant column".into()));
    }
    let n = values.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let mut labels = vec![1u8; n];
    for &i in &order[..k] {
        labels[i] = 0;
    }
    Ok(Binarized {
        labels,
        threshold: values[order[k - 1]],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum FittedRule {
    Labels { zero: Vec<String>, one: Vec<String> },
    Threshold { fraction: f64, threshold: f64 },
}

impl FittedRule {
    fn fit(rule: &BinarizeRule, column: &str, values: &[&str]) -> Result<(Self, Vec<u8>), DataError> {
        match rule {
            BinarizeRule::Labels { zero, one } => {
                let fitted = FittedRule::Labels {
                    zero: zero.clone(),
                    one: one.clone(),
                };
                let labels = values
                    .iter()
                    .map(|v| fitted.apply(column, v))
                    .collect::<Result<_, _>>()?;
                Ok((fitted, labels))
            }
            BinarizeRule::TopFraction { fraction } => {
                let nums = values
                    .iter()
                    .enumerate()
                    .map(|(r, v)| parse(column, r, v))
                    .collect::<Result<Vec<_>, _>>()?;
                let b = binarize_top_fraction(&nums, *fraction).map_err(|e| match e {
                    DataError::Degenerate(_) => DataError::Degenerate(column.to_string()),
                    other => other,
                })?;
                Ok((
                    FittedRule::Threshold {
                        fraction: *fraction,
                        threshold: b.threshold,
                    },
                    b.labels,
                ))
            }
        }
    }

    fn apply(&self, column: &str, value: &str) -> Result<u8, DataError> {
        match self {
            FittedRule::Labels { zero, one } => {
                if zero.iter().any(|z| z == value) {
                    Ok(0)
                } else if one.iter().any(|o| o == value) {
                    Ok(1)
                } else {
                    Err(DataError::UnknownLabel {
                        column: column.to_string(),
                        value: value.to_string(),
                    })
                }
            }
            FittedRule::Threshold { threshold, .. } => Ok(if parse(column, 0, value)? >= *threshold { 0 } else { 1 }),
        }
    }
}

/// Binary-labelled, whitened design matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub x: Tensor,
    pub y: Vec<u8>,
    pub a: Vec<u8>,
    pub feature_names: Vec<String>,
    pub stats: Arc<WhiteningStats>,
    /// Rows dropped for missing values.
    pub rejected: usize,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn stats_fingerprint(&self) -> String {
        self.stats.fingerprint()
    }

    /// Features of the given rows, in order.
    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Tensor::from_parts(vec![idx.len(), d], data)
    }

    pub fn group_counts(&self) -> [usize; 2] {
        let ones = self.a.iter().filter(|&&a| a == 1).count();
        [self.len() - ones, ones]
    }

    /// Copy with additive feature noise; labels untouched.
    pub fn shifted(&self, spec: &ShiftSpec) -> Result<Self, DataError> {
        Ok(Self {
            x: apply_shift(&self.x, spec)?,
            ..self.clone()
        })
    }
}

/// Encoder fitted on a training table and reused for every other split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub schema: FeatureSchema,
    categories: Vec<Vec<String>>,
    stats: Arc<WhiteningStats>,
    target: FittedRule,
    sensitive: FittedRule,
    feature_names: Vec<String>,
}

struct Filtered<'a> {
    rows: Vec<Vec<&'a str>>,
    rejected: usize,
}

fn filter_rows<'a>(table: &'a RawTable, schema: &FeatureSchema) -> Result<Filtered<'a>, DataError> {
    let idx = table.column_indices(schema)?;
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut rejected = 0;
    for row in &table.rows {
        let picked: Vec<&str> = idx.iter().map(|&i| row.get(i).map_or("", String::as_str)).collect();
        if picked.iter().any(|v| is_missing(v)) {
            rejected += 1;
        } else {
            rows.push(picked);
        }
    }
    if rejected > 0 {
        log::info!("rejected {rejected} rows with missing values");
    }
    if rows.is_empty() {
        return Err(DataError::NoRows { rejected });
    }
    Ok(Filtered { rows, rejected })
}

impl Preprocessor {
    /// Fits categories, whitening statistics and label thresholds on the
    /// training table and returns the encoded training split.
    pub fn fit(schema: &FeatureSchema, table: &RawTable) -> Result<(Self, EncodedDataset), DataError> {
        schema.validate()?;
        let filtered = filter_rows(table, schema)?;
        let mut categories = Vec::new();
        let mut feature_names = Vec::new();
        for (c, col) in schema.columns.iter().enumerate() {
            match col.role {
                Role::Continuous => feature_names.push(col.name.clone()),
                Role::Categorical => {
                    let levels = match &col.categories {
                        Some(levels) => levels.clone(),
                        None => {
                            let mut seen = HashSet::new();
                            filtered
                                .rows
                                .iter()
                                .map(|r| r[c])
                                .filter(|v| seen.insert(*v))
                                .map(str::to_string)
                                .collect()
                        }
                    };
                    feature_names.extend(levels.iter().map(|l| format!("{}={}", col.name, l)));
                    categories.push(levels);
                }
                Role::Target | Role::Sensitive => {}
            }
        }
        let column_values = |role: Role| {
            let pos = schema.columns.iter().position(|c| c.role == role).expect("validated");
            filtered.rows.iter().map(|r| r[pos]).collect::<Vec<_>>()
        };
        let (target, y) = FittedRule::fit(
            &schema.target_rule,
            &schema.column(Role::Target).name,
            &column_values(Role::Target),
        )?;
        let (sensitive, a) = FittedRule::fit(
            &schema.sensitive_rule,
            &schema.column(Role::Sensitive).name,
            &column_values(Role::Sensitive),
        )?;
        let mut pre = Self {
            schema: schema.clone(),
            categories,
            stats: Arc::new(WhiteningStats {
                mean: Vec::new(),
                std: Vec::new(),
            }),
            target,
            sensitive,
            feature_names,
        };
        let mut x = pre.raw_features(&filtered.rows)?;
        pre.stats = Arc::new(WhiteningStats::fit(&x));
        pre.stats.apply(&mut x);
        let data = EncodedDataset {
            x,
            y,
            a,
            feature_names: pre.feature_names.clone(),
            stats: pre.stats.clone(),
            rejected: filtered.rejected,
        };
        Ok((pre, data))
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn stats(&self) -> &WhiteningStats {
        &self.stats
    }

    /// Encodes an evaluation table with the training statistics.
    pub fn encode(&self, table: &RawTable) -> Result<EncodedDataset, DataError> {
        let filtered = filter_rows(table, &self.schema)?;
        let mut x = self.raw_features(&filtered.rows)?;
        self.stats.apply(&mut x);
        let mut y = Vec::with_capacity(filtered.rows.len());
        let mut a = Vec::with_capacity(filtered.rows.len());
        let t = self
            .schema
            .columns
            .iter()
            .position(|c| c.role == Role::Target)
            .expect("validated");
        let s = self
            .schema
            .columns
            .iter()
            .position(|c| c.role == Role::Sensitive)
            .expect("validated");
        for row in &filtered.rows {
            y.push(self.target.apply(&self.schema.columns[t].name, row[t])?);
            a.push(self.sensitive.apply(&self.schema.columns[s].name, row[s])?);
        }
        Ok(EncodedDataset {
            x,
            y,
            a,
            feature_names: self.feature_names.clone(),
            stats: self.stats.clone(),
            rejected: filtered.rejected,
        })
    }

    fn raw_features(&self, rows: &[Vec<&str>]) -> Result<Tensor, DataError> {
        let d = self.dim();
        let lookups: Vec<HashMap<&str, usize>> = self
            .categories
            .iter()
            .map(|levels| levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect())
            .collect();
        let mut warned = HashSet::new();
        let mut data = Vec::with_capacity(rows.len() * d);
        for (r, row) in rows.iter().enumerate() {
            let mut cat = 0;
            for (c, col) in self.schema.columns.iter().enumerate() {
                match col.role {
                    Role::Continuous => data.push(parse(&col.name, r, row[c])?),
                    Role::Categorical => {
                        let width = self.categories[cat].len();
                        let start = data.len();
                        data.resize(start + width, 0.0);
                        match lookups[cat].get(row[c]) {
                            Some(&i) => data[start + i] = 1.0,
                            None => {
                                if warned.insert((c, row[c])) {
                                    log::warn!(
                                        "unseen category {:?} in column {:?}; encoded as all zeros",
                                        row[c],
                                        col.name
                                    );
                                }
                            }
                        }
                        cat += 1;
                    }
                    Role::Target | Role::Sensitive => {}
                }
            }
        }
        Ok(Tensor::from_parts(vec![rows.len(), d], data))
    }
}

/// Reads the training CSV, fits the encoder on it and returns both.
pub fn load_and_encode(csv: &Path, schema: &FeatureSchema) -> Result<(Preprocessor, EncodedDataset), DataError> {
    Preprocessor::fit(schema, &RawTable::read_csv(csv)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Gaussian,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    #[serde(default = "default_shift_std")]
    pub std: f64,
    pub seed: u64,
}

fn default_shift_std() -> f64 {
    0.03
}

impl ShiftSpec {
    pub fn gaussian(seed: u64) -> Self {
        Self {
            kind: ShiftKind::Gaussian,
            std: default_shift_std(),
            seed,
        }
    }

    pub fn uniform(seed: u64) -> Self {
        Self {
            kind: ShiftKind::Uniform,
            std: default_shift_std(),
            seed,
        }
    }

    /// Half-width of the uniform noise with the configured standard deviation.
    pub fn uniform_bound(&self) -> f64 {
        self.std * 3f64.sqrt()
    }
}

/// Adds i.i.d. zero-mean noise with standard deviation `spec.std`.
pub fn apply_shift(x: &Tensor, spec: &ShiftSpec) -> Result<Tensor, DataError> {
    if !(spec.std > 0.0 && spec.std.is_finite()) {
        return Err(DataError::InvalidShift(spec.std));
    }
    let mut rng = seed::rng(spec.seed, "shift");
    let mut out = x.clone();
    match spec.kind {
        ShiftKind::Gaussian => {
            let noise = Normal::new(0.0, spec.std).expect("positive std");
            out.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        ShiftKind::Uniform => {
            let b = spec.uniform_bound();
            let noise = Uniform::new_inclusive(-b, b).expect("valid bounds");
            out.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }
    Ok(out)
}

/// One epoch of index batches.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    /// False when a group has fewer than two samples overall, so no batch
    /// can support a two-sample comparison.
    pub cm_enabled: bool,
}

/// Shuffled batches that keep group proportions. The batch count is lowered
/// when needed so every batch holds at least two samples of each group.
pub fn stratified_batches(a: &[u8], batch_size: usize, seed: u64, epoch: usize) -> Result<BatchPlan, DataError> {
    if batch_size < 4 {
        return Err(DataError::BatchSize(batch_size));
    }
    let n = a.len();
    if n == 0 {
        return Err(DataError::NoRows { rejected: 0 });
    }
    let mut rng = seed::rng(seed::substream(seed, "batches"), &epoch.to_string());
    let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &g) in a.iter().enumerate() {
        groups[(g != 0) as usize].push(i);
    }
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let smallest = groups[0].len().min(groups[1].len());
    let cm_enabled = smallest >= 2;
    let mut count = n.div_ceil(batch_size);
    if cm_enabled {
        count = count.min(smallest / 2);
    }
    let count = count.max(1);
    let mut batches = vec![Vec::new(); count];
    for g in &groups {
        for (b, batch) in batches.iter_mut().enumerate() {
            batch.extend_from_slice(&g[b * g.len() / count..(b + 1) * g.len() / count]);
        }
    }
    for batch in &mut batches {
        batch.shuffle(&mut rng);
    }
    Ok(BatchPlan { batches, cm_enabled })
}

/// Parameters of the synthetic biased generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    /// Share of samples with A = 0.
    pub group_ratio: f64,
    /// Strength of the minority corruption in [0, 1]: scales its extra
    /// label-flip rate and the rotation of its class direction.
    pub noise_gap: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_base_flip")]
    pub base_flip: f64,
    #[serde(default = "default_max_extra_flip")]
    pub max_extra_flip: f64,
    #[serde(default = "default_group_offset")]
    pub group_offset: f64,
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.3
}
fn default_separation() -> f64 {
    1.5
}
fn default_base_flip() -> f64 {
    0.05
}
fn default_max_extra_flip() -> f64 {
    0.2
}
fn default_group_offset() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn new(n: usize, d: usize, group_ratio: f64, noise_gap: f64, seed: u64) -> Self {
        Self {
            n,
            d,
            group_ratio,
            noise_gap,
            test_fraction: default_test_fraction(),
            separation: default_separation(),
            base_flip: default_base_flip(),
            max_extra_flip: default_max_extra_flip(),
            group_offset: default_group_offset(),
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Generator(m.to_string()));
        if !(self.group_ratio > 0.0 && self.group_ratio < 1.0) {
            return bad("group ratio must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.noise_gap) {
            return bad("noise gap must lie in [0, 1]");
        }
        if self.d < 4 {
            return bad("need at least 4 features");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test fraction must lie in (0, 1)");
        }
        if self.base_flip < 0.0 || self.base_flip + self.max_extra_flip >= 0.5 {
            return bad("flip rates must stay below 0.5");
        }
        let n_test = self.n_test();
        if n_test < 8 || self.n - n_test < 8 {
            return bad("too few samples for a train/test split");
        }
        Ok(())
    }

    fn n_test(&self) -> usize {
        (self.n as f64 * self.test_fraction).round() as usize
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut columns: Vec<ColumnSpec> = (0..self.d)
            .map(|j| ColumnSpec {
                name: format!("x{j}"),
                role: Role::Continuous,
                categories: None,
            })
            .collect();
        columns.push(ColumnSpec {
            name: "y".into(),
            role: Role::Target,
            categories: None,
        });
        columns.push(ColumnSpec {
            name: "a".into(),
            role: Role::Sensitive,
            categories: None,
        });
        let labels = || BinarizeRule::Labels {
            zero: vec!["0".into()],
            one: vec!["1".into()],
        };
        FeatureSchema {
            columns,
            target_rule: labels(),
            sensitive_rule: labels(),
        }
    }
}

/// Synthetic splits encoded through the regular CSV path.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub schema: FeatureSchema,
    pub raw_train: RawTable,
    pub raw_test: RawTable,
    pub preprocessor: Preprocessor,
    pub train: EncodedDataset,
    pub test: EncodedDataset,
    pub shifted_test: EncodedDataset,
}

impl SynthData {
    /// Writes `train.csv`, `test.csv`, `schema.json` and `generator.json`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        self.raw_train.write_csv(&dir.join("train.csv"))?;
        self.raw_test.write_csv(&dir.join("test.csv"))?;
        self.schema.save(&dir.join("schema.json"))?;
        std::fs::write(dir.join("generator.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }
}

/// Two Gaussian class clusters in `d` dimensions. Features of the minority
/// group (A = 1) are shifted along a group axis and have their class
/// direction rotated by `noise_gap · π/2`; its labels flip with rate
/// `base_flip + noise_gap · max_extra_flip` instead of `base_flip`. Flips
/// only touch the training split; test labels follow the clean rule.
pub fn synth_biased(spec: &SynthSpec) -> Result<SynthData, DataError> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, "synth");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.d;
    let half = d / 4;
    let angle = spec.noise_gap * std::f64::consts::FRAC_PI_2;
    let (sin, cos) = angle.sin_cos();
    let class_dir = 1.0 / (half as f64).sqrt();
    let mut headers: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    headers.push("y".into());
    headers.push("a".into());
    let n_train = spec.n - spec.n_test();
    let mut rows = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let a = u8::from(rng.random::<f64>() >= spec.group_ratio);
        let y = u8::from(rng.random::<f64>() < 0.5);
        let sign = if y == 1 { 1.0 } else { -1.0 };
        let mut x: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        // Class signal lives on the first block; the minority rotates it
        // into the second block.
        for j in 0..half {
            let m = sign * spec.separation * class_dir;
            if a == 1 {
                x[j] += cos * m;
                x[half + j] += sin * m;
            } else {
                x[j] += m;
            }
        }
        if a == 1 {
            x[d - 1] += spec.group_offset;
        }
        let flip = spec.base_flip
            + if a == 1 {
                spec.noise_gap * spec.max_extra_flip
            } else {
                0.0
            };
        let flipped = rng.random::<f64>() < flip;
        let observed = if flipped && i < n_train { 1 - y } else { y };
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.push(observed.to_string());
        row.push(a.to_string());
        rows.push(row);
    }
    let raw_test = RawTable {
        headers: headers.clone(),
        rows: rows.split_off(n_train),
    };
    let raw_train = RawTable { headers, rows };
    let schema = spec.schema();
    let (preprocessor, train) = Preprocessor::fit(&schema, &raw_train)?;
    let test = preprocessor.encode(&raw_test)?;
    let shifted_test = test.shifted(&ShiftSpec::gaussian(seed::substream(spec.seed, "shift:gaussian")))?;
    Ok(SynthData {
        spec: spec.clone(),
        schema,
        raw_train,
        raw_test,
        preprocessor,
        train,
        test,
        shifted_test,
    })
}
