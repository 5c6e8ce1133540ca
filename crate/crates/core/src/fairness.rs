//! Group-fairness metrics for binary predictions and a binary sensitive
//! attribute. Values are fractions; reports convert to percentages.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FairnessError {
    #[error("length mismatch: {predictions} predictions, {labels} labels, {groups} group labels")]
    LengthMismatch {
        predictions: usize,
        labels: usize,
        groups: usize,
    },
    #[error("no samples with A={group}, Y={label}; equalized-odds gap is undefined")]
    EmptyCell { group: u8, label: u8 },
    #[error("no samples with A={0}")]
    EmptyGroup(u8),
    #[error("metric of an empty prediction set")]
    Empty,
    #[error("value {0} is not a binary label")]
    NotBinary(u8),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub total: usize,
    pub errors: usize,
}

impl Cell {
    fn error_rate(&self) -> f64 {
        self.errors as f64 / self.total as f64
    }
}

/// Totals and error counts per `(A, Y)` cell, indexed `cells[a][y]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub cells: [[Cell; 2]; 2],
}

fn binary(v: u8) -> Result<usize, FairnessError> {
    match v {
        0 | 1 => Ok(v as usize),
        _ => Err(FairnessError::NotBinary(v)),
    }
}

impl GroupConfusion {
    pub fn tally(predictions: &[u8], labels: &[u8], groups: &[u8]) -> Result<Self, FairnessError> {
        if predictions.len() != labels.len() || labels.len() != groups.len() {
            return Err(FairnessError::LengthMismatch {
                predictions: predictions.len(),
                labels: labels.len(),
                groups: groups.len(),
            });
        }
        let mut out = Self::default();
        for ((&p, &y), &a) in predictions.iter().zip(labels).zip(groups) {
            binary(p)?;
            let cell = &mut out.cells[binary(a)?][binary(y)?];
            cell.total += 1;
            if p != y {
                cell.errors += 1;
            }
        }
        Ok(out)
    }

    pub fn total(&self) -> usize {
        self.cells.iter().flatten().map(|c| c.total).sum()
    }

    /// `P(Ŷ ≠ Y | A = a, Y = y)`.
    pub fn error_rate(&self, group: u8, label: u8) -> Result<f64, FairnessError> {
        let cell = self.cells[group as usize][label as usize];
        if cell.total == 0 {
            return Err(FairnessError::EmptyCell { group, label });
        }
        Ok(cell.error_rate())
    }

    /// Σ_y |P(Ŷ≠Y | A=0, Y=y) − P(Ŷ≠Y | A=1, Y=y)|, in `[0, 2]`.
    pub fn delta_eo(&self) -> Result<f64, FairnessError> {
        let mut total = 0.0;
        for y in 0..2u8 {
            total += (self.error_rate(0, y)? - self.error_rate(1, y)?).abs();
        }
        Ok(total)
    }
}

pub fn delta_eo(predictions: &[u8], labels: &[u8], groups: &[u8]) -> Result<f64, FairnessError> {
    GroupConfusion::tally(predictions, labels, groups)?.delta_eo()
}

/// |P(Ŷ=1 | A=0) − P(Ŷ=1 | A=1)|.
pub fn delta_dp(predictions: &[u8], groups: &[u8]) -> Result<f64, FairnessError> {
    if predictions.len() != groups.len() {
        return Err(FairnessError::LengthMismatch {
            predictions: predictions.len(),
            labels: groups.len(),
            groups: groups.len(),
        });
    }
    let mut positives = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&p, &a) in predictions.iter().zip(groups) {
        let a = binary(a)?;
        totals[a] += 1;
        positives[a] += binary(p)?;
    }
    for g in 0..2 {
        if totals[g] == 0 {
            return Err(FairnessError::EmptyGroup(g as u8));
        }
    }
    let rate = |g: usize| positives[g] as f64 / totals[g] as f64;
    Ok((rate(0) - rate(1)).abs())
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64, FairnessError> {
    if predictions.is_empty() {
        return Err(FairnessError::Empty);
    }
    if predictions.len() != labels.len() {
        return Err(FairnessError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
            groups: labels.len(),
        });
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Accuracy restricted to one sensitive group.
pub fn group_accuracy(predictions: &[u8], labels: &[u8], groups: &[u8], group: u8) -> Result<f64, FairnessError> {
    let (p, y): (Vec<u8>, Vec<u8>) = predictions
        .iter()
        .zip(labels)
        .zip(groups)
        .filter(|(_, &a)| a == group)
        .map(|((&p, &y), _)| (p, y))
        .unzip();
    if p.is_empty() {
        return Err(FairnessError::EmptyGroup(group));
    }
    accuracy(&p, &y)
}

/// Accuracy, ΔEO and ΔDP of one evaluation set, as fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub accuracy: f64,
    pub delta_eo: f64,
    pub delta_dp: f64,
}

impl SetMetrics {
    pub fn compute(predictions: &[u8], labels: &[u8], groups: &[u8]) -> Result<Self, FairnessError> {
        Ok(Self {
            accuracy: accuracy(predictions, labels)?,
            delta_eo: delta_eo(predictions, labels, groups)?,
            delta_dp: delta_dp(predictions, groups)?,
        })
    }

    pub fn as_percent(&self) -> Self {
        Self {
            accuracy: 100.0 * self.accuracy,
            delta_eo: 100.0 * self.delta_eo,
            delta_dp: 100.0 * self.delta_dp,
        }
    }
}
