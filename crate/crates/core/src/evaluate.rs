//! Accuracy matrices and the continual-shift metrics computed from them.
//!
//! Row `t'` of a matrix holds the accuracy on every domain of the model
//! checkpointed after stage `t'`; column `t` is the evaluated domain.
//!
//! * TDA: accuracy on a domain right after training on it (DA model).
//! * TDG: mean accuracy on a domain over all stages before it (DG model).
//! * FA: mean accuracy on a domain over all stages after it (DG model).
//! * All: mean of the three metric means.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, CodagError, Result};
use crate::nnmodel::{self, ClassifierParams};

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(params: &ClassifierParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(invalid("cannot evaluate on an empty test set"));
    }
    let labels = test.labels()?;
    let predictions = nnmodel::predict(params, test.features())?;
    Ok(accuracy_of(&predictions, &labels))
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Da,
    Dg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub role: Role,
    /// `None` until the stage has been evaluated.
    pub values: Vec<Option<Vec<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(role: Role, n_domains: usize) -> Self {
        Self {
            role,
            values: vec![None; n_domains],
        }
    }

    pub fn from_rows(role: Role, rows: Vec<Option<Vec<f64>>>) -> Result<Self> {
        let n = rows.len();
        for row in rows.iter().flatten() {
            if row.len() != n {
                return Err(invalid(format!(
                    "matrix is not square: row of length {} in {n}x{n}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid("accuracy values must lie in [0, 1]"));
            }
        }
        Ok(Self { role, values: rows })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Writes row `stage`; each row may be written once.
    pub fn set_row(&mut self, stage: usize, row: Vec<f64>) -> Result<()> {
        let n = self.n();
        let slot = self
            .values
            .get_mut(stage)
            .ok_or_else(|| invalid(format!("stage {stage} out of range")))?;
        if slot.is_some() {
            return Err(CodagError::State(format!("row {stage} already written")));
        }
        if row.len() != n {
            return Err(invalid("row length must equal the number of domains"));
        }
        *slot = Some(row);
        Ok(())
    }

    pub fn row(&self, stage: usize) -> Option<&[f64]> {
        self.values.get(stage).and_then(|r| r.as_deref())
    }

    pub fn get(&self, stage: usize, domain: usize) -> Result<f64> {
        self.row(stage)
            .map(|r| r[domain])
            .ok_or_else(|| invalid(format!("row {stage} is not filled")))
    }

    pub fn filled_rows(&self) -> usize {
        self.values.iter().filter(|r| r.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub per_domain: Vec<f64>,
    /// `None` when the metric is defined for no domain.
    pub mean: Option<f64>,
}

impl MetricSeries {
    fn from_values(per_domain: Vec<f64>) -> Self {
        let mean = (!per_domain.is_empty())
            .then(|| per_domain.iter().sum::<f64>() / per_domain.len() as f64);
        Self { per_domain, mean }
    }
}

/// `TDA_t = da[t][t]` for `t >= 1`, `TDA_0 = dg[0][0]`.
pub fn tda(da: &AccuracyMatrix, dg: &AccuracyMatrix) -> Result<MetricSeries> {
    let n = dg.n();
    if da.n() != n {
        return Err(invalid("DA and DG matrices differ in size"));
    }
    let mut values = vec![dg.get(0, 0)?];
    for t in 1..n {
        values.push(da.get(t, t)?);
    }
    Ok(MetricSeries::from_values(values))
}

/// `TDG_t = (1/t) sum_{t' < t} dg[t'][t]` for `t = 1..T`.
pub fn tdg(dg: &AccuracyMatrix) -> Result<MetricSeries> {
    let n = dg.n();
    let mut values = Vec::with_capacity(n.saturating_sub(1));
    for t in 1..n {
        let mut sum = 0.0;
        for s in 0..t {
            sum += dg.get(s, t)?;
        }
        values.push(sum / t as f64);
    }
    Ok(MetricSeries::from_values(values))
}

/// `FA_t = (1/(T-t)) sum_{t' > t} dg[t'][t]` for `t = 0..T-1`.
pub fn fa(dg: &AccuracyMatrix) -> Result<MetricSeries> {
    let n = dg.n();
    let mut values = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n.saturating_sub(1) {
        let mut sum = 0.0;
        for s in t + 1..n {
            sum += dg.get(s, t)?;
        }
        values.push(sum / (n - 1 - t) as f64);
    }
    Ok(MetricSeries::from_values(values))
}

pub fn composite_all(tda_mean: f64, tdg_mean: f64, fa_mean: f64) -> f64 {
    (tda_mean + tdg_mean + fa_mean) / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tda_per_domain: Vec<f64>,
    pub tdg_per_domain: Vec<f64>,
    pub fa_per_domain: Vec<f64>,
    pub tda_mean: f64,
    pub tdg_mean: Option<f64>,
    pub fa_mean: Option<f64>,
    /// Mean of the defined metric means.
    pub all: f64,
}

impl MetricsReport {
    pub fn compute(da: &AccuracyMatrix, dg: &AccuracyMatrix) -> Result<Self> {
        let a = tda(da, dg)?;
        let g = tdg(dg)?;
        let f = fa(dg)?;
        let tda_mean = a.mean.expect("TDA_0 always exists");
        let all = match (g.mean, f.mean) {
            (Some(gm), Some(fm)) => composite_all(tda_mean, gm, fm),
            _ => tda_mean,
        };
        Ok(Self {
            tda_per_domain: a.per_domain,
            tdg_per_domain: g.per_domain,
            fa_per_domain: f.per_domain,
            tda_mean,
            tdg_mean: g.mean,
            fa_mean: f.mean,
            all,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

/// One point of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub stage: usize,
    pub epoch: usize,
    pub domain: usize,
    pub accuracy: f64,
}

/// Appends one record per domain for `(stage, epoch)`.
pub fn log_curves(log: &mut Vec<CurveRecord>, stage: usize, epoch: usize, accuracies: &[f64]) {
    log.extend(
        accuracies
            .iter()
            .enumerate()
            .map(|(domain, &accuracy)| CurveRecord {
                stage,
                epoch,
                domain,
                accuracy,
            }),
    );
}
