use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Scored quantity, in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Temperature,
    WindSpeed,
    WindAngle,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Temperature, Metric::WindSpeed, Metric::WindAngle];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Temperature => "temperature",
            Metric::WindSpeed => "wind_speed",
            Metric::WindAngle => "wind_angle",
        }
    }

    /// Histogram bin width and upper edge.
    pub fn histogram_spec(self) -> (f64, f64) {
        match self {
            Metric::Temperature => (0.5, 15.0),
            Metric::WindSpeed => (0.25, 10.0),
            Metric::WindAngle => (5.0, 180.0),
        }
    }

    pub fn histogram_edges(self) -> Vec<f64> {
        let (step, top) = self.histogram_spec();
        let n = (top / step).round() as usize;
        (0..=n).map(|i| i as f64 * step).collect()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown metric `{s}`")))
    }
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

pub fn mean_abs_err(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "metric needs equal non-zero lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Smallest absolute difference between two bearings, in `[0, 180]`.
pub fn angular_error(pred_deg: f64, true_deg: f64) -> f64 {
    let d = (pred_deg - true_deg).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Sufficient statistics of a set of errors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorStats {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub count: u64,
}

impl ErrorStats {
    pub fn push(&mut self, err: f64) {
        self.sum_sq += err * err;
        self.sum_abs += err.abs();
        self.count += 1;
    }

    pub fn merge(&mut self, other: &ErrorStats) {
        self.sum_sq += other.sum_sq;
        self.sum_abs += other.sum_abs;
        self.count += other.count;
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sum_sq / self.count as f64).sqrt())
    }

    pub fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_abs / self.count as f64)
    }
}

/// `100 · (base − model) / base`, undefined when `base` is 0.
pub fn percent_improvement(rmse_model: f64, rmse_base: f64) -> Option<f64> {
    (rmse_base > 0.0).then(|| 100.0 * (1.0 - rmse_model / rmse_base))
}

/// Probability density of `values` over the bins delimited by `edges`.
/// Values below the first edge count in the first bin and values at or
/// beyond the last edge in the last bin.
pub fn error_histogram(values: &[f64], edges: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Contract("histogram needs at least one value".into()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Contract("histogram edges must be strictly increasing".into()));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = edges[1..].partition_point(|&e| e <= v).min(bins - 1);
        counts[i] += 1;
    }
    let n = values.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (edges[i], edges[i + 1], c as f64 / (n * (edges[i + 1] - edges[i]))))
        .collect())
}
