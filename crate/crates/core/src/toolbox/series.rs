//! Metric time series and the abnormality detector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("series `{0}` timestamps must be strictly increasing")]
pub struct SeriesOrderError(pub String);

/// Points of one metric, ordered by epoch second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub unit: String,
    points: Vec<(i64, f64)>,
}

impl MetricSeries {
    pub fn new(
        name: impl Into<String>,
        unit: impl Into<String>,
        points: Vec<(i64, f64)>,
    ) -> Result<Self, SeriesOrderError> {
        let name = name.into();
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(SeriesOrderError(name));
        }
        Ok(Self {
            name,
            unit: unit.into(),
            points,
        })
    }

    pub fn points(&self) -> &[(i64, f64)] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points with `start <= t <= end`.
    pub fn window(&self, start: i64, end: i64) -> &[(i64, f64)] {
        let lo = self.points.partition_point(|(t, _)| *t < start);
        let hi = self.points.partition_point(|(t, _)| *t <= end);
        &self.points[lo..hi.max(lo)]
    }

    pub fn mean(&self, start: i64, end: i64) -> Option<f64> {
        let w = self.window(start, end);
        (!w.is_empty()).then(|| w.iter().map(|(_, v)| v).sum::<f64>() / w.len() as f64)
    }

    pub fn max(&self, start: i64, end: i64) -> Option<f64> {
        self.window(start, end)
            .iter()
            .map(|(_, v)| *v)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Threshold,
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPoint {
    pub timestamp: i64,
    pub value: f64,
    pub trigger: Trigger,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Number of points before the window used for the mean and deviation.
    pub trailing_points: usize,
    pub sigma: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            trailing_points: 60,
            sigma: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub metric: String,
    pub abnormal: bool,
    pub peak: f64,
    pub threshold: f64,
    pub trailing_mean: f64,
    pub trailing_std: f64,
    pub evidence: Vec<TriggerPoint>,
}

impl Verdict {
    /// Peak relative to the static threshold; used to order findings.
    pub fn severity(&self) -> f64 {
        if self.threshold > 0.0 {
            self.peak / self.threshold
        } else {
            self.peak
        }
    }
}

/// Flags a window as abnormal when any point is above `threshold` or more
/// than `sigma` standard deviations away from the mean of the trailing points.
/// Returns `None` for an empty window.
pub fn detect(
    series: &MetricSeries,
    start: i64,
    end: i64,
    threshold: f64,
    config: DetectorConfig,
) -> Option<Verdict> {
    let window = series.window(start, end);
    if window.is_empty() {
        return None;
    }
    let before = series.window(i64::MIN, start - 1);
    let trailing = &before[before.len().saturating_sub(config.trailing_points)..];
    let (mean, std) = mean_std(trailing.iter().map(|(_, v)| *v));
    let mut evidence = Vec::new();
    for &(timestamp, value) in window {
        let trigger = if value > threshold {
            Some(Trigger::Threshold)
        } else if !trailing.is_empty() && (value - mean).abs() > config.sigma * std {
            Some(Trigger::Sigma)
        } else {
            None
        };
        if let Some(trigger) = trigger {
            evidence.push(TriggerPoint {
                timestamp,
                value,
                trigger,
            });
        }
    }
    let peak = window.iter().map(|(_, v)| *v).fold(f64::MIN, f64::max);
    Some(Verdict {
        metric: series.name.clone(),
        abnormal: !evidence.is_empty(),
        peak,
        threshold,
        trailing_mean: mean,
        trailing_std: std,
        evidence,
    })
}

/// Population mean and standard deviation; `(0, 0)` when empty.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}
