//! Response samples, their empirical CDF and nearest-rank percentiles.

use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEFAULT_PERCENTILES: [f64; 6] = [50.0, 70.0, 90.0, 95.0, 99.0, 100.0];

/// Response time for one trace event; `None` means the event was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseSample {
    pub event_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_ms: Option<f64>,
}

impl ResponseSample {
    pub fn measured(event_index: usize, response_ms: f64) -> Self {
        ResponseSample { event_index, response_ms: Some(response_ms) }
    }

    pub fn skipped(event_index: usize) -> Self {
        ResponseSample { event_index, response_ms: None }
    }

    pub fn is_skipped(&self) -> bool {
        self.response_ms.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub t_ms: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentile {
    pub p: f64,
    pub t_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub skipped_count: usize,
    /// The connection dropped before the trace finished.
    #[serde(default)]
    pub connection_lost: bool,
    pub percentiles: Vec<Percentile>,
    pub cdf: Vec<CdfPoint>,
    pub samples: Vec<ResponseSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("no non-skipped samples")]
    NoSamples,
    #[error("percentile {0} is outside 0..=100")]
    BadPercentile(String),
    #[error("report file: {0}")]
    Format(String),
    #[error("report file: {0}")]
    Io(String),
}

/// Index (1-based) of the nearest-rank percentile: the smallest k with
/// k/n ≥ p/100, at least 1.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    // Absorbs representation error in decimal percentiles such as 99.9.
    let target = p * n as f64 * (1.0 - 1e-12);
    let mut k = ((target / 100.0).ceil() as usize).clamp(1, n);
    while k > 1 && ((k - 1) as f64) * 100.0 >= target {
        k -= 1;
    }
    while k < n && (k as f64) * 100.0 < target {
        k += 1;
    }
    k
}

/// [`compute_cdf_with`] at the default percentiles.
pub fn compute_cdf(samples: Vec<ResponseSample>) -> Result<LatencyReport, ReportError> {
    compute_cdf_with(samples, &DEFAULT_PERCENTILES)
}

/// Sorts the non-skipped response times t(1..n) and emits one CDF point
/// (t(i), i/n) per sample. Skipped samples only count toward `skipped_count`.
pub fn compute_cdf_with(samples: Vec<ResponseSample>, percentiles: &[f64]) -> Result<LatencyReport, ReportError> {
    if let Some(p) = percentiles.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(ReportError::BadPercentile(p.to_string()));
    }
    let mut times: Vec<f64> = samples.iter().filter_map(|s| s.response_ms).collect();
    if times.is_empty() {
        return Err(ReportError::NoSamples);
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let cdf = times.iter().enumerate().map(|(i, &t)| CdfPoint { t_ms: t, fraction: (i + 1) as f64 / n as f64 }).collect();
    let percentiles = percentiles.iter().map(|&p| Percentile { p, t_ms: times[nearest_rank(p, n) - 1] }).collect();
    Ok(LatencyReport {
        label: None,
        skipped_count: samples.len() - n,
        connection_lost: false,
        percentiles,
        cdf,
        samples,
    })
}

impl LatencyReport {
    /// A report for a run where every event was skipped: no CDF, no percentiles.
    pub fn all_skipped(samples: Vec<ResponseSample>) -> LatencyReport {
        LatencyReport {
            label: None,
            skipped_count: samples.iter().filter(|s| s.is_skipped()).count(),
            connection_lost: false,
            percentiles: Vec::new(),
            cdf: Vec::new(),
            samples,
        }
    }

    /// Builds a report from whatever samples there are, falling back to
    /// [`LatencyReport::all_skipped`] when none were measured.
    pub fn from_samples(samples: Vec<ResponseSample>, percentiles: &[f64]) -> Result<LatencyReport, ReportError> {
        match compute_cdf_with(samples.clone(), percentiles) {
            Err(ReportError::NoSamples) => Ok(LatencyReport::all_skipped(samples)),
            other => other,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Fraction of measured samples at or below `t_ms`.
    pub fn fraction_at(&self, t_ms: f64) -> f64 {
        self.cdf.iter().take_while(|pt| pt.t_ms <= t_ms).last().map_or(0.0, |pt| pt.fraction)
    }

    /// Nearest-rank percentile recomputed from the CDF; `None` without samples.
    pub fn percentile(&self, p: f64) -> Option<f64> {
        if self.cdf.is_empty() || !(0.0..=100.0).contains(&p) {
            return None;
        }
        Some(self.cdf[nearest_rank(p, self.cdf.len()) - 1].t_ms)
    }

    pub fn to_toml(&self) -> Result<String, ReportError> {
        toml::to_string(self).map_err(|e| ReportError::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<LatencyReport, ReportError> {
        toml::from_str(text).map_err(|e| ReportError::Format(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        std::fs::write(path, self.to_toml()?).map_err(|e| ReportError::Io(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<LatencyReport, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReportError::Io(e.to_string()))?;
        LatencyReport::from_toml(&text)
    }
}
