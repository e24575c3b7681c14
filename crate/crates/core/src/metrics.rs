//! Outcome frequencies, mean RGB, and cross-seed aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rgb_for_outcome, GeometryError, OutcomeClass, RadioGeometry, RgbEstimator};
use crate::mac_sim::{EventLog, OutcomeCounts};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("event log has no records")]
    EmptyLog,
    #[error("nothing to aggregate")]
    NoRuns,
    #[error("runs from different grid points: {0} and {1}")]
    MixedGridPoints(GridPoint, GridPoint),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Empirical outcome frequencies over one shared denominator.
///
/// The four fields sum to exactly `1.0` when added in declaration order: the
/// last non-empty class carries the rounding residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbabilities {
    pub p_dlvy: f64,
    pub p_exp: f64,
    pub p_sync: f64,
    pub p_hn: f64,
}

impl OutcomeProbabilities {
    pub fn from_counts(counts: &OutcomeCounts) -> Result<Self, MetricsError> {
        let total = counts.total();
        if total == 0 {
            return Err(MetricsError::EmptyLog);
        }
        let raw = [counts.dlvy, counts.exp, counts.sync, counts.hn];
        let last = raw.iter().rposition(|&c| c > 0).expect("total is positive");
        let mut p = [0.0; 4];
        let mut acc = 0.0;
        for k in 0..last {
            p[k] = raw[k] as f64 / total as f64;
            acc += p[k];
        }
        p[last] = 1.0 - acc;
        Ok(Self {
            p_dlvy: p[0],
            p_exp: p[1],
            p_sync: p[2],
            p_hn: p[3],
        })
    }

    pub fn get(&self, class: OutcomeClass) -> f64 {
        match class {
            OutcomeClass::Dlvy => self.p_dlvy,
            OutcomeClass::Exp => self.p_exp,
            OutcomeClass::Sync => self.p_sync,
            OutcomeClass::Hn => self.p_hn,
        }
    }

    pub fn sum(&self) -> f64 {
        self.p_dlvy + self.p_exp + self.p_sync + self.p_hn
    }
}

/// Outcome frequencies of one run.
pub fn tally(log: &EventLog) -> Result<OutcomeProbabilities, MetricsError> {
    OutcomeProbabilities::from_counts(&log.counts())
}

/// Share of transmitted BSMs that met no collision. Comparison column only;
/// it ignores expired packets and partial reception.
pub fn pdr(counts: &OutcomeCounts) -> Option<f64> {
    let sent = counts.dlvy + counts.sync + counts.hn;
    (sent > 0).then(|| counts.dlvy as f64 / sent as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanRgb {
    pub value: f64,
    pub packet_count: u64,
    pub standard_error: f64,
}

/// Sum and count of per-record RGB split by outcome.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RgbBreakdown {
    pub sum: [f64; 4],
    pub count: [u64; 4],
}

impl RgbBreakdown {
    /// Mean RGB of the records with `class`, if any.
    pub fn conditional_mean(&self, class: OutcomeClass) -> Option<f64> {
        let k = class.index();
        (self.count[k] > 0).then(|| self.sum[k] / self.count[k] as f64)
    }

    /// `sum_j p_j * E[RGB | j]`.
    pub fn decomposed_mean(&self) -> f64 {
        let total: u64 = self.count.iter().sum();
        OutcomeClass::ALL
            .iter()
            .filter_map(|&c| {
                self.conditional_mean(c)
                    .map(|m| m * self.count[c.index()] as f64 / total as f64)
            })
            .sum()
    }
}

/// Per-record RGB values of a log, in record order.
pub fn record_rgbs<R: Rng>(
    log: &EventLog,
    geometry: &RadioGeometry,
    estimator: &mut RgbEstimator<R>,
) -> Result<Vec<f64>, MetricsError> {
    log.records
        .iter()
        .map(|r| {
            rgb_for_outcome(r.outcome, r.collision.as_ref(), geometry, estimator).map_err(Into::into)
        })
        .collect()
}

/// Mean RGB over every generated BSM of the run, with the standard error of
/// the per-record values.
pub fn mean_rgb<R: Rng>(
    log: &EventLog,
    geometry: &RadioGeometry,
    estimator: &mut RgbEstimator<R>,
) -> Result<MeanRgb, MetricsError> {
    let values = record_rgbs(log, geometry, estimator)?;
    mean_of(&values)
}

pub fn mean_of(values: &[f64]) -> Result<MeanRgb, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    let value = (sum / n).clamp(0.0, 1.0);
    let standard_error = if values.len() > 1 {
        let ss: f64 = values.iter().map(|v| (v - value) * (v - value)).sum();
        (ss / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(MeanRgb {
        value,
        packet_count: values.len() as u64,
        standard_error,
    })
}

pub fn rgb_breakdown<R: Rng>(
    log: &EventLog,
    geometry: &RadioGeometry,
    estimator: &mut RgbEstimator<R>,
) -> Result<RgbBreakdown, MetricsError> {
    let values = record_rgbs(log, geometry, estimator)?;
    let mut out = RgbBreakdown::default();
    for (r, v) in log.records.iter().zip(values) {
        let k = r.outcome.index();
        out.sum[k] += v;
        out.count[k] += 1;
    }
    Ok(out)
}

/// Coordinates of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub density: u32,
    pub ibi_us: u64,
    pub cw: u32,
    pub wifi: bool,
}

impl GridPoint {
    pub fn ibi_secs(&self) -> f64 {
        self.ibi_us as f64 * 1e-6
    }

    pub fn ibi_ms(&self) -> f64 {
        self.ibi_us as f64 / 1e3
    }
}

impl std::fmt::Display for GridPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "density={} ibi_ms={} cw={} wifi={}",
            self.density,
            self.ibi_ms(),
            self.cw,
            if self.wifi { "on" } else { "off" }
        )
    }
}

/// What one run contributes to its grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub point: GridPoint,
    pub seed_index: u32,
    pub counts: OutcomeCounts,
    pub mean: MeanRgb,
}

impl RunSummary {
    pub fn probabilities(&self) -> OutcomeProbabilities {
        OutcomeProbabilities::from_counts(&self.counts).expect("summaries come from non-empty logs")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub point: GridPoint,
    /// Sorted by seed index.
    pub per_seed: Vec<RunSummary>,
    pub pooled_mean: f64,
    /// Normal-approximation 95% half-width across seeds; `None` for a single
    /// seed.
    pub ci95: Option<f64>,
    pub probabilities: OutcomeProbabilities,
    pub packets: u64,
}

impl SweepSummary {
    pub fn seeds(&self) -> usize {
        self.per_seed.len()
    }

    pub fn seed_means(&self) -> Vec<f64> {
        self.per_seed.iter().map(|r| r.mean.value).collect()
    }
}

/// Pools the runs of one grid point. Input order does not matter.
pub fn aggregate(runs: &[RunSummary]) -> Result<SweepSummary, MetricsError> {
    let first = runs.first().ok_or(MetricsError::NoRuns)?;
    if let Some(other) = runs.iter().find(|r| r.point != first.point) {
        return Err(MetricsError::MixedGridPoints(first.point, other.point));
    }
    let mut per_seed = runs.to_vec();
    per_seed.sort_by_key(|r| r.seed_index);

    let packets: u64 = per_seed.iter().map(|r| r.mean.packet_count).sum();
    let weighted: f64 = per_seed
        .iter()
        .map(|r| r.mean.value * r.mean.packet_count as f64)
        .sum();
    let pooled_mean = if packets > 0 { weighted / packets as f64 } else { 0.0 };

    let means: Vec<f64> = per_seed.iter().map(|r| r.mean.value).collect();
    let ci95 = normal_ci_halfwidth(&means);

    let mut counts = OutcomeCounts::default();
    for r in &per_seed {
        counts.merge(&r.counts);
    }
    Ok(SweepSummary {
        point: first.point,
        per_seed,
        pooled_mean,
        ci95,
        probabilities: OutcomeProbabilities::from_counts(&counts)?,
        packets,
    })
}

/// `Z95 * s / sqrt(k)` over per-seed values; `None` below two values.
pub fn normal_ci_halfwidth(values: &[f64]) -> Option<f64> {
    let k = values.len();
    if k < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    Some(Z95 * (var / k as f64).sqrt())
}

/// Percentile-bootstrap 95% half-width of the mean of `values`.
pub fn bootstrap_ci_halfwidth<R: Rng + ?Sized>(values: &[f64], resamples: usize, rng: &mut R) -> Option<f64> {
    let k = values.len();
    if k < 2 || resamples < 2 {
        return None;
    }
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..k).map(|_| values[rng.gen_range(0..k)]).sum::<f64>() / k as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((resamples - 1) as f64 * q).round() as usize];
    Some((at(0.975) - at(0.025)) / 2.0)
}
