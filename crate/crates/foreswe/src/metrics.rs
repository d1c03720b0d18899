//! Forecast evaluation: Nash-Sutcliffe efficiency, relative bias, Gaussian
//! negative log likelihood, interval coverage and calibration error, and the
//! grouped report tables.
//!
//! The point metrics are generic over the scalar type; report assembly works
//! at pipeline precision.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::data::PeakGroups;
use crate::scalar::Scalar;

/// Errors surfaced by metric computation and report assembly.
#[derive(Debug, PartialEq, Eq)]
pub enum MetricsError {
    /// NSE is undefined when the observed series has zero variance.
    DegenerateActual,
    /// Relative bias is undefined when the observed values sum to zero.
    ZeroDenominator,
    /// A metric received no samples or mismatched lengths.
    BadInput { detail: String },
    /// A predictive variance was zero or negative.
    NonPositiveVariance { index: usize },
    /// Report assembly found a station with no forecasts.
    IncompleteForecasts { detail: String },
    /// Filesystem failure while writing a report.
    Io { detail: String },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::DegenerateActual => {
                write!(f, "observed series has zero variance; NSE undefined")
            }
            MetricsError::ZeroDenominator => {
                write!(f, "observed values sum to zero; relative bias undefined")
            }
            MetricsError::BadInput { detail } => write!(f, "bad metric input: {detail}"),
            MetricsError::NonPositiveVariance { index } => {
                write!(f, "non-positive predictive variance at index {index}")
            }
            MetricsError::IncompleteForecasts { detail } => {
                write!(f, "incomplete forecasts: {detail}")
            }
            MetricsError::Io { detail } => write!(f, "io failure: {detail}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<std::io::Error> for MetricsError {
    fn from(e: std::io::Error) -> Self {
        MetricsError::Io { detail: e.to_string() }
    }
}

fn check_paired<T>(a: &[T], b: &[T]) -> Result<(), MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::BadInput { detail: "empty sample".into() });
    }
    if a.len() != b.len() {
        return Err(MetricsError::BadInput {
            detail: format!("paired lengths differ: {} vs {}", a.len(), b.len()),
        });
    }
    Ok(())
}

/// Nash-Sutcliffe efficiency: `1 - sum((p - a)^2) / sum((a - mean(a))^2)`.
/// 1 is a perfect forecast, 0 matches always-predict-the-mean, negative is
/// worse than that baseline.
pub fn nse<T: Scalar>(predicted: &[T], actual: &[T]) -> Result<T, MetricsError> {
    check_paired(predicted, actual)?;
    let n = T::from_real(actual.len() as f64);
    let mean = actual.iter().copied().sum::<T>() / n;
    let denom = actual.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>();
    if denom <= T::zero() {
        return Err(MetricsError::DegenerateActual);
    }
    let num = predicted.iter().zip(actual).map(|(&p, &a)| (p - a) * (p - a)).sum::<T>();
    Ok(T::one() - num / denom)
}

/// Relative bias: `(sum(p) - sum(a)) / sum(a)`. Positive means
/// over-forecast.
pub fn relative_bias<T: Scalar>(predicted: &[T], actual: &[T]) -> Result<T, MetricsError> {
    check_paired(predicted, actual)?;
    let sum_a = actual.iter().copied().sum::<T>();
    if sum_a == T::zero() {
        return Err(MetricsError::ZeroDenominator);
    }
    let sum_p = predicted.iter().copied().sum::<T>();
    Ok((sum_p - sum_a) / sum_a)
}

/// Mean Gaussian negative log likelihood of the observations under the
/// predictive means and variances:
/// `mean_i [ ln(2 pi var_i)/2 + (a_i - mean_i)^2 / (2 var_i) ]`.
pub fn nll_gaussian<T: Scalar>(
    means: &[T],
    vars: &[T],
    actual: &[T],
) -> Result<T, MetricsError> {
    check_paired(means, actual)?;
    check_paired(vars, actual)?;
    let two = T::from_real(2.0);
    let two_pi = T::from_real(std::f64::consts::TAU);
    let mut total = T::zero();
    for (i, ((&m, &v), &a)) in means.iter().zip(vars).zip(actual).enumerate() {
        if v <= T::zero() {
            return Err(MetricsError::NonPositiveVariance { index: i });
        }
        total += (two_pi * v).ln() / two + (a - m) * (a - m) / (two * v);
    }
    Ok(total / T::from_real(actual.len() as f64))
}

/// Fraction of observations inside their `[lower, upper]` interval
/// (inclusive).
pub fn coverage<T: Scalar>(
    lower: &[T],
    upper: &[T],
    actual: &[T],
) -> Result<T, MetricsError> {
    check_paired(lower, actual)?;
    check_paired(upper, actual)?;
    let hits = lower
        .iter()
        .zip(upper)
        .zip(actual)
        .filter(|((&l, &u), &a)| l <= a && a <= u)
        .count();
    Ok(T::from_real(hits as f64 / actual.len() as f64))
}

/// Expected calibration error of one nominal level: `|coverage - alpha|`.
pub fn ece<T: Scalar>(observed_coverage: T, alpha: T) -> T {
    (observed_coverage - alpha).abs()
}

/// Median with the conventional midpoint rule for even counts. Returns
/// `None` on an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("median input must not contain NaN"));
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 })
}

/// Month labels of the 180-day season starting December 1.
pub const MONTH_NAMES: [&str; 6] = ["Dec", "Jan", "Feb", "Mar", "Apr", "May"];

/// Month slot (0 = December) of a season day in `0..SEASON_DAYS`, following
/// the non-leap calendar: Dec 31, Jan 31, Feb 28, Mar 31, Apr 30 days, and
/// the season's final 29 days falling in May.
pub fn month_of_day(t: usize) -> usize {
    match t {
        0..=30 => 0,
        31..=61 => 1,
        62..=89 => 2,
        90..=120 => 3,
        121..=150 => 4,
        _ => 5,
    }
}

/// NSE quality-bucket edges, best bucket first: `> 0.75`, `(0.5, 0.75]`,
/// `(0.25, 0.5]`, `[0, 0.25]`, `< 0`.
pub const NSE_BUCKET_LABELS: [&str; 5] =
    ["above 0.75", "0.5 to 0.75", "0.25 to 0.5", "0 to 0.25", "below 0"];

fn nse_bucket(v: f64) -> usize {
    if v > 0.75 {
        0
    } else if v > 0.5 {
        1
    } else if v > 0.25 {
        2
    } else if v >= 0.0 {
        3
    } else {
        4
    }
}

/// One evaluated forecast: a single (station, target day, horizon step)
/// prediction joined with its observed value, in physical units.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ForecastRecord {
    pub station_index: usize,
    /// Target day within the season (not the anchor day).
    pub target_day: usize,
    pub horizon_step: usize,
    pub mean: f64,
    pub var: f64,
    pub lower: f64,
    pub upper: f64,
    pub actual: f64,
}

/// Everything the evaluation stage reports.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Nominal interval level the coverage is judged against.
    pub alpha: f64,
    /// Pooled per-station NSE (`None` when that station's observations are
    /// degenerate).
    pub per_station_nse: Vec<Option<f64>>,
    /// Pooled per-station relative bias (`None` on zero-sum observations).
    pub per_station_rb: Vec<Option<f64>>,
    /// Station counts per NSE bucket, order of [`NSE_BUCKET_LABELS`].
    pub nse_buckets: [usize; 5],
    /// Median of the defined per-station NSE values.
    pub median_nse: f64,
    /// Median of the defined per-station relative biases.
    pub median_rb: f64,
    /// Mean Gaussian NLL over every record.
    pub nll: f64,
    /// Observed coverage of the nominal intervals.
    pub coverage: f64,
    /// `|coverage - alpha|`.
    pub ece: f64,
    /// `group_month_median_rb[g][m]`: median per-station relative bias of
    /// peak group `g + 1` restricted to month `m`, `None` where the cell has
    /// no defined values.
    pub group_month_median_rb: Vec<Vec<Option<f64>>>,
    /// Number of forecast records evaluated.
    pub n_records: usize,
}

/// Assemble the full evaluation report. `records` must reference station
/// indices below `n_stations` and every station must appear at least once;
/// `groups` carries the peak-SWE grouping of the same station ordering.
pub fn build_report(
    records: &[ForecastRecord],
    n_stations: usize,
    groups: &PeakGroups,
    alpha: f64,
) -> Result<EvalReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::BadInput { detail: "no forecast records".into() });
    }
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(MetricsError::BadInput {
            detail: format!("alpha must lie in (0, 1), got {alpha}"),
        });
    }
    if groups.group.len() != n_stations {
        return Err(MetricsError::BadInput {
            detail: format!(
                "peak groups cover {} stations, dataset has {n_stations}",
                groups.group.len()
            ),
        });
    }
    let mut per_station: Vec<Vec<&ForecastRecord>> = vec![Vec::new(); n_stations];
    for r in records {
        if r.station_index >= n_stations {
            return Err(MetricsError::BadInput {
                detail: format!(
                    "record references station {} of {n_stations}",
                    r.station_index
                ),
            });
        }
        per_station[r.station_index].push(r);
    }
    if let Some(missing) = per_station.iter().position(Vec::is_empty) {
        return Err(MetricsError::IncompleteForecasts {
            detail: format!("station index {missing} has no forecast records"),
        });
    }

    let mut per_station_nse = Vec::with_capacity(n_stations);
    let mut per_station_rb = Vec::with_capacity(n_stations);
    let mut nse_buckets = [0usize; 5];
    for rows in &per_station {
        let predicted: Vec<f64> = rows.iter().map(|r| r.mean).collect();
        let actual: Vec<f64> = rows.iter().map(|r| r.actual).collect();
        let station_nse = match nse(&predicted, &actual) {
            Ok(v) => Some(v),
            Err(MetricsError::DegenerateActual) => None,
            Err(e) => return Err(e),
        };
        if let Some(v) = station_nse {
            nse_buckets[nse_bucket(v)] += 1;
        }
        per_station_nse.push(station_nse);
        per_station_rb.push(match relative_bias(&predicted, &actual) {
            Ok(v) => Some(v),
            Err(MetricsError::ZeroDenominator) => None,
            Err(e) => return Err(e),
        });
    }

    let means: Vec<f64> = records.iter().map(|r| r.mean).collect();
    let vars: Vec<f64> = records.iter().map(|r| r.var).collect();
    let lower: Vec<f64> = records.iter().map(|r| r.lower).collect();
    let upper: Vec<f64> = records.iter().map(|r| r.upper).collect();
    let actual: Vec<f64> = records.iter().map(|r| r.actual).collect();
    let nll = nll_gaussian(&means, &vars, &actual)?;
    let cov = coverage(&lower, &upper, &actual)?;

    // Group x month: pool each station's records of that month, compute the
    // station's monthly relative bias, then take the median across the
    // group's stations.
    let mut group_month_median_rb =
        vec![vec![None; MONTH_NAMES.len()]; PeakGroups::NUM_GROUPS];
    for (g_idx, row) in group_month_median_rb.iter_mut().enumerate() {
        let group = g_idx + 1;
        for (m, slot) in row.iter_mut().enumerate() {
            let mut station_biases = Vec::new();
            for station in 0..n_stations {
                if groups.group[station] != group {
                    continue;
                }
                let monthly: Vec<&&ForecastRecord> = per_station[station]
                    .iter()
                    .filter(|r| month_of_day(r.target_day) == m)
                    .collect();
                if monthly.is_empty() {
                    continue;
                }
                let predicted: Vec<f64> = monthly.iter().map(|r| r.mean).collect();
                let observed: Vec<f64> = monthly.iter().map(|r| r.actual).collect();
                if let Ok(rb) = relative_bias(&predicted, &observed) {
                    station_biases.push(rb);
                }
            }
            *slot = median(&station_biases);
        }
    }

    let defined_nse: Vec<f64> = per_station_nse.iter().flatten().copied().collect();
    let defined_rb: Vec<f64> = per_station_rb.iter().flatten().copied().collect();
    Ok(EvalReport {
        alpha,
        median_nse: median(&defined_nse)
            .ok_or(MetricsError::DegenerateActual)?,
        median_rb: median(&defined_rb).ok_or(MetricsError::ZeroDenominator)?,
        per_station_nse,
        per_station_rb,
        nse_buckets,
        nll,
        coverage: cov,
        ece: ece(cov, alpha),
        group_month_median_rb,
        n_records: records.len(),
    })
}

/// Write the report as pretty-printed JSON.
pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| MetricsError::Io { detail: e.to_string() })?;
    fs::write(path, json)?;
    Ok(())
}

/// Write the group-by-month median relative-bias table as CSV: one row per
/// peak group, one column per month, empty cells where undefined.
pub fn write_group_month_csv(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "group,{}", MONTH_NAMES.join(","))?;
    for (g_idx, row) in report.group_month_median_rb.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|cell| cell.map(|v| format!("{v:.6}")).unwrap_or_default())
            .collect();
        writeln!(out, "{},{}", PeakGroups::label(g_idx + 1), cells.join(","))?;
    }
    Ok(())
}
