//! Station grouping by characteristic peak SWE.
//!
//! Each station's peak statistic is the mean over training years of its
//! within-year maximum SWE. Stations are split into four groups at the 30th,
//! 60th, and 90th percentiles of these peaks (nearest-rank definition, ties
//! assigned to the lower group).

use super::{DataError, Dataset, ATTR_SWE, SEASON_DAYS};

/// Group assignment produced by [`group_by_peak_swe`].
#[derive(Debug, Clone, PartialEq)]
pub struct PeakGroups {
    /// Per-station mean-over-training-years of yearly maximum SWE, aligned
    /// with `Dataset::stations()`.
    pub peaks: Vec<f64>,
    /// Peak-SWE thresholds at the 30th, 60th, and 90th percentiles.
    pub thresholds: [f64; 3],
    /// Per-station group in `1..=4` (1 = lowest peaks).
    pub group: Vec<usize>,
}

impl PeakGroups {
    pub const NUM_GROUPS: usize = 4;

    /// Human-readable group name for reports.
    pub fn label(group: usize) -> &'static str {
        match group {
            1 => "low-peak",
            2 => "mid-low-peak",
            3 => "mid-high-peak",
            4 => "high-peak",
            _ => "unknown",
        }
    }

    /// Station indices belonging to `group`.
    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.group.len()).filter(|&s| self.group[s] == group).collect()
    }
}

/// Nearest-rank percentile of an ascending-sorted slice: the value at rank
/// `ceil(p * n / 100)` (1-based). Integer arithmetic avoids float rounding at
/// exact multiples.
fn nearest_rank(sorted: &[f64], p: usize) -> f64 {
    debug_assert!(!sorted.is_empty() && p >= 1 && p <= 100);
    let rank = (p * sorted.len()).div_ceil(100);
    sorted[rank - 1]
}

/// Group stations by their training-period peak SWE.
pub fn group_by_peak_swe(dataset: &Dataset, train_years: &[i32]) -> Result<PeakGroups, DataError> {
    if train_years.is_empty() {
        return Err(DataError::InvalidSplit { detail: "no training years for grouping".into() });
    }
    let year_indices: Vec<usize> = train_years
        .iter()
        .map(|&y| {
            dataset.year_index(y).ok_or_else(|| DataError::InvalidSplit {
                detail: format!("year {y} not present in dataset"),
            })
        })
        .collect::<Result<_, _>>()?;

    let peaks: Vec<f64> = (0..dataset.stations().len())
        .map(|s| {
            let total: f64 = year_indices
                .iter()
                .map(|&y| {
                    (0..SEASON_DAYS)
                        .map(|d| dataset.series(s, y).values[(ATTR_SWE, d)])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum();
            total / year_indices.len() as f64
        })
        .collect();

    let mut sorted = peaks.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thresholds = [
        nearest_rank(&sorted, 30),
        nearest_rank(&sorted, 60),
        nearest_rank(&sorted, 90),
    ];
    let group = peaks
        .iter()
        .map(|&p| {
            if p <= thresholds[0] {
                1
            } else if p <= thresholds[1] {
                2
            } else if p <= thresholds[2] {
                3
            } else {
                4
            }
        })
        .collect();
    Ok(PeakGroups { peaks, thresholds, group })
}
