//! History windows and forecast targets on the concatenated day timeline.
//!
//! Water years are laid end to end: global day `g = year_index * SEASON_DAYS
//! + day`. History windows may reach backward across year boundaries (that is
//! what buffer years are for); forecast targets never leave the anchor year,
//! because the gap between seasons makes cross-year horizons meaningless.

use super::{DataError, Dataset, ForecastMode, WindowSpec, NUM_ATTRIBUTES, SEASON_DAYS};
use crate::Mat;

/// One training/evaluation example anchored at day `t` of one station-year.
#[derive(Debug, Clone)]
pub struct WindowedExample {
    pub station_index: usize,
    pub year_index: usize,
    /// Anchor day within the year, 0-based from December 1.
    pub t: usize,
    /// One `NUM_ATTRIBUTES x k` history per configured window, oldest column
    /// first, newest column = day `t`.
    pub histories: Vec<Mat>,
    /// SWE at `t + stride, t + 2*stride, .., t + horizon*stride`.
    pub targets: Vec<f64>,
}

/// Extract one history window ending at day `t` of `year_index`.
///
/// Columns are ordered oldest to newest; the final column is day `t` itself.
/// Fails with [`DataError::InsufficientHistory`] when the window would reach
/// before the start of the timeline.
pub fn window_for(
    dataset: &Dataset,
    station_index: usize,
    year_index: usize,
    t: usize,
    spec: &WindowSpec,
) -> Result<Mat, DataError> {
    debug_assert!(t < SEASON_DAYS);
    let g = year_index * SEASON_DAYS + t;
    let span = spec.span();
    if g < span {
        return Err(DataError::InsufficientHistory {
            station: dataset.stations()[station_index].station_id.clone(),
            water_year: dataset.years()[year_index],
            t,
        });
    }
    let stride = spec.resolution.stride();
    let mut out = Mat::zeros(NUM_ATTRIBUTES, spec.k);
    for (j, offset) in (0..spec.k).map(|j| (j, span - j * stride)) {
        let day = g - offset;
        for a in 0..NUM_ATTRIBUTES {
            out[(a, j)] = dataset.value_at(station_index, a, day);
        }
    }
    Ok(out)
}

/// SWE targets at `t + stride, .., t + horizon*stride`, all within the anchor
/// year. Fails with [`DataError::InsufficientHistory`] when the last target
/// would land past the end of the season.
pub fn targets_for(
    dataset: &Dataset,
    station_index: usize,
    year_index: usize,
    t: usize,
    horizon: usize,
    mode: ForecastMode,
) -> Result<Vec<f64>, DataError> {
    let stride = mode.stride();
    if t + horizon * stride >= SEASON_DAYS {
        return Err(DataError::InsufficientHistory {
            station: dataset.stations()[station_index].station_id.clone(),
            water_year: dataset.years()[year_index],
            t,
        });
    }
    Ok((1..=horizon)
        .map(|delta| dataset.swe(station_index, year_index, t + delta * stride))
        .collect())
}

/// Whether day `t` of `year_index` supports every window and the full target
/// horizon. Validity is station-independent: all stations share the grid.
pub fn valid_anchor(
    dataset: &Dataset,
    year_index: usize,
    t: usize,
    windows: &[WindowSpec],
    horizon: usize,
    mode: ForecastMode,
) -> bool {
    let g = year_index * SEASON_DAYS + t;
    let history_ok = windows.iter().all(|w| g >= w.span());
    let targets_ok = t + horizon * mode.stride() < SEASON_DAYS;
    let _ = dataset;
    history_ok && targets_ok
}

/// All valid `(year_index, t)` anchors across the given water years.
pub fn anchor_days(
    dataset: &Dataset,
    years: &[i32],
    windows: &[WindowSpec],
    horizon: usize,
    mode: ForecastMode,
) -> Result<Vec<(usize, usize)>, DataError> {
    let mut anchors = Vec::new();
    for &year in years {
        let year_index = dataset.year_index(year).ok_or_else(|| DataError::InvalidSplit {
            detail: format!("year {year} not present in dataset"),
        })?;
        for t in 0..SEASON_DAYS {
            if valid_anchor(dataset, year_index, t, windows, horizon, mode) {
                anchors.push((year_index, t));
            }
        }
    }
    Ok(anchors)
}

/// Assemble per-station examples for every valid anchor day in `years`.
///
/// Anchors that lack history or horizon room are skipped silently; an empty
/// result is an error (the split excludes every candidate day).
pub fn build_windows(
    dataset: &Dataset,
    years: &[i32],
    windows: &[WindowSpec],
    horizon: usize,
    mode: ForecastMode,
) -> Result<Vec<WindowedExample>, DataError> {
    let anchors = anchor_days(dataset, years, windows, horizon, mode)?;
    let mut examples = Vec::new();
    for &(year_index, t) in &anchors {
        for station_index in 0..dataset.stations().len() {
            let histories = windows
                .iter()
                .map(|w| window_for(dataset, station_index, year_index, t, w))
                .collect::<Result<Vec<_>, _>>()?;
            let targets = targets_for(dataset, station_index, year_index, t, horizon, mode)?;
            examples.push(WindowedExample { station_index, year_index, t, histories, targets });
        }
    }
    if examples.is_empty() {
        return Err(DataError::InsufficientHistory {
            station: "<any>".into(),
            water_year: years.first().copied().unwrap_or(0),
            t: 0,
        });
    }
    Ok(examples)
}
