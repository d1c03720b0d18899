//! Geodesic quantities feeding the spatial-attention bias terms.
//!
//! Two pairwise measures are computed between stations: great-circle distance
//! (haversine on a spherical Earth) and "angularity", the angle subtended at
//! the Earth's center between the two stations' elevation-adjusted position
//! vectors. Both are normalized per station set before entering attention.
//!
//! Conventions:
//! * Latitude and longitude in degrees; latitude in [-90, 90], longitude in
//!   [-180, 180].
//! * Elevation in meters above the reference sphere (sea level); station
//!   files store feet, which ingestion converts before constructing
//!   [`GeoPoint`]s.
//! * Distances in meters on a sphere of radius [`EARTH_RADIUS_M`]; angles in
//!   degrees.

use std::error::Error;
use std::fmt;

use crate::numerics::Matrix;

/// Mean Earth radius in meters used by all spherical geometry here.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Feet-to-meters conversion for station elevations.
pub const FEET_TO_METERS: f64 = 0.3048;

/// A point on (or above) the reference sphere.
///
/// Invariants: latitude in [-90, 90], longitude in [-180, 180], elevation in
/// meters no lower than -500 (below that the radial vector construction loses
/// physical meaning). [`GeoPoint::new`] enforces them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
    elevation_m: f64,
}

/// Errors from geodesic construction and pairwise assembly.
#[derive(Debug, Clone, PartialEq)]
pub enum GeoError {
    /// A coordinate or elevation lies outside its documented range.
    InvalidCoordinate { field: &'static str, value: f64 },
}

impl fmt::Display for GeoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeoError::InvalidCoordinate { field, value } => {
                write!(f, "invalid {field}: {value}")
            }
        }
    }
}

impl Error for GeoError {}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64, elevation_m: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat_deg) || !lat_deg.is_finite() {
            return Err(GeoError::InvalidCoordinate { field: "latitude", value: lat_deg });
        }
        if !(-180.0..=180.0).contains(&lon_deg) || !lon_deg.is_finite() {
            return Err(GeoError::InvalidCoordinate { field: "longitude", value: lon_deg });
        }
        if !(elevation_m >= -500.0) || !elevation_m.is_finite() {
            return Err(GeoError::InvalidCoordinate { field: "elevation_m", value: elevation_m });
        }
        Ok(GeoPoint { lat_deg, lon_deg, elevation_m })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }

    pub fn elevation_m(&self) -> f64 {
        self.elevation_m
    }

    /// Cartesian coordinates at radius `EARTH_RADIUS_M + elevation`.
    fn cartesian(&self) -> [f64; 3] {
        let lat = self.lat_deg.to_radians();
        let lon = self.lon_deg.to_radians();
        let r = EARTH_RADIUS_M + self.elevation_m;
        [r * lat.cos() * lon.cos(), r * lat.cos() * lon.sin(), r * lat.sin()]
    }
}

/// Great-circle distance in meters via the haversine formula.
///
/// Symmetric, zero for identical points, bounded by `pi * EARTH_RADIUS_M`.
/// Elevation is ignored; only the surface angle matters.
pub fn haversine(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let lat_a = a.lat_deg.to_radians();
    let lat_b = b.lat_deg.to_radians();
    let dlat = lat_b - lat_a;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();
    let s_lat = (dlat * 0.5).sin();
    let s_lon = (dlon * 0.5).sin();
    let h = s_lat * s_lat + lat_a.cos() * lat_b.cos() * s_lon * s_lon;
    // Clamp guards rounding at antipodes where h can exceed 1 by an ulp.
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Angle in degrees between the elevation-adjusted position vectors of two
/// points, measured at the Earth's center.
///
/// Zero for identical points, 90 for equatorial/polar axes, up to 180 for
/// antipodes. Elevation enters through the vector radius, so it perturbs the
/// angle only for nearby points at very different heights.
pub fn angularity(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let va = a.cartesian();
    let vb = b.cartesian();
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// Pairwise geodesic bias matrices for a station set, min-max normalized to
/// [0, 1] over off-diagonal entries.
///
/// The normalization constants are frozen with the matrices so a checkpoint
/// can reproduce them exactly. Diagonals are exactly zero; both matrices are
/// bitwise symmetric because each unordered pair is computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoBiasMatrices {
    /// Normalized haversine distances, `n x n`.
    pub distance: Matrix<f64>,
    /// Normalized angularities, `n x n`.
    pub angularity: Matrix<f64>,
    /// Raw min/max of off-diagonal haversine distances (meters).
    pub distance_range: (f64, f64),
    /// Raw min/max of off-diagonal angularities (degrees).
    pub angularity_range: (f64, f64),
}

impl GeoBiasMatrices {
    /// Number of stations the matrices cover.
    pub fn len(&self) -> usize {
        self.distance.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Restrict both matrices to the given station indices (in order).
    /// Normalization constants are inherited, not recomputed: the bias scale
    /// is frozen from the full training station set.
    pub fn subset(&self, indices: &[usize]) -> GeoBiasMatrices {
        let take = |m: &Matrix<f64>| {
            Matrix::from_fn(indices.len(), indices.len(), |i, j| m[(indices[i], indices[j])])
        };
        GeoBiasMatrices {
            distance: take(&self.distance),
            angularity: take(&self.angularity),
            distance_range: self.distance_range,
            angularity_range: self.angularity_range,
        }
    }
}

/// Compute [`GeoBiasMatrices`] for an ordered station set.
///
/// Each unordered pair is evaluated once and mirrored, so the matrices are
/// bitwise symmetric. Off-diagonal entries are min-max normalized; a
/// degenerate set (all off-diagonal values equal, or fewer than two points)
/// normalizes to all zeros.
pub fn pairwise_geo(points: &[GeoPoint]) -> GeoBiasMatrices {
    let n = points.len();
    let mut distance = Matrix::zeros(n, n);
    let mut angle = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = haversine(&points[i], &points[j]);
            let t = angularity(&points[i], &points[j]);
            distance[(i, j)] = d;
            distance[(j, i)] = d;
            angle[(i, j)] = t;
            angle[(j, i)] = t;
        }
    }
    let distance_range = off_diagonal_range(&distance);
    let angularity_range = off_diagonal_range(&angle);
    normalize_off_diagonal(&mut distance, distance_range);
    normalize_off_diagonal(&mut angle, angularity_range);
    GeoBiasMatrices { distance, angularity: angle, distance_range, angularity_range }
}

/// [`pairwise_geo`] with externally supplied normalization constants, for
/// reproducing a checkpointed model's bias matrices exactly: raw pairwise
/// values are scaled by the given (min, max) instead of freshly computed
/// ranges.
pub fn pairwise_geo_with_ranges(
    points: &[GeoPoint],
    distance_range: (f64, f64),
    angularity_range: (f64, f64),
) -> GeoBiasMatrices {
    let n = points.len();
    let mut distance = Matrix::zeros(n, n);
    let mut angle = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = haversine(&points[i], &points[j]);
            let t = angularity(&points[i], &points[j]);
            distance[(i, j)] = d;
            distance[(j, i)] = d;
            angle[(i, j)] = t;
            angle[(j, i)] = t;
        }
    }
    normalize_off_diagonal(&mut distance, distance_range);
    normalize_off_diagonal(&mut angle, angularity_range);
    GeoBiasMatrices { distance, angularity: angle, distance_range, angularity_range }
}

fn off_diagonal_range(m: &Matrix<f64>) -> (f64, f64) {
    let n = m.rows();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                min = min.min(m[(i, j)]);
                max = max.max(m[(i, j)]);
            }
        }
    }
    if min.is_finite() && max.is_finite() {
        (min, max)
    } else {
        (0.0, 0.0)
    }
}

fn normalize_off_diagonal(m: &mut Matrix<f64>, (min, max): (f64, f64)) {
    let n = m.rows();
    let range = max - min;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                m[(i, j)] = 0.0;
            } else if range > 0.0 {
                m[(i, j)] = (m[(i, j)] - min) / range;
            } else {
                m[(i, j)] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64, elev: f64) -> GeoPoint {
        GeoPoint::new(lat, lon, elev).unwrap()
    }

    /// Independent check: spherical law of cosines.
    fn law_of_cosines_distance(a: &GeoPoint, b: &GeoPoint) -> f64 {
        let la = a.lat_deg().to_radians();
        let lb = b.lat_deg().to_radians();
        let dlon = (b.lon_deg() - a.lon_deg()).to_radians();
        let cos = (la.sin() * lb.sin() + la.cos() * lb.cos() * dlon.cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_M * cos.acos()
    }

    #[test]
    fn haversine_identical_points_is_zero() {
        let a = pt(47.6, -122.3, 100.0);
        assert_eq!(haversine(&a, &a), 0.0);
    }

    #[test]
    fn haversine_antipodal_is_half_circumference() {
        let a = pt(0.0, 0.0, 0.0);
        let b = pt(0.0, 180.0, 0.0);
        let d = haversine(&a, &b);
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_M).abs() < 1e-3);
    }

    #[test]
    fn haversine_seattle_portland_matches_published_distance() {
        // Seattle (47.6062, -122.3321) to Portland (45.5152, -122.6784):
        // roughly 234 km, cross-checked against the law of cosines.
        let seattle = pt(47.6062, -122.3321, 0.0);
        let portland = pt(45.5152, -122.6784, 0.0);
        let d = haversine(&seattle, &portland);
        assert!((d - 2.34e5).abs() < 1.5e3, "got {d}");
        let oracle = law_of_cosines_distance(&seattle, &portland);
        assert!((d - oracle).abs() < 1.0, "haversine {d} vs law of cosines {oracle}");
    }

    #[test]
    fn angularity_matches_axis_cases() {
        let origin = pt(0.0, 0.0, 0.0);
        let pole = pt(90.0, 0.0, 0.0);
        assert!((angularity(&origin, &pole) - 90.0).abs() < 1e-9);
        assert_eq!(angularity(&origin, &origin), 0.0);
        let anti = pt(0.0, 180.0, 0.0);
        assert!((angularity(&origin, &anti) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn angularity_agrees_with_independent_dot_product_oracle() {
        // Oracle: build the vectors through an independent rotation order and
        // use atan2 of the cross/dot magnitudes instead of acos.
        let cases = [
            (pt(47.3, -121.5, 1200.0), pt(44.1, -118.2, 2800.0)),
            (pt(-33.9, 151.2, 50.0), pt(35.7, 139.7, 40.0)),
            (pt(10.0, 10.0, 3000.0), pt(10.001, 10.001, 0.0)),
        ];
        for (a, b) in cases {
            let va = vector_oracle(&a);
            let vb = vector_oracle(&b);
            let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
            let cross = [
                va[1] * vb[2] - va[2] * vb[1],
                va[2] * vb[0] - va[0] * vb[2],
                va[0] * vb[1] - va[1] * vb[0],
            ];
            let cross_norm = cross.iter().map(|x| x * x).sum::<f64>().sqrt();
            let oracle = cross_norm.atan2(dot).to_degrees();
            let got = angularity(&a, &b);
            assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        }
    }

    fn vector_oracle(p: &GeoPoint) -> [f64; 3] {
        let r = EARTH_RADIUS_M + p.elevation_m();
        let colat = (90.0 - p.lat_deg()).to_radians();
        let lon = p.lon_deg().to_radians();
        [r * colat.sin() * lon.cos(), r * colat.sin() * lon.sin(), r * colat.cos()]
    }

    #[test]
    fn pairwise_three_collinear_points_normalize_to_unit_extremes() {
        let points = [pt(0.0, 0.0, 0.0), pt(0.0, 90.0, 0.0), pt(0.0, 180.0, 0.0)];
        let bias = pairwise_geo(&points);
        // Angularities are 90, 90, 180: after min-max the two 90s map to 0
        // and the 180 pair maps to 1.
        assert_eq!(bias.angularity[(0, 1)], 0.0);
        assert_eq!(bias.angularity[(1, 2)], 0.0);
        assert_eq!(bias.angularity[(0, 2)], 1.0);
        for i in 0..3 {
            assert_eq!(bias.angularity[(i, i)], 0.0);
            assert_eq!(bias.distance[(i, i)], 0.0);
        }
    }

    #[test]
    fn pairwise_single_station_is_all_zero() {
        let bias = pairwise_geo(&[pt(45.0, -120.0, 1000.0)]);
        assert_eq!(bias.distance.data(), &[0.0]);
        assert_eq!(bias.angularity.data(), &[0.0]);
    }

    #[test]
    fn subset_preserves_values_and_ranges() {
        let points = [
            pt(45.0, -120.0, 1000.0),
            pt(46.0, -121.0, 1500.0),
            pt(47.0, -122.0, 500.0),
            pt(44.0, -119.0, 2000.0),
        ];
        let bias = pairwise_geo(&points);
        let sub = bias.subset(&[2, 0]);
        assert_eq!(sub.distance[(0, 1)], bias.distance[(2, 0)]);
        assert_eq!(sub.angularity[(1, 0)], bias.angularity[(0, 2)]);
        assert_eq!(sub.distance_range, bias.distance_range);
    }

    #[test]
    fn supplied_ranges_reproduce_the_fresh_normalization() {
        let points = [
            pt(45.0, -120.0, 1000.0),
            pt(46.0, -121.0, 1500.0),
            pt(47.0, -122.0, 500.0),
        ];
        let fresh = pairwise_geo(&points);
        let replay =
            pairwise_geo_with_ranges(&points, fresh.distance_range, fresh.angularity_range);
        assert_eq!(fresh.distance.data(), replay.distance.data());
        assert_eq!(fresh.angularity.data(), replay.angularity.data());
    }

    #[test]
    fn invalid_coordinates_are_rejected() {
        assert!(GeoPoint::new(91.0, 0.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 200.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 0.0, -900.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn haversine_triangle_inequality(
            lats in proptest::collection::vec(-89.0f64..89.0, 3),
            lons in proptest::collection::vec(-179.0f64..179.0, 3),
        ) {
            let p: Vec<GeoPoint> = (0..3).map(|i| pt(lats[i], lons[i], 0.0)).collect();
            let ab = haversine(&p[0], &p[1]);
            let bc = haversine(&p[1], &p[2]);
            let ac = haversine(&p[0], &p[2]);
            // Relative slack absorbs rounding near degenerate triangles.
            prop_assert!(ac <= ab + bc + 1e-6 * (ab + bc + 1.0));
            prop_assert!(ab <= std::f64::consts::PI * EARTH_RADIUS_M + 1e-6);
        }

        #[test]
        fn pairwise_matrices_are_symmetric_normalized(
            lats in proptest::collection::vec(30.0f64..60.0, 5),
            lons in proptest::collection::vec(-130.0f64..-100.0, 5),
            elevs in proptest::collection::vec(0.0f64..4000.0, 5),
        ) {
            let p: Vec<GeoPoint> = (0..5).map(|i| pt(lats[i], lons[i], elevs[i])).collect();
            let bias = pairwise_geo(&p);
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(bias.distance[(i, j)].to_bits(), bias.distance[(j, i)].to_bits());
                    prop_assert_eq!(bias.angularity[(i, j)].to_bits(), bias.angularity[(j, i)].to_bits());
                    prop_assert!((0.0..=1.0).contains(&bias.distance[(i, j)]));
                    prop_assert!((0.0..=1.0).contains(&bias.angularity[(i, j)]));
                }
            }
        }
    }
}
