//! Station coordinates, distances, latitude ordering and nearest-predecessor sets.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// How distances between two locations are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Haversine distance on the sphere, kilometres. Coordinates are degrees.
    GreatCircle,
    /// Planar Euclidean distance for abstract coordinates (e.g. the unit square).
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &Location, b: &Location) -> f64 {
        match self {
            Metric::GreatCircle => haversine(a.lat, a.lon, b.lat, b.lon),
            Metric::Euclidean => (a.lat - b.lat).hypot(a.lon - b.lon),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "geodetic" | "greatcircle" | "great_circle" => Ok(Metric::GreatCircle),
            "planar" | "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown coordinate system `{other}`"))),
        }
    }
}

/// A monitoring station. For planar domains `lon` holds x and `lat` holds y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    #[serde(rename = "station_id")]
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

impl Location {
    /// Geodetic location; latitude in [-90, 90], longitude in [-180, 180].
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Result<Self> {
        let loc = Location {
            id: id.into(),
            lat,
            lon,
        };
        loc.check_geodetic()?;
        Ok(loc)
    }

    /// Abstract planar point `(x, y)`.
    pub fn planar(id: impl Into<String>, x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Domain(format!("non-finite planar coordinate ({x}, {y})")));
        }
        Ok(Location {
            id: id.into(),
            lat: y,
            lon: x,
        })
    }

    fn check_geodetic(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Domain(format!(
                "station {}: coordinates ({}, {}) out of range",
                self.id, self.lat, self.lon
            )));
        }
        Ok(())
    }

    fn same_point(&self, other: &Location) -> bool {
        self.lat == other.lat && self.lon == other.lon
    }
}

fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Great-circle (haversine) distance in kilometres.
pub fn great_circle_km(a: &Location, b: &Location) -> Result<f64> {
    a.check_geodetic()?;
    b.check_geodetic()?;
    Ok(haversine(a.lat, a.lon, b.lat, b.lon))
}

/// Dense symmetric matrix of pairwise distances.
pub fn distance_matrix(locs: &[Location], metric: Metric) -> DMatrix<f64> {
    let n = locs.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            metric.distance(&locs[i], &locs[j])
        }
    })
}

/// Permutation sorting locations ascending by (lat, lon, id).
///
/// Entry `k` of the result is the input index placed at model position `k`.
pub fn order_by_latitude(locs: &[Location]) -> Result<Vec<usize>> {
    if locs.is_empty() {
        return Err(Error::Invalid("no locations supplied".into()));
    }
    let mut seen = HashSet::with_capacity(locs.len());
    for loc in locs {
        if !seen.insert(loc.id.as_str()) {
            return Err(Error::Invalid(format!("duplicate station id `{}`", loc.id)));
        }
    }
    let mut order: Vec<usize> = (0..locs.len()).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (&locs[a], &locs[b]);
        la.lat
            .total_cmp(&lb.lat)
            .then(la.lon.total_cmp(&lb.lon))
            .then_with(|| la.id.cmp(&lb.id))
    });
    for w in order.windows(2) {
        let (a, b) = (&locs[w[0]], &locs[w[1]]);
        if a.same_point(b) {
            return Err(Error::Invalid(format!(
                "stations `{}` and `{}` share coordinates ({}, {})",
                a.id, b.id, a.lat, a.lon
            )));
        }
    }
    Ok(order)
}

/// For each model index `i`, the `min(m, i)` predecessors closest to `i`
/// (zero-based), sorted by distance with ties going to the smaller index.
pub fn build_neighbor_sets(ordered: &[Location], m: usize, metric: Metric) -> Vec<Vec<usize>> {
    (0..ordered.len())
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..i)
                .map(|j| (metric.distance(&ordered[i], &ordered[j]), j))
                .collect();
            let k = m.min(i);
            if k < cand.len() {
                cand.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.truncate(k);
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Ordered stations with cached neighbor geometry.
#[derive(Debug, Clone)]
pub struct SpatialDomain {
    locations: Vec<Location>,
    order: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    /// Distinct pairwise distances used by the neighbor factorization, so
    /// each kernel value is computed once per parameter value.
    lags: Vec<f64>,
    /// Index into `lags` of the distance from `i` to each member of `N(i)`.
    neighbor_lags: Vec<Vec<u32>>,
    /// Indices into `lags` for the strict lower triangle among the members
    /// of `N(i)`, row by row.
    pair_lags: Vec<Vec<u32>>,
    /// For each location `s`, every `(j, k)` with `N(j)[k] == s`.
    children: Vec<Vec<(usize, usize)>>,
    m: usize,
    metric: Metric,
}

impl SpatialDomain {
    /// Orders `locs` by latitude and builds neighbor sets of size at most `m`.
    pub fn new(locs: Vec<Location>, m: usize, metric: Metric) -> Result<Self> {
        if m == 0 {
            return Err(Error::Invalid("neighbor budget m must be positive".into()));
        }
        if metric == Metric::GreatCircle {
            for loc in &locs {
                loc.check_geodetic()?;
            }
        }
        let order = order_by_latitude(&locs)?;
        let mut slots: Vec<Option<Location>> = locs.into_iter().map(Some).collect();
        let locations: Vec<Location> = order
            .iter()
            .map(|&k| slots[k].take().expect("permutation"))
            .collect();
        let neighbors = build_neighbor_sets(&locations, m, metric);
        let mut lags = Vec::new();
        let mut slot_of: HashMap<(usize, usize), u32> = HashMap::new();
        let mut slot = |a: usize, b: usize| {
            *slot_of.entry((a.min(b), a.max(b))).or_insert_with(|| {
                lags.push(metric.distance(&locations[a], &locations[b]));
                (lags.len() - 1) as u32
            })
        };
        let neighbor_lags = neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| nb.iter().map(|&j| slot(i, j)).collect())
            .collect();
        let pair_lags = neighbors
            .iter()
            .map(|nb| {
                let mut v = Vec::with_capacity(nb.len() * nb.len().saturating_sub(1) / 2);
                for a in 0..nb.len() {
                    for b in 0..a {
                        v.push(slot(nb[a], nb[b]));
                    }
                }
                v
            })
            .collect();
        let mut children = vec![Vec::new(); locations.len()];
        for (j, nb) in neighbors.iter().enumerate() {
            for (k, &s) in nb.iter().enumerate() {
                children[s].push((j, k));
            }
        }
        Ok(SpatialDomain {
            locations,
            order,
            neighbors,
            lags,
            neighbor_lags,
            pair_lags,
            children,
            m,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Locations in model order.
    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    /// `order()[k]` is the input index of the location at model position `k`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_sets(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub(crate) fn lags(&self) -> &[f64] {
        &self.lags
    }

    pub(crate) fn neighbor_lags(&self, i: usize) -> &[u32] {
        &self.neighbor_lags[i]
    }

    pub(crate) fn pair_lags(&self, i: usize) -> &[u32] {
        &self.pair_lags[i]
    }

    pub(crate) fn children(&self, s: usize) -> &[(usize, usize)] {
        &self.children[s]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn distance(&self, a: &Location, b: &Location) -> f64 {
        self.metric.distance(a, b)
    }

    /// Model index of the station with this id.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.locations.iter().position(|l| l.id == id)
    }

    /// The `k` closest domain points to `target` among all stations, as
    /// `(model index, distance)` sorted by distance then index.
    pub fn nearest(&self, target: &Location, k: usize) -> Vec<(usize, f64)> {
        let mut cand: Vec<(usize, f64)> = self
            .locations
            .iter()
            .enumerate()
            .map(|(j, loc)| (j, self.metric.distance(target, loc)))
            .collect();
        cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        cand.truncate(k);
        cand
    }

    /// Applies the model-order permutation to per-station rows given in input order.
    pub fn to_model_order<T: Clone>(&self, rows: &[T]) -> Vec<T> {
        self.order.iter().map(|&k| rows[k].clone()).collect()
    }
}

/// Reads a `station_id,lat,lon` file.
pub fn read_stations(path: &Path) -> Result<Vec<Location>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::Csv(e),
    })?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["station_id", "lat", "lon"] {
        return Err(Error::Invalid(format!(
            "{}: expected header `station_id,lat,lon`",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let loc: Location = rec?;
        out.push(loc);
    }
    Ok(out)
}

pub fn write_stations(path: &Path, locs: &[Location]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for loc in locs {
        w.serialize(loc)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
