//! Regular knot grids clipped to the convex hull of the stations.

use crate::error::{Error, Result};
use crate::spatial::{Location, Metric};

/// Planar coordinates `(x, y)` of a location: `(lon, lat)`.
fn xy(l: &Location) -> (f64, f64) {
    (l.lon, l.lat)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain), without collinear points.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn polygon_area(hull: &[(f64, f64)]) -> f64 {
    let k = hull.len();
    (0..k)
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % k]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Inside or on the boundary of a counter-clockwise convex polygon.
pub fn in_convex(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    let k = hull.len();
    let scale = hull.iter().map(|q| q.0.abs().max(q.1.abs())).fold(1.0, f64::max);
    (0..k).all(|i| cross(hull[i], hull[(i + 1) % k], p) >= -1e-12 * scale * scale)
}

fn grid(lo: (f64, f64), hi: (f64, f64), h: f64) -> Vec<(f64, f64)> {
    let nx = (((hi.0 - lo.0) / h).round() as usize).max(1);
    let ny = (((hi.1 - lo.1) / h).round() as usize).max(1);
    let (hx, hy) = ((hi.0 - lo.0) / nx as f64, (hi.1 - lo.1) / ny as f64);
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push((lo.0 + (i as f64 + 0.5) * hx, lo.1 + (j as f64 + 0.5) * hy));
        }
    }
    out
}

/// Cell-centred grid over the bounding box of `points` with roughly
/// `target` nodes inside their convex hull. Collinear points fall back to
/// the bounding box.
pub fn make_knot_grid(points: &[Location], target: usize, metric: Metric) -> Result<Vec<Location>> {
    if points.len() < 3 {
        return Err(Error::Invalid("a knot grid needs at least 3 region points".into()));
    }
    if target == 0 {
        return Err(Error::Invalid("knot target must be positive".into()));
    }
    let pts: Vec<(f64, f64)> = points.iter().map(xy).collect();
    let lo = pts.iter().fold((f64::INFINITY, f64::INFINITY), |a, p| (a.0.min(p.0), a.1.min(p.1)));
    let hi = pts.iter().fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| (a.0.max(p.0), a.1.max(p.1)));
    let bbox_area = (hi.0 - lo.0) * (hi.1 - lo.1);
    if !(bbox_area > 0.0) {
        return Err(Error::Invalid("region points span no area".into()));
    }
    let hull = convex_hull(&pts);
    let area = polygon_area(&hull);
    let use_hull = hull.len() >= 3 && area > 1e-9 * bbox_area;
    if !use_hull {
        log::warn!("station hull is degenerate; knots fill the bounding box");
    }
    let keep = |h: f64| -> Vec<(f64, f64)> {
        grid(lo, hi, h)
            .into_iter()
            .filter(|&p| !use_hull || in_convex(&hull, p))
            .collect()
    };
    let region = if use_hull { area } else { bbox_area };
    let mut h = (region / target as f64).sqrt();
    let mut best = keep(h);
    // rescale a few times when hull clipping pulls the count away from target
    for _ in 0..20 {
        let c = best.len() as f64;
        if (c - target as f64).abs() <= 0.1 * target as f64 || c == 0.0 {
            break;
        }
        h *= (c / target as f64).sqrt();
        let cand = keep(h);
        if (cand.len() as f64 - target as f64).abs() < (c - target as f64).abs() {
            best = cand;
        }
    }
    if best.is_empty() {
        return Err(Error::Numerical("no grid node falls inside the station hull".into()));
    }
    best.into_iter()
        .enumerate()
        .map(|(k, (x, y))| {
            let id = format!("knot{:03}", k + 1);
            match metric {
                Metric::Euclidean => Location::planar(id, x, y),
                Metric::GreatCircle => Location::new(id, y, x),
            }
        })
        .collect()
}
