//! Gravity and radiation spatial-interaction baselines.

use log::warn;

use crate::error::{Error, Result};
use crate::metrics;
use crate::od::{ODMatrix, PairSelection};
use crate::tilegrid::GeoPoint;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Distance floor for distinct regions whose centroids coincide.
pub const MIN_DISTANCE_KM: f64 = 0.1;
pub const DEFAULT_TRIP_RATE: f64 = 0.5;
pub const GRAVITY_BETA_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct RegionGeo {
    pub region_id: String,
    pub centroid: GeoPoint,
    pub population: f64,
}

pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = p2 - p1;
    let dlmb = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlmb / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Symmetric great-circle distance matrix (km), zero diagonal, row-major.
pub fn distance_matrix(regions: &[RegionGeo]) -> Vec<f64> {
    let n = regions.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = haversine_km(regions[i].centroid, regions[j].centroid);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn ids(regions: &[RegionGeo]) -> Vec<String> {
    regions.iter().map(|r| r.region_id.clone()).collect()
}

fn check_populations(masses: &[f64]) -> Result<()> {
    if let Some(m) = masses.iter().find(|m| !m.is_finite() || **m < 0.0) {
        return Err(Error::Domain(format!(
            "population must be finite and non-negative, got {m}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityParams {
    pub g: f64,
    pub beta: f64,
}

/// `F_ij = G·m_i·m_j / d_ij^β` off the diagonal, zero on it.
pub fn gravity_with_distances(
    ids: Vec<String>,
    masses: &[f64],
    dist: &[f64],
    p: GravityParams,
) -> Result<ODMatrix> {
    if p.beta <= 0.0 || !p.beta.is_finite() || !p.g.is_finite() || p.g < 0.0 {
        return Err(Error::Domain(format!(
            "gravity needs G ≥ 0 and β > 0, got {p:?}"
        )));
    }
    check_populations(masses)?;
    let n = masses.len();
    if dist.len() != n * n || ids.len() != n {
        return Err(Error::Shape(
            "gravity inputs disagree on region count".into(),
        ));
    }
    let mut flows = vec![0.0; n * n];
    let mut floored = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d = dist[i * n + j];
            if d < MIN_DISTANCE_KM {
                floored += 1;
                d = MIN_DISTANCE_KM;
            }
            flows[i * n + j] = p.g * masses[i] * masses[j] / d.powf(p.beta);
        }
    }
    if floored > 0 {
        warn!("gravity: {floored} region pairs closer than {MIN_DISTANCE_KM} km were floored");
    }
    ODMatrix::new(ids, flows)
}

pub fn gravity(regions: &[RegionGeo], p: GravityParams) -> Result<ODMatrix> {
    let masses: Vec<f64> = regions.iter().map(|r| r.population).collect();
    gravity_with_distances(ids(regions), &masses, &distance_matrix(regions), p)
}

/// Rescales all flows so they sum to `total`.
pub fn scale_to_total(m: &ODMatrix, total: f64) -> Result<ODMatrix> {
    let cur = m.total();
    if cur == 0.0 {
        return Ok(m.clone());
    }
    ODMatrix::new(
        m.region_ids().to_vec(),
        m.flows().iter().map(|v| v * total / cur).collect(),
    )
}

/// Fits `(G, β)` over a training corpus: β from the grid, G by least
/// squares for each β, keeping the pair with the lowest pooled NRMSE.
pub fn fit_gravity(
    corpus: &[(Vec<RegionGeo>, ODMatrix)],
    sel: PairSelection,
) -> Result<GravityParams> {
    if corpus.is_empty() {
        return Err(Error::Domain("gravity fit needs at least one city".into()));
    }
    let mut best: Option<(f64, GravityParams)> = None;
    for &beta in &GRAVITY_BETA_GRID {
        let unit = GravityParams { g: 1.0, beta };
        let mut basis = Vec::new();
        let mut target = Vec::new();
        for (regions, od) in corpus {
            basis.extend(gravity(regions, unit)?.pairs(sel));
            target.extend(od.pairs(sel));
        }
        let gg: f64 = basis.iter().map(|b| b * b).sum();
        let gf: f64 = basis.iter().zip(&target).map(|(b, f)| b * f).sum();
        let g = if gg > 0.0 { (gf / gg).max(0.0) } else { 0.0 };
        let pred: Vec<f64> = basis.iter().map(|b| b * g).collect();
        let score = metrics::nrmse(&target, &pred)?;
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, GravityParams { g, beta }));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// `s_ij`: population strictly closer to `i` than `j` is, excluding `i` and `j`.
pub fn intervening_population(masses: &[f64], dist: &[f64]) -> Vec<f64> {
    let n = masses.len();
    let mut s = vec![0.0; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut prefix: Vec<f64> = Vec::with_capacity(n + 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&k| k != i));
        order.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]));
        prefix.clear();
        prefix.push(0.0);
        for &k in &order {
            prefix.push(prefix.last().unwrap() + masses[k]);
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            let dij = dist[i * n + j];
            let closer = order.partition_point(|&k| dist[i * n + k] < dij);
            s[i * n + j] = prefix[closer];
        }
    }
    s
}

/// `T_ij = O_i · m_i m_j / ((m_i + s_ij)(m_i + m_j + s_ij))`, zero diagonal.
pub fn radiation_with_distances(
    ids: Vec<String>,
    masses: &[f64],
    dist: &[f64],
    outflow: &[f64],
    renormalize: bool,
) -> Result<ODMatrix> {
    check_populations(masses)?;
    let n = masses.len();
    if dist.len() != n * n || outflow.len() != n || ids.len() != n {
        return Err(Error::Shape(
            "radiation inputs disagree on region count".into(),
        ));
    }
    if let Some(o) = outflow.iter().find(|o| !o.is_finite() || **o < 0.0) {
        return Err(Error::Domain(format!(
            "outflow must be non-negative, got {o}"
        )));
    }
    let s = intervening_population(masses, dist);
    let mut flows = vec![0.0; n * n];
    for i in 0..n {
        let mi = masses[i];
        if mi == 0.0 {
            continue;
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            let (mj, sij) = (masses[j], s[i * n + j]);
            flows[i * n + j] = outflow[i] * mi * mj / ((mi + sij) * (mi + mj + sij));
        }
        if renormalize {
            let row = &mut flows[i * n..(i + 1) * n];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for v in row.iter_mut() {
                    *v *= outflow[i] / total;
                }
            }
        }
    }
    ODMatrix::new(ids, flows)
}

pub fn radiation(regions: &[RegionGeo], outflow: &[f64], renormalize: bool) -> Result<ODMatrix> {
    let masses: Vec<f64> = regions.iter().map(|r| r.population).collect();
    radiation_with_distances(
        ids(regions),
        &masses,
        &distance_matrix(regions),
        outflow,
        renormalize,
    )
}

/// Outflow estimate when true trip totals are unknown: population × trip rate.
pub fn default_outflows(regions: &[RegionGeo], trip_rate: f64) -> Vec<f64> {
    regions.iter().map(|r| r.population * trip_rate).collect()
}
