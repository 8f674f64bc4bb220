//! Agreement between reference and generated flows.
//!
//! All metrics take flattened pair vectors so callers decide whether the
//! diagonal (intra-region commuting) takes part; [`evaluate`] does that
//! selection from an [`ODMatrix`] pair.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::od::{ODMatrix, PairSelection};

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} reference pairs vs {} generated",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("no pairs to compare".into()));
    }
    Ok(())
}

pub fn rmse(reference: &[f64], generated: &[f64]) -> Result<f64> {
    same_len(reference, generated)?;
    let sse: f64 = reference
        .iter()
        .zip(generated)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sse / reference.len() as f64).sqrt())
}

/// RMSE over the standard deviation of the reference flows.
pub fn nrmse(reference: &[f64], generated: &[f64]) -> Result<f64> {
    let num = rmse(reference, generated)?;
    let n = reference.len() as f64;
    let mean = reference.iter().sum::<f64>() / n;
    let sd = (reference.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Err(Error::Domain(
            "NRMSE undefined: reference flows are constant".into(),
        ));
    }
    Ok(num / sd)
}

/// Common part of commuters: `2·Σ min(F, F̂) / (ΣF + ΣF̂)`.
pub fn cpc(reference: &[f64], generated: &[f64]) -> Result<f64> {
    same_len(reference, generated)?;
    if reference.iter().chain(generated).any(|v| *v < 0.0) {
        return Err(Error::Domain("CPC needs non-negative flows".into()));
    }
    let common: f64 = reference
        .iter()
        .zip(generated)
        .map(|(a, b)| a.min(*b))
        .sum();
    let total: f64 = reference.iter().sum::<f64>() + generated.iter().sum::<f64>();
    if total == 0.0 {
        return Err(Error::Domain(
            "CPC undefined: both flow sets are all zero".into(),
        ));
    }
    Ok(2.0 * common / total)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average-rank ties.
pub fn spearman(reference: &[f64], generated: &[f64]) -> Result<f64> {
    same_len(reference, generated)?;
    if reference.len() < 2 {
        return Err(Error::Domain("Spearman needs at least two pairs".into()));
    }
    pearson(&average_ranks(reference), &average_ranks(generated))
        .ok_or_else(|| Error::Domain("Spearman undefined: one input is constant".into()))
}

pub fn default_smoothing_window(n: usize) -> usize {
    (n / 200).max(3)
}

/// Rank-aligned normalized flow curves.
///
/// The reference flows are sorted ascending, the generated flows follow the
/// same permutation, both series are min-max scaled to `[0, 1]`, and each is
/// smoothed with a centered moving average of `window` points (the window
/// shrinks at the ends).
pub fn rank_curve(
    reference: &[f64],
    generated: &[f64],
    window: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    same_len(reference, generated)?;
    if window == 0 || window > reference.len() {
        return Err(Error::Usage(format!(
            "smoothing window {window} must be in 1..={}",
            reference.len()
        )));
    }
    let mut order: Vec<usize> = (0..reference.len()).collect();
    order.sort_by(|&a, &b| reference[a].total_cmp(&reference[b]));
    let r: Vec<f64> = order.iter().map(|&k| reference[k]).collect();
    let g: Vec<f64> = order.iter().map(|&k| generated[k]).collect();
    Ok((smooth(&min_max(&r), window), smooth(&min_max(&g), window)))
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn smooth(v: &[f64], window: usize) -> Vec<f64> {
    if window == 1 {
        return v.to_vec();
    }
    let before = (window - 1) / 2;
    let after = window / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(v.len() - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub nrmse: f64,
    pub cpc: f64,
    pub spearman: f64,
    pub n_pairs: usize,
}

impl EvalReport {
    /// Flat `key = value` text.
    pub fn to_kv(&self) -> String {
        format!(
            "rmse = {}\nnrmse = {}\ncpc = {}\nspearman = {}\nn_pairs = {}\n",
            self.rmse, self.nrmse, self.cpc, self.spearman, self.n_pairs
        )
    }

    pub fn parse_kv(text: &str, path: &Path) -> Result<Self> {
        let get = |key: &str| -> Result<f64> {
            for (ln, line) in text.lines().enumerate() {
                if let Some((k, v)) = line.split_once('=') {
                    if k.trim() == key {
                        return v.trim().parse().map_err(|_| {
                            Error::format(path, Some(ln + 1), format!("bad value for `{key}`"))
                        });
                    }
                }
            }
            Err(Error::format(path, None, format!("missing key `{key}`")))
        };
        Ok(EvalReport {
            rmse: get("rmse")?,
            nrmse: get("nrmse")?,
            cpc: get("cpc")?,
            spearman: get("spearman")?,
            n_pairs: get("n_pairs")? as usize,
        })
    }
}

fn check_alignment(reference: &ODMatrix, generated: &ODMatrix) -> Result<()> {
    if reference.region_ids() != generated.region_ids() {
        return Err(Error::Validation(
            "reference and generated matrices list different regions".into(),
        ));
    }
    Ok(())
}

pub fn evaluate(
    reference: &ODMatrix,
    generated: &ODMatrix,
    sel: PairSelection,
) -> Result<EvalReport> {
    check_alignment(reference, generated)?;
    let (r, g) = (reference.pairs(sel), generated.pairs(sel));
    Ok(EvalReport {
        rmse: rmse(&r, &g)?,
        nrmse: nrmse(&r, &g)?,
        cpc: cpc(&r, &g)?,
        spearman: spearman(&r, &g)?,
        n_pairs: r.len(),
    })
}

/// Per-city reports for a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusReport {
    pub cities: Vec<(String, EvalReport)>,
}

impl CorpusReport {
    pub fn mean(&self) -> Option<EvalReport> {
        let n = self.cities.len();
        if n == 0 {
            return None;
        }
        let avg = |f: fn(&EvalReport) -> f64| {
            self.cities.iter().map(|(_, r)| f(r)).sum::<f64>() / n as f64
        };
        Some(EvalReport {
            rmse: avg(|r| r.rmse),
            nrmse: avg(|r| r.nrmse),
            cpc: avg(|r| r.cpc),
            spearman: avg(|r| r.spearman),
            n_pairs: self.cities.iter().map(|(_, r)| r.n_pairs).sum(),
        })
    }

    /// One row per city.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("city,rmse,nrmse,cpc,spearman,n_pairs\n");
        for (city, r) in &self.cities {
            let _ = writeln!(
                s,
                "{city},{},{},{},{},{}",
                r.rmse, r.nrmse, r.cpc, r.spearman, r.n_pairs
            );
        }
        s
    }
}
