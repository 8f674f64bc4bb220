//! Per-region conditioning vectors: embedding plus population, standardized
//! column-wise into a city condition matrix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tilegrid::{RasterImage, RegionMask};

pub const TOY_DIM: usize = 64;
pub const EMB_MAGIC: &[u8; 6] = b"ODEMB1";

#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub region_id: String,
    pub embedding: Vec<f64>,
    pub population: f64,
}

impl RegionFeature {
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.embedding.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding of `{}` contains {v}",
                self.region_id
            )));
        }
        if !self.population.is_finite() || self.population < 0.0 {
            return Err(Error::Domain(format!(
                "population of `{}` must be finite and non-negative, got {}",
                self.region_id, self.population
            )));
        }
        Ok(())
    }
}

/// Per-column mean and standard deviation. A zero `std` marks a constant
/// column, which standardizes to zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Fits on row-major `rows` with `cols` columns (population std, divisor N).
    pub fn fit(rows: &[f64], cols: usize) -> Result<Self> {
        if cols == 0 || rows.is_empty() || rows.len() % cols != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {cols}",
                rows.len()
            )));
        }
        let n = (rows.len() / cols) as f64;
        let mut mean = vec![0.0; cols];
        for row in rows.chunks(cols) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for row in rows.chunks(cols) {
            for k in 0..cols {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let std = var
            .iter()
            .zip(&mean)
            .map(|(v, m)| {
                let sd = (v / n).sqrt();
                // identical values can leave rounding residue in the variance
                if sd <= 1e-12 * m.abs().max(1.0) {
                    0.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(FeatureStats { mean, std })
    }

    pub fn cols(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, rows: &mut [f64]) -> Result<()> {
        let cols = self.cols();
        if rows.len() % cols != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {cols}",
                rows.len()
            )));
        }
        for row in rows.chunks_mut(cols) {
            for k in 0..cols {
                row[k] = if self.std[k] == 0.0 {
                    0.0
                } else {
                    (row[k] - self.mean[k]) / self.std[k]
                };
            }
        }
        Ok(())
    }
}

/// City-level conditions: row `i` of `x` belongs to `region_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub region_ids: Vec<String>,
    /// Row-major N×(D+1): standardized embedding, then standardized log1p population.
    pub x: Vec<f64>,
    pub stats: FeatureStats,
    /// Row-major N×N centroid distances in km; zeros unless set.
    pub distances: Vec<f64>,
}

impl ConditionSet {
    pub fn n(&self) -> usize {
        self.region_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.stats.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.x[i * c..(i + 1) * c]
    }

    pub fn with_distances(mut self, distances: Vec<f64>) -> Result<Self> {
        let n = self.n();
        if distances.len() != n * n {
            return Err(Error::Shape(format!(
                "{n} regions need {} distances",
                n * n
            )));
        }
        if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Domain(
                "distances must be finite and non-negative".into(),
            ));
        }
        self.distances = distances;
        Ok(self)
    }

    /// Reorders regions so new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ConditionSet {
        let (n, c) = (self.n(), self.cols());
        let mut x = Vec::with_capacity(n * c);
        for &p in perm {
            x.extend_from_slice(self.row(p));
        }
        let mut distances = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                distances[i * n + j] = self.distances[perm[i] * n + perm[j]];
            }
        }
        ConditionSet {
            region_ids: perm.iter().map(|&p| self.region_ids[p].clone()).collect(),
            x,
            stats: self.stats.clone(),
            distances,
        }
    }
}

/// Unstandardized `[E, log1p(P)]` rows.
pub fn raw_rows(features: &[RegionFeature]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Validation("no region features".into()))?;
    let d = first.embedding.len();
    let mut rows = Vec::with_capacity(features.len() * (d + 1));
    for f in features {
        f.validate()?;
        if f.embedding.len() != d {
            return Err(Error::Validation(format!(
                "embedding of `{}` has dimension {}, expected {d}",
                f.region_id,
                f.embedding.len()
            )));
        }
        rows.extend_from_slice(&f.embedding);
        rows.push(f.population.ln_1p());
    }
    Ok(rows)
}

/// Standardizes with statistics fitted on these features alone.
pub fn build_conditions(features: &[RegionFeature]) -> Result<ConditionSet> {
    let rows = raw_rows(features)?;
    let stats = FeatureStats::fit(&rows, features[0].embedding.len() + 1)?;
    assemble(features, rows, stats)
}

/// Standardizes with previously fitted (e.g. training-corpus) statistics.
pub fn build_conditions_with(
    features: &[RegionFeature],
    stats: &FeatureStats,
) -> Result<ConditionSet> {
    let rows = raw_rows(features)?;
    if rows.len() / features.len() != stats.cols() {
        return Err(Error::Validation(format!(
            "features have {} columns, statistics expect {}",
            rows.len() / features.len(),
            stats.cols()
        )));
    }
    assemble(features, rows, stats.clone())
}

/// Fits one set of statistics over every region of every city, then
/// standardizes each city with it.
pub fn build_corpus_conditions(
    cities: &[&[RegionFeature]],
) -> Result<(FeatureStats, Vec<ConditionSet>)> {
    let mut all = Vec::new();
    let mut cols = None;
    for c in cities {
        let rows = raw_rows(c)?;
        let w = rows.len() / c.len();
        if *cols.get_or_insert(w) != w {
            return Err(Error::Validation(
                "cities disagree on embedding dimension".into(),
            ));
        }
        all.extend(rows);
    }
    let stats = FeatureStats::fit(
        &all,
        cols.ok_or_else(|| Error::Validation("empty corpus".into()))?,
    )?;
    let sets = cities
        .iter()
        .map(|c| build_conditions_with(c, &stats))
        .collect::<Result<_>>()?;
    Ok((stats, sets))
}

fn assemble(
    features: &[RegionFeature],
    mut rows: Vec<f64>,
    stats: FeatureStats,
) -> Result<ConditionSet> {
    stats.apply(&mut rows)?;
    let n = features.len();
    Ok(ConditionSet {
        region_ids: features.iter().map(|f| f.region_id.clone()).collect(),
        x: rows,
        stats,
        distances: vec![0.0; n * n],
    })
}

/// What a provider sees for one region.
pub struct RegionInput<'a> {
    pub region_id: &'a str,
    pub image: Option<(&'a RasterImage, &'a RegionMask)>,
}

/// Deterministic source of fixed-dimension region embeddings.
pub trait FeatureProvider {
    fn dim(&self) -> usize;
    fn embed(&self, input: &RegionInput<'_>) -> Result<Vec<f64>>;
}

/// Hand-crafted image statistics, see [`toy_extract`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyProvider;

impl FeatureProvider for ToyProvider {
    fn dim(&self) -> usize {
        TOY_DIM
    }

    fn embed(&self, input: &RegionInput<'_>) -> Result<Vec<f64>> {
        let (img, mask) = input.image.ok_or_else(|| {
            Error::Usage(format!(
                "toy features for `{}` need an image",
                input.region_id
            ))
        })?;
        toy_extract(img, mask)
    }
}

/// Embeddings computed elsewhere and loaded from a file.
#[derive(Debug, Clone)]
pub struct FileProvider {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl FileProvider {
    pub fn new(table: BTreeMap<String, Vec<f64>>) -> Self {
        let dim = table.values().next().map_or(0, Vec::len);
        FileProvider { dim, table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(load_embeddings(path)?))
    }
}

impl FeatureProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, input: &RegionInput<'_>) -> Result<Vec<f64>> {
        self.table.get(input.region_id).cloned().ok_or_else(|| {
            Error::Validation(format!("no embedding for region `{}`", input.region_id))
        })
    }
}

const MAX_CH: usize = 4;
const HIST_BINS: usize = 32;
const EDGE_THRESHOLDS: [f64; 3] = [0.05, 0.1, 0.2];
const QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

/// 64 image statistics over in-mask pixels.
///
/// Layout: channel means (4) and variances (4), padded with zeros past the
/// image's channel count; a 32-bin intensity histogram; fill ratio; mean
/// gradient magnitude and three edge-density levels; five intensity
/// quantiles; a 3-bin histogram per channel (12); intensity min and max.
/// Intensity is the channel mean. Gradients only use pixel pairs that are
/// both inside the mask.
pub fn toy_extract(img: &RasterImage, mask: &RegionMask) -> Result<Vec<f64>> {
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            img.width, img.height, mask.width, mask.height
        )));
    }
    let inside: Vec<usize> = (0..mask.bits.len())
        .filter(|&k| mask.bits[k] == 1)
        .collect();
    if inside.is_empty() {
        return Err(Error::Domain("mask selects no pixels".into()));
    }
    let ch = img.channels;
    let used = ch.min(MAX_CH);
    let n = inside.len() as f64;
    let sample = |k: usize, c: usize| img.pixels[k * ch + c] as f64;
    let intensity = |k: usize| (0..ch).map(|c| sample(k, c)).sum::<f64>() / ch as f64;

    let mut out = Vec::with_capacity(TOY_DIM);
    let mut means = [0.0; MAX_CH];
    let mut vars = [0.0; MAX_CH];
    for c in 0..used {
        means[c] = inside.iter().map(|&k| sample(k, c)).sum::<f64>() / n;
        vars[c] = inside
            .iter()
            .map(|&k| (sample(k, c) - means[c]).powi(2))
            .sum::<f64>()
            / n;
    }
    out.extend_from_slice(&means);
    out.extend_from_slice(&vars);

    let mut levels: Vec<f64> = inside.iter().map(|&k| intensity(k)).collect();
    let mut hist = [0.0; HIST_BINS];
    for &v in &levels {
        hist[bin(v, HIST_BINS)] += 1.0;
    }
    out.extend(hist.iter().map(|h| h / n));
    out.push(n / mask.bits.len() as f64);

    let mut grads = Vec::new();
    for &k in &inside {
        let (col, row) = (k % img.width, k / img.width);
        let right =
            (col + 1 < img.width && mask.bits[k + 1] == 1).then(|| intensity(k + 1) - intensity(k));
        let down = (row + 1 < img.height && mask.bits[k + img.width] == 1)
            .then(|| intensity(k + img.width) - intensity(k));
        if right.is_some() || down.is_some() {
            grads.push((right.unwrap_or(0.0).powi(2) + down.unwrap_or(0.0).powi(2)).sqrt());
        }
    }
    let ng = grads.len().max(1) as f64;
    out.push(grads.iter().sum::<f64>() / ng);
    for t in EDGE_THRESHOLDS {
        out.push(grads.iter().filter(|&&g| g > t).count() as f64 / ng);
    }

    levels.sort_by(f64::total_cmp);
    for q in QUANTILES {
        out.push(levels[((levels.len() - 1) as f64 * q).round() as usize]);
    }
    for c in 0..MAX_CH {
        let mut h = [0.0; 3];
        if c < used {
            for &k in &inside {
                h[bin(sample(k, c), 3)] += 1.0;
            }
        }
        out.extend(h.iter().map(|v| v / n));
    }
    out.push(levels[0]);
    out.push(levels[levels.len() - 1]);
    debug_assert_eq!(out.len(), TOY_DIM);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "image has non-finite pixels inside the mask".into(),
        ));
    }
    Ok(out)
}

fn bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Reads ODEMB1 (detected by magic) or CSV `region_id,e0,..`.
pub fn load_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EMB_MAGIC) {
        decode_embeddings(&bytes, path)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::format(path, None, "neither ODEMB1 nor UTF-8 CSV"))?;
        parse_embedding_csv(&text, path)
    }
}

fn insert_record(
    map: &mut BTreeMap<String, Vec<f64>>,
    dim: &mut Option<usize>,
    id: String,
    emb: Vec<f64>,
    path: &Path,
    line: Option<usize>,
) -> Result<()> {
    match *dim {
        Some(d) if d != emb.len() => {
            return Err(Error::format(
                path,
                line,
                format!(
                    "embedding of `{id}` has dimension {}, expected {d}",
                    emb.len()
                ),
            ))
        }
        _ => *dim = Some(emb.len()),
    }
    if map.contains_key(&id) {
        return Err(Error::format(
            path,
            line,
            format!("duplicate region id `{id}`"),
        ));
    }
    map.insert(id, emb);
    Ok(())
}

fn parse_embedding_csv(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut map = BTreeMap::new();
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(map);
    };
    let cols = header.split(',').count();
    if header.split(',').next().map(str::trim) != Some("region_id") {
        return Err(Error::format(
            path,
            Some(1),
            "header must start with `region_id`",
        ));
    }
    let mut dim = Some(cols - 1);
    for (ln, line) in lines {
        let mut fields = line.split(',').map(str::trim);
        let id = fields.next().unwrap_or_default().to_string();
        let emb = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| Error::format(path, Some(ln + 1), "unparseable embedding value"))?;
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                Some(ln + 1),
                "non-finite embedding value",
            ));
        }
        insert_record(&mut map, &mut dim, id, emb, path, Some(ln + 1))?;
    }
    Ok(map)
}

fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let truncated = || Error::format(path, None, "truncated ODEMB1 file");
    let mut pos = EMB_MAGIC.len();
    let mut take = |k: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + k).ok_or_else(truncated)?;
        pos += k;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let n = u32_at(take(4)?);
    let d = u32_at(take(4)?);
    let mut map = BTreeMap::new();
    let mut dim = Some(d);
    for _ in 0..n {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::format(path, None, "region id is not UTF-8"))?
            .to_string();
        let raw = take(d * 4)?;
        let emb: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                None,
                format!("non-finite embedding for `{id}`"),
            ));
        }
        insert_record(&mut map, &mut dim, id, emb, path, None)?;
    }
    if pos != bytes.len() {
        return Err(Error::format(
            path,
            None,
            "trailing bytes after ODEMB1 records",
        ));
    }
    Ok(map)
}

pub fn encode_embeddings(table: &BTreeMap<String, Vec<f64>>) -> Result<Vec<u8>> {
    let d = table.values().next().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(14 + table.len() * (d * 4 + 8));
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for (id, emb) in table {
        if emb.len() != d {
            return Err(Error::Validation(format!(
                "embedding of `{id}` has dimension {}, expected {d}",
                emb.len()
            )));
        }
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Validation(format!("region id `{id}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in emb {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, table: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    fs::write(path, encode_embeddings(table)?).map_err(|e| Error::io(path, e))
}
