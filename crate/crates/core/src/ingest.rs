//! Readers and writers for city inputs: boundary GeoJSON, population CSV,
//! embeddings and OD CSV. Regions are always ordered by `region_id`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::features::{
    build_conditions_with, load_embeddings, ConditionSet, FeatureStats, RegionFeature,
};
use crate::od::ODMatrix;
use crate::physical::{distance_matrix, RegionGeo};
use crate::tilegrid::{GeoPoint, Polygon, RegionBoundary};

/// Everything known about one city, rows in lexicographic `region_id` order.
#[derive(Debug, Clone, PartialEq)]
pub struct CityBundle {
    pub region_ids: Vec<String>,
    pub boundaries: Vec<RegionBoundary>,
    pub geos: Vec<RegionGeo>,
    /// Empty when no embeddings were given.
    pub features: Vec<RegionFeature>,
    pub od: Option<ODMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OdFormat {
    /// `origin_id,dest_id,flow`, zero flows omitted.
    #[default]
    Edges,
    /// Header `origin_id,<id>...`, then one row per origin.
    Dense,
}

impl std::str::FromStr for OdFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edges" => Ok(OdFormat::Edges),
            "dense" => Ok(OdFormat::Dense),
            _ => Err(Error::Usage(format!(
                "unknown OD format `{s}` (edges|dense)"
            ))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-blank lines with their 1-based line numbers.
fn csv_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
}

fn expect_header(path: &Path, line: Option<(usize, Vec<&str>)>, want: &[&str]) -> Result<()> {
    match line {
        Some((_, h)) if h == want => Ok(()),
        Some((ln, h)) => Err(Error::format(
            path,
            Some(ln),
            format!(
                "expected header `{}`, found `{}`",
                want.join(","),
                h.join(",")
            ),
        )),
        None => Err(Error::format(
            path,
            None,
            format!("empty file, expected header `{}`", want.join(",")),
        )),
    }
}

/// Plain decimal number: digits, one optional point, optional exponent.
/// Rejects `inf`, `nan`, thousands separators and locale decimal commas.
fn parse_number(path: &Path, ln: usize, field: &str, what: &str) -> Result<f64> {
    let ok = !field.is_empty()
        && field
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'));
    match field.parse::<f64>() {
        Ok(v) if ok && v.is_finite() => Ok(v),
        _ => Err(Error::format(
            path,
            Some(ln),
            format!("bad {what} `{field}`"),
        )),
    }
}

fn check_id(path: &Path, line: Option<usize>, id: &str) -> Result<()> {
    if id.is_empty() || id.trim() != id || id.contains([',', '\n', '\r', '"']) {
        return Err(Error::format(
            path,
            line,
            format!("invalid region id `{id}`"),
        ));
    }
    Ok(())
}

/// Boundaries plus any `population` properties, sorted by id.
pub fn read_boundaries(path: &Path) -> Result<(Vec<RegionBoundary>, BTreeMap<String, f64>)> {
    let text = read_text(path)?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, Some(e.line()), format!("invalid JSON: {e}")))?;
    let bad = |msg: String| Error::format(path, None, msg);
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(bad("top level must be a GeoJSON FeatureCollection".into()));
    }
    let feats = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("FeatureCollection has no `features` array".into()))?;
    let mut regions = BTreeMap::new();
    let mut pops = BTreeMap::new();
    for (k, f) in feats.iter().enumerate() {
        let props = f.get("properties");
        let id = props
            .and_then(|p| p.get("region_id"))
            .and_then(Value::as_str)
            .ok_or_else(|| bad(format!("feature {k} lacks a string `region_id` property")))?
            .to_string();
        check_id(path, None, &id)?;
        let geom = f
            .get("geometry")
            .ok_or_else(|| bad(format!("region `{id}` has no geometry")))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| bad(format!("region `{id}` geometry has no coordinates")))?;
        let parts = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => {
                vec![polygon(coords).map_err(|m| bad(format!("region `{id}`: {m}")))?]
            }
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| {
                    bad(format!(
                        "region `{id}`: MultiPolygon coordinates must be an array"
                    ))
                })?
                .iter()
                .map(polygon)
                .collect::<std::result::Result<_, _>>()
                .map_err(|m| bad(format!("region `{id}`: {m}")))?,
            other => {
                return Err(bad(format!(
                    "region `{id}`: geometry type {other:?} is not Polygon or MultiPolygon"
                )))
            }
        };
        let boundary = RegionBoundary::new(id.clone(), parts).map_err(|e| bad(e.to_string()))?;
        if let Some(p) = props
            .and_then(|p| p.get("population"))
            .filter(|p| !p.is_null())
        {
            let v = p
                .as_f64()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("region `{id}`: population must be a number")))?;
            if v < 0.0 {
                return Err(bad(format!("region `{id}`: negative population {v}")));
            }
            pops.insert(id.clone(), v);
        }
        if regions.insert(id.clone(), boundary).is_some() {
            return Err(bad(format!("duplicate region id `{id}`")));
        }
    }
    if regions.is_empty() {
        return Err(bad("no regions".into()));
    }
    Ok((regions.into_values().collect(), pops))
}

fn polygon(coords: &Value) -> std::result::Result<Polygon, String> {
    let rings = coords
        .as_array()
        .ok_or("polygon coordinates must be an array of rings")?;
    let mut rings = rings.iter().map(ring);
    let exterior = rings.next().ok_or("polygon has no rings")??;
    let holes = rings.collect::<std::result::Result<_, _>>()?;
    Ok(Polygon { exterior, holes })
}

fn ring(v: &Value) -> std::result::Result<Vec<GeoPoint>, String> {
    v.as_array()
        .ok_or("ring must be an array of positions")?
        .iter()
        .map(|p| {
            let xy = p
                .as_array()
                .filter(|a| a.len() >= 2)
                .ok_or("position must be [lon, lat]")?;
            match (xy[0].as_f64(), xy[1].as_f64()) {
                (Some(lon), Some(lat)) => GeoPoint::new(lon, lat).map_err(|e| e.to_string()),
                _ => Err("position must be numeric".to_string()),
            }
        })
        .collect()
}

pub fn write_boundaries(
    path: &Path,
    boundaries: &[RegionBoundary],
    populations: Option<&[f64]>,
) -> Result<()> {
    let ring =
        |r: &[GeoPoint]| Value::from(r.iter().map(|p| json!([p.lon, p.lat])).collect::<Vec<_>>());
    let feats: Vec<Value> = boundaries
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let polys: Vec<Value> = b
                .parts
                .iter()
                .map(|p| {
                    let mut rs = vec![ring(&p.exterior)];
                    rs.extend(p.holes.iter().map(|h| ring(h)));
                    Value::from(rs)
                })
                .collect();
            let geometry = if polys.len() == 1 {
                json!({"type": "Polygon", "coordinates": polys[0]})
            } else {
                json!({"type": "MultiPolygon", "coordinates": polys})
            };
            let mut props = json!({"region_id": b.region_id});
            if let Some(p) = populations {
                props["population"] = json!(p[i]);
            }
            json!({"type": "Feature", "properties": props, "geometry": geometry})
        })
        .collect();
    let doc = json!({"type": "FeatureCollection", "features": feats});
    let text = serde_json::to_string_pretty(&doc).expect("JSON values always serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `region_id,population` CSV.
pub fn read_populations(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = read_text(path)?;
    let mut lines = csv_lines(&text);
    expect_header(path, lines.next(), &["region_id", "population"])?;
    let mut out = BTreeMap::new();
    for (ln, f) in lines {
        if f.len() != 2 {
            return Err(Error::format(
                path,
                Some(ln),
                format!("expected 2 fields, found {}", f.len()),
            ));
        }
        check_id(path, Some(ln), f[0])?;
        let v = parse_number(path, ln, f[1], "population")?;
        if v < 0.0 {
            return Err(Error::format(
                path,
                Some(ln),
                format!("negative population {v} for `{}`", f[0]),
            ));
        }
        if out.insert(f[0].to_string(), v).is_some() {
            return Err(Error::format(
                path,
                Some(ln),
                format!("duplicate region id `{}`", f[0]),
            ));
        }
    }
    Ok(out)
}

pub fn write_populations(path: &Path, ids: &[String], pops: &[f64]) -> Result<()> {
    let mut s = String::from("region_id,population\n");
    for (id, p) in ids.iter().zip(pops) {
        writeln!(s, "{id},{p}").unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads either OD layout, detected from the header. Edge files need the
/// region list; without one, the sorted ids appearing in the file are used.
pub fn read_od(path: &Path, region_ids: Option<&[String]>) -> Result<ODMatrix> {
    let text = read_text(path)?;
    let mut lines = csv_lines(&text);
    let Some((hl, header)) = lines.next() else {
        return Err(Error::format(path, None, "empty OD file"));
    };
    if header == ["origin_id", "dest_id", "flow"] {
        let rows: Vec<(usize, Vec<&str>)> = lines.collect();
        let ids: Vec<String> = match region_ids {
            Some(ids) => ids.to_vec(),
            None => rows
                .iter()
                .flat_map(|(_, f)| f.iter().take(2).map(|s| s.to_string()))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let index: BTreeMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let n = ids.len();
        let mut flows = vec![0.0; n * n];
        let mut seen = BTreeSet::new();
        for (ln, f) in rows {
            if f.len() != 3 {
                return Err(Error::format(
                    path,
                    Some(ln),
                    format!("expected 3 fields, found {}", f.len()),
                ));
            }
            let lookup = |id: &str| {
                index.get(id).copied().ok_or_else(|| {
                    Error::format(path, Some(ln), format!("unknown region id `{id}`"))
                })
            };
            let (i, j) = (lookup(f[0])?, lookup(f[1])?);
            let v = parse_number(path, ln, f[2], "flow")?;
            if v < 0.0 {
                return Err(Error::format(path, Some(ln), format!("negative flow {v}")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::format(
                    path,
                    Some(ln),
                    format!("duplicate pair `{}` -> `{}`", f[0], f[1]),
                ));
            }
            flows[i * n + j] = v;
        }
        ODMatrix::new(ids, flows)
    } else if header.first() == Some(&"origin_id") {
        let ids: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
        for id in &ids {
            check_id(path, Some(hl), id)?;
        }
        let n = ids.len();
        let mut flows = Vec::with_capacity(n * n);
        let mut count = 0;
        for (ln, f) in lines {
            if f.len() != n + 1 {
                return Err(Error::format(
                    path,
                    Some(ln),
                    format!("expected {} fields, found {}", n + 1, f.len()),
                ));
            }
            if count >= n || f[0] != ids[count] {
                return Err(Error::format(
                    path,
                    Some(ln),
                    format!("row `{}` out of order; rows must follow the header", f[0]),
                ));
            }
            for v in &f[1..] {
                let v = parse_number(path, ln, v, "flow")?;
                if v < 0.0 {
                    return Err(Error::format(path, Some(ln), format!("negative flow {v}")));
                }
                flows.push(v);
            }
            count += 1;
        }
        if count != n {
            return Err(Error::format(
                path,
                None,
                format!("{count} rows for {n} regions"),
            ));
        }
        let m = ODMatrix::new(ids, flows)?;
        if let Some(want) = region_ids {
            if m.region_ids() != want {
                return Err(Error::format(
                    path,
                    Some(hl),
                    "region ids differ from the expected set",
                ));
            }
        }
        Ok(m)
    } else {
        Err(Error::format(
            path,
            Some(hl),
            "header must be `origin_id,dest_id,flow` or `origin_id,<region ids>`",
        ))
    }
}

pub fn write_od(m: &ODMatrix, path: &Path, format: OdFormat) -> Result<()> {
    let ids = m.region_ids();
    let n = m.n();
    let mut s = String::new();
    match format {
        OdFormat::Edges => {
            s.push_str("origin_id,dest_id,flow\n");
            for i in 0..n {
                for j in 0..n {
                    let v = m.flow(i, j);
                    if v != 0.0 {
                        writeln!(s, "{},{},{v}", ids[i], ids[j]).unwrap();
                    }
                }
            }
        }
        OdFormat::Dense => {
            writeln!(s, "origin_id,{}", ids.join(",")).unwrap();
            for i in 0..n {
                s.push_str(&ids[i]);
                for j in 0..n {
                    write!(s, ",{}", m.flow(i, j)).unwrap();
                }
                s.push('\n');
            }
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn missing_error(what: &str, ids: &[&String]) -> Error {
    let list: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    Error::Validation(format!("{what}: {}", list.join(", ")))
}

/// Loads and cross-validates one city's inputs.
pub fn load_city(
    boundary_path: &Path,
    population_path: Option<&Path>,
    embeddings_path: Option<&Path>,
    od_path: Option<&Path>,
) -> Result<CityBundle> {
    let (boundaries, mut pops) = read_boundaries(boundary_path)?;
    let region_ids: Vec<String> = boundaries.iter().map(|b| b.region_id.clone()).collect();
    let known: BTreeSet<&String> = region_ids.iter().collect();

    if let Some(p) = population_path {
        let csv = read_populations(p)?;
        let unknown: Vec<&String> = csv.keys().filter(|k| !known.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(missing_error(
                &format!(
                    "{}: populations for regions without boundaries",
                    p.display()
                ),
                &unknown,
            ));
        }
        for (id, v) in csv {
            if let Some(old) = pops.insert(id.clone(), v) {
                if old != v {
                    warn!("population of `{id}`: CSV value {v} overrides GeoJSON value {old}");
                }
            }
        }
    }
    let missing: Vec<&String> = region_ids
        .iter()
        .filter(|id| !pops.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        return Err(missing_error("regions without a population", &missing));
    }

    let geos: Vec<RegionGeo> = boundaries
        .iter()
        .map(|b| RegionGeo {
            region_id: b.region_id.clone(),
            centroid: b.centroid(),
            population: pops[&b.region_id],
        })
        .collect();

    let features = match embeddings_path {
        None => Vec::new(),
        Some(p) => {
            let mut table = load_embeddings(p)?;
            let unknown: Vec<&String> = table.keys().filter(|k| !known.contains(k)).collect();
            if !unknown.is_empty() {
                return Err(missing_error(
                    &format!("{}: embeddings for regions without boundaries", p.display()),
                    &unknown,
                ));
            }
            let missing: Vec<&String> = region_ids
                .iter()
                .filter(|id| !table.contains_key(*id))
                .collect();
            if !missing.is_empty() {
                return Err(missing_error(
                    &format!("{}: regions without an embedding", p.display()),
                    &missing,
                ));
            }
            geos.iter()
                .map(|g| RegionFeature {
                    region_id: g.region_id.clone(),
                    embedding: table.remove(&g.region_id).unwrap(),
                    population: g.population,
                })
                .collect()
        }
    };

    let od = match od_path {
        None => None,
        Some(p) => {
            let m = read_od(p, Some(&region_ids))?;
            if !m.is_integral() {
                return Err(Error::format(p, None, "reference flows must be integers"));
            }
            Some(m)
        }
    };

    Ok(CityBundle {
        region_ids,
        boundaries,
        geos,
        features,
        od,
    })
}

/// File names inside one city directory.
pub mod layout {
    pub const BOUNDARIES: &str = "boundaries.geojson";
    pub const POPULATION: &str = "population.csv";
    pub const EMBEDDINGS: &str = "embeddings.emb";
    pub const OD: &str = "od.csv";
    pub const TILES: &str = "tiles";
}

/// Loads a city directory in [`layout`]; files other than the boundaries
/// are optional.
pub fn load_city_dir(dir: &Path) -> Result<CityBundle> {
    let opt = |name: &str| Some(dir.join(name)).filter(|p| p.is_file());
    let boundaries = dir.join(layout::BOUNDARIES);
    if !boundaries.is_file() {
        return Err(Error::Validation(format!(
            "{} is not a city directory (no {})",
            dir.display(),
            layout::BOUNDARIES
        )));
    }
    load_city(
        &boundaries,
        opt(layout::POPULATION).as_deref(),
        opt(layout::EMBEDDINGS).as_deref(),
        opt(layout::OD).as_deref(),
    )
}

/// Sub-directories of `corpus` holding a boundary file, sorted by name.
pub fn list_city_dirs(corpus: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(corpus).map_err(|e| Error::io(corpus, e))? {
        let p = entry.map_err(|e| Error::io(corpus, e))?.path();
        if p.join(layout::BOUNDARIES).is_file() {
            let name = p.file_name().and_then(|n| n.to_str()).map(str::to_owned);
            let name = name.ok_or_else(|| {
                Error::Validation(format!("non-UTF-8 city directory {}", p.display()))
            })?;
            out.push((name, p));
        }
    }
    out.sort();
    Ok(out)
}

impl CityBundle {
    /// Condition set standardized with `stats`, with centroid distances.
    pub fn conditions(&self, stats: &FeatureStats) -> Result<ConditionSet> {
        if self.features.is_empty() {
            return Err(Error::Validation("city has no embeddings".into()));
        }
        build_conditions_with(&self.features, stats)?.with_distances(distance_matrix(&self.geos))
    }
}
