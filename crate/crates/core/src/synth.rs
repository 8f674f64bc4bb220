//! Synthetic cities with known ground truth.
//!
//! Each region has a latent vector `z ~ N(0, I_k)`. Two fixed orthogonal
//! directions of latent space give productiveness (which sets population,
//! log-normally) and attractiveness `a = exp(w · u_a·z)`. Flows follow
//!
//! ```text
//! F_ij = round(λ · pop_i^γ · a_j · exp(−d_ij / d0) · η_ij),   η ~ LogNormal(0, noise²)
//! ```
//!
//! and embeddings are `W z + small noise` with one random `W` per corpus.
//! Regions are square cells on a jittered grid.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::features::{write_embeddings, RegionFeature};
use crate::ingest::{write_boundaries, write_od, write_populations, OdFormat};
use crate::od::ODMatrix;
use crate::physical::{distance_matrix, RegionGeo};
use crate::rng::substream;
use crate::tilegrid::{
    pixel_to_lonlat, region_tiles, write_tile, RasterGeo, RasterImage, RegionBoundary, TileCoord,
    TILE_SIZE,
};

const KM_PER_DEG_LAT: f64 = 111.32;

/// Corpus settings, read from a flat TOML file. Every key is optional.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cities: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Latent dimension k.
    pub latent_dim: usize,
    /// Embedding dimension D.
    pub feature_dim: usize,
    pub seed: u64,
    /// Standard deviation of the log flow noise.
    pub noise: f64,
    pub embedding_noise: f64,
    /// Scale of attractiveness in log space; 0 makes every region equally attractive.
    pub attractiveness_weight: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub d0_km: f64,
    pub cell_km: f64,
    pub pop_median: f64,
    pub pop_log_sd: f64,
    /// Zoom of rendered tiles.
    pub tile_zoom: u8,
    pub tile_format: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cities: 50,
            n_min: 15,
            n_max: 30,
            latent_dim: 4,
            feature_dim: 16,
            seed: 0,
            noise: 0.2,
            embedding_noise: 0.1,
            attractiveness_weight: 1.0,
            lambda: 0.05,
            gamma: 1.0,
            d0_km: 2.0,
            cell_km: 1.2,
            pop_median: 3000.0,
            pop_log_sd: 0.6,
            tile_zoom: 14,
            tile_format: "png".into(),
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: SynthConfig = crate::error::parse_toml(text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.n_min < 2 || self.n_min > self.n_max || self.n_max > 999 {
            return bad(format!(
                "need 2 <= n_min <= n_max <= 999, got {}..{}",
                self.n_min, self.n_max
            ));
        }
        if self.latent_dim < 2 || self.latent_dim > self.feature_dim {
            return bad(format!(
                "need 2 <= latent_dim <= feature_dim, got {} and {}",
                self.latent_dim, self.feature_dim
            ));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("embedding_noise", self.embedding_noise),
            ("attractiveness_weight", self.attractiveness_weight),
            ("pop_log_sd", self.pop_log_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("d0_km", self.d0_km),
            ("cell_km", self.cell_km),
            ("pop_median", self.pop_median),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !matches!(self.tile_format.as_str(), "png" | "raw") {
            return bad(format!(
                "tile_format must be png or raw, got `{}`",
                self.tile_format
            ));
        }
        Ok(())
    }
}

/// Corpus-wide random structure shared by every city.
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub config: SynthConfig,
    /// D×k, row-major.
    pub w: Vec<f64>,
    pub u_attract: Vec<f64>,
    pub u_product: Vec<f64>,
    /// Latent directions that set the three tile colour channels.
    pub colour: [Vec<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCity {
    pub name: String,
    pub boundaries: Vec<RegionBoundary>,
    pub geos: Vec<RegionGeo>,
    pub features: Vec<RegionFeature>,
    pub od: ODMatrix,
    pub latents: Vec<Vec<f64>>,
    pub attractiveness: Vec<f64>,
}

impl SynthCity {
    pub fn region_ids(&self) -> Vec<String> {
        self.geos.iter().map(|g| g.region_id.clone()).collect()
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SynthModel {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.latent_dim, config.feature_dim);
        let mut rng = substream(config.seed, "synth.corpus", 0);
        let mut gauss =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
        let w: Vec<f64> = gauss(d * k)
            .into_iter()
            .map(|v: f64| v / (k as f64).sqrt())
            .collect();
        let u_attract = unit(gauss(k));
        let raw = gauss(k);
        let proj = dot(&raw, &u_attract);
        let u_product = unit(
            raw.iter()
                .zip(&u_attract)
                .map(|(r, a)| r - proj * a)
                .collect(),
        );
        let colour = [u_attract.clone(), u_product.clone(), unit(gauss(k))];
        Ok(SynthModel {
            config,
            w,
            u_attract,
            u_product,
            colour,
        })
    }

    pub fn attractiveness(&self, latent: &[f64]) -> f64 {
        (self.config.attractiveness_weight * dot(&self.u_attract, latent)).exp()
    }

    pub fn population(&self, latent: &[f64]) -> f64 {
        let c = &self.config;
        (c.pop_median.ln() + c.pop_log_sd * dot(&self.u_product, latent))
            .exp()
            .round()
    }

    /// Ground-truth flows for given latents and distances (km, row-major).
    pub fn flows<R: Rng>(&self, latents: &[Vec<f64>], dist: &[f64], rng: &mut R) -> Vec<f64> {
        let c = &self.config;
        let n = latents.len();
        let pops: Vec<f64> = latents.iter().map(|z| self.population(z)).collect();
        let attract: Vec<f64> = latents.iter().map(|z| self.attractiveness(z)).collect();
        let noise = Normal::new(0.0, c.noise).expect("validated noise level");
        let mut f = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let eta = noise.sample(rng).exp();
                let v = c.lambda
                    * pops[i].powf(c.gamma)
                    * attract[j]
                    * (-dist[i * n + j] / c.d0_km).exp()
                    * eta;
                f[i * n + j] = v.round();
            }
        }
        f
    }

    /// City `index` of the corpus; depends only on `(seed, index)`.
    pub fn city(&self, index: usize) -> Result<SynthCity> {
        let c = &self.config;
        let mut rng = substream(c.seed, "synth.city", index as u64);
        let n = rng.random_range(c.n_min..=c.n_max);
        let lat0 = rng.random_range(-50.0..60.0);
        let lon0 = rng.random_range(-120.0..120.0);
        let km_lon = KM_PER_DEG_LAT * f64::cos(f64::to_radians(lat0));
        let cols = (n as f64).sqrt().ceil() as usize;
        let side = 0.8 * c.cell_km;
        let slack = (c.cell_km - side) / 2.0;
        let mut boundaries = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        for r in 0..n {
            let (gx, gy) = ((r % cols) as f64, (r / cols) as f64);
            let x = gx * c.cell_km + rng.random_range(-slack..slack);
            let y = gy * c.cell_km + rng.random_range(-slack..slack);
            let (w, s) = (lon0 + x / km_lon, lat0 + y / KM_PER_DEG_LAT);
            let b = RegionBoundary::rectangle(
                format!("r{r:03}"),
                w,
                s,
                w + side / km_lon,
                s + side / KM_PER_DEG_LAT,
            )?;
            boundaries.push(b);
            latents.push(
                (0..c.latent_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect::<Vec<f64>>(),
            );
        }
        let geos: Vec<RegionGeo> = boundaries
            .iter()
            .zip(&latents)
            .map(|(b, z)| RegionGeo {
                region_id: b.region_id.clone(),
                centroid: b.centroid(),
                population: self.population(z),
            })
            .collect();
        let dist = distance_matrix(&geos);
        let flows = self.flows(&latents, &dist, &mut rng);
        let enoise = Normal::new(0.0, c.embedding_noise).expect("validated noise level");
        let features = geos
            .iter()
            .zip(&latents)
            .map(|(g, z)| RegionFeature {
                region_id: g.region_id.clone(),
                embedding: self
                    .w
                    .chunks(c.latent_dim)
                    .map(|row| dot(row, z) + enoise.sample(&mut rng))
                    .collect(),
                population: g.population,
            })
            .collect();
        let ids = geos.iter().map(|g| g.region_id.clone()).collect();
        Ok(SynthCity {
            name: format!("city_{index:03}"),
            attractiveness: latents.iter().map(|z| self.attractiveness(z)).collect(),
            boundaries,
            geos,
            features,
            od: ODMatrix::new(ids, flows)?,
            latents,
        })
    }

    /// Procedural imagery: each region is filled with colours set by its
    /// latent plus a stripe texture; the background is flat grey.
    pub fn render_tiles(&self, city: &SynthCity) -> Result<BTreeMap<TileCoord, RasterImage>> {
        let z = self.config.tile_zoom;
        let mut tiles = std::collections::BTreeSet::new();
        for b in &city.boundaries {
            tiles.extend(region_tiles(b, z)?);
        }
        let ts = TILE_SIZE as usize;
        let colours: Vec<[f64; 4]> = city
            .latents
            .iter()
            .map(|l| {
                // base in [0.15, 0.85] and stripe at most 0.1, so nothing clips
                let ch = |k: usize| 0.5 + 0.35 * (0.5 * dot(&self.colour[k], l)).tanh();
                [
                    ch(0),
                    ch(1),
                    ch(2),
                    0.05 * (1.0 + dot(&self.colour[2], l).tanh()),
                ]
            })
            .collect();
        // cells are axis-aligned in lon/lat, so their bounds are exact
        let cells: Vec<(f64, f64, f64, f64)> = city.boundaries.iter().map(|b| b.bounds()).collect();
        let mut out = BTreeMap::new();
        for t in tiles {
            let geo = RasterGeo {
                z,
                origin_x: t.x,
                origin_y: t.y,
            };
            let mut img = RasterImage::zeros(ts, ts, 3, geo);
            let (ox, oy) = geo.pixel_offset();
            for row in 0..ts {
                for col in 0..ts {
                    let (px, py) = (ox + col as f64 + 0.5, oy + row as f64 + 0.5);
                    let p = pixel_to_lonlat(px, py, z);
                    let hit = cells.iter().position(|&(w, s, e, n)| {
                        p.lon >= w && p.lon <= e && p.lat >= s && p.lat <= n
                    });
                    let px_val = match hit {
                        Some(r) => {
                            let [c0, c1, c2, stripe] = colours[r];
                            let s = stripe
                                * if ((px + py) as i64 / 3) % 2 == 0 {
                                    1.0
                                } else {
                                    -1.0
                                };
                            [c0 + s, c1 + s, c2 + s]
                        }
                        None => [0.5; 3],
                    };
                    for (ch, v) in px_val.iter().enumerate() {
                        img.set(col, row, ch, v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            out.insert(t, img);
        }
        Ok(out)
    }
}

/// Deterministic train/validation/test assignment by city name.
pub fn split_corpus(
    names: &[String],
    ratios: [u32; 3],
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    if names.len() < 10 {
        return Err(Error::Validation(format!(
            "need at least 10 cities to split, got {}",
            names.len()
        )));
    }
    let total: u32 = ratios.iter().sum();
    if total == 0 || ratios[0] == 0 {
        return Err(Error::Usage(
            "split ratios need a positive training share".into(),
        ));
    }
    let mut sorted = names.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(Error::Validation("duplicate city names".into()));
    }
    sorted.shuffle(&mut substream(seed, "split", 0));
    let n = sorted.len() as f64;
    let n_val = (n * ratios[1] as f64 / total as f64).round() as usize;
    let n_test = (n * ratios[2] as f64 / total as f64).round() as usize;
    let test = sorted.split_off(sorted.len() - n_test);
    let val = sorted.split_off(sorted.len() - n_val);
    Ok((sorted, val, test))
}

pub use crate::ingest::layout;

/// Writes a city in the formats `ingest` reads; tiles only when given.
pub fn write_city(
    dir: &Path,
    city: &SynthCity,
    tiles: Option<(&BTreeMap<TileCoord, RasterImage>, &str)>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pops: Vec<f64> = city.geos.iter().map(|g| g.population).collect();
    write_boundaries(&dir.join(layout::BOUNDARIES), &city.boundaries, Some(&pops))?;
    write_populations(&dir.join(layout::POPULATION), &city.region_ids(), &pops)?;
    let table: BTreeMap<String, Vec<f64>> = city
        .features
        .iter()
        .map(|f| (f.region_id.clone(), f.embedding.clone()))
        .collect();
    write_embeddings(&dir.join(layout::EMBEDDINGS), &table)?;
    write_od(&city.od, &dir.join(layout::OD), OdFormat::Edges)?;
    if let Some((tiles, format)) = tiles {
        for (t, img) in tiles {
            write_tile(&dir.join(layout::TILES), *t, img, format)?;
        }
    }
    Ok(())
}

/// Generates and writes the whole corpus; returns the city names.
pub fn write_corpus(out: &Path, config: &SynthConfig, with_tiles: bool) -> Result<Vec<String>> {
    let model = SynthModel::new(config.clone())?;
    let mut names = Vec::with_capacity(config.n_cities);
    for i in 0..config.n_cities {
        let city = model.city(i)?;
        let tiles = if with_tiles {
            Some(model.render_tiles(&city)?)
        } else {
            None
        };
        write_city(
            &out.join(&city.name),
            &city,
            tiles.as_ref().map(|t| (t, config.tile_format.as_str())),
        )?;
        names.push(city.name);
    }
    Ok(names)
}
