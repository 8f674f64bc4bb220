//! Web-Mercator slippy tiles, region polygons, and the raster/mask pipeline
//! that turns tiles into per-region masked imagery.

mod polygon;
mod raster;
mod store;

pub use polygon::{Polygon, RegionBoundary};
pub use raster::{
    apply_mask, decode_raw, encode_raw, rasterize_mask, read_tile_file, read_tile_raw, stitch,
    write_tile_png, write_tile_raw, RasterGeo, RasterImage, RegionMask, TILE_RAW_MAGIC,
};
pub use store::{
    find_tile, load_tiles, read_region_raster, region_raster, region_raster_paths, tile_path,
    write_region_raster, write_tile, TILE_EXTENSIONS,
};

use std::collections::BTreeSet;
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const TILE_SIZE: u32 = 256;
/// Latitude limit of the square Web-Mercator world.
pub const MAX_LAT: f64 = 85.051_128_779_806_6;
pub const DEFAULT_ZOOM: u8 = 15;
pub const MAX_ZOOM: u8 = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    /// Validates latitude and wraps longitude into `[-180, 180)`.
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite coordinate ({lon}, {lat})"
            )));
        }
        if lat.abs() > MAX_LAT {
            return Err(Error::Domain(format!(
                "latitude {lat} outside the Web-Mercator band ±{MAX_LAT}"
            )));
        }
        let lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
        Ok(GeoPoint { lon, lat })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileCoord {
    pub z: u8,
    pub x: u32,
    pub y: u32,
}

impl TileCoord {
    pub fn new(z: u8, x: u32, y: u32) -> Result<Self> {
        check_zoom(z)?;
        let n = 1u64 << z;
        if x as u64 >= n || y as u64 >= n {
            return Err(Error::Domain(format!(
                "tile ({z}, {x}, {y}) outside the 2^{z} grid"
            )));
        }
        Ok(TileCoord { z, x, y })
    }

    /// The four tiles one zoom level down.
    pub fn children(&self) -> [TileCoord; 4] {
        let (z, x, y) = (self.z + 1, self.x * 2, self.y * 2);
        [
            TileCoord { z, x, y },
            TileCoord { z, x: x + 1, y },
            TileCoord { z, x, y: y + 1 },
            TileCoord {
                z,
                x: x + 1,
                y: y + 1,
            },
        ]
    }

    /// North-west corner.
    pub fn origin(&self) -> GeoPoint {
        pixel_to_lonlat(
            self.x as f64 * TILE_SIZE as f64,
            self.y as f64 * TILE_SIZE as f64,
            self.z,
        )
    }
}

fn check_zoom(z: u8) -> Result<()> {
    if z > MAX_ZOOM {
        return Err(Error::Domain(format!("zoom {z} above maximum {MAX_ZOOM}")));
    }
    Ok(())
}

/// Global pixel coordinates (fractional) of a point at zoom `z`.
pub fn lonlat_to_pixel(p: GeoPoint, z: u8) -> (f64, f64) {
    let world = TILE_SIZE as f64 * (1u64 << z) as f64;
    let phi = p.lat.to_radians();
    let x = (p.lon + 180.0) / 360.0 * world;
    let y = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0 * world;
    (x, y)
}

pub fn pixel_to_lonlat(px: f64, py: f64, z: u8) -> GeoPoint {
    let world = TILE_SIZE as f64 * (1u64 << z) as f64;
    let lon = px / world * 360.0 - 180.0;
    let lat = (PI * (1.0 - 2.0 * py / world)).sinh().atan().to_degrees();
    GeoPoint { lon, lat }
}

pub fn lonlat_to_tile(p: GeoPoint, z: u8) -> Result<TileCoord> {
    check_zoom(z)?;
    if p.lat.abs() > MAX_LAT || !p.lat.is_finite() || !p.lon.is_finite() {
        return Err(Error::Domain(format!(
            "latitude {} outside the Web-Mercator band",
            p.lat
        )));
    }
    let n = 1u64 << z;
    let (px, py) = lonlat_to_pixel(p, z);
    let clamp = |v: f64| ((v / TILE_SIZE as f64).floor().max(0.0) as u64).min(n - 1) as u32;
    Ok(TileCoord {
        z,
        x: clamp(px),
        y: clamp(py),
    })
}

/// Tiles touched by the region's polygon(s).
pub fn region_tiles(r: &RegionBoundary, z: u8) -> Result<BTreeSet<TileCoord>> {
    check_zoom(z)?;
    if r.projected_area(z) <= 0.0 {
        return Err(Error::Domain(format!(
            "region `{}` has zero area",
            r.region_id
        )));
    }
    let rings = r.projected_rings(z);
    let ts = TILE_SIZE as f64;
    let mut out = BTreeSet::new();
    for part in &rings {
        let (min_x, min_y, max_x, max_y) = polygon::bbox(&part[0]);
        let n = (1u64 << z) as f64;
        let tx0 = (min_x / ts).floor().clamp(0.0, n - 1.0) as u32;
        let tx1 = (max_x / ts).floor().clamp(0.0, n - 1.0) as u32;
        let ty0 = (min_y / ts).floor().clamp(0.0, n - 1.0) as u32;
        let ty1 = (max_y / ts).floor().clamp(0.0, n - 1.0) as u32;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                let square = (
                    tx as f64 * ts,
                    ty as f64 * ts,
                    (tx + 1) as f64 * ts,
                    (ty + 1) as f64 * ts,
                );
                if polygon::rect_intersects(square, part) {
                    out.insert(TileCoord { z, x: tx, y: ty });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Domain(format!(
            "region `{}` touches no tiles",
            r.region_id
        )));
    }
    Ok(out)
}

/// Inclusive tile-index rectangle at one zoom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRect {
    pub z: u8,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl TileRect {
    pub fn covering<'a>(tiles: impl IntoIterator<Item = &'a TileCoord>) -> Option<TileRect> {
        let mut it = tiles.into_iter();
        let first = it.next()?;
        let mut r = TileRect {
            z: first.z,
            x_min: first.x,
            y_min: first.y,
            x_max: first.x,
            y_max: first.y,
        };
        for t in it {
            r.x_min = r.x_min.min(t.x);
            r.y_min = r.y_min.min(t.y);
            r.x_max = r.x_max.max(t.x);
            r.y_max = r.y_max.max(t.y);
        }
        Some(r)
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn tiles(&self) -> impl Iterator<Item = TileCoord> + '_ {
        (self.y_min..=self.y_max).flat_map(move |y| {
            (self.x_min..=self.x_max).map(move |x| TileCoord { z: self.z, x, y })
        })
    }

    pub fn geo(&self) -> RasterGeo {
        RasterGeo {
            z: self.z,
            origin_x: self.x_min,
            origin_y: self.y_min,
        }
    }
}
