//! Tile directories (`{z}/{x}/{y}.png|raw`) and per-region raster files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::{
    apply_mask, rasterize_mask, read_tile_file, region_tiles, stitch, write_tile_png,
    write_tile_raw, RasterImage, RegionBoundary, RegionMask, TileCoord, TileRect,
};
use crate::error::{Error, Result};

pub const TILE_EXTENSIONS: [&str; 2] = ["png", "raw"];

pub fn tile_path(dir: &Path, t: TileCoord, ext: &str) -> PathBuf {
    dir.join(t.z.to_string())
        .join(t.x.to_string())
        .join(format!("{}.{ext}", t.y))
}

/// The cached file for `t`, PNG preferred over raw.
pub fn find_tile(dir: &Path, t: TileCoord) -> Option<PathBuf> {
    TILE_EXTENSIONS
        .iter()
        .map(|e| tile_path(dir, t, e))
        .find(|p| p.is_file())
}

/// Reads whichever of `tiles` exist under `dir`; returns them and the missing set.
pub fn load_tiles(
    dir: &Path,
    tiles: &BTreeSet<TileCoord>,
) -> Result<(BTreeMap<TileCoord, RasterImage>, BTreeSet<TileCoord>)> {
    let mut found = BTreeMap::new();
    let mut missing = BTreeSet::new();
    for &t in tiles {
        match find_tile(dir, t) {
            Some(p) => {
                found.insert(t, read_tile_file(&p)?);
            }
            None => {
                missing.insert(t);
            }
        }
    }
    Ok((found, missing))
}

pub fn write_tile(dir: &Path, t: TileCoord, img: &RasterImage, ext: &str) -> Result<()> {
    let p = tile_path(dir, t, ext);
    let parent = p.parent().expect("tile path has a parent");
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    match ext {
        "png" => write_tile_png(&p, img),
        "raw" => write_tile_raw(&p, img),
        other => Err(Error::Usage(format!(
            "unknown tile format {other:?} (expected png or raw)"
        ))),
    }
}

/// Stitches the region's covering tiles and masks them to its boundary.
/// Tiles absent from `tiles` read as zero.
pub fn region_raster(
    r: &RegionBoundary,
    tiles: &BTreeMap<TileCoord, RasterImage>,
    z: u8,
) -> Result<(RasterImage, RegionMask)> {
    let cover = region_tiles(r, z)?;
    let bbox = TileRect::covering(&cover)
        .ok_or_else(|| Error::Domain(format!("region {} covers no tiles", r.region_id)))?;
    let img = stitch(tiles, bbox)?;
    let mask = rasterize_mask(r, bbox.geo(), img.width, img.height)?;
    Ok((apply_mask(&img, &mask)?, mask))
}

/// File names of a prepared region: masked image and its mask, both `ODTILE1`.
pub fn region_raster_paths(dir: &Path, region_id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{region_id}.raw")),
        dir.join(format!("{region_id}.mask.raw")),
    )
}

pub fn write_region_raster(
    dir: &Path,
    region_id: &str,
    img: &RasterImage,
    mask: &RegionMask,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (ip, mp) = region_raster_paths(dir, region_id);
    write_tile_raw(&ip, img)?;
    let m = RasterImage::new(
        mask.width,
        mask.height,
        1,
        mask.bits.iter().map(|&b| b as f32).collect(),
        mask.geo,
    )?;
    write_tile_raw(&mp, &m)
}

pub fn read_region_raster(dir: &Path, region_id: &str) -> Result<(RasterImage, RegionMask)> {
    let (ip, mp) = region_raster_paths(dir, region_id);
    let img = read_tile_file(&ip)?;
    let m = read_tile_file(&mp)?;
    if m.channels != 1 || m.width != img.width || m.height != img.height {
        return Err(Error::format(&mp, None, "mask does not match its image"));
    }
    let mask = RegionMask {
        width: m.width,
        height: m.height,
        bits: m.pixels.iter().map(|&v| u8::from(v > 0.5)).collect(),
        geo: img.geo,
    };
    Ok((img, mask))
}
