use std::collections::BTreeMap;
use std::path::Path;

use super::polygon::Pt;
use super::{RegionBoundary, TileCoord, TileRect, TILE_SIZE};
use crate::error::{Error, Result};

/// Anchor of a raster in the tile grid: the top-left tile at zoom `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RasterGeo {
    pub z: u8,
    pub origin_x: u32,
    pub origin_y: u32,
}

impl RasterGeo {
    /// Global pixel offset of the raster's top-left corner.
    pub fn pixel_offset(&self) -> (f64, f64) {
        (
            self.origin_x as f64 * TILE_SIZE as f64,
            self.origin_y as f64 * TILE_SIZE as f64,
        )
    }
}

/// Row-major, channel-interleaved image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub geo: RasterGeo,
}

impl RasterImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<f32>,
        geo: RasterGeo,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("image needs at least one channel".into()));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            pixels,
            geo,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize, geo: RasterGeo) -> Self {
        RasterImage {
            width,
            height,
            channels,
            pixels: vec![0.0; width * height * channels],
            geo,
        }
    }

    pub fn get(&self, col: usize, row: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, col: usize, row: usize, ch: usize, v: f32) {
        self.pixels[(row * self.width + col) * self.channels + ch] = v;
    }
}

/// Binary region mask; `bits[row * width + col]` is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
    pub geo: RasterGeo,
}

impl RegionMask {
    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn complement(&self) -> RegionMask {
        RegionMask {
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
            ..self.clone()
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }
}

/// Assembles tiles into one raster covering `bbox`; absent tiles are zero.
pub fn stitch(tiles: &BTreeMap<TileCoord, RasterImage>, bbox: TileRect) -> Result<RasterImage> {
    let ts = TILE_SIZE as usize;
    let inside: Vec<(&TileCoord, &RasterImage)> = tiles
        .iter()
        .filter(|(t, _)| {
            t.z == bbox.z
                && (bbox.x_min..=bbox.x_max).contains(&t.x)
                && (bbox.y_min..=bbox.y_max).contains(&t.y)
        })
        .collect();
    let channels = inside.first().map(|(_, img)| img.channels).unwrap_or(3);
    let width = bbox.width() as usize * ts;
    let height = bbox.height() as usize * ts;
    let mut out = RasterImage::zeros(width, height, channels, bbox.geo());
    for (t, img) in inside {
        if img.channels != channels {
            return Err(Error::Format {
                path: format!("{}/{}/{}", t.z, t.x, t.y).into(),
                line: None,
                msg: format!("tile has {} channels, expected {channels}", img.channels),
            });
        }
        if img.width != ts || img.height != ts {
            return Err(Error::Format {
                path: format!("{}/{}/{}", t.z, t.x, t.y).into(),
                line: None,
                msg: format!("tile is {}x{}, expected {ts}x{ts}", img.width, img.height),
            });
        }
        let col0 = (t.x - bbox.x_min) as usize * ts;
        let row0 = (t.y - bbox.y_min) as usize * ts;
        let stride = ts * channels;
        for r in 0..ts {
            let dst = ((row0 + r) * width + col0) * channels;
            out.pixels[dst..dst + stride]
                .copy_from_slice(&img.pixels[r * stride..(r + 1) * stride]);
        }
    }
    Ok(out)
}

/// Marks pixels whose centers fall inside the region (edges inclusive,
/// holes excluded, multiple parts unioned).
pub fn rasterize_mask(
    r: &RegionBoundary,
    geo: RasterGeo,
    width: usize,
    height: usize,
) -> Result<RegionMask> {
    if width == 0 || height == 0 {
        return Err(Error::Domain("mask dimensions must be positive".into()));
    }
    let (ox, oy) = geo.pixel_offset();
    let mut bits = vec![0u8; width * height];
    for part in r.projected_rings(geo.z) {
        let rings: Vec<Vec<Pt>> = part
            .iter()
            .map(|ring| ring.iter().map(|&(x, y)| (x - ox, y - oy)).collect())
            .collect();
        fill_even_odd(&rings, width, height, &mut bits);
        mark_edges(&rings, width, height, &mut bits);
    }
    Ok(RegionMask {
        width,
        height,
        bits,
        geo,
    })
}

fn fill_even_odd(rings: &[Vec<Pt>], width: usize, height: usize, bits: &mut [u8]) {
    let mut xs: Vec<f64> = Vec::new();
    for row in 0..height {
        let yc = row as f64 + 0.5;
        xs.clear();
        for ring in rings {
            for w in ring.windows(2) {
                let (a, b) = (w[0], w[1]);
                if (a.1 > yc) != (b.1 > yc) {
                    xs.push(a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1));
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let c0 = (pair[0] - 0.5).ceil().max(0.0);
            let c1 = (pair[1] - 0.5).floor().min(width as f64 - 1.0);
            if c1 < c0 {
                continue;
            }
            let base = row * width;
            bits[base + c0 as usize..=base + c1 as usize].fill(1);
        }
    }
}

/// Sets pixels whose centers lie exactly on a ring edge.
fn mark_edges(rings: &[Vec<Pt>], width: usize, height: usize, bits: &mut [u8]) {
    for ring in rings {
        for w in ring.windows(2) {
            let (a, b) = (w[0], w[1]);
            let r0 = (a.1.min(b.1) - 0.5).ceil().max(0.0) as usize;
            let r1 = (a.1.max(b.1) - 0.5).floor();
            if r1 < 0.0 {
                continue;
            }
            let r1 = (r1 as usize).min(height.saturating_sub(1));
            for row in r0..=r1 {
                let yc = row as f64 + 0.5;
                let (lo, hi) = if a.1 == b.1 {
                    (a.0.min(b.0), a.0.max(b.0))
                } else {
                    let x = a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1);
                    (x, x)
                };
                let c0 = (lo - 0.5).ceil().max(0.0);
                let c1 = (hi - 0.5).floor().min(width as f64 - 1.0);
                let mut c = c0;
                while c <= c1 {
                    bits[row * width + c as usize] = 1;
                    c += 1.0;
                }
            }
        }
    }
}

/// `out[x, y, c] = img[x, y, c] · mask[x, y]`
pub fn apply_mask(img: &RasterImage, m: &RegionMask) -> Result<RasterImage> {
    if img.width != m.width || img.height != m.height {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            img.width, img.height, m.width, m.height
        )));
    }
    let ch = img.channels;
    let pixels = img
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| if m.bits[i / ch] == 1 { v } else { 0.0 })
        .collect();
    Ok(RasterImage {
        pixels,
        ..img.clone()
    })
}

pub const TILE_RAW_MAGIC: &[u8; 7] = b"ODTILE1";

/// Encodes `ODTILE1`: magic, u16 width, u16 height, u8 channels, then
/// little-endian f32 samples stored plane by plane (all of channel 0 first).
pub fn encode_raw(img: &RasterImage) -> Result<Vec<u8>> {
    if img.width > u16::MAX as usize
        || img.height > u16::MAX as usize
        || img.channels > u8::MAX as usize
    {
        return Err(Error::Shape(format!(
            "{}x{}x{} does not fit the raw tile header",
            img.width, img.height, img.channels
        )));
    }
    let mut out = Vec::with_capacity(12 + img.pixels.len() * 4);
    out.extend_from_slice(TILE_RAW_MAGIC);
    out.extend_from_slice(&(img.width as u16).to_le_bytes());
    out.extend_from_slice(&(img.height as u16).to_le_bytes());
    out.push(img.channels as u8);
    for c in 0..img.channels {
        for i in 0..img.width * img.height {
            out.extend_from_slice(&img.pixels[i * img.channels + c].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<RasterImage> {
    if bytes.len() < 12 || &bytes[..7] != TILE_RAW_MAGIC {
        return Err(Error::format(path, None, "not an ODTILE1 raster"));
    }
    let w = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
    let h = u16::from_le_bytes([bytes[9], bytes[10]]) as usize;
    let ch = bytes[11] as usize;
    let n = w * h * ch;
    if ch == 0 || bytes.len() != 12 + n * 4 {
        return Err(Error::format(
            path,
            None,
            format!("payload size does not match {w}x{h}x{ch}"),
        ));
    }
    let mut pixels = vec![0f32; n];
    for (k, c) in bytes[12..].chunks_exact(4).enumerate() {
        let (plane, i) = (k / (w * h), k % (w * h));
        pixels[i * ch + plane] = f32::from_le_bytes(c.try_into().unwrap());
    }
    RasterImage::new(w, h, ch, pixels, RasterGeo::default())
}

pub fn write_tile_raw(path: &Path, img: &RasterImage) -> Result<()> {
    std::fs::write(path, encode_raw(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_tile_raw(path: &Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, path)
}

/// Writes an 8-bit grayscale or RGB PNG.
pub fn write_tile_png(path: &Path, img: &RasterImage) -> Result<()> {
    let q: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::Shape(format!(
                "PNG tiles need 1 or 3 channels, got {c}"
            )))
        }
    };
    image::save_buffer(path, &q, img.width as u32, img.height as u32, color)
        .map_err(|e| Error::format(path, None, e.to_string()))
}

/// Decodes a PNG (8-bit, gray or RGB) or `ODTILE1` file by extension.
/// 8-bit samples are scaled into `[0, 1]` by dividing by 255.
pub fn read_tile_file(path: &Path) -> Result<RasterImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("raw") => read_tile_raw(path),
        Some("png") => {
            let dynimg = image::open(path).map_err(|e| Error::format(path, None, e.to_string()))?;
            let (w, h, ch, data) = match dynimg {
                image::DynamicImage::ImageLuma8(b) => (b.width(), b.height(), 1, b.into_raw()),
                other => {
                    let b = other.into_rgb8();
                    (b.width(), b.height(), 3, b.into_raw())
                }
            };
            let pixels = data.iter().map(|&v| v as f32 / 255.0).collect();
            RasterImage::new(w as usize, h as usize, ch, pixels, RasterGeo::default())
        }
        _ => Err(Error::format(
            path,
            None,
            "unknown tile extension (expected .png or .raw)",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(v: f32, ch: usize) -> RasterImage {
        let n = (TILE_SIZE * TILE_SIZE) as usize * ch;
        RasterImage::new(
            TILE_SIZE as usize,
            TILE_SIZE as usize,
            ch,
            vec![v; n],
            RasterGeo::default(),
        )
        .unwrap()
    }

    fn rect(z: u8, x0: u32, y0: u32, x1: u32, y1: u32) -> TileRect {
        TileRect {
            z,
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    #[test]
    fn stitch_single_is_identity() {
        let mut t = tile(0.0, 2);
        for (i, p) in t.pixels.iter_mut().enumerate() {
            *p = (i % 97) as f32 / 97.0;
        }
        let mut m = BTreeMap::new();
        m.insert(TileCoord { z: 5, x: 3, y: 4 }, t.clone());
        let out = stitch(&m, rect(5, 3, 4, 3, 4)).unwrap();
        assert_eq!(out.pixels, t.pixels);
        assert_eq!(
            out.geo,
            RasterGeo {
                z: 5,
                origin_x: 3,
                origin_y: 4
            }
        );
    }

    #[test]
    fn stitch_two_by_one_halves() {
        let mut m = BTreeMap::new();
        m.insert(TileCoord { z: 5, x: 3, y: 4 }, tile(0.25, 1));
        m.insert(TileCoord { z: 5, x: 4, y: 4 }, tile(0.75, 1));
        let out = stitch(&m, rect(5, 3, 4, 4, 4)).unwrap();
        assert_eq!(out.width, 512);
        for row in [0, 100, 255] {
            assert_eq!(out.get(0, row, 0), 0.25);
            assert_eq!(out.get(255, row, 0), 0.25);
            assert_eq!(out.get(256, row, 0), 0.75);
            assert_eq!(out.get(511, row, 0), 0.75);
        }
    }

    #[test]
    fn stitch_missing_quadrant_is_zero() {
        let mut m = BTreeMap::new();
        for (x, y) in [(0, 0), (1, 0), (0, 1)] {
            m.insert(TileCoord { z: 2, x, y }, tile(0.5, 3));
        }
        let out = stitch(&m, rect(2, 0, 0, 1, 1)).unwrap();
        for row in 256..512 {
            for col in 256..512 {
                for c in 0..3 {
                    assert_eq!(out.get(col, row, c), 0.0);
                }
            }
        }
        assert_eq!(out.get(10, 300, 1), 0.5);
    }

    #[test]
    fn stitch_channel_mismatch() {
        let mut m = BTreeMap::new();
        m.insert(TileCoord { z: 2, x: 0, y: 0 }, tile(0.5, 3));
        m.insert(TileCoord { z: 2, x: 1, y: 0 }, tile(0.5, 1));
        assert!(matches!(
            stitch(&m, rect(2, 0, 0, 1, 0)),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn mask_identity_zero_and_checkerboard() {
        let geo = RasterGeo::default();
        let img = RasterImage::new(4, 4, 2, vec![0.6; 32], geo).unwrap();
        let ones = RegionMask {
            width: 4,
            height: 4,
            bits: vec![1; 16],
            geo,
        };
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        let zeros = ones.complement();
        assert!(apply_mask(&img, &zeros)
            .unwrap()
            .pixels
            .iter()
            .all(|&v| v == 0.0));
        let checker = RegionMask {
            bits: (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect(),
            ..ones.clone()
        };
        let out = apply_mask(&img, &checker).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let want = if (row + col) % 2 == 1 { 0.6 } else { 0.0 };
                assert_eq!(out.get(col, row, 0), want);
                assert_eq!(out.get(col, row, 1), want);
            }
        }
        let small = RegionMask {
            width: 2,
            height: 2,
            bits: vec![1; 4],
            geo,
        };
        assert!(matches!(apply_mask(&img, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn raw_roundtrip_is_exact() {
        let pixels: Vec<f32> = (0..5 * 3 * 2).map(|i| i as f32 / 7.0).collect();
        let img = RasterImage::new(5, 3, 2, pixels, RasterGeo::default()).unwrap();
        let bytes = encode_raw(&img).unwrap();
        assert_eq!(&bytes[..7], b"ODTILE1");
        // planar: first payload sample is channel 0 of pixel 0, second is channel 0 of pixel 1
        assert_eq!(
            f32::from_le_bytes(bytes[16..20].try_into().unwrap()),
            img.pixels[2]
        );
        assert_eq!(decode_raw(&bytes, Path::new("m")).unwrap(), img);
    }
}
