use super::{lonlat_to_pixel, pixel_to_lonlat, GeoPoint};
use crate::error::{Error, Result};

pub(crate) type Pt = (f64, f64);

/// One polygon: an exterior ring with optional holes. Rings are closed
/// (first point repeated at the end).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<GeoPoint>,
    pub holes: Vec<Vec<GeoPoint>>,
}

/// The boundary of one urban region. A region made of several polygons is
/// the union of its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBoundary {
    pub region_id: String,
    pub parts: Vec<Polygon>,
}

impl RegionBoundary {
    pub fn new(region_id: impl Into<String>, parts: Vec<Polygon>) -> Result<Self> {
        let r = RegionBoundary {
            region_id: region_id.into(),
            parts,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn single(
        region_id: impl Into<String>,
        exterior: Vec<GeoPoint>,
        holes: Vec<Vec<GeoPoint>>,
    ) -> Result<Self> {
        Self::new(region_id, vec![Polygon { exterior, holes }])
    }

    /// Axis-aligned rectangle in degrees, closed ring, counter-clockwise.
    pub fn rectangle(
        region_id: impl Into<String>,
        west: f64,
        south: f64,
        east: f64,
        north: f64,
    ) -> Result<Self> {
        let ring = [
            (west, south),
            (east, south),
            (east, north),
            (west, north),
            (west, south),
        ]
        .iter()
        .map(|&(lon, lat)| GeoPoint::new(lon, lat))
        .collect::<Result<Vec<_>>>()?;
        Self::single(region_id, ring, vec![])
    }

    fn validate(&self) -> Result<()> {
        let id = &self.region_id;
        if self.parts.is_empty() {
            return Err(Error::Domain(format!("region `{id}` has no polygons")));
        }
        for part in &self.parts {
            check_ring(id, &part.exterior)?;
            for h in &part.holes {
                check_ring(id, h)?;
            }
            let ext = project_ring(&part.exterior, 0);
            for h in &part.holes {
                for p in h {
                    let q = lonlat_to_pixel(*p, 0);
                    if !point_in_rings(q, std::slice::from_ref(&ext)) {
                        return Err(Error::Domain(format!(
                            "region `{id}`: hole lies outside its exterior ring"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Rings per part projected to global pixel space at zoom `z`;
    /// index 0 of each part is the exterior.
    pub(crate) fn projected_rings(&self, z: u8) -> Vec<Vec<Vec<Pt>>> {
        self.parts
            .iter()
            .map(|p| {
                std::iter::once(&p.exterior)
                    .chain(&p.holes)
                    .map(|r| project_ring(r, z))
                    .collect()
            })
            .collect()
    }

    /// Area in square pixels at zoom `z` (holes subtracted, parts summed).
    pub fn projected_area(&self, z: u8) -> f64 {
        self.projected_rings(z)
            .iter()
            .map(|rings| {
                let ext = ring_area(&rings[0]).abs();
                let holes: f64 = rings[1..].iter().map(|r| ring_area(r).abs()).sum();
                ext - holes
            })
            .sum()
    }

    /// Area-weighted centroid computed in Web-Mercator space.
    pub fn centroid(&self) -> GeoPoint {
        let (mut ax, mut ay, mut total) = (0.0, 0.0, 0.0);
        for rings in self.projected_rings(0) {
            for (k, ring) in rings.iter().enumerate() {
                let sign = if k == 0 { 1.0 } else { -1.0 };
                let a = ring_area(ring);
                if a == 0.0 {
                    continue;
                }
                let (cx, cy) = ring_centroid(ring, a);
                let w = sign * a.abs();
                ax += w * cx;
                ay += w * cy;
                total += w;
            }
        }
        pixel_to_lonlat(ax / total, ay / total, 0)
    }

    /// `(west, south, east, north)` in degrees.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for p in self.parts.iter().flat_map(|p| &p.exterior) {
            b.0 = b.0.min(p.lon);
            b.1 = b.1.min(p.lat);
            b.2 = b.2.max(p.lon);
            b.3 = b.3.max(p.lat);
        }
        b
    }

    /// Even-odd membership (boundary inclusive) of a geographic point.
    pub fn contains(&self, p: GeoPoint) -> bool {
        let q = lonlat_to_pixel(p, 0);
        self.projected_rings(0)
            .iter()
            .any(|rings| point_in_rings(q, rings))
    }
}

fn check_ring(id: &str, ring: &[GeoPoint]) -> Result<()> {
    if ring.len() < 4 {
        return Err(Error::Domain(format!(
            "region `{id}`: ring needs at least 4 points, got {}",
            ring.len()
        )));
    }
    if ring.first() != ring.last() {
        return Err(Error::Domain(format!("region `{id}`: ring is not closed")));
    }
    let (lo, hi) = ring
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.lon), hi.max(p.lon))
        });
    if hi - lo > 180.0 {
        return Err(Error::Domain(format!(
            "region `{id}`: ring crosses the antimeridian, which is not supported"
        )));
    }
    let pts = project_ring(ring, 0);
    if self_intersects(&pts) {
        return Err(Error::Domain(format!(
            "region `{id}`: ring self-intersects"
        )));
    }
    Ok(())
}

fn project_ring(ring: &[GeoPoint], z: u8) -> Vec<Pt> {
    ring.iter().map(|p| lonlat_to_pixel(*p, z)).collect()
}

/// Signed shoelace area of a closed ring.
pub(crate) fn ring_area(ring: &[Pt]) -> f64 {
    ring.windows(2)
        .map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1)
        .sum::<f64>()
        / 2.0
}

fn ring_centroid(ring: &[Pt], signed_area: f64) -> Pt {
    // shift to the first vertex for conditioning
    let (ox, oy) = ring[0];
    let (mut cx, mut cy) = (0.0, 0.0);
    for w in ring.windows(2) {
        let (x0, y0) = (w[0].0 - ox, w[0].1 - oy);
        let (x1, y1) = (w[1].0 - ox, w[1].1 - oy);
        let c = x0 * y1 - x1 * y0;
        cx += (x0 + x1) * c;
        cy += (y0 + y1) * c;
    }
    (ox + cx / (6.0 * signed_area), oy + cy / (6.0 * signed_area))
}

pub(crate) fn bbox(ring: &[Pt]) -> (f64, f64, f64, f64) {
    ring.iter().fold(
        (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ),
        |b, &(x, y)| (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y)),
    )
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(p: Pt, a: Pt, b: Pt) -> bool {
    let scale = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1e-300);
    cross(a, b, p).abs() <= 1e-12 * scale * scale.max(1.0)
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

/// Even-odd point-in-polygon over all rings; points on any edge count as inside.
pub(crate) fn point_in_rings(p: Pt, rings: &[Vec<Pt>]) -> bool {
    let mut inside = false;
    for ring in rings {
        for w in ring.windows(2) {
            let (a, b) = (w[0], w[1]);
            if on_segment(p, a, b) {
                return true;
            }
            if (a.1 > p.1) != (b.1 > p.1) {
                let x = a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
                if p.0 < x {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

fn segments_intersect(a: Pt, b: Pt, c: Pt, d: Pt) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

fn self_intersects(ring: &[Pt]) -> bool {
    let n = ring.len() - 1;
    for i in 0..n {
        for j in i + 1..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Whether segment `a→b` passes through the open interior of `rect`.
fn segment_enters_open_rect(a: Pt, b: Pt, rect: (f64, f64, f64, f64)) -> bool {
    let (x0, y0, x1, y1) = rect;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [
        (-dx, a.0 - x0),
        (dx, x1 - a.0),
        (-dy, a.1 - y0),
        (dy, y1 - a.1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return false;
    }
    let tm = 0.5 * (t0 + t1);
    let (mx, my) = (a.0 + tm * dx, a.1 + tm * dy);
    mx > x0 && mx < x1 && my > y0 && my < y1
}

/// Positive-area overlap between an axis-aligned rectangle and a polygon.
pub(crate) fn rect_intersects(rect: (f64, f64, f64, f64), rings: &[Vec<Pt>]) -> bool {
    let edges_enter = rings
        .iter()
        .flat_map(|r| r.windows(2))
        .any(|w| segment_enters_open_rect(w[0], w[1], rect));
    if edges_enter {
        return true;
    }
    // No boundary inside the open rectangle: it is wholly inside or outside.
    let center = (0.5 * (rect.0 + rect.2), 0.5 * (rect.1 + rect.3));
    point_in_rings(center, rings)
}
