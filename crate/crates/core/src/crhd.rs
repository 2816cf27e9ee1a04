//! Colored Road Hierarchy Diagrams: road networks rasterized with one
//! color and stroke width per tier.
//!
//! Rendering is hard-edged (square brush stamped along Bresenham lines), so
//! every pixel is either the background or exactly one palette color and
//! equal inputs give byte-identical buffers. Edges are drawn from the
//! lowest tier to the highest, so more important roads end up on top.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::sphere::LocalProjection;
use crate::geodata::{GeoPoint, GridCell};
use crate::road_graph::{RoadGraph, RoadTier};

pub type Rgb = [u8; 3];

pub const DEFAULT_SIZE_PX: u32 = 512;
pub const MIN_SIZE_PX: u32 = 64;
/// Removes the minor tier of the default palette and nothing else.
pub const DEFAULT_RGB_FLOOR: u8 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierStyle {
    pub color: Rgb,
    pub width: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    /// Indexed by [`RoadTier::index`] (minor first).
    pub tiers: [TierStyle; 5],
    pub background: Rgb,
}

impl Default for Palette {
    fn default() -> Self {
        let s = |color: Rgb, width| TierStyle { color, width };
        Palette {
            tiers: [
                s([224, 224, 224], 1),
                s([120, 144, 156], 2),
                s([239, 108, 0], 3),
                s([198, 40, 40], 4),
                s([0, 0, 0], 5),
            ],
            background: [255, 255, 255],
        }
    }
}

/// Rec. 709 relative luminance of an 8-bit color, used as perceived lightness.
pub fn lightness(c: Rgb) -> f64 {
    0.2126 * c[0] as f64 + 0.7152 * c[1] as f64 + 0.0722 * c[2] as f64
}

impl Palette {
    pub fn style(&self, tier: RoadTier) -> TierStyle {
        self.tiers[tier.index()]
    }

    /// Lightness strictly increases and width strictly decreases from
    /// motorway down to minor; no tier color equals the background.
    pub fn validate(&self) -> Result<()> {
        for w in self.tiers.windows(2) {
            let (lower, higher) = (w[0], w[1]);
            if !(lightness(lower.color) > lightness(higher.color)) {
                return Err(Error::argument("palette lightness must increase towards minor roads"));
            }
            if !(lower.width < higher.width) {
                return Err(Error::argument("palette widths must decrease towards minor roads"));
            }
        }
        if self.tiers.iter().any(|t| t.color == self.background || t.width == 0) {
            return Err(Error::argument("palette tier equals background or has zero width"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrhdImage {
    pub size_px: u32,
    /// Row-major RGB, `size_px * size_px * 3` bytes, top row first.
    pub pixels: Vec<u8>,
    pub center: GeoPoint,
    pub radius_m: f64,
    pub background: Rgb,
}

impl CrhdImage {
    pub fn blank(size_px: u32, center: GeoPoint, radius_m: f64, background: Rgb) -> Self {
        let n = (size_px * size_px) as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&background);
        }
        CrhdImage { size_px, pixels, center, radius_m, background }
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = ((y * self.size_px + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        let s = self.size_px as i64;
        if x >= 0 && y >= 0 && x < s && y < s {
            let i = ((y * s + x) * 3) as usize;
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn count_color(&self, c: Rgb) -> usize {
        self.pixels.chunks_exact(3).filter(|p| *p == c).count()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.size_px, self.size_px);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::Format(format!("png: {e}")))?;
            w.write_image_data(&self.pixels)
                .map_err(|e| Error::Format(format!("png: {e}")))?;
        }
        Ok(buf)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

/// File name of the diagram for a grid cell.
pub fn png_name(col: i64, row: i64) -> String {
    format!("crhd_{col}_{row}.png")
}

/// Renders the graph around `center` in an azimuthal-equidistant frame;
/// the image spans `2 * radius_m` on each side.
pub fn render_crhd(graph: &RoadGraph, center: GeoPoint, radius_m: f64, size_px: u32, palette: &Palette) -> Result<CrhdImage> {
    if !(radius_m > 0.0) {
        return Err(Error::argument("radius_m must be positive"));
    }
    if size_px < MIN_SIZE_PX {
        return Err(Error::argument(format!("size_px must be at least {MIN_SIZE_PX}")));
    }
    let mut img = CrhdImage::blank(size_px, center, radius_m, palette.background);
    let proj = LocalProjection::new(center);
    let scale = size_px as f64 / (2.0 * radius_m);
    let to_px = |p: &GeoPoint| {
        let (x, y) = proj.forward(*p);
        ((x + radius_m) * scale, (radius_m - y) * scale)
    };

    let mut order: Vec<usize> = (0..graph.edges.len()).collect();
    order.sort_by_key(|&i| (graph.edges[i].tier, i));
    for i in order {
        let edge = &graph.edges[i];
        let style = palette.style(edge.tier);
        let pts: Vec<(f64, f64)> = edge.polyline.iter().map(to_px).collect();
        for w in pts.windows(2) {
            draw_segment(&mut img, w[0], w[1], style);
        }
    }
    Ok(img)
}

fn draw_segment(img: &mut CrhdImage, a: (f64, f64), b: (f64, f64), style: TierStyle) {
    let margin = style.width as f64 + 1.0;
    let lim = img.size_px as f64 + margin;
    let Some((a, b)) = clip_to_box(a, b, -margin, lim) else {
        return;
    };
    let to_i = |v: f64| (v - 0.5).round() as i64;
    let (mut x0, mut y0, x1, y1) = (to_i(a.0), to_i(a.1), to_i(b.0), to_i(b.1));
    let lo = -((style.width as i64 - 1) / 2);
    let hi = lo + style.width as i64;
    let stamp = |img: &mut CrhdImage, x: i64, y: i64| {
        for dy in lo..hi {
            for dx in lo..hi {
                img.put(x + dx, y + dy, style.color);
            }
        }
    };
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        stamp(img, x0, y0);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Liang-Barsky against the square `[lo, hi]²`.
fn clip_to_box(a: (f64, f64), b: (f64, f64), lo: f64, hi: f64) -> Option<((f64, f64), (f64, f64))> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a.0 - lo), (dx, hi - a.0), (-dy, a.1 - lo), (dy, hi - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return None;
            }
        }
    }
    Some(((a.0 + t0 * dx, a.1 + t0 * dy), (a.0 + t1 * dx, a.1 + t1 * dy)))
}

/// Replaces light road pixels (`min(R,G,B) >= rgb_floor`) with the background.
pub fn truncate_minor(image: &CrhdImage, rgb_floor: u8) -> CrhdImage {
    let mut out = image.clone();
    let bg = image.background;
    for px in out.pixels.chunks_exact_mut(3) {
        if px != bg && px.iter().all(|&c| c >= rgb_floor) {
            px.copy_from_slice(&bg);
        }
    }
    out
}

/// Diagram concentric with `cell` covering twice its extent; the radius is
/// twice the cell's north-south half-width.
pub fn render_for_cell(graph: &RoadGraph, cell: &GridCell, size_px: u32, palette: &Palette, rgb_floor: Option<u8>) -> Result<CrhdImage> {
    let radius = 2.0 * cell.half_width_m();
    let img = render_crhd(graph, cell.centroid(), radius, size_px, palette)?;
    Ok(match rgb_floor {
        Some(f) => truncate_minor(&img, f),
        None => img,
    })
}
