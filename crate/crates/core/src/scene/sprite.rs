//! Procedural sprite bank.
//!
//! Targets are smooth radial-wobble blobs (a few low-order cosine harmonics
//! on a circle); non-targets are angular polygons with 3 to 6 vertices. Both
//! families are star-shaped around the patch centre, so a pixel is inside
//! when its polar radius is below the boundary radius in its direction.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, stream};

pub const NUM_TARGET_VARIANTS: u32 = 100;
pub const NUM_NON_TARGET_VARIANTS: u32 = 145;
pub const NUM_VARIANTS: usize = (NUM_TARGET_VARIANTS + NUM_NON_TARGET_VARIANTS) as usize;

/// Base seed of the sprite bank. Fixed so every dataset shares the bank.
const BANK_SEED: u64 = 0x5EED_5B17_E5A1_1CE5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Family {
    Target,
    NonTarget,
}

impl Family {
    pub fn variant_count(self) -> u32 {
        match self {
            Family::Target => NUM_TARGET_VARIANTS,
            Family::NonTarget => NUM_NON_TARGET_VARIANTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteSize {
    Small,
    Medium,
    Big,
}

impl SpriteSize {
    pub const ALL: [SpriteSize; 3] = [SpriteSize::Small, SpriteSize::Medium, SpriteSize::Big];

    fn cell_fraction(self) -> f64 {
        match self {
            SpriteSize::Small => 0.5,
            SpriteSize::Medium => 0.7,
            SpriteSize::Big => 0.9,
        }
    }

    /// Patch side in pixels for a cell of `cell_px` pixels. Strictly
    /// increasing over the three sizes and never larger than the cell.
    pub fn side(self, cell_px: usize) -> usize {
        let raw = |s: SpriteSize| ((s.cell_fraction() * cell_px as f64).round() as usize).max(1);
        let small = raw(SpriteSize::Small);
        let medium = raw(SpriteSize::Medium).max(small + 1);
        let big = raw(SpriteSize::Big).max(medium + 1);
        match self {
            SpriteSize::Small => small,
            SpriteSize::Medium => medium,
            SpriteSize::Big => big,
        }
    }
}

/// Smallest cell that fits three strictly increasing sprite sizes.
pub const MIN_CELL_PX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpriteVariant {
    pub family: Family,
    pub variant_id: u32,
    pub shape_seed: u64,
}

impl SpriteVariant {
    pub fn new(family: Family, variant_id: u32) -> Result<Self> {
        if variant_id >= family.variant_count() {
            return Err(Error::InvalidVariant(format!(
                "{family:?} variant {variant_id} (valid 0..{})",
                family.variant_count()
            )));
        }
        let family_tag = match family {
            Family::Target => 1,
            Family::NonTarget => 2,
        };
        Ok(SpriteVariant {
            family,
            variant_id,
            shape_seed: derive_seed(BANK_SEED, &[stream::SPRITE, family_tag, variant_id as u64]),
        })
    }

    /// Index into the 245 variant classes: targets first, then non-targets.
    pub fn class_index(&self) -> usize {
        match self.family {
            Family::Target => self.variant_id as usize,
            Family::NonTarget => (NUM_TARGET_VARIANTS + self.variant_id) as usize,
        }
    }

    pub fn from_class_index(i: usize) -> Result<Self> {
        let i = u32::try_from(i).map_err(|_| Error::InvalidVariant(format!("class {i}")))?;
        if i < NUM_TARGET_VARIANTS {
            SpriteVariant::new(Family::Target, i)
        } else {
            SpriteVariant::new(Family::NonTarget, i - NUM_TARGET_VARIANTS)
        }
    }

    /// Every variant of both families, in class-index order.
    pub fn all() -> Vec<SpriteVariant> {
        (0..NUM_VARIANTS)
            .map(|i| SpriteVariant::from_class_index(i).expect("in range"))
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Outline {
    /// r(θ) = 1 + Σ a_k cos(kθ + φ_k), rescaled to a maximum of 1.
    Blob { harmonics: Vec<(f64, f64, f64)>, peak: f64 },
    /// Polygon vertices in polar form, sorted by angle.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Outline {
    fn radius(&self, theta: f64) -> f64 {
        match self {
            Outline::Blob { harmonics, peak } => {
                let r: f64 = 1.0 + harmonics.iter().map(|&(k, a, ph)| a * (k * theta + ph).cos()).sum::<f64>();
                r / peak
            }
            Outline::Polygon { vertices } => {
                let n = vertices.len();
                let t = theta.rem_euclid(2.0 * PI);
                // edge whose angular span contains t
                let i = (0..n)
                    .find(|&i| {
                        let a0 = vertices[i].0;
                        let a1 = if i + 1 < n { vertices[i + 1].0 } else { vertices[0].0 + 2.0 * PI };
                        let tt = if t < a0 { t + 2.0 * PI } else { t };
                        tt >= a0 && tt < a1
                    })
                    .unwrap_or(n - 1);
                let (a0, r0) = vertices[i];
                let (a1, r1) = vertices[(i + 1) % n];
                let (x0, y0) = (r0 * a0.cos(), r0 * a0.sin());
                let (x1, y1) = (r1 * a1.cos(), r1 * a1.sin());
                // intersect ray (cos t, sin t)·s with the edge
                let (dx, dy) = (t.cos(), t.sin());
                let (ex, ey) = (x1 - x0, y1 - y0);
                let denom = dx * ey - dy * ex;
                if denom.abs() < 1e-12 {
                    r0.min(r1)
                } else {
                    (x0 * ey - y0 * ex) / denom
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Texture {
    Stripes { period: f64, angle: f64 },
    Speckle { seed: u64 },
}

#[derive(Debug, Clone)]
struct Design {
    outline: Outline,
    texture: Texture,
    tone: f64,
    contrast: f64,
    rotation: f64,
    /// Centre and half-extent of the outline's bounding box in the patch frame.
    centre: (f64, f64),
    half_extent: f64,
}

fn design(v: &SpriteVariant) -> Design {
    let mut rng = seeded(v.shape_seed);
    let rotation = rng.gen_range(0.0..2.0 * PI);
    let outline = match v.family {
        Family::Target => {
            let harmonics: Vec<(f64, f64, f64)> = (2..=3)
                .map(|k| (k as f64, rng.gen_range(0.0..0.12), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            let peak = (0..720)
                .map(|i| {
                    let th = i as f64 * PI / 360.0;
                    1.0 + harmonics.iter().map(|&(k, a, ph)| a * (k * th + ph).cos()).sum::<f64>()
                })
                .fold(0.0, f64::max);
            Outline::Blob { harmonics, peak }
        }
        Family::NonTarget => {
            let n = rng.gen_range(3..=4usize);
            let step = 2.0 * PI / n as f64;
            let mut vertices: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let a = i as f64 * step + rng.gen_range(-0.25..0.25) * step;
                    (a.rem_euclid(2.0 * PI), rng.gen_range(0.6..1.0))
                })
                .collect();
            vertices.sort_by(|a, b| a.0.total_cmp(&b.0));
            Outline::Polygon { vertices }
        }
    };
    let texture = if rng.gen_bool(0.5) {
        Texture::Stripes {
            period: rng.gen_range(0.35..0.7),
            angle: rng.gen_range(0.0..PI),
        }
    } else {
        Texture::Speckle { seed: rng.gen() }
    };
    let tone = if rng.gen_bool(0.5) {
        rng.gen_range(0.1..0.3)
    } else {
        rng.gen_range(0.7..0.9)
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for i in 0..1440 {
        let th = i as f64 * PI / 720.0;
        let r = outline.radius(th - rotation);
        let (x, y) = (r * th.cos(), r * th.sin());
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Design {
        outline,
        texture,
        tone,
        contrast: rng.gen_range(0.05..0.1),
        rotation,
        centre: (0.5 * (x0 + x1), 0.5 * (y0 + y1)),
        half_extent: 0.5 * (x1 - x0).max(y1 - y0),
    }
}

/// Square sprite patch; pixels outside the outline are transparent.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub intensity: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Patch {
    /// Bounding box of the opaque pixels as (width, height).
    pub fn bbox(&self) -> (usize, usize) {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.side {
            for x in 0..self.side {
                if self.mask[y * self.side + x] {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 == usize::MAX {
            (0, 0)
        } else {
            (x1 - x0 + 1, y1 - y0 + 1)
        }
    }

    pub fn bbox_area(&self) -> usize {
        let (w, h) = self.bbox();
        w * h
    }

    pub fn mirrored(&self) -> Patch {
        let s = self.side;
        let mut out = self.clone();
        for y in 0..s {
            for x in 0..s {
                out.intensity[y * s + x] = self.intensity[y * s + s - 1 - x];
                out.mask[y * s + x] = self.mask[y * s + s - 1 - x];
            }
        }
        out
    }
}

fn speckle(seed: u64, x: usize, y: usize) -> f64 {
    let h = derive_seed(seed, &[x as u64, y as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Render `variant` at `size` for a grid cell of `cell_px` pixels.
pub fn render_sprite(variant: &SpriteVariant, size: SpriteSize, flipped: bool, cell_px: usize) -> Result<Patch> {
    if variant.variant_id >= variant.family.variant_count() {
        return Err(Error::InvalidVariant(format!("{variant:?}")));
    }
    if cell_px < MIN_CELL_PX {
        return Err(Error::Config(format!("cells of {cell_px}px are too small for sprites")));
    }
    let d = design(variant);
    let side = size.side(cell_px);
    let mut intensity = vec![0.0; side * side];
    let mut mask = vec![false; side * side];
    // The outline's longer side spans the patch, overshooting the edge pixel
    // centres by half a pixel so that the extreme pixels are opaque.
    let fit = d.half_extent / (1.0 + 1.0 / side as f64);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / side as f64 * 2.0 - 1.0;
            let (qx, qy) = (d.centre.0 + u * fit, d.centre.1 + v * fit);
            let rho = (qx * qx + qy * qy).sqrt();
            let theta = qy.atan2(qx) - d.rotation;
            // keep at least the centre pixel opaque
            let inside = rho <= d.outline.radius(theta) || (u.abs() < 1.0 / side as f64 && v.abs() < 1.0 / side as f64);
            if !inside {
                continue;
            }
            let t = match d.texture {
                Texture::Stripes { period, angle } => {
                    let s = u * angle.cos() + v * angle.sin();
                    if (s / period).rem_euclid(1.0) < 0.5 { 1.0 } else { -1.0 }
                }
                Texture::Speckle { seed } => speckle(seed, x, y) * 2.0 - 1.0,
            };
            let i = y * side + x;
            mask[i] = true;
            intensity[i] = (d.tone + d.contrast * t).clamp(0.0, 1.0);
        }
    }
    let patch = Patch {
        side,
        intensity,
        mask,
    };
    Ok(if flipped { patch.mirrored() } else { patch })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_ranges() {
        assert!(SpriteVariant::new(Family::Target, 99).is_ok());
        assert!(matches!(SpriteVariant::new(Family::Target, 100), Err(Error::InvalidVariant(_))));
        assert!(SpriteVariant::new(Family::NonTarget, 144).is_ok());
        assert!(matches!(SpriteVariant::new(Family::NonTarget, 145), Err(Error::InvalidVariant(_))));
        assert_eq!(SpriteVariant::all().len(), 245);
        let bad = SpriteVariant {
            family: Family::Target,
            variant_id: 300,
            shape_seed: 0,
        };
        assert!(matches!(render_sprite(&bad, SpriteSize::Small, false, 20), Err(Error::InvalidVariant(_))));
    }

    #[test]
    fn class_index_roundtrip() {
        for (i, v) in SpriteVariant::all().iter().enumerate() {
            assert_eq!(v.class_index(), i);
        }
    }

    #[test]
    fn flip_is_exact_mirror() {
        for v in SpriteVariant::all().iter().step_by(7) {
            let a = render_sprite(v, SpriteSize::Medium, false, 20).unwrap();
            let b = render_sprite(v, SpriteSize::Medium, true, 20).unwrap();
            assert_eq!(a.mirrored(), b);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let v = SpriteVariant::new(Family::NonTarget, 17).unwrap();
        let a = render_sprite(&v, SpriteSize::Big, true, 12).unwrap();
        let b = render_sprite(&v, SpriteSize::Big, true, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sides_fit_cells() {
        for cell in MIN_CELL_PX..=60 {
            let s: Vec<usize> = SpriteSize::ALL.iter().map(|s| s.side(cell)).collect();
            assert!(s[0] < s[1] && s[1] < s[2] && s[2] <= cell, "cell {cell}: {s:?}");
        }
    }

    /// Exhaustive over the bank for the cell sizes of the standard image sizes.
    #[test]
    fn bbox_area_strictly_increases_with_size() {
        for cell in [12, 20, 40] {
            for v in SpriteVariant::all() {
                let areas: Vec<usize> = SpriteSize::ALL
                    .iter()
                    .map(|&s| render_sprite(&v, s, false, cell).unwrap().bbox_area())
                    .collect();
                assert!(areas[0] < areas[1] && areas[1] < areas[2], "{v:?} cell {cell}: {areas:?}");
                let (w, h) = render_sprite(&v, SpriteSize::Big, false, cell).unwrap().bbox();
                assert!(w <= cell && h <= cell);
            }
        }
    }

    #[test]
    fn sprites_never_match_background() {
        for v in SpriteVariant::all() {
            let p = render_sprite(&v, SpriteSize::Small, false, 12).unwrap();
            assert!(p.mask.iter().any(|&m| m));
            for (i, &m) in p.mask.iter().enumerate() {
                if m {
                    assert!((p.intensity[i] - 0.5).abs() > 0.05);
                }
            }
        }
    }
}
