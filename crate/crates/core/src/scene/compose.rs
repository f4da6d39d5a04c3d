use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::sprite::{render_sprite, Family, SpriteSize, SpriteVariant};
use crate::error::{Error, IoContext, Result};
use crate::ground_truth::{Combination, Ratio, MAX_OBJECTS, MIN_OBJECTS};
use crate::rng::{derive_seed, seeded};

pub const GRID: usize = 5;
pub const CELLS: usize = GRID * GRID;
pub const BACKGROUND: f64 = 0.5;

/// One sprite on the grid, as recorded in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Placement {
    pub cell: u8,
    pub family: Family,
    pub variant_id: u32,
    pub size: SpriteSize,
    pub flipped: bool,
}

impl Placement {
    pub fn variant(&self) -> Result<SpriteVariant> {
        SpriteVariant::new(self.family, self.variant_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub ratio: Ratio,
    pub combination: Combination,
    pub placements: Vec<Placement>,
    pub scene_seed: u64,
}

impl SceneSpec {
    pub fn count(&self, family: Family) -> usize {
        self.placements.iter().filter(|p| p.family == family).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.placements.len() as u32;
        if !(MIN_OBJECTS..=MAX_OBJECTS).contains(&n) {
            return Err(Error::InconsistentSpec(format!("{n} placements")));
        }
        let mut used = [false; CELLS];
        for p in &self.placements {
            let c = p.cell as usize;
            if c >= CELLS || used[c] {
                return Err(Error::InconsistentSpec(format!("cell {c} reused or out of range")));
            }
            used[c] = true;
            p.variant()?;
        }
        if self.count(Family::Target) as u32 != self.combination.n_targets
            || self.count(Family::NonTarget) as u32 != self.combination.n_non_targets
        {
            return Err(Error::InconsistentSpec("family counts differ from combination".into()));
        }
        if self.combination.ratio() != Some(self.ratio) {
            return Err(Error::InconsistentSpec(format!(
                "combination {} does not realise ratio {}",
                self.combination, self.ratio
            )));
        }
        Ok(())
    }
}

/// Draw cells, variants, sizes and flips for one scene from `scene_seed`.
pub fn compose_scene(ratio: Ratio, combination: Combination, scene_seed: u64) -> Result<SceneSpec> {
    if combination.ratio() != Some(ratio) || !combination.is_admissible() {
        return Err(Error::InconsistentSpec(format!(
            "combination {combination} is not admissible for ratio {ratio}"
        )));
    }
    let mut rng = seeded(scene_seed);
    let mut cells: Vec<u8> = (0..CELLS as u8).collect();
    cells.shuffle(&mut rng);
    let families = std::iter::repeat_n(Family::Target, combination.n_targets as usize)
        .chain(std::iter::repeat_n(Family::NonTarget, combination.n_non_targets as usize));
    let mut placements: Vec<Placement> = cells
        .into_iter()
        .zip(families)
        .map(|(cell, family)| Placement {
            cell,
            family,
            variant_id: rng.gen_range(0..family.variant_count()),
            size: SpriteSize::ALL[rng.gen_range(0..3)],
            flipped: rng.gen_bool(0.5),
        })
        .collect();
    placements.sort_by_key(|p| p.cell);
    let spec = SceneSpec {
        ratio,
        combination,
        placements,
        scene_seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Single-channel raster with intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl SceneRaster {
    pub fn blank(width: usize, height: usize) -> Self {
        SceneRaster {
            width,
            height,
            pixels: vec![BACKGROUND; width * height],
        }
    }

    /// 8-bit quantisation used for PGM output.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.width, self.height, &self.to_u8())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&self.to_pgm()).at(path)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterOptions {
    /// Offset sprites randomly inside their cell instead of centring them.
    pub jitter: bool,
}

pub fn rasterize(spec: &SceneSpec, width: usize, height: usize) -> Result<SceneRaster> {
    rasterize_with(spec, width, height, RasterOptions::default())
}

pub fn rasterize_with(spec: &SceneSpec, width: usize, height: usize, opts: RasterOptions) -> Result<SceneRaster> {
    render_placements(&spec.placements, spec.scene_seed, width, height, opts)
}

/// Draw placements onto a blank raster; `seed` drives jitter offsets only.
pub fn render_placements(
    placements: &[Placement],
    seed: u64,
    width: usize,
    height: usize,
    opts: RasterOptions,
) -> Result<SceneRaster> {
    if !width.is_multiple_of(GRID) || !height.is_multiple_of(GRID) || width == 0 || height == 0 {
        return Err(Error::Config(format!("raster {width}x{height} is not divisible by {GRID}")));
    }
    let (cw, ch) = (width / GRID, height / GRID);
    let cell_px = cw.min(ch);
    let mut raster = SceneRaster::blank(width, height);
    for p in placements {
        let patch = render_sprite(&p.variant()?, p.size, p.flipped, cell_px)?;
        if patch.side > cw || patch.side > ch {
            return Err(Error::RenderOverflow {
                patch: patch.side,
                cell: cell_px,
            });
        }
        let (slack_x, slack_y) = (cw - patch.side, ch - patch.side);
        let (ox, oy) = if opts.jitter {
            let mut rng = seeded(derive_seed(seed, &[p.cell as u64]));
            (rng.gen_range(0..=slack_x), rng.gen_range(0..=slack_y))
        } else {
            (slack_x / 2, slack_y / 2)
        };
        let x0 = (p.cell as usize % GRID) * cw + ox;
        let y0 = (p.cell as usize / GRID) * ch + oy;
        for y in 0..patch.side {
            for x in 0..patch.side {
                let i = y * patch.side + x;
                if patch.mask[i] {
                    raster.pixels[(y0 + y) * width + x0 + x] = patch.intensity[i];
                }
            }
        }
    }
    Ok(raster)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parse a binary (P5, maxval 255) PGM into (width, height, pixels).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Data(format!("bad PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // single whitespace byte after maxval
    let data = &bytes[i + 1..];
    if data.len() != w * h {
        return Err(bad("pixel count"));
    }
    Ok((w, h, data.to_vec()))
}
