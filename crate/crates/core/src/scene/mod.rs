//! Procedural scene synthesis: sprite bank, grid composition, rasterisation
//! and balanced dataset generation.

pub mod compose;
pub mod dataset;
pub mod sprite;

pub use compose::{
    compose_scene, decode_pgm, encode_pgm, rasterize, rasterize_with, render_placements, Placement, RasterOptions, SceneRaster,
    SceneSpec, BACKGROUND, CELLS, GRID,
};
pub use dataset::{
    build_dataset, build_unseen_dataset, held_out_combinations, plan_dataset, summarize, DatasetConfig, DatasetInfo,
    DatasetKind, DatasetManifest, ManifestEntry, Split,
};
pub use sprite::{render_sprite, Family, Patch, SpriteSize, SpriteVariant, NUM_VARIANTS};
