//! Balanced dataset generation and the JSON-lines manifest.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! dataset.txt            generation config (key = value)
//! quantifier_model.txt   calibrated quantifier model used for labels
//! manifest.jsonl         one JSON object per scene
//! train/<sceneId>.pgm    (and val/, test/)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compose::{compose_scene, rasterize_with, Placement, RasterOptions, SceneSpec, GRID};
use crate::config::KvConfig;
use crate::error::{Error, IoContext, Result};
use crate::ground_truth::{
    calibrate_quantifier_model, canonical_ratios, enumerate_combinations, label_scene, Combination, QuantifierModel,
    Ratio, TaskLabels, QUANTIFIER_MODEL_FILE,
};
use crate::rng::{derive_seed, seeded, stream};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_CONFIG_FILE: &str = "dataset.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Standard,
    /// One combination per ratio held out of training.
    Unseen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub scenes_per_ratio: usize,
    /// train/val/test fractions; `None` uses the kind's default.
    pub splits: Option<[f64; 3]>,
    pub jitter: bool,
}

pub const STANDARD_SPLITS: [f64; 3] = [0.7, 0.1, 0.2];
pub const UNSEEN_SPLITS: [f64; 3] = [0.8, 0.1, 0.1];

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 100,
            scenes_per_ratio: 1000,
            splits: None,
            jitter: false,
        }
    }
}

pub fn parse_splits(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("splits `{s}` must be three numbers")))?;
    let arr: [f64; 3] = parts
        .try_into()
        .map_err(|_| Error::Config(format!("splits `{s}` must be three numbers")))?;
    if arr.iter().any(|&f| f < 0.0) || (arr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("splits `{s}` must be non-negative and sum to 1")));
    }
    Ok(arr)
}

pub fn format_splits(s: &[f64; 3]) -> String {
    format!("{},{},{}", s[0], s[1], s[2])
}

impl DatasetConfig {
    pub fn splits_for(&self, kind: DatasetKind) -> [f64; 3] {
        self.splits.unwrap_or(match kind {
            DatasetKind::Standard => STANDARD_SPLITS,
            DatasetKind::Unseen => UNSEEN_SPLITS,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(GRID) {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 5", self.image_size)));
        }
        if self.image_size / GRID < super::sprite::MIN_CELL_PX {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        if self.scenes_per_ratio == 0 {
            return Err(Error::Config("scenes_per_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ManifestEntry {
    pub scene_id: String,
    pub split: Split,
    pub ratio: String,
    pub n_targets: u32,
    pub n_non_targets: u32,
    pub placements: Vec<Placement>,
    pub labels: TaskLabels,
}

impl ManifestEntry {
    /// Image path relative to the dataset directory.
    pub fn image_path(&self) -> PathBuf {
        PathBuf::from(self.split.name()).join(format!("{}.pgm", self.scene_id))
    }

    pub fn combination(&self) -> Combination {
        Combination::new(self.n_targets, self.n_non_targets)
    }

    pub fn ratio(&self) -> Result<Ratio> {
        self.ratio.parse()
    }

    /// Rebuild the symbolic scene (the scene seed is not persisted).
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let spec = SceneSpec {
            ratio: self.ratio()?,
            combination: self.combination(),
            placements: self.placements.clone(),
            scene_seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("manifest entries serialise"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest { entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingData(format!("no manifest at {}", path.display())));
        }
        let f = std::fs::File::open(&path).at(&path)?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.at(&path)?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?,
            );
        }
        Ok(DatasetManifest { entries })
    }

    /// Scene counts per (split, ratio string).
    pub fn counts_by_ratio(&self) -> BTreeMap<(Split, String), usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry((e.split, e.ratio.clone())).or_insert(0) += 1;
        }
        m
    }

    /// Distinct combinations per split.
    pub fn combinations(&self, split: Split) -> std::collections::BTreeSet<Combination> {
        self.split(split).map(|e| e.combination()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Planned {
    scene_id: String,
    split: Split,
    ratio: Ratio,
    combination: Combination,
    scene_seed: u64,
}

/// `n` items spread as evenly as integer division allows over `k` bins;
/// the first `n % k` bins get one extra.
fn even_counts(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn split_sizes(n: usize, fr: [f64; 3]) -> [usize; 3] {
    let train = ((n as f64 * fr[0]).round() as usize).min(n);
    let val = ((n as f64 * fr[1]).round() as usize).min(n - train);
    [train, val, n - train - val]
}

fn plan_standard(cfg: &DatasetConfig, master_seed: u64) -> Vec<Planned> {
    let fr = cfg.splits_for(DatasetKind::Standard);
    let mut planned = Vec::new();
    for (ri, ratio) in canonical_ratios().into_iter().enumerate() {
        let combos = enumerate_combinations(ratio);
        let mut scenes: Vec<(usize, Combination)> = combos
            .iter()
            .zip(even_counts(cfg.scenes_per_ratio, combos.len()))
            .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
            .enumerate()
            .collect();
        scenes.shuffle(&mut seeded(derive_seed(master_seed, &[stream::SPLIT, ri as u64])));
        let sizes = split_sizes(scenes.len(), fr);
        let mut it = scenes.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(sizes) {
            for (k, c) in it.by_ref().take(n) {
                planned.push(Planned {
                    scene_id: format!("r{ri:02}-{k:05}"),
                    split,
                    ratio,
                    combination: c,
                    scene_seed: derive_seed(master_seed, &[stream::SCENE, ri as u64, k as u64]),
                });
            }
        }
    }
    planned
}

/// One held-out combination index per canonical ratio.
pub fn held_out_combinations(master_seed: u64) -> Result<Vec<Combination>> {
    let mut rng = seeded(derive_seed(master_seed, &[stream::HOLDOUT]));
    canonical_ratios()
        .into_iter()
        .map(|r| {
            let combos = enumerate_combinations(r);
            if combos.len() < 2 {
                return Err(Error::Config(format!("ratio {r} has fewer than 2 combinations; cannot hold one out")));
            }
            Ok(combos[rng.gen_range(0..combos.len())])
        })
        .collect()
}

/// Scenes per ratio of the unseen dataset: 14/17 of the standard count.
pub fn unseen_scenes_per_ratio(cfg: &DatasetConfig) -> usize {
    cfg.scenes_per_ratio * 14 / 17
}

fn plan_unseen(cfg: &DatasetConfig, master_seed: u64) -> Result<Vec<Planned>> {
    let fr = cfg.splits_for(DatasetKind::Unseen);
    let per_ratio = unseen_scenes_per_ratio(cfg);
    let held = held_out_combinations(master_seed)?;
    let train_n = (per_ratio as f64 * fr[0]).round() as usize;
    let val_n = (per_ratio as f64 * fr[1]).round() as usize;
    let test_n = (per_ratio as f64 * fr[2]).round() as usize;
    let mut planned = Vec::new();
    for (ri, ratio) in canonical_ratios().into_iter().enumerate() {
        let seen: Vec<Combination> = enumerate_combinations(ratio)
            .into_iter()
            .filter(|c| *c != held[ri])
            .collect();
        let mut k = 0usize;
        let mut push = |split: Split, c: Combination, planned: &mut Vec<Planned>| {
            planned.push(Planned {
                scene_id: format!("u{ri:02}-{k:05}"),
                split,
                ratio,
                combination: c,
                scene_seed: derive_seed(master_seed, &[stream::SCENE, 1000 + ri as u64, k as u64]),
            });
            k += 1;
        };
        for (&c, n) in seen.iter().zip(even_counts(train_n, seen.len())) {
            for _ in 0..n {
                push(Split::Train, c, &mut planned);
            }
        }
        for _ in 0..val_n {
            push(Split::Val, held[ri], &mut planned);
        }
        for _ in 0..test_n {
            push(Split::Test, held[ri], &mut planned);
        }
    }
    Ok(planned)
}

fn realise(planned: Vec<Planned>, model: &QuantifierModel) -> Result<Vec<(ManifestEntry, SceneSpec)>> {
    planned
        .into_iter()
        .map(|p| {
            let spec = compose_scene(p.ratio, p.combination, p.scene_seed)?;
            let labels = label_scene(p.combination, model)?;
            let entry = ManifestEntry {
                scene_id: p.scene_id,
                split: p.split,
                ratio: p.ratio.to_string(),
                n_targets: p.combination.n_targets,
                n_non_targets: p.combination.n_non_targets,
                placements: spec.placements.clone(),
                labels,
            };
            Ok((entry, spec))
        })
        .collect()
}

fn sort_entries(scenes: &mut [(ManifestEntry, SceneSpec)]) {
    scenes.sort_by(|a, b| (a.0.split, &a.0.scene_id).cmp(&(b.0.split, &b.0.scene_id)));
}

/// Manifest (with specs) without touching the filesystem.
pub fn plan_dataset(
    cfg: &DatasetConfig,
    kind: DatasetKind,
    master_seed: u64,
    model: &QuantifierModel,
) -> Result<Vec<(ManifestEntry, SceneSpec)>> {
    cfg.validate()?;
    let planned = match kind {
        DatasetKind::Standard => plan_standard(cfg, master_seed),
        DatasetKind::Unseen => plan_unseen(cfg, master_seed)?,
    };
    let mut scenes = realise(planned, model)?;
    sort_entries(&mut scenes);
    Ok(scenes)
}

/// Generate a standard dataset under `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, master_seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    build(cfg, DatasetKind::Standard, master_seed, out_dir)
}

/// Generate the held-out-combination dataset under `out_dir`.
pub fn build_unseen_dataset(cfg: &DatasetConfig, master_seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    build(cfg, DatasetKind::Unseen, master_seed, out_dir)
}

fn build(cfg: &DatasetConfig, kind: DatasetKind, master_seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let model = calibrate_quantifier_model()?;
    let scenes = plan_dataset(cfg, kind, master_seed, &model)?;
    for split in Split::ALL {
        let d = out_dir.join(split.name());
        std::fs::create_dir_all(&d).at(&d)?;
    }
    let opts = RasterOptions { jitter: cfg.jitter };
    scenes.par_iter().try_for_each(|(entry, spec)| {
        let img = rasterize_with(spec, cfg.image_size, cfg.image_size, opts)?;
        img.write_pgm(&out_dir.join(entry.image_path()))
    })?;
    let manifest = DatasetManifest {
        entries: scenes.into_iter().map(|(e, _)| e).collect(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut w = BufWriter::new(std::fs::File::create(&path).at(&path)?);
    w.write_all(manifest.to_jsonl().as_bytes()).at(&path)?;
    w.flush().at(&path)?;
    model.save(&out_dir.join(QUANTIFIER_MODEL_FILE))?;
    let info = DatasetInfo {
        config: cfg.clone(),
        kind,
        master_seed,
    };
    let p = out_dir.join(DATASET_CONFIG_FILE);
    std::fs::write(&p, info.to_kv().to_string()).at(&p)?;
    Ok(manifest)
}

/// Contents of `dataset.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInfo {
    pub config: DatasetConfig,
    pub kind: DatasetKind,
    pub master_seed: u64,
}

impl DatasetInfo {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set(
            "kind",
            match self.kind {
                DatasetKind::Standard => "standard",
                DatasetKind::Unseen => "unseen",
            },
        );
        kv.set("image_size", self.config.image_size.to_string());
        kv.set("scenes_per_ratio", self.config.scenes_per_ratio.to_string());
        kv.set("splits", format_splits(&self.config.splits_for(self.kind)));
        kv.set("jitter", self.config.jitter.to_string());
        kv.set("seed", self.master_seed.to_string());
        kv
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(DATASET_CONFIG_FILE);
        if !p.exists() {
            return Err(Error::MissingData(format!("no dataset at {}", dir.display())));
        }
        let kv = KvConfig::parse(&std::fs::read_to_string(&p).at(&p)?)?;
        let kind = match kv.get("kind") {
            Some("unseen") => DatasetKind::Unseen,
            Some("standard") => DatasetKind::Standard,
            other => return Err(Error::Data(format!("unknown dataset kind {other:?}"))),
        };
        Ok(DatasetInfo {
            config: DatasetConfig {
                image_size: kv.require("image_size")?,
                scenes_per_ratio: kv.require("scenes_per_ratio")?,
                splits: Some(parse_splits(kv.get("splits").unwrap_or("0.7,0.1,0.2"))?),
                jitter: kv.parsed("jitter")?.unwrap_or(false),
            },
            kind,
            master_seed: kv.require("seed")?,
        })
    }
}

/// Human-readable generation summary.
pub fn summarize(manifest: &DatasetManifest, kind: DatasetKind) -> String {
    let ratios = canonical_ratios();
    let per_ratio: Vec<usize> = ratios.iter().map(|&r| enumerate_combinations(r).len()).collect();
    let total: usize = per_ratio.iter().sum();
    let mut s = format!(
        "combinations: {total} (min {}, max {})\n",
        per_ratio.iter().min().expect("17 ratios"),
        per_ratio.iter().max().expect("17 ratios"),
    );
    s.push_str(&format!(
        "scenes: {} (train {}, val {}, test {})\n",
        manifest.entries.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    ));
    if kind == DatasetKind::Unseen {
        let held = manifest.combinations(Split::Test);
        s.push_str(&format!("held-out combinations: {}\n", held.len()));
    }
    let counts = manifest.counts_by_ratio();
    s.push_str("ratio\ttrain\tval\ttest\n");
    for r in &ratios {
        let key = r.to_string();
        let c = |sp| counts.get(&(sp, key.clone())).copied().unwrap_or(0);
        s.push_str(&format!("{key}\t{}\t{}\t{}\n", c(Split::Train), c(Split::Val), c(Split::Test)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> QuantifierModel {
        calibrate_quantifier_model().unwrap()
    }

    fn manifest(cfg: &DatasetConfig, kind: DatasetKind, seed: u64) -> DatasetManifest {
        DatasetManifest {
            entries: plan_dataset(cfg, kind, seed, &model())
                .unwrap()
                .into_iter()
                .map(|(e, _)| e)
                .collect(),
        }
    }

    #[test]
    fn even_counts_spread() {
        assert_eq!(even_counts(1000, 4), vec![250; 4]);
        assert_eq!(even_counts(10, 3), vec![4, 3, 3]);
    }

    #[test]
    fn default_standard_counts() {
        let m = manifest(&DatasetConfig::default(), DatasetKind::Standard, 1);
        assert_eq!(m.entries.len(), 17_000);
        assert_eq!(
            (m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)),
            (11_900, 1_700, 3_400)
        );
        for ((split, _), n) in m.counts_by_ratio() {
            let expected = match split {
                Split::Train => 700,
                Split::Val => 100,
                Split::Test => 200,
            };
            assert_eq!(n, expected);
        }
        let one_four: Vec<_> = m.entries.iter().filter(|e| e.ratio == "1:4").collect();
        for c in enumerate_combinations("1:4".parse().unwrap()) {
            assert_eq!(one_four.iter().filter(|e| e.combination() == c).count(), 250);
        }
    }

    #[test]
    fn unseen_holds_out_one_combination_per_ratio() {
        let m = manifest(&DatasetConfig::default(), DatasetKind::Unseen, 5);
        let train = m.combinations(Split::Train);
        let test = m.combinations(Split::Test);
        assert_eq!(test.len(), 17);
        assert_eq!(m.combinations(Split::Val), test);
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len(), 80);
        let n = m.entries.len() as f64;
        assert!((n - 14_000.0).abs() / 14_000.0 < 0.01, "{n}");
        assert!((m.count(Split::Train) as f64 / n - 0.8).abs() < 0.01);
        let counts = m.counts_by_ratio();
        let train_counts: Vec<usize> = counts
            .iter()
            .filter(|((s, _), _)| *s == Split::Train)
            .map(|(_, &n)| n)
            .collect();
        assert!(train_counts.iter().max().unwrap() - train_counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn plan_is_deterministic_and_seed_sensitive() {
        let cfg = DatasetConfig {
            scenes_per_ratio: 20,
            ..Default::default()
        };
        let a = manifest(&cfg, DatasetKind::Standard, 3);
        assert_eq!(a, manifest(&cfg, DatasetKind::Standard, 3));
        assert_ne!(a, manifest(&cfg, DatasetKind::Standard, 4));
    }

    #[test]
    fn manifest_json_shape() {
        let cfg = DatasetConfig {
            scenes_per_ratio: 2,
            ..Default::default()
        };
        let m = manifest(&cfg, DatasetKind::Standard, 1);
        let v: serde_json::Value = serde_json::from_str(m.to_jsonl().lines().next().unwrap()).unwrap();
        let obj = v.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
        for k in ["sceneId", "split", "ratio", "nTargets", "nNonTargets", "placements", "labels"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(obj.len(), 7);
        let p = &v["placements"][0];
        for k in ["cell", "family", "variantId", "size", "flipped"] {
            assert!(p.get(k).is_some(), "{k}");
        }
        let labels = &v["labels"];
        for k in ["setComp", "propClass", "nTarg", "quantDist"] {
            assert!(labels.get(k).is_some(), "{k}");
        }
        assert_eq!(labels["quantDist"].as_array().unwrap().len(), 9);
        assert_eq!(DatasetManifest::from_jsonl(&m.to_jsonl()).unwrap(), m);
    }

    #[test]
    fn relabelling_reproduces_manifest() {
        let cfg = DatasetConfig {
            scenes_per_ratio: 5,
            ..Default::default()
        };
        let m = manifest(&cfg, DatasetKind::Standard, 9);
        let text = m.to_jsonl();
        let back = DatasetManifest::from_jsonl(&text).unwrap();
        let qm = model();
        for e in &back.entries {
            assert_eq!(label_scene(e.combination(), &qm).unwrap(), e.labels);
        }
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn splits_parse() {
        assert_eq!(parse_splits("0.7,0.1,0.2").unwrap(), [0.7, 0.1, 0.2]);
        assert!(parse_splits("0.7,0.1").is_err());
        assert!(parse_splits("0.7,0.2,0.2").is_err());
    }
}
