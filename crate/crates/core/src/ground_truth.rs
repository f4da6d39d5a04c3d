//! Ratio classes, admissible cardinality pairs and per-scene supervision.
//!
//! A scene is labelled for four tasks: set comparison (3 classes), vague
//! quantification (a 9-way probability vector), proportion estimation (one of
//! the 17 canonical ratios) and absolute target count (0..=20).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, IoContext, Result};

/// Smallest and largest number of objects in a scene.
pub const MIN_OBJECTS: u32 = 3;
pub const MAX_OBJECTS: u32 = 20;

pub const NUM_RATIOS: usize = 17;
pub const NUM_QUANTIFIERS: usize = 9;
/// nTarg classes: 0..=20 targets.
pub const NUM_COUNTS: usize = MAX_OBJECTS as usize + 1;

pub const QUANTIFIERS: [&str; NUM_QUANTIFIERS] = [
    "none",
    "almost none",
    "few",
    "the smaller part",
    "some",
    "many",
    "most",
    "almost all",
    "all",
];

/// A target:non-target ratio in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ratio {
    pub targets: u32,
    pub non_targets: u32,
}

impl Ratio {
    pub fn new(targets: u32, non_targets: u32) -> Result<Self> {
        if targets == 0 && non_targets == 0 {
            return Err(Error::Domain("ratio 0:0 is undefined".into()));
        }
        if gcd(targets, non_targets) != 1 {
            return Err(Error::Domain(format!(
                "ratio {targets}:{non_targets} is not in lowest terms"
            )));
        }
        Ok(Ratio {
            targets,
            non_targets,
        })
    }

    pub fn proportion(&self) -> f64 {
        self.targets as f64 / (self.targets + self.non_targets) as f64
    }

    /// Index of this ratio in [`canonical_ratios`], if it is canonical.
    pub fn class_index(&self) -> Option<usize> {
        CANONICAL.iter().position(|&(a, b)| a == self.targets && b == self.non_targets)
    }

    /// Compact legend form: `1:4` -> "14", `9:1` -> "91".
    pub fn compact(&self) -> String {
        format!("{}{}", self.targets, self.non_targets)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.targets, self.non_targets)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Domain(format!("ratio `{s}` is not of the form a:b")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|_| Error::Domain(format!("ratio `{s}` has a non-integer part")))
        };
        Ratio::new(parse(a)?, parse(b)?)
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

const CANONICAL: [(u32, u32); NUM_RATIOS] = [
    (0, 1),
    (1, 9),
    (1, 5),
    (1, 4),
    (1, 3),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 1),
    (4, 3),
    (3, 2),
    (2, 1),
    (3, 1),
    (4, 1),
    (5, 1),
    (9, 1),
    (1, 0),
];

/// The 17 ratio classes in increasing-proportion order.
pub fn canonical_ratios() -> Vec<Ratio> {
    CANONICAL
        .iter()
        .map(|&(targets, non_targets)| Ratio {
            targets,
            non_targets,
        })
        .collect()
}

/// A concrete cardinality pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combination {
    pub n_targets: u32,
    pub n_non_targets: u32,
}

impl Combination {
    pub fn new(n_targets: u32, n_non_targets: u32) -> Self {
        Combination {
            n_targets,
            n_non_targets,
        }
    }

    pub fn total(&self) -> u32 {
        self.n_targets + self.n_non_targets
    }

    /// The ratio this pair reduces to. `None` for (0, 0).
    pub fn ratio(&self) -> Option<Ratio> {
        let g = gcd(self.n_targets, self.n_non_targets);
        (g != 0).then(|| Ratio {
            targets: self.n_targets / g,
            non_targets: self.n_non_targets / g,
        })
    }

    /// Within the object-count range and reducing to a canonical ratio.
    pub fn is_admissible(&self) -> bool {
        (MIN_OBJECTS..=MAX_OBJECTS).contains(&self.total())
            && self.ratio().and_then(|r| r.class_index()).is_some()
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.n_targets, self.n_non_targets)
    }
}

/// All multiples `(k·a, k·b)` of `ratio` with 3 <= k(a+b) <= 20.
pub fn enumerate_combinations(ratio: Ratio) -> Vec<Combination> {
    let unit = ratio.targets + ratio.non_targets;
    (1..=MAX_OBJECTS / unit)
        .filter(|k| k * unit >= MIN_OBJECTS)
        .map(|k| Combination::new(k * ratio.targets, k * ratio.non_targets))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetComp {
    More,
    Same,
    Less,
}

impl SetComp {
    pub const ALL: [SetComp; 3] = [SetComp::More, SetComp::Same, SetComp::Less];

    pub fn index(self) -> usize {
        match self {
            SetComp::More => 0,
            SetComp::Same => 1,
            SetComp::Less => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SetComp::More => "more",
            SetComp::Same => "same",
            SetComp::Less => "less",
        }
    }
}

/// Supervision for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskLabels {
    pub set_comp: SetComp,
    pub prop_class: usize,
    pub n_targ: u32,
    pub quant_dist: [f64; NUM_QUANTIFIERS],
}

/// Assign the four labels for an admissible combination.
pub fn label_scene(c: Combination, model: &QuantifierModel) -> Result<TaskLabels> {
    if !c.is_admissible() {
        return Err(Error::Label(format!("combination {c} is not admissible")));
    }
    let ratio = c.ratio().expect("admissible combination has a ratio");
    let set_comp = match c.n_targets.cmp(&c.n_non_targets) {
        std::cmp::Ordering::Greater => SetComp::More,
        std::cmp::Ordering::Equal => SetComp::Same,
        std::cmp::Ordering::Less => SetComp::Less,
    };
    Ok(TaskLabels {
        set_comp,
        prop_class: ratio.class_index().expect("admissible ratio is canonical"),
        n_targ: c.n_targets,
        quant_dist: model.distribution(ratio.proportion())?,
    })
}

/// Fixed quantifier prototypes on the proportion axis.
pub const PROTOTYPES: [f64; NUM_QUANTIFIERS] = [0.0, 0.10, 0.23, 0.38, 0.50, 0.62, 0.77, 0.90, 1.0];

/// Distance from either end of [0,1] inside which the endpoint sharpening ramps in.
pub const ENDPOINT_BAND: f64 = 0.02;
pub const DEFAULT_ENDPOINT_TEMP: f64 = 0.05;

/// Target band for the mean (over the 17 ratios) of the modal quantifier probability.
pub const MODAL_MASS_BAND: (f64, f64) = (0.50, 0.56);
const MODAL_MASS_TARGET: f64 = 0.53;
/// Bandwidth search interval for calibration.
pub const SIGMA_RANGE: (f64, f64) = (0.05, 0.40);

pub const QUANTIFIER_MODEL_VERSION: u32 = 1;
pub const QUANTIFIER_MODEL_FILE: &str = "quantifier_model.txt";

/// Gaussian-kernel softmax over quantifier prototypes.
///
/// Within [`ENDPOINT_BAND`] of 0 or 1 the kernel temperature is scaled down
/// linearly towards `endpoint_temp`, which makes `none`/`all` near-certain at
/// the endpoints while keeping the distribution continuous on (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantifierModel {
    pub prototypes: [f64; NUM_QUANTIFIERS],
    pub sigma: f64,
    pub endpoint_temp: f64,
}

impl QuantifierModel {
    pub fn with_sigma(sigma: f64) -> Self {
        QuantifierModel {
            prototypes: PROTOTYPES,
            sigma,
            endpoint_temp: DEFAULT_ENDPOINT_TEMP,
        }
    }

    fn temperature(&self, p: f64) -> f64 {
        let d = p.min(1.0 - p);
        if d >= ENDPOINT_BAND {
            1.0
        } else {
            self.endpoint_temp + (1.0 - self.endpoint_temp) * d / ENDPOINT_BAND
        }
    }

    pub fn distribution(&self, p: f64) -> Result<[f64; NUM_QUANTIFIERS]> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("proportion {p} outside [0, 1]")));
        }
        let scale = 2.0 * self.sigma * self.sigma * self.temperature(p);
        let mut logits = [0.0; NUM_QUANTIFIERS];
        for (l, mu) in logits.iter_mut().zip(&self.prototypes) {
            *l = -(p - mu).powi(2) / scale;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for l in logits.iter_mut() {
            *l /= sum;
        }
        Ok(logits)
    }

    /// Mean over the canonical ratios of the largest quantifier probability.
    pub fn mean_modal_mass(&self) -> f64 {
        let ratios = canonical_ratios();
        let total: f64 = ratios
            .iter()
            .map(|r| {
                self.distribution(r.proportion())
                    .expect("canonical proportions lie in [0,1]")
                    .iter()
                    .cloned()
                    .fold(0.0, f64::max)
            })
            .sum();
        total / ratios.len() as f64
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("version", QUANTIFIER_MODEL_VERSION.to_string());
        for (i, mu) in self.prototypes.iter().enumerate() {
            kv.set(&format!("mu_{}", i + 1), format!("{mu:?}"));
        }
        kv.set("sigma", format!("{:?}", self.sigma));
        kv.set("endpoint_temp", format!("{:?}", self.endpoint_temp));
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let version: u32 = kv.require("version")?;
        if version != QUANTIFIER_MODEL_VERSION {
            return Err(Error::Config(format!(
                "quantifier model version {version} is not supported"
            )));
        }
        let mut prototypes = [0.0; NUM_QUANTIFIERS];
        for (i, mu) in prototypes.iter_mut().enumerate() {
            *mu = kv.require(&format!("mu_{}", i + 1))?;
        }
        let model = QuantifierModel {
            prototypes,
            sigma: kv.require("sigma")?,
            endpoint_temp: kv.require("endpoint_temp")?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.prototypes;
        if p[0] != 0.0 || p[NUM_QUANTIFIERS - 1] != 1.0 || p.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "quantifier prototypes must increase strictly from 0 to 1".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.endpoint_temp > 0.0 && self.endpoint_temp <= 1.0) {
            return Err(Error::Config("sigma and endpoint_temp must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv().to_string()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        QuantifierModel::from_kv(&KvConfig::parse(&text)?)
    }
}

/// Shorthand for `model.distribution(p)`.
pub fn quantifier_distribution(model: &QuantifierModel, p: f64) -> Result<[f64; NUM_QUANTIFIERS]> {
    model.distribution(p)
}

/// Bisect the bandwidth so the mean modal mass hits 0.53, then check the band.
pub fn calibrate_quantifier_model() -> Result<QuantifierModel> {
    let (mut lo, mut hi) = SIGMA_RANGE;
    let f = |s: f64| QuantifierModel::with_sigma(s).mean_modal_mass();
    let in_band = |m: f64| m >= MODAL_MASS_BAND.0 && m <= MODAL_MASS_BAND.1;
    if f(lo) >= MODAL_MASS_TARGET && f(hi) <= MODAL_MASS_TARGET {
        // modal mass decreases with sigma
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > MODAL_MASS_TARGET {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // Round so the persisted file is short and exactly reproducible.
        let sigma = (0.5 * (lo + hi) * 1e6).round() / 1e6;
        let model = QuantifierModel::with_sigma(sigma);
        if in_band(model.mean_modal_mass()) {
            return Ok(model);
        }
    }
    let mut table = String::from("sigma\tmean_modal_mass\n");
    for i in 0..=14 {
        let s = SIGMA_RANGE.0 + (SIGMA_RANGE.1 - SIGMA_RANGE.0) * i as f64 / 14.0;
        table.push_str(&format!("{s:.4}\t{:.4}\n", f(s)));
    }
    Err(Error::Calibration { table })
}
