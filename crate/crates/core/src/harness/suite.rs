//! Experiment suites: a fixed set of variants trained over several seeds,
//! aggregated into a comparison table (median with min/max per cell).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::data::Dataset;
use super::train::{train, Existing, ExperimentRecord, Reporter, TrainConfig};
use super::{ensure_encoder, pretrain_config};
use crate::error::{Error, IoContext, Result};
use crate::model::{ModelVariant, Task};
use crate::scene::DatasetKind;
use crate::settings::Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SuiteName {
    Main,
    Number,
    Reversed,
    Unseen,
}

impl SuiteName {
    pub const ALL: [SuiteName; 4] = [SuiteName::Main, SuiteName::Number, SuiteName::Reversed, SuiteName::Unseen];

    pub fn name(self) -> &'static str {
        match self {
            SuiteName::Main => "main",
            SuiteName::Number => "number",
            SuiteName::Reversed => "reversed",
            SuiteName::Unseen => "unseen",
        }
    }

    pub fn variants(self) -> Vec<ModelVariant> {
        use ModelVariant::*;
        use Task::*;
        match self {
            SuiteName::Main | SuiteName::Unseen => vec![
                OneTaskFrozen(SetComp),
                OneTaskFrozen(VagueQ),
                OneTaskFrozen(PropTarg),
                OneTaskEnd2end(SetComp),
                OneTaskEnd2end(VagueQ),
                OneTaskEnd2end(PropTarg),
                MultiTaskProp,
            ],
            SuiteName::Number => vec![OneTaskFrozen(NTarg), OneTaskEnd2end(NTarg), MultiTaskNumber],
            SuiteName::Reversed => vec![MultiTaskReversed],
        }
    }

    pub fn dataset(self) -> DatasetKind {
        match self {
            SuiteName::Unseen => DatasetKind::Unseen,
            _ => DatasetKind::Standard,
        }
    }

    pub fn columns(self) -> Vec<Task> {
        match self {
            SuiteName::Number => vec![Task::SetComp, Task::VagueQ, Task::NTarg],
            _ => vec![Task::SetComp, Task::VagueQ, Task::PropTarg],
        }
    }

    pub fn table_file(self) -> &'static str {
        match self {
            SuiteName::Main => "table2.csv",
            SuiteName::Number => "table2_number.csv",
            SuiteName::Reversed => "table2_reversed.csv",
            SuiteName::Unseen => "table4.csv",
        }
    }
}

impl fmt::Display for SuiteName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SuiteName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}` (main, number, reversed, unseen)")))
    }
}

/// Table row label of a variant: its family, without the task.
pub fn row_label(v: ModelVariant) -> &'static str {
    v.kind()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// (seed, score) per run.
    pub values: Vec<(u64, f64)>,
}

impl Cell {
    pub fn from_values(mut values: Vec<(u64, f64)>) -> Self {
        values.sort_by_key(|v| v.0);
        let mut sorted: Vec<f64> = values.iter().map(|v| v.1).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Cell {
            median,
            min: sorted[0],
            max: sorted[n - 1],
            values,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: SuiteName,
    /// Row labels in table order (after the chance row).
    pub rows: Vec<String>,
    pub cells: BTreeMap<(String, Task), Cell>,
    /// Reference baseline per column, from the test split.
    pub chance: BTreeMap<Task, f64>,
    pub records: Vec<ExperimentRecord>,
}

impl SuiteResult {
    pub fn cell(&self, row: &str, task: Task) -> Option<&Cell> {
        self.cells.get(&(row.to_string(), task))
    }

    /// Median score of `variant` on `task`.
    pub fn median(&self, variant: ModelVariant, task: Task) -> Option<f64> {
        self.cell(row_label(variant), task).map(|c| c.median)
    }

    pub fn table_csv(&self) -> String {
        let cols = self.name.columns();
        let mut s = String::from("model");
        for t in &cols {
            write!(s, ",{}", t.name()).unwrap();
        }
        s.push_str("\nchance/majority");
        for t in &cols {
            match self.chance.get(t) {
                Some(v) => write!(s, ",{v:.3}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(r);
            for t in &cols {
                match self.cell(r, *t) {
                    Some(c) => write!(s, ",{:.3}", c.median).unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Median/min/max of every filled cell.
    pub fn range_csv(&self) -> String {
        let mut s = String::from("model,task,median,min,max\n");
        for ((r, t), c) in &self.cells {
            writeln!(s, "{r},{},{},{},{}", t.name(), c.median, c.min, c.max).unwrap();
        }
        s
    }

    /// The raw per-seed values behind every cell.
    pub fn seeds_csv(&self) -> String {
        let mut s = String::from("model,task,seed,value\n");
        for ((r, t), c) in &self.cells {
            for (seed, v) in &c.values {
                writeln!(s, "{r},{},{seed},{v}", t.name()).unwrap();
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let stem = self.name.table_file().trim_end_matches(".csv");
        for (file, text) in [
            (self.name.table_file().to_string(), self.table_csv()),
            (format!("{stem}_range.csv"), self.range_csv()),
            (format!("{stem}_seeds.csv"), self.seeds_csv()),
        ] {
            let p = dir.join(file);
            std::fs::write(&p, text).at(&p)?;
        }
        Ok(())
    }
}

pub fn suite_dir(settings: &Settings, name: SuiteName) -> PathBuf {
    settings.run_dir().join(name.name())
}

/// Settings of one run of a suite.
pub fn run_settings(base: &Settings, name: SuiteName, variant: ModelVariant, seed: u64) -> Result<Settings> {
    let mut s = base.clone();
    s.set_variant(variant);
    s.set("seed", seed.to_string())?;
    s.set(
        "dataset",
        match name.dataset() {
            DatasetKind::Standard => "standard",
            DatasetKind::Unseen => "unseen",
        },
    )?;
    Ok(s)
}

/// Aggregate completed run records into a table.
pub fn aggregate(name: SuiteName, records: Vec<ExperimentRecord>) -> SuiteResult {
    let mut rows: Vec<String> = Vec::new();
    for v in name.variants() {
        let r = row_label(v).to_string();
        if !rows.contains(&r) {
            rows.push(r);
        }
    }
    let mut values: BTreeMap<(String, Task), Vec<(u64, f64)>> = BTreeMap::new();
    let mut chance = BTreeMap::new();
    for rec in &records {
        let s = &rec.summary;
        for (t, score) in &s.scores {
            if !name.columns().contains(t) {
                continue;
            }
            values
                .entry((row_label(s.variant).to_string(), *t))
                .or_default()
                .push((s.seed, *score));
            chance.entry(*t).or_insert_with(|| s.baselines[t].reference());
        }
    }
    SuiteResult {
        name,
        rows,
        cells: values.into_iter().map(|(k, v)| (k, Cell::from_values(v))).collect(),
        chance,
        records,
    }
}

/// Train (or resume) every run of a suite and write its table.
pub fn run_suite(name: SuiteName, settings: &Settings, existing: Existing, report: Reporter) -> Result<SuiteResult> {
    let data_path = settings.dataset_path(name.dataset());
    let data = Dataset::load(&data_path).map_err(|e| match e {
        Error::MissingData(m) => Error::Protocol(format!("suite {name} needs the {} dataset: {m}", data_path.display())),
        other => other,
    })?;
    let dir = suite_dir(settings, name);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let mut jobs = Vec::new();
    for v in name.variants() {
        for seed in settings.seeds()? {
            jobs.push(TrainConfig::from_settings(&run_settings(settings, name, v, seed)?)?);
        }
    }
    let encoder = if jobs.iter().any(TrainConfig::needs_encoder) {
        Some(ensure_encoder(&pretrain_config(settings)?, &settings.encoder_path(), report)?)
    } else {
        None
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.usize("jobs"))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} jobs: {e}", settings.usize("jobs"))))?;
    let records: Vec<ExperimentRecord> = pool.install(|| {
        jobs.par_iter()
            .with_max_len(1)
            .map(|cfg| train(cfg, &data, encoder.as_ref(), &dir.join(cfg.run_name()), existing, report))
            .collect::<Result<_>>()
    })?;
    let result = aggregate(name, records);
    result.write(&dir)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_three() {
        let c = Cell::from_values(vec![(3, 0.5), (1, 0.9), (2, 0.1)]);
        assert_eq!((c.median, c.min, c.max), (0.5, 0.1, 0.9));
        assert_eq!(c.values[0], (1, 0.9));
    }

    #[test]
    fn suite_layouts() {
        assert_eq!(SuiteName::Main.variants().len(), 7);
        assert_eq!(SuiteName::Unseen.columns(), [Task::SetComp, Task::VagueQ, Task::PropTarg]);
        assert!(!SuiteName::Unseen.columns().contains(&Task::NTarg));
        assert_eq!("number".parse::<SuiteName>().unwrap(), SuiteName::Number);
    }
}
