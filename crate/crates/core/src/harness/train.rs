//! Seeded, resumable training with lowest-validation-loss model selection,
//! followed by a single test evaluation and the artifact exports.
//!
//! Run directory contents:
//!
//! ```text
//! config.txt       effective configuration (written before training)
//! log.csv          per-epoch train/validation loss per task
//! epochNN.params   archives of the best-so-far and the latest epoch
//! metrics.csv      test metrics of the selected epoch
//! confusion*.csv   confusion counts; confusion.pgm heatmap of the main one
//! pca.csv          2-d PCA of the propTarg head vectors (if present)
//! quantcurves.csv  predicted vs true quantifier curves (if present)
//! timing.txt       wall-clock per epoch (kept out of metrics.csv)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::data::{Dataset, SplitData};
use super::export::{adjacency_fraction, confusion_csv, confusion_pgm, export_pca, export_quant_curves};
use super::metrics::{evaluate_outputs, Baselines, MetricsBundle};
use crate::config::KvConfig;
use crate::error::{Error, IoContext, Result};
use crate::ground_truth::TaskLabels;
use crate::model::{BatchInput, LossParts, Model, ModelConfig, ModelVariant, Task, ENCODER_PREFIX};
use crate::numeric::{cross_entropy, ParamStore, Tensor};
use crate::rng::{derive_seed, seeded, stream};
use crate::scene::DatasetKind;
use crate::settings::{Settings, TRAIN_KEYS};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.txt";

/// Rows per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

/// Progress sink; receives one line at a time.
pub type Reporter<'a> = &'a (dyn Fn(&str) + Sync);

pub fn quiet(_: &str) {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub settings: Settings,
    pub variant: ModelVariant,
    pub model: ModelConfig,
    pub dataset: DatasetKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sequential: bool,
    pub weights: Vec<f64>,
    /// End-to-end encoder starts from the pretrained weights.
    pub pretrained_init: bool,
}

impl TrainConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let variant = s.variant()?;
        Ok(TrainConfig {
            variant,
            model: s.model_config()?,
            dataset: s.dataset_kind()?,
            epochs: s.usize("epochs"),
            lr: s.f64("lr"),
            batch_size: s.usize("batch_size"),
            seed: s.u64("seed"),
            sequential: s.bool("sequential"),
            weights: s.loss_weights_for(variant.task_order().len())?,
            pretrained_init: s.pretrained_init()?,
            settings: s.clone(),
        })
    }

    /// Short digest of the outcome-determining keys.
    pub fn hash(&self) -> String {
        config_hash(&self.settings.restrict(TRAIN_KEYS))
    }

    /// Whether training starts from the pretrained encoder.
    pub fn needs_encoder(&self) -> bool {
        self.variant.frozen_encoder() || self.pretrained_init
    }

    pub fn run_name(&self) -> String {
        format!("{}-s{}", self.variant, self.seed)
    }
}

pub fn config_hash(kv: &KvConfig) -> String {
    kv.digest()
}

/// What to do when the run directory already holds a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Existing {
    /// Fail unless the directory is empty or absent.
    Refuse,
    /// Continue (or reuse) a run with the same configuration hash.
    Resume,
    /// Delete whatever is there and start over.
    Overwrite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossParts,
    pub val: LossParts,
}

/// The persisted outcome of a run, as written to `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub variant: ModelVariant,
    pub seed: u64,
    pub config_hash: String,
    pub selected_epoch: usize,
    pub test_count: usize,
    pub test_total_loss: f64,
    pub scores: BTreeMap<Task, f64>,
    pub losses: BTreeMap<Task, f64>,
    pub baselines: BTreeMap<Task, Baselines>,
    /// Fraction of propTarg (or nTarg) errors on adjacent classes.
    pub adjacency: Option<f64>,
    pub pca: Option<PcaSummary>,
    pub quant_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaSummary {
    pub silhouette: f64,
    pub within: f64,
    pub between: f64,
    pub explained: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub summary: RunSummary,
    pub log: Vec<EpochLog>,
}

impl ExperimentRecord {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(METRICS_FILE);
        if !p.exists() {
            return Err(Error::MissingData(format!("no completed run at {}", run_dir.display())));
        }
        let summary = RunSummary::from_csv(&std::fs::read_to_string(&p).at(&p)?)?;
        let tasks = summary.variant.task_order();
        let log = read_log(&run_dir.join(LOG_FILE), tasks.len())?;
        Ok(ExperimentRecord { summary, log })
    }
}

/// The task whose confusion matrix is exported as the heatmap.
pub fn main_confusion_task(tasks: &[Task]) -> Option<Task> {
    [Task::PropTarg, Task::NTarg, Task::SetComp]
        .into_iter()
        .find(|t| tasks.contains(t))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".into(), |v| v.to_string())
}

impl RunSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,name,value\n");
        let mut row = |sec: &str, name: &str, v: String| writeln!(s, "{sec},{name},{v}").unwrap();
        row("run", "variant", self.variant.to_string());
        row("run", "seed", self.seed.to_string());
        row("run", "config_hash", self.config_hash.clone());
        row("run", "selected_epoch", self.selected_epoch.to_string());
        row("run", "test_scenes", self.test_count.to_string());
        row("run", "test_total_loss", self.test_total_loss.to_string());
        for (t, score) in &self.scores {
            let name = t.name();
            row(name, if t.is_classification() { "accuracy" } else { "pearson_r" }, score.to_string());
            row(name, "loss", self.losses[t].to_string());
            let b = &self.baselines[t];
            row(name, "chance", b.chance.to_string());
            row(name, "majority", b.majority.to_string());
            row(name, "random", b.random.to_string());
        }
        if let Some(t) = main_confusion_task(&self.variant.task_order()) {
            row(t.name(), "adjacent_error_fraction", fmt_opt(self.adjacency));
        }
        if let Some(p) = &self.pca {
            row("pca", "silhouette", p.silhouette.to_string());
            row("pca", "within_distance", p.within.to_string());
            row("pca", "between_distance", p.between.to_string());
            row("pca", "explained_pc1", p.explained[0].to_string());
            row("pca", "explained_pc2", p.explained[1].to_string());
        }
        if let Some(g) = self.quant_gap {
            row("quantcurves", "mean_abs_gap", g.to_string());
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut m: BTreeMap<(String, String), String> = BTreeMap::new();
        for line in text.lines().skip(1) {
            let mut it = line.splitn(3, ',');
            match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), Some(c)) => {
                    m.insert((a.into(), b.into()), c.into());
                }
                _ => return Err(Error::Data(format!("bad metrics line `{line}`"))),
            }
        }
        let get = |a: &str, b: &str| -> Result<&str> {
            m.get(&(a.to_string(), b.to_string()))
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("metrics lack {a}.{b}")))
        };
        let num = |a: &str, b: &str| -> Result<f64> {
            get(a, b)?
                .parse()
                .map_err(|_| Error::Data(format!("metrics {a}.{b} is not a number")))
        };
        let opt = |a: &str, b: &str| -> Result<Option<f64>> {
            match m.get(&(a.to_string(), b.to_string())).map(String::as_str) {
                None | Some("na") => Ok(None),
                Some(_) => num(a, b).map(Some),
            }
        };
        let variant: ModelVariant = get("run", "variant")?.parse()?;
        let tasks = variant.task_order();
        let (mut scores, mut losses, mut baselines) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for t in &tasks {
            let n = t.name();
            scores.insert(*t, num(n, if t.is_classification() { "accuracy" } else { "pearson_r" })?);
            losses.insert(*t, num(n, "loss")?);
            baselines.insert(
                *t,
                Baselines {
                    chance: num(n, "chance")?,
                    majority: num(n, "majority")?,
                    random: num(n, "random")?,
                },
            );
        }
        let pca = match opt("pca", "silhouette")? {
            Some(silhouette) => Some(PcaSummary {
                silhouette,
                within: num("pca", "within_distance")?,
                between: num("pca", "between_distance")?,
                explained: [num("pca", "explained_pc1")?, num("pca", "explained_pc2")?],
            }),
            None => None,
        };
        let adjacency = match main_confusion_task(&tasks) {
            Some(t) => opt(t.name(), "adjacent_error_fraction")?,
            None => None,
        };
        Ok(RunSummary {
            variant,
            seed: num("run", "seed")? as u64,
            config_hash: get("run", "config_hash")?.to_string(),
            selected_epoch: num("run", "selected_epoch")? as usize,
            test_count: num("run", "test_scenes")? as usize,
            test_total_loss: num("run", "test_total_loss")?,
            scores,
            losses,
            baselines,
            adjacency,
            pca,
            quant_gap: opt("quantcurves", "mean_abs_gap")?,
        })
    }
}

fn log_header(tasks: &[Task]) -> String {
    let mut h = String::from("epoch,train_total");
    for t in tasks {
        write!(h, ",train_{}", t.name()).unwrap();
    }
    h.push_str(",val_total");
    for t in tasks {
        write!(h, ",val_{}", t.name()).unwrap();
    }
    h
}

fn log_row(e: &EpochLog) -> String {
    let mut s = format!("{},{}", e.epoch, e.train.total);
    for v in &e.train.per_task {
        write!(s, ",{v}").unwrap();
    }
    write!(s, ",{}", e.val.total).unwrap();
    for v in &e.val.per_task {
        write!(s, ",{v}").unwrap();
    }
    s
}

fn read_log(path: &Path, n_tasks: usize) -> Result<Vec<EpochLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).at(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Data(format!("bad log line `{line}` in {}", path.display())))?;
        if v.len() != 3 + 2 * n_tasks {
            return Err(Error::Data(format!("log line `{line}` has {} fields", v.len())));
        }
        out.push(EpochLog {
            epoch: v[0] as usize,
            train: LossParts {
                total: v[1],
                per_task: v[2..2 + n_tasks].to_vec(),
            },
            val: LossParts {
                total: v[2 + n_tasks],
                per_task: v[3 + n_tasks..].to_vec(),
            },
        });
    }
    Ok(out)
}

pub fn epoch_archive(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("epoch{epoch:02}.params"))
}

/// First epoch with the lowest total validation loss.
pub fn select_epoch(log: &[EpochLog]) -> Option<usize> {
    log.iter()
        .min_by(|a, b| a.val.total.total_cmp(&b.val.total))
        .map(|e| e.epoch)
}

/// Model outputs over a whole split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricsBundle,
    /// Softmax rows per task, in model task order.
    pub outputs: Vec<Tensor>,
    /// Head vectors (input of each head's output layer) per task.
    pub head_features: Vec<Tensor>,
}

/// Precomputed frozen-encoder features, or images, for a split.
enum Inputs<'a> {
    Images(&'a SplitData),
    Features(Tensor),
}

impl Inputs<'_> {
    fn batch(&self, idx: &[usize]) -> Result<BatchInput> {
        match self {
            Inputs::Images(d) => d.input(idx),
            Inputs::Features(f) => Ok(BatchInput::Features(f.select_rows(idx))),
        }
    }
}

fn inputs<'a>(model: &Model, params: &ParamStore, data: &'a SplitData) -> Result<Inputs<'a>> {
    if !model.frozen_encoder() {
        return Ok(Inputs::Images(data));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for idx in all.chunks(EVAL_BATCH) {
        let acts = model.encoder.forward(params, data.images(idx)?)?;
        parts.push(acts.into_output());
    }
    let d = parts[0].shape()[1];
    let rows: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Inputs::Features(Tensor::from_vec(&[data.len(), d], rows)?))
}

fn run_outputs(model: &Model, params: &ParamStore, inputs: &Inputs, n: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let k = model.tasks.len();
    let mut outs: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut feats: Vec<Vec<f64>> = vec![Vec::new(); k];
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let pass = model.predict(params, &inputs.batch(idx)?)?;
        for t in 0..k {
            outs[t].extend_from_slice(pass.output(t).data());
            feats[t].extend_from_slice(pass.head_features(t).data());
        }
    }
    let to_tensor = |v: Vec<f64>| {
        let w = v.len() / n;
        Tensor::from_vec(&[n, w], v)
    };
    Ok((
        outs.into_iter().map(to_tensor).collect::<Result<_>>()?,
        feats.into_iter().map(to_tensor).collect::<Result<_>>()?,
    ))
}

/// Evaluate `params` on a split.
pub fn evaluate(model: &Model, params: &ParamStore, data: &SplitData) -> Result<Evaluation> {
    model.check_params(params)?;
    if data.image_size != model.config.encoder.image_size {
        return Err(Error::Eval(format!(
            "split has {}px images but the model expects {}px",
            data.image_size, model.config.encoder.image_size
        )));
    }
    let inp = inputs(model, params, data)?;
    let (outputs, head_features) = run_outputs(model, params, &inp, data.len())?;
    let labels: Vec<&TaskLabels> = data.entries.iter().map(|e| &e.labels).collect();
    let metrics = evaluate_outputs(&model.tasks, &outputs, &labels)?;
    Ok(Evaluation {
        metrics,
        outputs,
        head_features,
    })
}

/// Unweighted validation loss; the total drives model selection.
fn val_loss(model: &Model, params: &ParamStore, inputs: &Inputs, data: &SplitData) -> Result<LossParts> {
    let (outputs, _) = run_outputs(model, params, inputs, data.len())?;
    let labels: Vec<&TaskLabels> = data.entries.iter().map(|e| &e.labels).collect();
    let mut per_task = Vec::new();
    for (t, out) in model.tasks.iter().zip(&outputs) {
        per_task.push(cross_entropy(out, &t.targets(&labels)?)?);
    }
    Ok(LossParts {
        total: per_task.iter().sum(),
        per_task,
    })
}

fn prepare_dir(dir: &Path, cfg: &TrainConfig, existing: Existing) -> Result<()> {
    let cfg_path = dir.join(CONFIG_FILE);
    let occupied = dir.exists() && std::fs::read_dir(dir).at(dir)?.next().is_some();
    if occupied {
        match existing {
            Existing::Refuse => {
                return Err(Error::Config(format!(
                    "run directory {} is not empty (use --force to overwrite or --resume to continue)",
                    dir.display()
                )))
            }
            Existing::Overwrite => std::fs::remove_dir_all(dir).at(dir)?,
            Existing::Resume => {
                let old = KvConfig::parse(&std::fs::read_to_string(&cfg_path).at(&cfg_path)?)?;
                let old_hash = config_hash(&Settings::from_kv(&old)?.restrict(TRAIN_KEYS));
                if old_hash != cfg.hash() {
                    return Err(Error::Config(format!(
                        "run directory {} holds a run with a different configuration",
                        dir.display()
                    )));
                }
                return Ok(());
            }
        }
    }
    std::fs::create_dir_all(dir).at(dir)?;
    let text = format!("# config_hash {}\n{}", cfg.hash(), cfg.settings.kv());
    std::fs::write(&cfg_path, text).at(&cfg_path)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).at(path)
}

/// Train one model on `data`, writing everything into `dir`. The pretrained
/// encoder is required when [`TrainConfig::needs_encoder`] holds.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    encoder: Option<&ParamStore>,
    dir: &Path,
    existing: Existing,
    report: Reporter,
) -> Result<ExperimentRecord> {
    let model = Model::build(cfg.variant, cfg.model)?;
    if data.info.config.image_size != cfg.model.encoder.image_size {
        return Err(Error::Config(format!(
            "dataset has {}px images but image_size is {}",
            data.info.config.image_size, cfg.model.encoder.image_size
        )));
    }
    prepare_dir(dir, cfg, existing)?;
    if dir.join(METRICS_FILE).exists() {
        let rec = ExperimentRecord::load(dir)?;
        report(&format!("{}: already complete", cfg.run_name()));
        return Ok(rec);
    }
    let n_tasks = model.tasks.len();
    let mut log = read_log(&dir.join(LOG_FILE), n_tasks)?;
    if log.len() > cfg.epochs {
        return Err(Error::Data(format!("{} has more epochs than configured", dir.display())));
    }

    let mut params = model.init_params(&mut seeded(derive_seed(cfg.seed, &[stream::INIT])));
    if cfg.needs_encoder() {
        let enc = encoder.ok_or_else(|| Error::MissingData(format!("{} needs a pretrained encoder", cfg.run_name())))?;
        params.copy_prefix_from(enc, ENCODER_PREFIX)?;
    }
    if let Some(last) = log.last() {
        let p = epoch_archive(dir, last.epoch);
        let mut loaded = ParamStore::load(&p)?;
        model.check_params(&loaded)?;
        if model.frozen_encoder() {
            loaded.freeze_prefix(ENCODER_PREFIX);
        }
        params = loaded;
        report(&format!("{}: resuming after epoch {}", cfg.run_name(), last.epoch));
    } else {
        report(&format!("{}: config\n{}", cfg.run_name(), cfg.settings.kv()));
    }

    let train_in = inputs(&model, &params, &data.train)?;
    let val_in = inputs(&model, &params, &data.val)?;
    let mut timing = String::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let log_path = dir.join(LOG_FILE);
    if log.is_empty() {
        write(&log_path, format!("{}\n", log_header(&model.tasks)))?;
    }
    let start = Instant::now();
    for epoch in log.len() + 1..=cfg.epochs {
        let t0 = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seeded(derive_seed(cfg.seed, &[stream::SHUFFLE, epoch as u64])));
        let mut sums = vec![0.0; n_tasks];
        for idx in order.chunks(cfg.batch_size) {
            let batch = train_in.batch(idx)?;
            let labels = data.train.labels(idx);
            let parts = step(&model, &mut params, &batch, &labels, cfg)
                .map_err(|e| divergence(e, dir, epoch, log.last().map(|l| l.epoch)))?;
            for (s, l) in sums.iter_mut().zip(&parts.per_task) {
                *s += l * idx.len() as f64;
            }
        }
        let per_task: Vec<f64> = sums.iter().map(|s| s / data.train.len() as f64).collect();
        let train = LossParts {
            total: per_task.iter().zip(&cfg.weights).map(|(l, w)| l * w).sum(),
            per_task,
        };
        let val = val_loss(&model, &params, &val_in, &data.val)?;
        if !val.total.is_finite() || !train.total.is_finite() {
            return Err(divergence(Error::Divergence("loss".into()), dir, epoch, log.last().map(|l| l.epoch)));
        }
        let entry = EpochLog { epoch, train, val };
        params.save(&epoch_archive(dir, epoch))?;
        let best_before = select_epoch(&log);
        log.push(entry);
        let mut f = std::fs::OpenOptions::new().append(true).open(&log_path).at(&log_path)?;
        writeln!(f, "{}", log_row(log.last().expect("pushed"))).at(&log_path)?;
        f.flush().at(&log_path)?;
        // keep only the best-so-far and the latest archive
        let best_now = select_epoch(&log);
        for old in [best_before, Some(epoch - 1)].into_iter().flatten() {
            if old != epoch && Some(old) != best_now {
                let p = epoch_archive(dir, old);
                if p.exists() {
                    std::fs::remove_file(&p).at(&p)?;
                    let idx = crate::numeric::params::index_path(&p);
                    if idx.exists() {
                        std::fs::remove_file(&idx).at(&idx)?;
                    }
                }
            }
        }
        let e = log.last().expect("pushed");
        writeln!(timing, "epoch {epoch} {:.3}s", t0.elapsed().as_secs_f64()).unwrap();
        report(&format!(
            "{} epoch {epoch}/{}: train {:.4} val {:.4} ({:.1}s)",
            cfg.run_name(),
            cfg.epochs,
            e.train.total,
            e.val.total,
            t0.elapsed().as_secs_f64()
        ));
    }

    let selected = select_epoch(&log).expect("at least one epoch");
    let mut best = ParamStore::load(&epoch_archive(dir, selected))?;
    if model.frozen_encoder() {
        best.freeze_prefix(ENCODER_PREFIX);
    }
    let summary = finish(&model, &best, &data.test, cfg, selected, dir)?;
    writeln!(timing, "total {:.3}s", start.elapsed().as_secs_f64()).unwrap();
    write(&dir.join(TIMING_FILE), timing)?;
    report(&format!("{}: selected epoch {selected}", cfg.run_name()));
    Ok(ExperimentRecord { summary, log })
}

fn divergence(e: Error, dir: &Path, epoch: usize, last_good: Option<usize>) -> Error {
    match e {
        Error::Divergence(what) => Error::Divergence(format!(
            "{what} at epoch {epoch}; last good archive: {}",
            last_good.map_or_else(|| "none".into(), |k| epoch_archive(dir, k).display().to_string())
        )),
        other => other,
    }
}

/// One optimisation step on a batch: a single summed-loss update, or one
/// update per task in sequential mode. Returns the per-task losses seen.
fn step(model: &Model, params: &mut ParamStore, batch: &BatchInput, labels: &[&TaskLabels], cfg: &TrainConfig) -> Result<LossParts> {
    if !cfg.sequential {
        let parts = model.accumulate(params, batch, labels, &cfg.weights)?;
        params.sgd_step(cfg.lr)?;
        return Ok(parts);
    }
    let k = model.tasks.len();
    let mut per_task = vec![0.0; k];
    for t in 0..k {
        if cfg.weights[t] == 0.0 {
            let parts = model.accumulate(params, batch, labels, &vec![0.0; k])?;
            per_task[t] = parts.per_task[t];
            params.zero_grads();
            continue;
        }
        let mut w = vec![0.0; k];
        w[t] = cfg.weights[t];
        let parts = model.accumulate(params, batch, labels, &w)?;
        per_task[t] = parts.per_task[t];
        params.sgd_step(cfg.lr)?;
    }
    Ok(LossParts {
        total: per_task.iter().zip(&cfg.weights).map(|(l, w)| l * w).sum(),
        per_task,
    })
}

/// Test evaluation of the selected weights plus every export.
fn finish(model: &Model, params: &ParamStore, test: &SplitData, cfg: &TrainConfig, selected: usize, dir: &Path) -> Result<RunSummary> {
    let ev = evaluate(model, params, test)?;
    let labels: Vec<&TaskLabels> = test.entries.iter().map(|e| &e.labels).collect();
    let mut adjacency = None;
    for m in &ev.metrics.tasks {
        if let Some(c) = &m.confusion {
            write(&dir.join(format!("confusion_{}.csv", m.task.slug())), confusion_csv(m.task, c))?;
        }
    }
    if let Some(t) = main_confusion_task(&model.tasks) {
        let c = ev.metrics.task(t).and_then(|m| m.confusion.as_ref()).expect("classification task");
        write(&dir.join("confusion.csv"), confusion_csv(t, c))?;
        write(&dir.join("confusion.pgm"), confusion_pgm(c, 8))?;
        adjacency = adjacency_fraction(c);
    }
    let mut pca = None;
    if let Some(k) = model.task_index(Task::PropTarg) {
        let p = export_pca(&ev.head_features[k], &test.entries)?;
        write(&dir.join("pca.csv"), &p.csv)?;
        pca = Some(PcaSummary {
            silhouette: p.silhouette,
            within: p.within,
            between: p.between,
            explained: p.explained,
        });
    }
    let mut quant_gap = None;
    if let Some(k) = model.task_index(Task::VagueQ) {
        let q = export_quant_curves(&ev.outputs[k], &labels)?;
        write(&dir.join("quantcurves.csv"), &q.csv)?;
        quant_gap = Some(q.mean_abs_gap);
    }
    let summary = RunSummary {
        variant: cfg.variant,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        selected_epoch: selected,
        test_count: ev.metrics.count,
        test_total_loss: ev.metrics.total_loss,
        scores: ev.metrics.tasks.iter().map(|m| (m.task, m.score)).collect(),
        losses: ev.metrics.tasks.iter().map(|m| (m.task, m.loss)).collect(),
        baselines: ev.metrics.tasks.iter().map(|m| (m.task, m.baselines)).collect(),
        adjacency,
        pca,
        quant_gap,
    };
    write(&dir.join(METRICS_FILE), summary.to_csv())?;
    Ok(summary)
}

/// Load the selected weights of a completed (or partial) run.
pub fn load_selected(dir: &Path) -> Result<(TrainConfig, ParamStore, usize)> {
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::MissingData(format!("no run at {}", dir.display())));
    }
    let settings = Settings::from_kv(&KvConfig::parse(&std::fs::read_to_string(&cfg_path).at(&cfg_path)?)?)?;
    let cfg = TrainConfig::from_settings(&settings)?;
    let log = read_log(&dir.join(LOG_FILE), cfg.variant.task_order().len())?;
    let selected = select_epoch(&log).ok_or_else(|| Error::MissingData(format!("{} has no epochs", dir.display())))?;
    let mut params = ParamStore::load(&epoch_archive(dir, selected))?;
    if cfg.variant.frozen_encoder() {
        params.freeze_prefix(ENCODER_PREFIX);
    }
    Ok((cfg, params, selected))
}

/// Re-run the exports of a run directory on the test split.
pub fn export_run(dir: &Path, data: &Dataset) -> Result<RunSummary> {
    let (cfg, params, selected) = load_selected(dir)?;
    let model = Model::build(cfg.variant, cfg.model)?;
    finish(&model, &params, &data.test, &cfg, selected, dir)
}
