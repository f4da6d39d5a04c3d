//! Network architectures: the convolutional encoder, hierarchically shared
//! trunk stages, per-task heads, and the multi-task loss.
//!
//! A multi-task model with task order (t1, t2, t3) is wired as
//!
//! ```text
//! image -> encoder -> stage1 -> stage2 -> stage3
//!                       |         |         |
//!                    head t1   head t2   head t3
//! ```
//!
//! so stage k only receives gradient from tasks k..3.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::ground_truth::{TaskLabels, NUM_COUNTS, NUM_QUANTIFIERS, NUM_RATIOS};
use crate::numeric::{cross_entropy, cross_entropy_grad, Activations, Graph, LayerKind, LayerSpec, ParamStore, Tensor};
use crate::rng::Rng;
use crate::scene::CELLS;

pub const ENCODER_PREFIX: &str = "encoder.";

/// Rows per gradient chunk. Chunks are reduced in index order, so results do
/// not depend on how many threads run them.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    SetComp,
    VagueQ,
    PropTarg,
    NTarg,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::SetComp, Task::VagueQ, Task::PropTarg, Task::NTarg];

    pub fn classes(self) -> usize {
        match self {
            Task::SetComp => 3,
            Task::VagueQ => NUM_QUANTIFIERS,
            Task::PropTarg => NUM_RATIOS,
            Task::NTarg => NUM_COUNTS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::SetComp => "setComp",
            Task::VagueQ => "vagueQ",
            Task::PropTarg => "propTarg",
            Task::NTarg => "nTarg",
        }
    }

    /// Lower-case form used on the command line and in run names.
    pub fn slug(self) -> &'static str {
        match self {
            Task::SetComp => "setcomp",
            Task::VagueQ => "vagueq",
            Task::PropTarg => "proptarg",
            Task::NTarg => "ntarg",
        }
    }

    /// Whether the task is scored by accuracy (everything but vagueQ).
    pub fn is_classification(self) -> bool {
        self != Task::VagueQ
    }

    /// Class index for classification tasks.
    pub fn class_of(self, labels: &TaskLabels) -> Option<usize> {
        match self {
            Task::SetComp => Some(labels.set_comp.index()),
            Task::PropTarg => Some(labels.prop_class),
            Task::NTarg => Some(labels.n_targ as usize),
            Task::VagueQ => None,
        }
    }

    /// Training target row: one-hot, or the full quantifier distribution.
    pub fn target_row(self, labels: &TaskLabels) -> Result<Vec<f64>> {
        match self {
            Task::VagueQ => Ok(labels.quant_dist.to_vec()),
            _ => {
                let c = self.class_of(labels).expect("classification task");
                if c >= self.classes() {
                    return Err(Error::Data(format!("{} label {c} out of range", self.name())));
                }
                let mut row = vec![0.0; self.classes()];
                row[c] = 1.0;
                Ok(row)
            }
        }
    }

    pub fn targets(self, labels: &[&TaskLabels]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(labels.len() * self.classes());
        for l in labels {
            data.extend(self.target_row(l)?);
        }
        Tensor::from_vec(&[labels.len(), self.classes()], data)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.slug() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (setcomp, vagueq, proptarg, ntarg)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelVariant {
    OneTaskFrozen(Task),
    OneTaskEnd2end(Task),
    MultiTaskProp,
    MultiTaskNumber,
    MultiTaskReversed,
}

impl ModelVariant {
    pub fn task_order(self) -> Vec<Task> {
        match self {
            ModelVariant::OneTaskFrozen(t) | ModelVariant::OneTaskEnd2end(t) => vec![t],
            ModelVariant::MultiTaskProp => vec![Task::SetComp, Task::VagueQ, Task::PropTarg],
            ModelVariant::MultiTaskNumber => vec![Task::SetComp, Task::VagueQ, Task::NTarg],
            ModelVariant::MultiTaskReversed => vec![Task::PropTarg, Task::VagueQ, Task::SetComp],
        }
    }

    pub fn frozen_encoder(self) -> bool {
        matches!(self, ModelVariant::OneTaskFrozen(_))
    }

    /// The family name without a task, as accepted by `--variant`.
    pub fn kind(self) -> &'static str {
        match self {
            ModelVariant::OneTaskFrozen(_) => "one-task-frozen",
            ModelVariant::OneTaskEnd2end(_) => "one-task-end2end",
            ModelVariant::MultiTaskProp => "multi-task-prop",
            ModelVariant::MultiTaskNumber => "multi-task-number",
            ModelVariant::MultiTaskReversed => "multi-task-reversed",
        }
    }

    /// Build from a family name and, for one-task families, a task.
    pub fn parse(kind: &str, task: Option<Task>) -> Result<Self> {
        let one = |f: fn(Task) -> ModelVariant| {
            task.map(f)
                .ok_or_else(|| Error::Config(format!("variant `{kind}` needs a task")))
        };
        match kind {
            "one-task-frozen" => one(ModelVariant::OneTaskFrozen),
            "one-task-end2end" => one(ModelVariant::OneTaskEnd2end),
            "multi-task-prop" => Ok(ModelVariant::MultiTaskProp),
            "multi-task-number" => Ok(ModelVariant::MultiTaskNumber),
            "multi-task-reversed" => Ok(ModelVariant::MultiTaskReversed),
            _ => Err(Error::Config(format!(
                "unknown variant `{kind}` (one-task-frozen, one-task-end2end, multi-task-prop, \
                 multi-task-number, multi-task-reversed)"
            ))),
        }
    }

    pub fn task(self) -> Option<Task> {
        match self {
            ModelVariant::OneTaskFrozen(t) | ModelVariant::OneTaskEnd2end(t) => Some(t),
            _ => None,
        }
    }
}

/// Run-name form, e.g. `one-task-end2end-setcomp` or `multi-task-prop`.
impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.task() {
            Some(t) => write!(f, "{}-{}", self.kind(), t.slug()),
            None => f.write_str(self.kind()),
        }
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(v) = ModelVariant::parse(s, None) {
            return Ok(v);
        }
        let (kind, task) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))?;
        ModelVariant::parse(kind, Some(task.parse()?))
    }
}

/// The convolutional feature extractor: three conv/relu/pool blocks ending
/// on a 5×5 grid of `dim`-wide vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub image_size: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            image_size: 100,
            conv1: 16,
            conv2: 32,
            dim: 64,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(20) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 20",
                self.image_size
            )));
        }
        if self.conv1 == 0 || self.conv2 == 0 || self.dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<Graph> {
        self.validate()?;
        let l = |n: &str, k| LayerSpec::new(format!("encoder.{n}"), k);
        Ok(Graph::new(vec![
            l("conv1", LayerKind::Conv3x3 { in_ch: 1, out_ch: self.conv1 }),
            l("relu1", LayerKind::Relu),
            l("pool1", LayerKind::MaxPool { window: 2 }),
            l("conv2", LayerKind::Conv3x3 { in_ch: self.conv1, out_ch: self.conv2 }),
            l("relu2", LayerKind::Relu),
            l("pool2", LayerKind::MaxPool { window: 2 }),
            l("conv3", LayerKind::Conv3x3 { in_ch: self.conv2, out_ch: self.dim }),
            l("relu3", LayerKind::Relu),
            l("pool3", LayerKind::MaxPool { window: self.image_size / 20 }),
        ]))
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.image_size, self.image_size, 1]
    }
}

/// Widths of everything above the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    /// Hidden width of stage 1 (D → hidden → trunk_width).
    pub stage1_hidden: usize,
    pub trunk_width: usize,
    /// Reduction width after concatenation in each head; also the hidden
    /// width of the frozen-feature perceptron.
    pub head_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderSpec::default(),
            stage1_hidden: 48,
            trunk_width: 32,
            head_width: 64,
        }
    }
}

pub const MODEL_KEYS: [&str; 7] = [
    "image_size",
    "conv1",
    "conv2",
    "feature_dim",
    "stage1_hidden",
    "trunk_width",
    "head_width",
];

impl ModelConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = ModelConfig::default();
        let get = |k: &str, def: usize| -> Result<usize> { Ok(kv.parsed::<usize>(k)?.unwrap_or(def)) };
        let cfg = ModelConfig {
            encoder: EncoderSpec {
                image_size: get("image_size", d.encoder.image_size)?,
                conv1: get("conv1", d.encoder.conv1)?,
                conv2: get("conv2", d.encoder.conv2)?,
                dim: get("feature_dim", d.encoder.dim)?,
            },
            stage1_hidden: get("stage1_hidden", d.stage1_hidden)?,
            trunk_width: get("trunk_width", d.trunk_width)?,
            head_width: get("head_width", d.head_width)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        for (k, v) in MODEL_KEYS.iter().zip([
            self.encoder.image_size,
            self.encoder.conv1,
            self.encoder.conv2,
            self.encoder.dim,
            self.stage1_hidden,
            self.trunk_width,
            self.head_width,
        ]) {
            kv.set(k, v.to_string());
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.stage1_hidden == 0 || self.trunk_width == 0 || self.head_width == 0 {
            return Err(Error::Config("trunk and head widths must be positive".into()));
        }
        Ok(())
    }
}

/// An assembled architecture. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub tasks: Vec<Task>,
    /// For the frozen variant this ends in a mean pool, so its output is
    /// `[N, D]`; otherwise `[N, 5, 5, D]`.
    pub encoder: Graph,
    pub stages: Vec<Graph>,
    pub heads: Vec<Graph>,
}

/// All activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub encoder: Activations,
    pub stages: Vec<Activations>,
    pub heads: Vec<Activations>,
}

impl ForwardPass {
    /// Softmax rows of head `k`.
    pub fn output(&self, k: usize) -> &Tensor {
        self.heads[k].output()
    }

    /// Input of head `k`'s final dense layer: the reduced 64-d vector for
    /// multi-task and end-to-end heads.
    pub fn head_features(&self, k: usize) -> &Tensor {
        let acts = &self.heads[k].0;
        &acts[acts.len() - 3]
    }
}

/// Loss of one batch: weighted total and unweighted per-task components.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub per_task: Vec<f64>,
}

impl Model {
    pub fn build(variant: ModelVariant, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tasks = variant.task_order();
        let mut encoder = config.encoder.graph()?;
        let d = config.encoder.dim;
        let (h, w) = (config.head_width, config.trunk_width);
        let dense = |name: String, fan_in, fan_out| LayerSpec::new(name, LayerKind::Dense { fan_in, fan_out });
        let relu = |name: String| LayerSpec::new(name, LayerKind::Relu);

        let (stages, heads) = if variant.frozen_encoder() {
            encoder.push(LayerSpec::new("encoder.mean", LayerKind::MeanPool));
            let t = tasks[0];
            let stage = Graph::new(vec![dense("stage1.hidden".into(), d, h), relu("stage1.relu".into())]);
            let head = Graph::new(vec![
                dense(format!("head.{t}.out"), h, t.classes()),
                LayerSpec::new(format!("head.{t}.softmax"), LayerKind::Softmax),
            ]);
            (vec![stage], vec![head])
        } else {
            let mut stages = Vec::new();
            let mut heads = Vec::new();
            for (k, t) in tasks.iter().enumerate() {
                let s = format!("stage{}", k + 1);
                let (fan_in, hidden) = if k == 0 { (d, config.stage1_hidden) } else { (w, w) };
                stages.push(Graph::new(vec![
                    dense(format!("{s}.dense1"), fan_in, hidden),
                    relu(format!("{s}.relu1")),
                    dense(format!("{s}.dense2"), hidden, w),
                    relu(format!("{s}.relu2")),
                ]));
                heads.push(Graph::new(vec![
                    LayerSpec::new(format!("head.{t}.concat"), LayerKind::Concat),
                    dense(format!("head.{t}.reduce"), CELLS * w, h),
                    relu(format!("head.{t}.relu")),
                    dense(format!("head.{t}.out"), h, t.classes()),
                    LayerSpec::new(format!("head.{t}.softmax"), LayerKind::Softmax),
                ]));
            }
            (stages, heads)
        };
        Ok(Model {
            variant,
            config,
            tasks,
            encoder,
            stages,
            heads,
        })
    }

    pub fn frozen_encoder(&self) -> bool {
        self.variant.frozen_encoder()
    }

    pub fn task_index(&self, task: Task) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task)
    }

    fn graphs(&self) -> impl Iterator<Item = &Graph> {
        std::iter::once(&self.encoder).chain(&self.stages).chain(&self.heads)
    }

    /// Fresh Glorot-initialised parameters. The encoder is marked frozen for
    /// the frozen variant (its values are expected to be replaced by
    /// pretrained ones).
    pub fn init_params(&self, rng: &mut Rng) -> ParamStore {
        let mut ps = ParamStore::new();
        for g in self.graphs() {
            g.init_params(&mut ps, rng);
        }
        if self.frozen_encoder() {
            ps.freeze_prefix(ENCODER_PREFIX);
        }
        ps
    }

    /// Shape of the encoder output for a batch.
    pub fn feature_shape(&self, batch: usize) -> Result<Vec<usize>> {
        self.encoder.output_shape(&self.config.encoder.input_shape(batch))
    }

    /// Check that a store holds exactly this model's parameters with the
    /// right shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let mut expected = ParamStore::new();
        let mut rng = crate::rng::seeded(0);
        for g in self.graphs() {
            g.init_params(&mut expected, &mut rng);
        }
        if expected.len() != params.len() {
            return Err(Error::Eval(format!(
                "expected {} parameter tensors for {}, found {}",
                expected.len(),
                self.variant,
                params.len()
            )));
        }
        for (k, p) in expected.iter() {
            let got = params
                .get(k)
                .map_err(|_| Error::Eval(format!("parameter `{k}` missing for {}", self.variant)))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Eval(format!(
                    "parameter `{k}` has shape {:?}, expected {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamStore, images: Tensor) -> Result<ForwardPass> {
        let encoder = self.encoder.forward(params, images)?;
        self.forward_from_features(params, encoder)
    }

    /// Forward from precomputed encoder activations (only the output is
    /// used downstream).
    pub fn forward_from_features(&self, params: &ParamStore, encoder: Activations) -> Result<ForwardPass> {
        let mut stages: Vec<Activations> = Vec::with_capacity(self.stages.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for (stage, head) in self.stages.iter().zip(&self.heads) {
            let input = stages.last().unwrap_or(&encoder).output().clone();
            let acts = stage.forward(params, input)?;
            heads.push(head.forward(params, acts.output().clone())?);
            stages.push(acts);
        }
        Ok(ForwardPass { encoder, stages, heads })
    }

    /// Backpropagate per-head output gradients (`None` = the task does not
    /// contribute). Branch gradients are summed where heads meet the trunk.
    pub fn backward(&self, params: &mut ParamStore, pass: &ForwardPass, head_grads: Vec<Option<Tensor>>) -> Result<()> {
        if head_grads.len() != self.heads.len() {
            return Err(Error::State(format!(
                "{} head gradients for {} heads",
                head_grads.len(),
                self.heads.len()
            )));
        }
        let mut carry: Option<Tensor> = None;
        for (k, g_head) in head_grads.into_iter().enumerate().rev() {
            let mut g = carry.take();
            if let Some(gh) = g_head {
                let dx = self.heads[k]
                    .backward(params, &pass.heads[k], gh, true)?
                    .expect("input gradient requested");
                match g.as_mut() {
                    Some(acc) => acc.add_assign(&dx),
                    None => g = Some(dx),
                }
            }
            if let Some(g) = g {
                let need_input = k > 0 || !self.frozen_encoder();
                carry = self.stages[k].backward(params, &pass.stages[k], g, need_input)?;
            }
        }
        if let Some(g) = carry {
            self.encoder.backward(params, &pass.encoder, g, false)?;
        }
        Ok(())
    }

    /// Forward, loss and gradient accumulation for one batch. The batch is
    /// split into fixed chunks that run in parallel; chunk gradients are
    /// summed into `params` in chunk order.
    pub fn accumulate(
        &self,
        params: &mut ParamStore,
        input: &BatchInput,
        labels: &[&TaskLabels],
        weights: &[f64],
    ) -> Result<LossParts> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if input.rows() != n {
            return Err(Error::Data(format!("{} inputs for {n} labels", input.rows())));
        }
        let targets: Vec<Tensor> = self.tasks.iter().map(|t| t.targets(labels)).collect::<Result<_>>()?;
        let chunks: Vec<(usize, usize)> = (0..n).step_by(GRAD_CHUNK).map(|s| (s, (s + GRAD_CHUNK).min(n))).collect();
        let shared: &ParamStore = params;
        let results: Vec<Result<(ParamStore, Vec<f64>)>> = chunks
            .par_iter()
            .map(|&(s, e)| {
                let idx: Vec<usize> = (s..e).collect();
                let mut local = shared.clone();
                let pass = self.forward_input(&local, &input.select(&idx))?;
                let scale = (e - s) as f64 / n as f64;
                let mut losses = Vec::with_capacity(self.tasks.len());
                let mut grads = Vec::with_capacity(self.tasks.len());
                for (k, t) in targets.iter().enumerate() {
                    let tk = t.select_rows(&idx);
                    let out = pass.output(k);
                    losses.push(cross_entropy(out, &tk)? * scale);
                    grads.push(if weights[k] != 0.0 {
                        let mut g = cross_entropy_grad(out, &tk)?;
                        g.scale(weights[k] * scale);
                        Some(g)
                    } else {
                        None
                    });
                }
                self.backward(&mut local, &pass, grads)?;
                Ok((local, losses))
            })
            .collect();
        let mut per_task = vec![0.0; self.tasks.len()];
        for r in results {
            let (local, losses) = r?;
            for (acc, l) in per_task.iter_mut().zip(losses) {
                *acc += l;
            }
            for ((_, dst), (_, src)) in params.iter_mut().zip(local.iter()) {
                dst.grad.add_assign(&src.grad);
            }
        }
        let total = per_task.iter().zip(weights).map(|(l, w)| l * w).sum();
        if !f64::is_finite(total) {
            return Err(Error::Divergence("loss".into()));
        }
        Ok(LossParts { total, per_task })
    }

    fn forward_input(&self, params: &ParamStore, input: &BatchInput) -> Result<ForwardPass> {
        match input {
            BatchInput::Images(x) => self.forward(params, x.clone()),
            BatchInput::Features(f) => self.forward_from_features(params, Activations(vec![f.clone()])),
        }
    }

    /// Forward in parallel chunks without gradients.
    pub fn predict(&self, params: &ParamStore, input: &BatchInput) -> Result<ForwardPass> {
        let n = input.rows();
        let chunks: Vec<Vec<usize>> = (0..n)
            .step_by(GRAD_CHUNK)
            .map(|s| (s..(s + GRAD_CHUNK).min(n)).collect())
            .collect();
        let passes: Vec<ForwardPass> = chunks
            .par_iter()
            .map(|idx| {
                let mut p = self.forward_input(params, &input.select(idx))?;
                // keep only what callers read: outputs and head features
                p.encoder = Activations(vec![p.encoder.into_output()]);
                Ok(p)
            })
            .collect::<Result<_>>()?;
        Ok(concat_passes(passes))
    }

    /// Weighted loss of precomputed outputs against labels.
    pub fn loss(&self, outputs: &[&Tensor], labels: &[&TaskLabels], weights: &[f64]) -> Result<LossParts> {
        multi_task_loss(&self.tasks, outputs, labels, weights)
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let mut ps = ParamStore::new();
        let mut rng = crate::rng::seeded(0);
        for g in self.graphs() {
            g.init_params(&mut ps, &mut rng);
        }
        ps.count()
    }
}

/// Either raw images `[N, H, W, 1]` or precomputed encoder outputs.
#[derive(Debug, Clone)]
pub enum BatchInput {
    Images(Tensor),
    Features(Tensor),
}

impl BatchInput {
    pub fn rows(&self) -> usize {
        match self {
            BatchInput::Images(t) | BatchInput::Features(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    fn select(&self, idx: &[usize]) -> BatchInput {
        match self {
            BatchInput::Images(t) => BatchInput::Images(t.select_rows(idx)),
            BatchInput::Features(t) => BatchInput::Features(t.select_rows(idx)),
        }
    }
}

fn concat_tensors(parts: Vec<Tensor>) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_vec(&shape, data).expect("row-compatible parts")
}

fn concat_acts(parts: Vec<Activations>) -> Activations {
    let layers = parts[0].0.len();
    let mut cols: Vec<Vec<Tensor>> = vec![Vec::with_capacity(parts.len()); layers];
    for a in parts {
        for (c, t) in cols.iter_mut().zip(a.0) {
            c.push(t);
        }
    }
    Activations(cols.into_iter().map(concat_tensors).collect())
}

fn concat_passes(passes: Vec<ForwardPass>) -> ForwardPass {
    let n_stages = passes[0].stages.len();
    let mut enc = Vec::new();
    let mut stages: Vec<Vec<Activations>> = vec![Vec::new(); n_stages];
    let mut heads: Vec<Vec<Activations>> = vec![Vec::new(); n_stages];
    for p in passes {
        enc.push(p.encoder);
        for (k, (s, h)) in p.stages.into_iter().zip(p.heads).enumerate() {
            stages[k].push(s);
            heads[k].push(h);
        }
    }
    ForwardPass {
        encoder: concat_acts(enc),
        stages: stages.into_iter().map(concat_acts).collect(),
        heads: heads.into_iter().map(concat_acts).collect(),
    }
}

/// L = Σ w_t · CE_t, with one-hot targets except for vagueQ, which trains
/// against the full quantifier distribution.
pub fn multi_task_loss(tasks: &[Task], outputs: &[&Tensor], labels: &[&TaskLabels], weights: &[f64]) -> Result<LossParts> {
    if outputs.len() != tasks.len() || weights.len() != tasks.len() {
        return Err(Error::Data(format!(
            "{} tasks, {} outputs, {} weights",
            tasks.len(),
            outputs.len(),
            weights.len()
        )));
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for (t, out) in tasks.iter().zip(outputs) {
        per_task.push(cross_entropy(out, &t.targets(labels)?)?);
    }
    let total = per_task.iter().zip(weights).map(|(l, w)| l * w).sum();
    Ok(LossParts { total, per_task })
}

/// Images as an `[N, H, W, 1]` tensor with intensities mapped to [-1,1]
/// (mid-grey background near 0).
pub fn images_to_tensor(images: &[&[u8]], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.len() != size * size {
            return Err(Error::Data(format!(
                "image has {} pixels, expected {size}x{size}",
                img.len()
            )));
        }
        data.extend(img.iter().map(|&v| v as f64 / 127.5 - 1.0));
    }
    Tensor::from_vec(&[images.len(), size, size, 1], data)
}
