//! Encoder pretraining: classify single-sprite images into the 245 sprite
//! variants, then keep the encoder as a frozen feature extractor.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::KvConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::{images_to_tensor, EncoderSpec, ENCODER_PREFIX};
use crate::numeric::{cross_entropy, cross_entropy_grad, Graph, LayerKind, LayerSpec, ParamStore, Tensor};
use crate::rng::{derive_seed, seeded, stream};
use crate::scene::{render_placements, Placement, RasterOptions, SpriteSize, SpriteVariant, CELLS, NUM_VARIANTS};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderSpec,
    pub seed: u64,
    pub max_epochs: usize,
    pub lr: f64,
    /// Fixed at 32; independent of the training batch size.
    pub batch_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Stop once validation accuracy reaches this.
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderSpec::default(),
            seed: 1,
            max_epochs: 50,
            lr: 0.1,
            batch_size: 32,
            train_per_class: 20,
            val_per_class: 4,
            target_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epochs: usize,
    /// Validation accuracy after each epoch.
    pub val_accuracy: Vec<f64>,
}

impl PretrainReport {
    pub fn final_accuracy(&self) -> f64 {
        self.val_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// One single-sprite image: the variant in a random cell with random size,
/// flip and in-cell offset.
pub fn sprite_image(class: usize, image_size: usize, seed: u64) -> Result<Vec<u8>> {
    let variant = SpriteVariant::from_class_index(class)?;
    let mut rng = seeded(seed);
    let placement = Placement {
        cell: rng.gen_range(0..CELLS as u8),
        family: variant.family,
        variant_id: variant.variant_id,
        size: SpriteSize::ALL[rng.gen_range(0..3)],
        flipped: rng.gen_bool(0.5),
    };
    let raster = render_placements(&[placement], seed, image_size, image_size, RasterOptions { jitter: true })?;
    Ok(raster.to_u8())
}

struct Bank {
    images: Vec<Vec<u8>>,
    classes: Vec<usize>,
}

fn bank(cfg: &PretrainConfig, split: u64, per_class: usize) -> Result<Bank> {
    use rayon::prelude::*;
    let items: Vec<(usize, usize)> = (0..NUM_VARIANTS)
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    let images = items
        .par_iter()
        .map(|&(c, i)| {
            let seed = derive_seed(cfg.seed, &[stream::PRETRAIN_DATA, split, c as u64, i as u64]);
            sprite_image(c, cfg.encoder.image_size, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Bank {
        images,
        classes: items.iter().map(|&(c, _)| c).collect(),
    })
}

/// The encoder followed by a global max pool over the 5×5 grid and a linear
/// softmax classifier. A mean pool here would dilute the one occupied cell
/// 25-fold and training stalls.
pub fn pretrain_graph(encoder: &EncoderSpec) -> Result<Graph> {
    let mut g = encoder.graph()?;
    g.push(LayerSpec::new("pretrain.max", LayerKind::MaxPool { window: 5 }));
    g.push(LayerSpec::new("pretrain.flat", LayerKind::Concat));
    g.push(LayerSpec::new(
        "pretrain.out",
        LayerKind::Dense {
            fan_in: encoder.dim,
            fan_out: NUM_VARIANTS,
        },
    ));
    g.push(LayerSpec::new("pretrain.softmax", LayerKind::Softmax));
    Ok(g)
}

fn batch(bank: &Bank, idx: &[usize], size: usize) -> Result<(Tensor, Tensor)> {
    let imgs: Vec<&[u8]> = idx.iter().map(|&i| bank.images[i].as_slice()).collect();
    let x = images_to_tensor(&imgs, size)?;
    let mut t = Tensor::zeros(&[idx.len(), NUM_VARIANTS]);
    for (r, &i) in idx.iter().enumerate() {
        t.data_mut()[r * NUM_VARIANTS + bank.classes[i]] = 1.0;
    }
    Ok((x, t))
}

fn accuracy(graph: &Graph, params: &ParamStore, bank: &Bank, size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let all: Vec<usize> = (0..bank.images.len()).collect();
    for idx in all.chunks(64) {
        let (x, _) = batch(bank, idx, size)?;
        let out = graph.forward(params, x)?.into_output();
        for (r, &i) in idx.iter().enumerate() {
            if argmax(out.row(r)) == bank.classes[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / bank.images.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Train the encoder on sprite classification. Returns the encoder
/// parameters (marked frozen) and the training report.
pub fn pretrain_encoder(cfg: &PretrainConfig, mut log: impl FnMut(usize, f64, f64)) -> Result<(ParamStore, PretrainReport)> {
    let graph = pretrain_graph(&cfg.encoder)?;
    let train = bank(cfg, 0, cfg.train_per_class)?;
    let val = bank(cfg, 1, cfg.val_per_class)?;
    let mut params = ParamStore::new();
    graph.init_params(&mut params, &mut seeded(derive_seed(cfg.seed, &[stream::INIT])));
    let size = cfg.encoder.image_size;
    let mut report = PretrainReport {
        epochs: 0,
        val_accuracy: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.images.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut seeded(derive_seed(cfg.seed, &[stream::SHUFFLE, epoch as u64])));
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, t) = batch(&train, idx, size)?;
            let acts = graph.forward(&params, x)?;
            let loss = cross_entropy(acts.output(), &t)?;
            if !loss.is_finite() {
                return Err(Error::Divergence("pretraining loss".into()));
            }
            loss_sum += loss * idx.len() as f64;
            graph.backward(&mut params, &acts, cross_entropy_grad(acts.output(), &t)?, false)?;
            params.sgd_step(cfg.lr)?;
        }
        let acc = accuracy(&graph, &params, &val, size)?;
        log(epoch, loss_sum / train.images.len() as f64, acc);
        report.epochs = epoch;
        report.val_accuracy.push(acc);
        if acc >= cfg.target_accuracy {
            break;
        }
    }
    let chance = 1.0 / NUM_VARIANTS as f64;
    if report.final_accuracy() < 2.0 * chance {
        return Err(Error::Pretraining(format!(
            "validation accuracy {:.4} after {} epochs is below twice chance ({:.4})",
            report.final_accuracy(),
            report.epochs,
            2.0 * chance
        )));
    }
    let mut encoder = params.subset(ENCODER_PREFIX);
    encoder.freeze_prefix(ENCODER_PREFIX);
    Ok((encoder, report))
}

impl PretrainReport {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("epochs", self.epochs.to_string());
        kv.set("final_val_accuracy", format!("{:.6}", self.final_accuracy()));
        kv.set(
            "val_accuracy",
            self.val_accuracy.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(","),
        );
        kv
    }
}

/// Load a pretrained encoder archive, checking it fits `spec`.
pub fn load_encoder(path: &Path, spec: &EncoderSpec) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::MissingData(format!(
            "no pretrained encoder at {} (run pretrain-encoder first)",
            path.display()
        )));
    }
    let mut ps = ParamStore::load(path)?;
    let mut expected = ParamStore::new();
    spec.graph()?.init_params(&mut expected, &mut seeded(0));
    for (k, p) in expected.iter() {
        let got = ps.get(k).map_err(|_| Error::Eval(format!("encoder archive lacks `{k}`")))?;
        if got.value.shape() != p.value.shape() {
            return Err(Error::Eval(format!(
                "encoder archive `{k}` has shape {:?}, expected {:?}",
                got.value.shape(),
                p.value.shape()
            )));
        }
    }
    ps.freeze_prefix(ENCODER_PREFIX);
    Ok(ps)
}

pub fn save_encoder(params: &ParamStore, report: &PretrainReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    params.save(path)?;
    let p = path.with_extension("report.txt");
    std::fs::write(&p, report.to_kv().to_string()).at(&p)
}
