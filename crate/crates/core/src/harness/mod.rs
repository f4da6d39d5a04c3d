//! Training, evaluation, artifact exports and experiment suites.

pub mod data;
pub mod export;
pub mod metrics;
pub mod suite;
pub mod train;

use std::path::Path;

pub use data::{Dataset, SplitData};
pub use metrics::{evaluate_outputs, Baselines, MetricsBundle, TaskMetrics};
pub use suite::{run_suite, SuiteName, SuiteResult};
pub use train::{evaluate, train, Evaluation, Existing, ExperimentRecord, Reporter, RunSummary, TrainConfig};

use crate::error::Result;
use crate::numeric::ParamStore;
use crate::pretrain::{load_encoder, pretrain_encoder, save_encoder, PretrainConfig};
use crate::settings::Settings;

pub fn pretrain_config(s: &Settings) -> Result<PretrainConfig> {
    Ok(PretrainConfig {
        encoder: s.model_config()?.encoder,
        seed: s.u64("pretrain_seed"),
        max_epochs: s.usize("pretrain_epochs"),
        lr: s.f64("pretrain_lr"),
        train_per_class: s.usize("pretrain_per_class"),
        val_per_class: s.usize("pretrain_val_per_class"),
        target_accuracy: s.f64("pretrain_target"),
        ..PretrainConfig::default()
    })
}

/// Load the pretrained encoder at `path`, pretraining it first if absent.
pub fn ensure_encoder(cfg: &PretrainConfig, path: &Path, report: Reporter) -> Result<ParamStore> {
    if !path.exists() {
        report(&format!("pretraining encoder -> {}", path.display()));
        let (params, rep) = pretrain_encoder(cfg, |epoch, loss, acc| {
            report(&format!("pretrain epoch {epoch}: loss {loss:.4} val accuracy {acc:.4}"))
        })?;
        save_encoder(&params, &rep, path)?;
    }
    load_encoder(path, &cfg.encoder)
}
