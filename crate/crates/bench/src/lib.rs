//! Shared fixtures for the benchmarks: a desk-scale model and a prepared
//! planted cohort.

use alter_core::config::{ModelConfig, TrainConfig};
use alter_core::data::{generate_cohort, CohortSpec, Prepared};
use alter_core::model::AlterModel;
use alter_core::Result;

pub struct Fixture {
    pub model: AlterModel,
    pub data: Vec<Prepared>,
    pub train: TrainConfig,
}

/// `n` tri-modal samples and a model of width `d` sized to them.
pub fn fixture(n: usize, d: usize, n_patches: usize) -> Result<Fixture> {
    let spec = CohortSpec { n, n_patches, ..CohortSpec::default() };
    let cohort = generate_cohort(&spec)?;
    let all: Vec<usize> = (0..n).collect();
    let model_cfg = ModelConfig {
        hidden_dim: d,
        heads: 4,
        encoder_depth: 2,
        n_blocks: 2,
        patch_dim: spec.patch_dim,
        n_genes: spec.n_genes,
        vocab_size: spec.vocab_size,
        max_text_len: spec.text_len,
        n_classes: spec.classes,
        ..ModelConfig::default()
    };
    let binner = cohort.fit_binner(&all, model_cfg.n_bins)?;
    let data = cohort.prepare(&binner)?;
    let train = TrainConfig { epochs: 1, batch_size: 16, ..TrainConfig::default() };
    let model = AlterModel::new(model_cfg, cohort.partition.clone(), train.tau_init, 0)?;
    Ok(Fixture { model, data, train })
}
