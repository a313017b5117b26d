//! Two-stage training, checkpoints, evaluation and the ablation harness.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{DataSource, TrainConfig};
pub use eval::{
    ablation_csv, ablation_matrix, ablation_suite, ablation_table, bench, evaluate, score, time_forward,
    AblationRow, BenchReport, EvalReport, SampleEval, ABLATION_FILTERS, WARMUP_RUNS,
};
pub use optim::{lr_schedule, Adam, Moments, BETA1, BETA2, EPSILON};
pub use trainer::{epoch_order, sample_index, stack_images, trains_in_stage, LogLine, Trainer};

use crate::data::{gen_synthetic_pair, load_dataset, SynthConfig, StereoSample};
use crate::error::Result;

/// `count` generator samples with consecutive seeds starting at `cfg.seed`.
pub fn synth_samples(cfg: &SynthConfig, count: usize) -> Result<Vec<StereoSample>> {
    (0..count as u64)
        .map(|i| {
            gen_synthetic_pair(&SynthConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            })
        })
        .collect()
}

pub fn load_samples(src: &DataSource) -> Result<Vec<StereoSample>> {
    match src {
        DataSource::Dir(root) => load_dataset(root),
        DataSource::Synth { cfg, count } => synth_samples(cfg, *count),
    }
}
