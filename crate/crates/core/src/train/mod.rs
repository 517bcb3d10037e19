//! Training loops for the acoustic model, the teacher and the student.

mod acoustic;
mod data;
mod log;
mod vocoder;

pub use acoustic::{build_acoustic, AcousticStepLog, AcousticTrainer};
pub use data::{cache_features, features_dir, manifest_path, mel_stats, prepare_data, Dataset, UtteranceData};
pub use log::JsonlLog;
pub use vocoder::{build_student, build_teacher, snapshot_steps, StudentStepLog, StudentTrainer, TeacherStepLog, TeacherTrainer};

use etts_autograd::optim::AdamConfig;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::schedule::{OptimizerConfig, PhaseOptim};

/// Independent random stream for one training step, so resumed runs replay exactly.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// `k` distinct indices out of `n` (all of them, shuffled, when `k ≥ n`).
pub fn batch_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k.min(n)).into_vec()
}

fn adam_config(p: PhaseOptim, cfg: &OptimizerConfig) -> AdamConfig {
    AdamConfig { lr: p.lr, beta1: p.beta1, beta2: cfg.beta2, eps: cfg.eps }
}
