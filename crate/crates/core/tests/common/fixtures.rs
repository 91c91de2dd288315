//! Small models and batches that need no dataset on disk.

use d2ca::config::TrainConfig;
use d2ca::model::ModelConfig;
use d2ca::train::Batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        width: 4,
        d_au: 8,
        d_dm: 8,
        d_proj: 8,
        proj_hidden: 8,
        dm_branch: 4,
        num_aus: 3,
    }
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        model: tiny_model(),
        batch_size: 4,
        epochs: 1,
        ..TrainConfig::default()
    }
}

/// Random images in `[0, 1]`, random labels, identities `0, 0, 1, 1, ...`.
pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let img = |rng: &mut ChaCha8Rng| {
        let v: Vec<f32> = (0..n * 3 * s * s).map(|_| rng.gen()).collect();
        Tensor::from_slice(&v).reshape([n as i64, 3, s as i64, s as i64])
    };
    let source = img(&mut rng);
    let target = img(&mut rng);
    let labels: Vec<f32> = (0..n * cfg.num_aus).map(|_| rng.gen_range(0..2) as f32).collect();
    Batch {
        source,
        labels: Tensor::from_slice(&labels).reshape([n as i64, cfg.num_aus as i64]),
        source_ids: (0..n as u32).map(|i| i / 2).collect(),
        target,
    }
}

pub fn double(b: &Batch) -> Batch {
    b.to_kind(Kind::Double)
}

pub fn tiny_data_config(seed: u64) -> d2ca::config::DataConfig {
    d2ca::config::DataConfig {
        seed,
        image_size: 16,
        num_aus: 3,
        au_marginals: Vec::new(),
        source_subjects: 4,
        target_subjects: 4,
        frames_per_subject: 4,
        eval_subjects: 2,
        eval_frames: 4,
    }
}

/// Renders all four splits of `cfg` under `root`.
pub fn write_dataset(cfg: &d2ca::config::DataConfig, root: &std::path::Path) {
    for spec in cfg.splits() {
        d2ca::synthetic::dataset::generate_domain_dataset(&spec, cfg.seed, root).unwrap();
    }
}
