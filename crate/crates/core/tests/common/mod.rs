#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sisr_core::backbones::{tokenize, Vocabulary};
use sisr_core::config::RunConfig;
use sisr_core::corpus::ObservationLabels;
use sisr_core::dataset::Example;
use sisr_core::Tensor;

pub const TOY_REPORTS: [&str; 3] = [
    "there is a mild opacity in the left upper zone .",
    "no acute findings .",
    "there is a severe nodule .",
];

/// 8×8 images in 4×4 patches, width-8 single-layer encoders.
pub fn toy_config() -> RunConfig {
    RunConfig {
        image_size: 8,
        patch_size: 4,
        d_model: 8,
        depth: 1,
        heads: 2,
        ff_mult: 2,
        d_common: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        max_len: 16,
        max_gen_len: 16,
        batch_size: 2,
        ..RunConfig::default()
    }
}

pub fn toy_vocab() -> Vocabulary {
    Vocabulary::build(&TOY_REPORTS).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `n` examples with random pixels, cycling through [`TOY_REPORTS`].
pub fn toy_examples(cfg: &RunConfig, vocab: &Vocabulary, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Example {
            id: format!("toy{i}"),
            patches: uniform(&mut rng, vec![cfg.n_patches(), cfg.patch_dim()], 0.0, 1.0),
            tokens: tokenize(TOY_REPORTS[i % TOY_REPORTS.len()], vocab).ids,
            labels: ObservationLabels::default(),
            lesion_patches: Vec::new(),
        })
        .collect()
}

pub fn assert_grads_below(errors: &[(String, f64)], tol: f64) {
    for (name, e) in errors {
        assert!(*e < tol, "{name}: relative error {e:e} >= {tol:e}");
    }
}

#[path = "masking_oracle.rs"]
pub mod masking_oracle;
