//! Flat run configuration shared by both training stages and the CLI.

use serde::{Deserialize, Serialize};

use crate::backbones::EncoderConfig;
use crate::corpus::{CorpusSpec, N_KINDS};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;

/// Distance used by the masked-patch reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MimLoss {
    /// Per-pixel squared error, averaged over pixels then masked patches.
    Mse,
    /// Unsquared Euclidean distance per patch, averaged over masked patches.
    L2norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_train: usize,
    pub n_test: usize,
    pub normal_ratio: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_lesions: usize,
    pub n_kinds: usize,
    pub noise_std: f64,

    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub d_common: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub max_len: usize,

    pub tau: f64,
    pub k_percent: f64,
    pub phi: f64,
    pub mask_rate: f64,
    pub ident_image_mask: f64,
    pub ident_text_mask: f64,

    pub lambda_vt: f64,
    pub lambda_tv: f64,
    pub lambda_v: f64,
    pub lambda_t: f64,
    pub lambda_bi: f64,
    pub lambda_i: f64,
    pub lambda_r: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub align_epochs: usize,
    pub rrg_epochs: usize,

    pub use_sisr_masking: bool,
    pub use_sisr_lm: bool,
    pub mim_loss: MimLoss,
    pub beam_width: usize,
    pub max_gen_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 512,
            n_test: 128,
            normal_ratio: 0.7,
            image_size: 64,
            patch_size: 8,
            max_lesions: 3,
            n_kinds: N_KINDS,
            noise_std: 0.02,
            d_model: 64,
            depth: 2,
            heads: 4,
            ff_mult: 2,
            d_common: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            max_len: 64,
            tau: 0.07,
            k_percent: 0.20,
            phi: 0.35,
            mask_rate: 0.75,
            ident_image_mask: 0.5,
            ident_text_mask: 0.15,
            lambda_vt: 0.75,
            lambda_tv: 0.25,
            lambda_v: 1.0,
            lambda_t: 1.0,
            lambda_bi: 0.1,
            lambda_i: 1.0,
            lambda_r: 0.1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 16,
            align_epochs: 40,
            rrg_epochs: 30,
            use_sisr_masking: true,
            use_sisr_lm: true,
            mim_loss: MimLoss::Mse,
            beam_width: 1,
            max_gen_len: 64,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    check(v > 0.0 && v < 1.0, || {
        format!("{name} must lie in (0, 1), got {v}")
    })
}

impl RunConfig {
    /// Full-scale decoder preset: 3 layers, 8 heads, width 512.
    pub fn full_scale_preset() -> Self {
        Self {
            d_model: 512,
            d_common: 512,
            depth: 3,
            heads: 8,
            decoder_depth: 3,
            decoder_heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check((0.0..=1.0).contains(&self.normal_ratio), || {
            format!("normal_ratio must lie in [0, 1], got {}", self.normal_ratio)
        })?;
        check(self.n_train > 0, || "n_train must be positive".into())?;
        check(
            self.patch_size > 0 && self.image_size % self.patch_size == 0,
            || {
                format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                )
            },
        )?;
        check((1..=N_KINDS).contains(&self.n_kinds), || {
            format!("n_kinds must lie in 1..={N_KINDS}, got {}", self.n_kinds)
        })?;
        check(self.noise_std >= 0.0, || {
            "noise_std must be non-negative".into()
        })?;
        self.encoder().validate()?;
        self.decoder().validate()?;
        check(self.d_common > 0, || "d_common must be positive".into())?;
        check(self.max_len >= 3, || "max_len must be at least 3".into())?;
        check(self.tau > 0.0, || {
            format!("tau must be positive, got {}", self.tau)
        })?;
        check(self.k_percent > 0.0 && self.k_percent <= 1.0, || {
            format!("k_percent must lie in (0, 1], got {}", self.k_percent)
        })?;
        check(self.phi >= 0.0, || {
            format!("phi must be non-negative, got {}", self.phi)
        })?;
        unit_open("mask_rate", self.mask_rate)?;
        unit_open("ident_image_mask", self.ident_image_mask)?;
        unit_open("ident_text_mask", self.ident_text_mask)?;
        for (name, v) in [
            ("lambda_vt", self.lambda_vt),
            ("lambda_tv", self.lambda_tv),
            ("lambda_v", self.lambda_v),
            ("lambda_t", self.lambda_t),
            ("lambda_bi", self.lambda_bi),
            ("lambda_i", self.lambda_i),
            ("lambda_r", self.lambda_r),
        ] {
            check(v >= 0.0 && v.is_finite(), || {
                format!("{name} must be a finite non-negative weight, got {v}")
            })?;
        }
        check(self.lr > 0.0, || "lr must be positive".into())?;
        check(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            || "Adam betas must lie in [0, 1)".into(),
        )?;
        check(self.batch_size > 0, || "batch_size must be positive".into())?;
        check(self.beam_width > 0, || "beam_width must be positive".into())?;
        check(self.max_gen_len > 0, || {
            "max_gen_len must be positive".into()
        })
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            depth: self.depth,
            heads: self.heads,
            ff_mult: self.ff_mult,
        }
    }

    pub fn decoder(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.decoder_depth,
            heads: self.decoder_heads,
            ..self.encoder()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            grad_clip: self.grad_clip,
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Effective salient-region increment: zero when SISR masking is off.
    pub fn effective_phi(&self) -> f64 {
        if self.use_sisr_masking {
            self.phi
        } else {
            0.0
        }
    }

    fn corpus(&self, n_samples: usize, seed: u64, id_prefix: &str) -> CorpusSpec {
        CorpusSpec {
            n_samples,
            normal_ratio: self.normal_ratio,
            seed,
            image_size: self.image_size,
            patch_size: self.patch_size,
            max_lesions: self.max_lesions,
            n_kinds: self.n_kinds,
            noise_std: self.noise_std,
            id_prefix: id_prefix.into(),
        }
    }

    pub fn train_corpus(&self) -> CorpusSpec {
        self.corpus(self.n_train, self.seed, "train")
    }

    /// Held-out split drawn from a disjoint seed stream.
    pub fn test_corpus(&self) -> CorpusSpec {
        self.corpus(
            self.n_test,
            crate::seed::derive_seed(self.seed, &[0x7E57]),
            "test",
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: Self =
            serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; values parse as JSON, falling back to
    /// a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = self.to_json();
        let obj = v.as_object_mut().expect("config is an object");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            if !obj.contains_key(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
            obj.insert(key.into(), value);
        }
        Self::from_json(&v)
    }
}
