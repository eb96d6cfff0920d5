//! Toy-scale vision and text transformer encoders, patchification and a
//! word-level tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{key_mask, EncoderBlock, Linear, Norm};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Row-major `H × W × C` image with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Geometry(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Geometry(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.pixels.clone(),
        )
        .expect("image shape")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); expects dims `[H, W, C]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, c] => Self::new(h, w, c, t.data().to_vec()),
            s => Err(Error::Geometry(format!("expected [H, W, C], got {s:?}"))),
        }
    }
}

fn check_divisible(h: usize, w: usize, patch: usize) -> Result<()> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Geometry(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

/// Splits an image into non-overlapping patches in row-major patch order.
/// Each row is one flattened `patch × patch × C` patch.
pub fn patchify(image: &ImageGrid, patch: usize) -> Result<Tensor> {
    check_divisible(image.height, image.width, patch)?;
    let (gh, gw, c) = (image.height / patch, image.width / patch, image.channels);
    let dim = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..patch {
                let start = ((pr * patch + y) * image.width + pc * patch) * c;
                out.extend_from_slice(&image.pixels[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

pub fn unpatchify(
    patches: &Tensor,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<ImageGrid> {
    check_divisible(height, width, patch)?;
    let (gh, gw) = (height / patch, width / patch);
    let dim = patch * patch * channels;
    if patches.shape() != [gh * gw, dim] {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![gh * gw, dim],
        });
    }
    let mut pixels = vec![0.0; height * width * channels];
    for pr in 0..gh {
        for pc in 0..gw {
            let row = patches.row(pr * gw + pc);
            for y in 0..patch {
                let start = ((pr * patch + y) * width + pc * patch) * channels;
                let len = patch * channels;
                pixels[start..start + len].copy_from_slice(&row[y * len..(y + 1) * len]);
            }
        }
    }
    ImageGrid::new(height, width, channels, pixels)
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"];

/// Word-level vocabulary: specials first, then words in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn normalized_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Contract(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut vocab = Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect())?;
        for report in corpus {
            for w in normalized_words(report.as_ref()) {
                if !vocab.index.contains_key(&w) {
                    vocab.index.insert(w.clone(), vocab.tokens.len());
                    vocab.tokens.push(w);
                }
            }
        }
        Ok(vocab)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::format(
                    "vocabulary",
                    format!("special {s} must have id {i}"),
                ));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

/// `BOS w1 .. wn EOS`, lowercased, out-of-vocabulary words mapped to `UNK`.
pub fn tokenize(report: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend(normalized_words(report).map(|w| vocab.id(&w).unwrap_or(UNK)));
    ids.push(EOS);
    TokenSequence { ids }
}

/// Space-joined surface forms, skipping `PAD`, `BOS` and `EOS`.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| !matches!(id, PAD | BOS | EOS))
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Words of a report as the metrics see them.
pub fn words(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| !matches!(id, PAD | BOS | EOS))
        .map(|&id| vocab.token(id).to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2
            || self.heads == 0
            || self.d_model % self.heads != 0
            || self.ff_mult == 0
        {
            return Err(Error::Config(format!(
                "invalid encoder dims: width {}, {} heads, ff multiplier {}",
                self.d_model, self.heads, self.ff_mult
            )));
        }
        Ok(())
    }
}

fn blocks<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Vec<EncoderBlock>> {
    (0..cfg.depth)
        .map(|i| {
            EncoderBlock::new(
                store,
                rng,
                &format!("{prefix}.blocks.{i}"),
                cfg.d_model,
                cfg.heads,
                cfg.d_model * cfg.ff_mult,
            )
        })
        .collect()
}

/// Patch-embedding transformer encoder producing `N_v × d_v` features.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    patch_embed: Linear,
    pos: ParamId,
    mask_token: ParamId,
    blocks: Vec<EncoderBlock>,
    ln_f: Norm,
    n_tokens: usize,
    patch_dim: usize,
}

impl VisionEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: &EncoderConfig,
        n_tokens: usize,
        patch_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            patch_embed: Linear::new(store, rng, &format!("{prefix}.patch_embed"), patch_dim, d),
            pos: store.normal(rng, format!("{prefix}.pos"), vec![n_tokens, d], 0.02),
            mask_token: store.normal(rng, format!("{prefix}.mask_token"), vec![1, d], 0.02),
            blocks: blocks(store, rng, prefix, cfg)?,
            ln_f: Norm::new(store, &format!("{prefix}.ln_f"), d),
            n_tokens,
            patch_dim,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn pos_embedding(&self) -> ParamId {
        self.pos
    }

    /// Encodes `patches` (`N_v × p`). Positions flagged in `masked` are
    /// replaced by the learned mask embedding before positions are added.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        patches: Var,
        masked: Option<&[bool]>,
    ) -> Result<Var> {
        if tape.shape(patches) != [self.n_tokens, self.patch_dim] {
            return Err(Error::Shape {
                op: "vision_encode",
                lhs: tape.shape(patches).to_vec(),
                rhs: vec![self.n_tokens, self.patch_dim],
            });
        }
        let mut x = self.patch_embed.forward(tape, p, patches)?;
        if let Some(masked) = masked {
            if masked.len() != self.n_tokens {
                return Err(Error::Shape {
                    op: "vision_encode mask",
                    lhs: vec![masked.len()],
                    rhs: vec![self.n_tokens],
                });
            }
            let stacked = tape.concat_rows(&[x, p.var(self.mask_token)])?;
            let idx: Vec<usize> = masked
                .iter()
                .enumerate()
                .map(|(i, &m)| if m { self.n_tokens } else { i })
                .collect();
            x = tape.select_rows(stacked, &idx)?;
        }
        x = tape.add(x, p.var(self.pos))?;
        for b in &self.blocks {
            x = b.forward(tape, p, x, None)?;
        }
        self.ln_f.forward(tape, p, x)
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }
}

/// Token-embedding transformer encoder producing `N_t × d_t` features.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    tok_embed: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln_f: Norm,
    vocab_size: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: &EncoderConfig,
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            tok_embed: store.normal(rng, format!("{prefix}.tok_embed"), vec![vocab_size, d], 0.1),
            pos: store.normal(rng, format!("{prefix}.pos"), vec![max_len, d], 0.02),
            blocks: blocks(store, rng, prefix, cfg)?,
            ln_f: Norm::new(store, &format!("{prefix}.ln_f"), d),
            vocab_size,
            max_len,
        })
    }

    /// Encodes `ids`; `PAD` positions are excluded as attention keys.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.max_len {
            return Err(Error::Contract(format!(
                "text length {} outside 1..={}",
                ids.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} >= vocabulary size {}",
                self.vocab_size
            )));
        }
        let emb = tape.select_rows(p.var(self.tok_embed), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.select_rows(p.var(self.pos), &positions)?;
        let mut x = tape.add(emb, pos)?;
        let blocked: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
        let mask = blocked
            .iter()
            .any(|&b| b)
            .then(|| tape.constant(key_mask(&blocked)));
        for b in &self.blocks {
            x = b.forward(tape, p, x, mask)?;
        }
        self.ln_f.forward(tape, p, x)
    }
}

/// Gradient-free convenience wrapper around [`VisionEncoder::forward`].
pub fn vision_encode(
    patches: &Tensor,
    encoder: &VisionEncoder,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(patches.clone());
    let out = encoder.forward(&mut tape, &p, x, None)?;
    Ok(tape.value(out).clone())
}

/// Gradient-free convenience wrapper around [`TextEncoder::forward`].
pub fn text_encode(
    tokens: &TokenSequence,
    encoder: &TextEncoder,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let out = encoder.forward(&mut tape, &p, &tokens.ids)?;
    Ok(tape.value(out).clone())
}
