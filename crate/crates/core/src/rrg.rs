//! Report-generation network: salient-region-guided masked image modeling,
//! saliency-token-conditioned decoding, joint training and generation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::{checkpoint_meta, mean_of, reconstruction_loss, IdentNetwork};
use crate::autodiff::{Tape, Var};
use crate::backbones::{VisionEncoder, BOS, EOS};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, DecoderBlock, Linear, Norm};
use crate::optim::Adam;
use crate::params::{Bound, GradBuffer, ParamId, ParamStore};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x2D;
const SHUFFLE_STREAM: u64 = 0x6F;
const MASK_STREAM: u64 = 0x4A;

pub const CHECKPOINT_KIND: &str = "rrg";

/// Masked patch set of one image and the scores that ranked it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub probabilities: Vec<f64>,
    pub masked_indices: Vec<usize>,
    pub target_rate: f64,
}

impl MaskPlan {
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.probabilities.len()];
        self.masked_indices.iter().for_each(|&i| f[i] = true);
        f
    }
}

/// `round(rate·n)`.
pub fn masked_count(n: usize, rate: f64) -> usize {
    (rate * n as f64).round() as usize
}

/// Draws `p_i = U(0,1) + φ·[i ∈ S]` in index order and masks the
/// `round(rate·N_v)` largest, ties to the lower index.
pub fn masking_plan(
    salient: &[usize],
    n_v: usize,
    phi: f64,
    target_rate: f64,
    seed: u64,
) -> Result<MaskPlan> {
    if !(phi >= 0.0) || !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::Config(format!(
            "masking needs phi >= 0 and 0 < rate < 1, got phi {phi}, rate {target_rate}"
        )));
    }
    let count = masked_count(n_v, target_rate);
    if count == 0 || count == n_v {
        return Err(Error::Degenerate {
            op: "masking_plan",
            detail: format!("rate {target_rate} masks {count} of {n_v} patches"),
        });
    }
    if let Some(&bad) = salient.iter().find(|&&i| i >= n_v) {
        return Err(Error::Contract(format!(
            "salient index {bad} outside 0..{n_v}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probabilities: Vec<f64> = (0..n_v).map(|_| rng.gen::<f64>()).collect();
    for &i in salient {
        probabilities[i] += phi;
    }
    let mut order: Vec<usize> = (0..n_v).collect();
    order.sort_by(|&a, &b| {
        probabilities[b]
            .total_cmp(&probabilities[a])
            .then(a.cmp(&b))
    });
    let mut masked_indices = order[..count].to_vec();
    masked_indices.sort_unstable();
    Ok(MaskPlan {
        probabilities,
        masked_indices,
        target_rate,
    })
}

/// `w′ = Norm(M_S · E_I)` on the tape, as a `1 × d` row.
pub fn saliency_token_on_tape(
    tape: &mut Tape,
    scores: &[f64],
    features: Var,
    gain: Var,
    bias: Var,
) -> Result<Var> {
    let n = tape.shape(features)[0];
    if scores.len() != n {
        return Err(Error::Shape {
            op: "saliency_token",
            lhs: vec![1, scores.len()],
            rhs: tape.shape(features).to_vec(),
        });
    }
    let m = tape.constant(Tensor::matrix(1, n, scores.to_vec())?);
    let pooled = tape.matmul(m, features)?;
    tape.layer_norm(pooled, gain, bias, crate::autodiff::LAYER_NORM_EPS)
}

/// Value-only `w′` with unit gain and zero bias.
pub fn saliency_token(scores: &[f64], features: &Tensor) -> Result<Tensor> {
    let (_, d) = features.dims2()?;
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let g = tape.constant(Tensor::full(vec![d], 1.0));
    let b = tape.constant(Tensor::zeros(vec![d]));
    let w = saliency_token_on_tape(&mut tape, scores, f, g, b)?;
    Ok(tape.value(w).clone().reshaped(vec![d])?)
}

/// `−(1/l)·Σ_i log logits-softmax[i, targets[i]]` on the tape.
pub fn report_loss_on_tape(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Contract(
            "report loss over an empty reference".into(),
        ));
    }
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, targets)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Cross-entropy of `reference` under per-step confidence rows.
pub fn report_loss(confidences: &Tensor, reference: &[usize]) -> Result<f64> {
    let (l, v) = confidences.dims2()?;
    if reference.is_empty() {
        return Err(Error::Contract(
            "report loss over an empty reference".into(),
        ));
    }
    if l != reference.len() || reference.iter().any(|&t| t >= v) {
        return Err(Error::Shape {
            op: "report_loss",
            lhs: vec![l, v],
            rhs: vec![reference.len()],
        });
    }
    let total: f64 = reference
        .iter()
        .enumerate()
        .map(|(i, &t)| confidences.at2(i, t).max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(-total / l as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedReport {
    /// Generated ids after `BOS`, ending in `EOS` unless truncated.
    pub tokens: Vec<usize>,
    /// Softmax row per generated step (`len(tokens) × V`).
    pub confidences: Vec<Vec<f64>>,
    /// Sum of log-probabilities of `tokens`.
    pub log_prob: f64,
    pub truncated: bool,
    pub mode: DecodeMode,
}

impl GeneratedReport {
    /// Log-probability per generated token.
    pub fn normalized_log_prob(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

/// Per-sample inputs that come from the frozen identification network.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub saliency: Vec<f64>,
    pub salient: Vec<usize>,
}

impl Guidance {
    pub fn from_ident(ident: &IdentNetwork, patches: &Tensor) -> Result<Self> {
        let saliency = ident.saliency_map(patches)?;
        let salient = crate::align::select_salient(&saliency, ident.config.k_percent);
        Ok(Self { saliency, salient })
    }
}

/// Encoder, pixel head and language decoder of the second stage.
#[derive(Clone, Debug)]
pub struct RrgNetwork {
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub pixel_head: Linear,
    pub saliency_norm: Norm,
    tok_embed: ParamId,
    pos: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_f: Norm,
    out: Linear,
    pub config: RunConfig,
    pub vocab_size: usize,
}

/// Loss terms of one sample or batch, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTwoLosses {
    pub l_i: f64,
    pub l_r: f64,
    pub l2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTwoLog {
    pub epoch: usize,
    pub losses: StageTwoLosses,
}

impl RrgNetwork {
    pub fn new(cfg: &RunConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[INIT_STREAM]));
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let vision = VisionEncoder::new(
            &mut store,
            &mut rng,
            "rrg.vision",
            &cfg.encoder(),
            cfg.n_patches(),
            cfg.patch_dim(),
        )?;
        let pixel_head = Linear::new(&mut store, &mut rng, "rrg.pixel_head", d, cfg.patch_dim());
        let saliency_norm = Norm::new(&mut store, "rrg.saliency_norm", d);
        let tok_embed = store.normal(&mut rng, "rrg.decoder.tok_embed", vec![vocab_size, d], 0.1);
        let pos = store.normal(&mut rng, "rrg.decoder.pos", vec![cfg.max_len, d], 0.02);
        let blocks = (0..cfg.decoder_depth)
            .map(|i| {
                DecoderBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("rrg.decoder.blocks.{i}"),
                    d,
                    cfg.decoder_heads,
                    d * cfg.ff_mult,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = Norm::new(&mut store, "rrg.decoder.ln_f", d);
        let out = Linear::new(&mut store, &mut rng, "rrg.decoder.out", d, vocab_size);
        Ok(Self {
            store,
            vision,
            pixel_head,
            saliency_norm,
            tok_embed,
            pos,
            blocks,
            ln_f,
            out,
            config: cfg.clone(),
            vocab_size,
        })
    }

    /// MIM loss of one image under `plan`.
    pub fn mim_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        patches: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let enc = self.vision.forward(tape, p, patches, Some(&plan.flags()))?;
        let pred = self.pixel_head.forward(tape, p, enc)?;
        reconstruction_loss(
            tape,
            pred,
            patches,
            &plan.masked_indices,
            self.config.mim_loss,
        )
    }

    /// Decoder memory `[w′; E_I]` from the unmasked image. `w′` is a zero
    /// row when the saliency-conditioned language model is disabled.
    pub fn memory(
        &self,
        tape: &mut Tape,
        p: &Bound,
        patches: Var,
        saliency: &[f64],
        use_token: bool,
    ) -> Result<Var> {
        let e = self.vision.forward(tape, p, patches, None)?;
        let w = if use_token {
            saliency_token_on_tape(
                tape,
                saliency,
                e,
                p.var(self.saliency_norm.gain),
                p.var(self.saliency_norm.bias),
            )?
        } else {
            tape.constant(Tensor::zeros(vec![1, self.config.d_model]))
        };
        tape.concat_rows(&[w, e])
    }

    /// Next-token logits for every position of `inputs` (`len × V`).
    pub fn decode(&self, tape: &mut Tape, p: &Bound, inputs: &[usize], memory: Var) -> Result<Var> {
        if inputs.is_empty() || inputs.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "decoder input length {} outside 1..={}",
                inputs.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} >= vocabulary size {}",
                self.vocab_size
            )));
        }
        let emb = tape.select_rows(p.var(self.tok_embed), inputs)?;
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let pos = tape.select_rows(p.var(self.pos), &positions)?;
        let mut x = tape.add(emb, pos)?;
        let causal = tape.constant(causal_mask(inputs.len()));
        for b in &self.blocks {
            x = b.forward(tape, p, x, memory, causal)?;
        }
        let h = self.ln_f.forward(tape, p, x)?;
        self.out.forward(tape, p, h)
    }

    /// `L2 = λ_I·L_I + λ_R·L_R` for one sample, returning `(L2, L_I, L_R)`.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ex: &Example,
        guide: &Guidance,
        plan: &MaskPlan,
    ) -> Result<(Var, Var, Var)> {
        let cfg = &self.config;
        let patches = tape.constant(ex.patches.clone());
        let l_i = self.mim_loss(tape, p, patches, plan)?;
        let memory = self.memory(tape, p, patches, &guide.saliency, cfg.use_sisr_lm)?;
        let l = ex.tokens.len();
        if l < 2 {
            return Err(Error::Contract(format!(
                "reference {} has no tokens after BOS",
                ex.id
            )));
        }
        let logits = self.decode(tape, p, &ex.tokens[..l - 1], memory)?;
        let l_r = report_loss_on_tape(tape, logits, &ex.tokens[1..])?;
        let a = tape.scale(l_i, cfg.lambda_i);
        let b = tape.scale(l_r, cfg.lambda_r);
        let l2 = tape.add(a, b)?;
        Ok((l2, l_i, l_r))
    }

    /// Mean `L2` over a batch on one tape.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[(&Example, &Guidance, &MaskPlan)],
    ) -> Result<Var> {
        let terms = batch
            .iter()
            .map(|(ex, g, plan)| self.sample_loss(tape, p, ex, g, plan).map(|t| t.0))
            .collect::<Result<Vec<_>>>()?;
        mean_of(tape, &terms)
    }

    /// Mask plan for sample `index` at `epoch`.
    pub fn plan_for(&self, guide: &Guidance, epoch: usize, index: usize) -> Result<MaskPlan> {
        let cfg = &self.config;
        masking_plan(
            &guide.salient,
            cfg.n_patches(),
            cfg.effective_phi(),
            cfg.mask_rate,
            derive_seed(cfg.seed, &[MASK_STREAM, epoch as u64, index as u64]),
        )
    }

    fn encode_memory(
        &self,
        patches: &Tensor,
        guide: &Guidance,
        zero_token: bool,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(patches.clone());
        let use_token = self.config.use_sisr_lm && !zero_token;
        let m = self.memory(&mut tape, &p, x, &guide.saliency, use_token)?;
        Ok(tape.value(m).clone())
    }

    /// Softmax over the vocabulary for the token after `prefix`.
    fn next_distribution(&self, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let m = tape.constant(memory.clone());
        let logits = self.decode(&mut tape, &p, prefix, m)?;
        let last = tape.select_rows(logits, &[prefix.len() - 1])?;
        let probs = tape.softmax(last, 1)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Teacher-forced logits for `tokens` (`BOS ..`), for inspection.
    pub fn teacher_forced_logits(
        &self,
        patches: &Tensor,
        guide: &Guidance,
        tokens: &[usize],
    ) -> Result<Tensor> {
        let memory = self.encode_memory(patches, guide, false)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let m = tape.constant(memory);
        let logits = self.decode(&mut tape, &p, tokens, m)?;
        Ok(tape.value(logits).clone())
    }

    fn step_limit(&self) -> usize {
        self.config.max_gen_len.min(self.config.max_len)
    }

    fn greedy(&self, memory: &Tensor) -> Result<GeneratedReport> {
        let mut prefix = vec![BOS];
        let mut confidences = Vec::new();
        let mut log_prob = 0.0;
        while prefix.len() <= self.step_limit() {
            let probs = self.next_distribution(memory, &prefix)?;
            let next = argmax(&probs);
            log_prob += probs[next].ln();
            confidences.push(probs);
            prefix.push(next);
            if next == EOS {
                break;
            }
        }
        let tokens = prefix[1..].to_vec();
        Ok(GeneratedReport {
            truncated: tokens.last() != Some(&EOS),
            tokens,
            confidences,
            log_prob,
            mode: DecodeMode::Greedy,
        })
    }

    fn beam(&self, memory: &Tensor, width: usize) -> Result<GeneratedReport> {
        struct Hyp {
            prefix: Vec<usize>,
            confidences: Vec<Vec<f64>>,
            log_prob: f64,
        }
        let greedy = self.greedy(memory)?;
        let mut finished = vec![GeneratedReport {
            mode: DecodeMode::Beam(width),
            ..greedy
        }];
        let mut live = vec![Hyp {
            prefix: vec![BOS],
            confidences: Vec::new(),
            log_prob: 0.0,
        }];
        while !live.is_empty() && live[0].prefix.len() <= self.step_limit() {
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            let mut dists = Vec::with_capacity(live.len());
            for (h, hyp) in live.iter().enumerate() {
                let probs = self.next_distribution(memory, &hyp.prefix)?;
                let mut order: Vec<usize> = (0..probs.len()).collect();
                order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
                for &t in order.iter().take(width) {
                    candidates.push((hyp.log_prob + probs[t].ln(), h, t));
                }
                dists.push(probs);
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next_live = Vec::with_capacity(width);
            for &(lp, h, t) in candidates.iter().take(width) {
                let mut prefix = live[h].prefix.clone();
                prefix.push(t);
                let mut confidences = live[h].confidences.clone();
                confidences.push(dists[h].clone());
                if t == EOS {
                    finished.push(GeneratedReport {
                        tokens: prefix[1..].to_vec(),
                        confidences,
                        log_prob: lp,
                        truncated: false,
                        mode: DecodeMode::Beam(width),
                    });
                } else {
                    next_live.push(Hyp {
                        prefix,
                        confidences,
                        log_prob: lp,
                    });
                }
            }
            live = next_live;
        }
        let complete = finished.iter().any(|r| !r.truncated);
        let best = finished
            .into_iter()
            .filter(|r| !complete || !r.truncated)
            .fold(None::<GeneratedReport>, |best, r| match best {
                Some(b) if b.normalized_log_prob() >= r.normalized_log_prob() => Some(b),
                _ => Some(r),
            })
            .expect("greedy hypothesis is always present");
        Ok(best)
    }

    /// Autoregressive report for one image conditioned on `[w′; E_I]`.
    pub fn generate(
        &self,
        patches: &Tensor,
        guide: &Guidance,
        mode: DecodeMode,
    ) -> Result<GeneratedReport> {
        self.generate_with(patches, guide, mode, false)
    }

    /// As [`Self::generate`]; `zero_token` replaces `w′` with zeros.
    pub fn generate_with(
        &self,
        patches: &Tensor,
        guide: &Guidance,
        mode: DecodeMode,
        zero_token: bool,
    ) -> Result<GeneratedReport> {
        let memory = self.encode_memory(patches, guide, zero_token)?;
        match mode {
            DecodeMode::Greedy => self.greedy(&memory),
            DecodeMode::Beam(0) => Err(Error::Config("beam width must be positive".into())),
            DecodeMode::Beam(w) => self.beam(&memory, w),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self.store.to_named(),
            config: json!({
                "kind": CHECKPOINT_KIND,
                "vocab_size": self.vocab_size,
                "run": self.config.to_json(),
            }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind() != Some(CHECKPOINT_KIND) {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "expected a report-generation checkpoint, found kind {:?}",
                    ckpt.kind()
                ),
            ));
        }
        let (cfg, vocab_size) = checkpoint_meta(ckpt)?;
        let mut net = Self::new(&cfg, vocab_size)?;
        net.store.load_named(&ckpt.tensors)?;
        Ok(net)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Trains the second stage for `config.rrg_epochs` epochs with `ident`
/// frozen. `on_epoch` sees each epoch's mean losses and the network as
/// each epoch completes.
pub fn train_rrg(
    train: &[Example],
    ident: &IdentNetwork,
    config: &RunConfig,
    on_epoch: impl FnMut(&StageTwoLog, &RrgNetwork),
) -> Result<(RrgNetwork, Vec<StageTwoLog>)> {
    if train.is_empty() {
        return Err(Error::Contract(
            "report-generation training needs a non-empty corpus".into(),
        ));
    }
    if ident.config.n_patches() != config.n_patches()
        || ident.config.patch_dim() != config.patch_dim()
    {
        return Err(Error::Config(
            "identification checkpoint was trained on a different image geometry".into(),
        ));
    }
    let guides = train
        .iter()
        .map(|ex| Guidance::from_ident(ident, &ex.patches))
        .collect::<Result<Vec<_>>>()?;
    train_rrg_guided(train, &guides, ident.vocab_size, config, on_epoch)
}

/// [`train_rrg`] with the frozen network's outputs already computed.
pub fn train_rrg_guided(
    train: &[Example],
    guides: &[Guidance],
    vocab_size: usize,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&StageTwoLog, &RrgNetwork),
) -> Result<(RrgNetwork, Vec<StageTwoLog>)> {
    if train.is_empty() || guides.len() != train.len() {
        return Err(Error::Contract(format!(
            "{} training samples with {} guidance records",
            train.len(),
            guides.len()
        )));
    }
    let mut net = RrgNetwork::new(config, vocab_size)?;
    let mut adam = Adam::new(config.adam(), &net.store);
    let mut grads = GradBuffer::zeros_like(&net.store);
    let mut last_good = net.to_checkpoint();
    let mut logs = Vec::with_capacity(config.rrg_epochs);
    for epoch in 1..=config.rrg_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[SHUFFLE_STREAM, epoch as u64],
        )));
        let mut sums = StageTwoLosses::default();
        for chunk in order.chunks(config.batch_size) {
            grads.zero();
            for &i in chunk {
                let plan = net.plan_for(&guides[i], epoch, i)?;
                let mut tape = Tape::new();
                let p = net.store.bind(&mut tape, true);
                let (l2, l_i, l_r) =
                    match net.sample_loss(&mut tape, &p, &train[i], &guides[i], &plan) {
                        Ok(t) => t,
                        Err(Error::ZeroNorm { .. }) | Err(Error::InvalidTensor(_)) => {
                            return Err(diverged(epoch, last_good));
                        }
                        Err(e) => return Err(e),
                    };
                let value = tape.value(l2).item()?;
                if !value.is_finite() {
                    return Err(diverged(epoch, last_good));
                }
                grads.accumulate(&p, &tape.backward(l2)?);
                sums.l_i += tape.value(l_i).item()?;
                sums.l_r += tape.value(l_r).item()?;
                sums.l2 += value;
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam.step(&mut net.store, &grads);
        }
        if !net.store.iter().all(|(_, t)| t.is_finite()) {
            return Err(diverged(epoch, last_good));
        }
        let n = train.len() as f64;
        let log = StageTwoLog {
            epoch,
            losses: StageTwoLosses {
                l_i: sums.l_i / n,
                l_r: sums.l_r / n,
                l2: sums.l2 / n,
            },
        };
        last_good = net.to_checkpoint();
        on_epoch(&log, &net);
        logs.push(log);
    }
    Ok((net, logs))
}

fn diverged(epoch: usize, last_good: Checkpoint) -> Error {
    Error::Divergence {
        stage: "train-rrg",
        epoch,
        last_good: Some(Box::new(last_good)),
    }
}
