//! Salient-regions identification network: projection into a common space,
//! max pooling, bidirectional contrastive alignment, auxiliary
//! reconstruction/completion losses, and saliency extraction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::backbones::{TextEncoder, VisionEncoder, BOS, EOS, MASK, PAD};
use crate::checkpoint::Checkpoint;
use crate::config::{MimLoss, RunConfig};
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::Adam;
use crate::params::{Bound, GradBuffer, ParamStore};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1D;
const SHUFFLE_STREAM: u64 = 0x5F;
const MASK_STREAM: u64 = 0x3A;

pub const CHECKPOINT_KIND: &str = "ident";

/// Frozen-after-training network of the first stage.
#[derive(Clone, Debug)]
pub struct IdentNetwork {
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub proj_v: Linear,
    pub proj_t: Linear,
    pub pixel_head: Linear,
    pub token_head: Linear,
    pub config: RunConfig,
    pub vocab_size: usize,
}

/// Per-token projections and their pooled globals.
#[derive(Clone, Debug)]
pub struct Projected {
    pub local_v: Tensor,
    pub local_t: Tensor,
    pub global_v: Tensor,
    pub global_t: Tensor,
}

/// Pooled global features of `B` paired samples; row `i` of each side
/// belongs to pair `i`.
#[derive(Clone, Debug)]
pub struct AlignBatch {
    pub image_globals: Vec<Tensor>,
    pub text_globals: Vec<Tensor>,
}

impl AlignBatch {
    pub fn new(image_globals: Vec<Tensor>, text_globals: Vec<Tensor>) -> Result<Self> {
        if image_globals.is_empty() || image_globals.len() != text_globals.len() {
            return Err(Error::Contract(format!(
                "contrastive batch needs B >= 1 matched pairs, got {} images and {} texts",
                image_globals.len(),
                text_globals.len()
            )));
        }
        Ok(Self {
            image_globals,
            text_globals,
        })
    }

    pub fn len(&self) -> usize {
        self.image_globals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_globals.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveTerms<T> {
    pub v2t: T,
    pub t2v: T,
    pub total: T,
}

fn stack(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let parts = rows
        .iter()
        .map(|&r| {
            let d = tape.value(r).numel();
            tape.reshape(r, vec![1, d])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&parts)
}

fn neg_mean_diag_log_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let b = tape.shape(logits)[0];
    let ls = tape.log_softmax(logits)?;
    let targets: Vec<usize> = (0..b).collect();
    let diag = tape.pick(ls, &targets)?;
    let m = tape.mean(diag);
    Ok(tape.scale(m, -1.0))
}

/// Weighted image-to-text plus text-to-image InfoNCE over cosine
/// similarities at temperature `tau`, positives on the diagonal.
pub fn contrastive_on_tape(
    tape: &mut Tape,
    image_globals: &[Var],
    text_globals: &[Var],
    tau: f64,
    lambda_vt: f64,
    lambda_tv: f64,
) -> Result<ContrastiveTerms<Var>> {
    if image_globals.is_empty() || image_globals.len() != text_globals.len() {
        return Err(Error::Contract(format!(
            "contrastive batch needs B >= 1 matched pairs, got {} images and {} texts",
            image_globals.len(),
            text_globals.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let v = stack(tape, image_globals)?;
    let t = stack(tape, text_globals)?;
    let vn = tape.normalize_rows(v, "image global feature")?;
    let tn = tape.normalize_rows(t, "text global feature")?;
    let sims = tape.matmul_t(vn, tn)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let v2t = neg_mean_diag_log_softmax(tape, logits)?;
    let logits_t = tape.transpose(logits)?;
    let t2v = neg_mean_diag_log_softmax(tape, logits_t)?;
    let a = tape.scale(v2t, lambda_vt);
    let b = tape.scale(t2v, lambda_tv);
    let total = tape.add(a, b)?;
    Ok(ContrastiveTerms { v2t, t2v, total })
}

/// Value-only evaluation of [`contrastive_on_tape`].
pub fn contrastive_bidirectional(
    batch: &AlignBatch,
    tau: f64,
    lambda_vt: f64,
    lambda_tv: f64,
) -> Result<ContrastiveTerms<f64>> {
    let mut tape = Tape::new();
    let v: Vec<Var> = batch
        .image_globals
        .iter()
        .map(|g| tape.constant(g.clone()))
        .collect();
    let t: Vec<Var> = batch
        .text_globals
        .iter()
        .map(|g| tape.constant(g.clone()))
        .collect();
    let terms = contrastive_on_tape(&mut tape, &v, &t, tau, lambda_vt, lambda_tv)?;
    Ok(ContrastiveTerms {
        v2t: tape.value(terms.v2t).item()?,
        t2v: tape.value(terms.t2v).item()?,
        total: tape.value(terms.total).item()?,
    })
}

/// Mean patch distance between `pred` and `target` rows listed in `masked`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    masked: &[usize],
    kind: MimLoss,
) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::Contract(
            "reconstruction loss over zero masked patches".into(),
        ));
    }
    let p = tape.select_rows(pred, masked)?;
    let z = tape.select_rows(target, masked)?;
    let diff = tape.sub(p, z)?;
    match kind {
        MimLoss::Mse => {
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        }
        MimLoss::L2norm => {
            let norms = tape.row_norms(diff)?;
            Ok(tape.mean(norms))
        }
    }
}

/// Mean negative log-likelihood of `targets[i]` under row `positions[i]`
/// of `logits`.
pub fn masked_token_loss(
    tape: &mut Tape,
    logits: Var,
    positions: &[usize],
    targets: &[usize],
) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Contract(
            "token loss over zero masked positions".into(),
        ));
    }
    let rows = tape.select_rows(logits, positions)?;
    let ls = tape.log_softmax(rows)?;
    let picked = tape.pick(ls, targets)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// `max(1, ⌊k·n⌋)`, tolerant of products that land a hair below an integer.
pub fn salient_count(n: usize, k_percent: f64) -> usize {
    ((k_percent * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Indices of the `max(1, ⌊k·N⌋)` highest scores, ties to the lower index,
/// returned in increasing order.
pub fn select_salient(scores: &[f64], k_percent: f64) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..salient_count(scores.len(), k_percent)].to_vec();
    top.sort_unstable();
    top
}

/// Cosine similarity of every row of `local` with its column-wise max.
pub fn saliency_scores(local: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = local.dims2()?;
    if n == 0 {
        return Err(Error::EmptyPool { op: "saliency_map" });
    }
    let mut global = local.row(0).to_vec();
    for i in 1..n {
        for (g, &v) in global.iter_mut().zip(local.row(i)) {
            *g = g.max(v);
        }
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gn = norm(&global);
    if gn == 0.0 || !gn.is_finite() {
        return Err(Error::ZeroNorm {
            context: "global image feature".into(),
            index: 0,
        });
    }
    (0..n)
        .map(|i| {
            let row = local.row(i);
            let rn = norm(row);
            if rn == 0.0 || !rn.is_finite() {
                return Err(Error::ZeroNorm {
                    context: "patch feature".into(),
                    index: i,
                });
            }
            let dot: f64 = row.iter().zip(&global).map(|(a, b)| a * b).sum();
            Ok((dot / (rn * gn)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Picks `round(ratio·n)` distinct positions from `candidates`, at least one.
fn sample_positions(candidates: &[usize], ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = ((ratio * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut picked: Vec<usize> = candidates.choose_multiple(rng, count).copied().collect();
    picked.sort_unstable();
    picked
}

/// Loss terms of one batch, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageOneLosses {
    pub l_v: f64,
    pub l_t: f64,
    pub l_bi: f64,
    pub l1: f64,
}

/// Per-epoch means of the batch losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: StageOneLosses,
}

/// Masking choices for the auxiliary losses of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxMasks {
    pub patches: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl AuxMasks {
    pub fn sample(ex: &Example, n_patches: usize, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Self {
        let all: Vec<usize> = (0..n_patches).collect();
        let words: Vec<usize> = ex
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| !matches!(t, PAD | BOS | EOS))
            .map(|(i, _)| i)
            .collect();
        Self {
            patches: sample_positions(&all, cfg.ident_image_mask, rng),
            tokens: if words.is_empty() {
                Vec::new()
            } else {
                sample_positions(&words, cfg.ident_text_mask, rng)
            },
        }
    }
}

/// Tape handles of one sample's stage-one terms.
pub struct SampleTerms {
    pub global_v: Var,
    pub global_t: Var,
    pub l_v: Var,
    pub l_t: Var,
}

impl IdentNetwork {
    pub fn new(cfg: &RunConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[INIT_STREAM]));
        let mut store = ParamStore::new();
        let enc = cfg.encoder();
        let d = cfg.d_model;
        let vision = VisionEncoder::new(
            &mut store,
            &mut rng,
            "ident.vision",
            &enc,
            cfg.n_patches(),
            cfg.patch_dim(),
        )?;
        let text = TextEncoder::new(
            &mut store,
            &mut rng,
            "ident.text",
            &enc,
            vocab_size,
            cfg.max_len,
        )?;
        let proj_v = Linear::new(&mut store, &mut rng, "ident.proj_v", d, cfg.d_common);
        let proj_t = Linear::new(&mut store, &mut rng, "ident.proj_t", d, cfg.d_common);
        let pixel_head = Linear::new(&mut store, &mut rng, "ident.pixel_head", d, cfg.patch_dim());
        let token_head = Linear::new(&mut store, &mut rng, "ident.token_head", d, vocab_size);
        Ok(Self {
            store,
            vision,
            text,
            proj_v,
            proj_t,
            pixel_head,
            token_head,
            config: cfg.clone(),
            vocab_size,
        })
    }

    /// Encoder features projected into the common space, plus their max pool.
    pub fn project_and_pool_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: Var,
        proj: &Linear,
    ) -> Result<(Var, Var)> {
        let local = proj.forward(tape, p, features)?;
        let global = tape.max_over_tokens(local)?;
        Ok((local, global))
    }

    /// Value-only projection and pooling of precomputed encoder outputs.
    pub fn project_and_pool(&self, e_v: &Tensor, e_t: &Tensor) -> Result<Projected> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let ev = tape.constant(e_v.clone());
        let et = tape.constant(e_t.clone());
        let (lv, gv) = self.project_and_pool_on_tape(&mut tape, &p, ev, &self.proj_v)?;
        let (lt, gt) = self.project_and_pool_on_tape(&mut tape, &p, et, &self.proj_t)?;
        Ok(Projected {
            local_v: tape.value(lv).clone(),
            local_t: tape.value(lt).clone(),
            global_v: tape.value(gv).clone(),
            global_t: tape.value(gt).clone(),
        })
    }

    /// Builds every stage-one term of `ex` on `tape`.
    pub fn sample_terms(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ex: &Example,
        masks: &AuxMasks,
    ) -> Result<SampleTerms> {
        let patches = tape.constant(ex.patches.clone());
        let ev = self.vision.forward(tape, p, patches, None)?;
        let (_, global_v) = self.project_and_pool_on_tape(tape, p, ev, &self.proj_v)?;
        let et = self.text.forward(tape, p, &ex.tokens)?;
        let (_, global_t) = self.project_and_pool_on_tape(tape, p, et, &self.proj_t)?;

        let mut flags = vec![false; self.vision.n_tokens()];
        masks.patches.iter().for_each(|&i| flags[i] = true);
        let evm = self.vision.forward(tape, p, patches, Some(&flags))?;
        let recon = self.pixel_head.forward(tape, p, evm)?;
        let l_v = reconstruction_loss(tape, recon, patches, &masks.patches, MimLoss::Mse)?;

        let mut corrupted = ex.tokens.clone();
        masks.tokens.iter().for_each(|&i| corrupted[i] = MASK);
        let etm = self.text.forward(tape, p, &corrupted)?;
        let logits = self.token_head.forward(tape, p, etm)?;
        let targets: Vec<usize> = masks.tokens.iter().map(|&i| ex.tokens[i]).collect();
        let l_t = masked_token_loss(tape, logits, &masks.tokens, &targets)?;
        Ok(SampleTerms {
            global_v,
            global_t,
            l_v,
            l_t,
        })
    }

    /// `L1 = λ_v·L_v + λ_t·L_t + λ_bi·L_bi` over a batch, with the batch
    /// means of `L_v` and `L_t`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&Example],
        masks: &[AuxMasks],
    ) -> Result<(Var, [Var; 3])> {
        let cfg = &self.config;
        let mut gv = Vec::with_capacity(batch.len());
        let mut gt = Vec::with_capacity(batch.len());
        let mut lvs = Vec::with_capacity(batch.len());
        let mut lts = Vec::with_capacity(batch.len());
        for (ex, m) in batch.iter().zip(masks) {
            let terms = self.sample_terms(tape, p, ex, m)?;
            gv.push(terms.global_v);
            gt.push(terms.global_t);
            lvs.push(terms.l_v);
            lts.push(terms.l_t);
        }
        let l_bi =
            contrastive_on_tape(tape, &gv, &gt, cfg.tau, cfg.lambda_vt, cfg.lambda_tv)?.total;
        let l_v = mean_of(tape, &lvs)?;
        let l_t = mean_of(tape, &lts)?;
        let a = tape.scale(l_v, cfg.lambda_v);
        let b = tape.scale(l_t, cfg.lambda_t);
        let c = tape.scale(l_bi, cfg.lambda_bi);
        let ab = tape.add(a, b)?;
        let l1 = tape.add(ab, c)?;
        Ok((l1, [l_v, l_t, l_bi]))
    }

    /// Saliency map of one image: cosine of each projected patch feature
    /// with the pooled global feature.
    pub fn saliency_map(&self, patches: &Tensor) -> Result<Vec<f64>> {
        saliency_scores(&self.local_image_features(patches)?)
    }

    /// Projected per-patch features `E′_v`.
    pub fn local_image_features(&self, patches: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(patches.clone());
        let ev = self.vision.forward(&mut tape, &p, x, None)?;
        let local = self.proj_v.forward(&mut tape, &p, ev)?;
        Ok(tape.value(local).clone())
    }

    pub fn salient_regions(&self, patches: &Tensor) -> Result<Vec<usize>> {
        Ok(select_salient(
            &self.saliency_map(patches)?,
            self.config.k_percent,
        ))
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
                    "expected an identification checkpoint, found kind {:?}",
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

pub(crate) fn checkpoint_meta(ckpt: &Checkpoint) -> Result<(RunConfig, usize)> {
    let run = ckpt
        .config
        .get("run")
        .ok_or_else(|| Error::format("checkpoint", "config block has no run section"))?;
    let vocab_size = ckpt
        .config
        .get("vocab_size")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format("checkpoint", "config block has no vocab_size"))?
        as usize;
    Ok((RunConfig::from_json(run)?, vocab_size))
}

pub(crate) fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = stack(tape, terms)?;
    Ok(tape.mean(stacked))
}

/// Sample visiting order of stage-1 epoch `epoch`; batches are consecutive
/// chunks of it.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[SHUFFLE_STREAM, epoch as u64],
    )));
    order
}

/// Trains the identification network on `train` for `config.align_epochs`
/// epochs. `on_epoch` sees each epoch's mean losses and the network as
/// each epoch completes.
pub fn train_identification(
    train: &[Example],
    vocab_size: usize,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochLog, &IdentNetwork),
) -> Result<(IdentNetwork, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::Contract(
            "identification training needs a non-empty corpus".into(),
        ));
    }
    let mut net = IdentNetwork::new(config, vocab_size)?;
    let mut adam = Adam::new(config.adam(), &net.store);
    let mut grads = GradBuffer::zeros_like(&net.store);
    let mut last_good = net.to_checkpoint();
    let mut logs = Vec::with_capacity(config.align_epochs);
    let n_patches = config.n_patches();
    for epoch in 1..=config.align_epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut sums = StageOneLosses::default();
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let masks: Vec<AuxMasks> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed,
                        &[MASK_STREAM, epoch as u64, i as u64],
                    ));
                    AuxMasks::sample(&train[i], n_patches, config, &mut rng)
                })
                .collect();
            let mut tape = Tape::new();
            let p = net.store.bind(&mut tape, true);
            let step = net.batch_loss(&mut tape, &p, &batch, &masks);
            let (l1, [lv, lt, lbi]) = match step {
                Ok(v) => v,
                Err(Error::ZeroNorm { .. }) | Err(Error::InvalidTensor(_)) => {
                    return Err(diverged(epoch, last_good));
                }
                Err(e) => return Err(e),
            };
            let l1_value = tape.value(l1).item()?;
            if !l1_value.is_finite() {
                return Err(diverged(epoch, last_good));
            }
            let g = tape.backward(l1)?;
            grads.zero();
            grads.accumulate(&p, &g);
            adam.step(&mut net.store, &grads);
            sums.l_v += tape.value(lv).item()?;
            sums.l_t += tape.value(lt).item()?;
            sums.l_bi += tape.value(lbi).item()?;
            sums.l1 += l1_value;
            n_batches += 1;
        }
        let k = n_batches as f64;
        let log = EpochLog {
            epoch,
            losses: StageOneLosses {
                l_v: sums.l_v / k,
                l_t: sums.l_t / k,
                l_bi: sums.l_bi / k,
                l1: sums.l1 / k,
            },
        };
        if !net.store.iter().all(|(_, t)| t.is_finite()) {
            return Err(diverged(epoch, last_good));
        }
        last_good = net.to_checkpoint();
        on_epoch(&log, &net);
        logs.push(log);
    }
    Ok((net, logs))
}

fn diverged(epoch: usize, last_good: Checkpoint) -> Error {
    Error::Divergence {
        stage: "train-align",
        epoch,
        last_good: Some(Box::new(last_good)),
    }
}
