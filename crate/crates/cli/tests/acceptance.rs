//! End-to-end acceptance checks, one printed PASS/FAIL line per criterion.
//!
//! Lines go straight to the process stderr so they show up even when the
//! harness captures test output. `SISR_ACCEPTANCE=1,3` restricts the run to
//! the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use common::masking_oracle::masking_probabilities;
use common::{toy_config, toy_examples, toy_vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sisr_cli::*;
use sisr_core::align::*;
use sisr_core::config::RunConfig;
use sisr_core::gradcheck::{check_store, DEFAULT_STEP};
use sisr_core::metrics::{corpus_bleu, rouge_l, MetricReport};
use sisr_core::rrg::*;
use sisr_core::Tensor;

const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_TRIALS: usize = 100;
const MASK_SEEDS: u64 = 100_000;
const MASK_ORACLE_TOL: f64 = 0.005;
const MASK_EQUAL_TOL: f64 = 0.01;
const RECALL_FLOOR: f64 = 0.5;
const ABLATION_SEEDS: [u64; 3] = [7, 8, 9];
const MIN_FULL_GAIN: f64 = 0.05;
const OVERFIT_EPOCHS: usize = 500;

fn emit(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn selected(n: usize) -> bool {
    match std::env::var("SISR_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').any(|s| s.trim() == n.to_string()),
        _ => true,
    }
}

// ---------------------------------------------------------------- 1

fn toy_ident_batch() -> (
    IdentNetwork,
    Vec<sisr_core::dataset::Example>,
    Vec<AuxMasks>,
) {
    let cfg = RunConfig {
        batch_size: 3,
        ..toy_config()
    };
    let vocab = toy_vocab();
    let net = IdentNetwork::new(&cfg, vocab.len()).unwrap();
    let examples = toy_examples(&cfg, &vocab, 3, 101);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let masks = examples
        .iter()
        .map(|e| AuxMasks::sample(e, cfg.n_patches(), &cfg, &mut rng))
        .collect();
    (net, examples, masks)
}

fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

fn criterion_gradients() -> Outcome {
    let mut report = Vec::new();
    let (net, examples, masks) = toy_ident_batch();
    let refs: Vec<_> = examples.iter().collect();
    for (term, name) in [(0usize, "L_v"), (1, "L_t"), (2, "L_bi"), (3, "L1")] {
        let errors = check_store(
            &net.store,
            |tape, p| {
                let (l1, parts) = net.batch_loss(tape, p, &refs, &masks)?;
                Ok(if term == 3 { l1 } else { parts[term] })
            },
            DEFAULT_STEP,
        )
        .unwrap();
        report.push((name, worst(&errors)));
    }

    let cfg = toy_config();
    let vocab = toy_vocab();
    let examples = toy_examples(&cfg, &vocab, 3, 103);
    let ident = IdentNetwork::new(&cfg, vocab.len()).unwrap();
    let rrg = RrgNetwork::new(&cfg, vocab.len()).unwrap();
    let guides: Vec<Guidance> = examples
        .iter()
        .map(|e| Guidance::from_ident(&ident, &e.patches).unwrap())
        .collect();
    let plans: Vec<MaskPlan> = guides
        .iter()
        .enumerate()
        .map(|(i, g)| rrg.plan_for(g, 1, i).unwrap())
        .collect();
    for (term, name) in [(1usize, "L_I"), (2, "L_R"), (0, "L2")] {
        let errors = check_store(
            &rrg.store,
            |tape, p| {
                if term == 0 {
                    let batch: Vec<_> = (0..3)
                        .map(|i| (&examples[i], &guides[i], &plans[i]))
                        .collect();
                    return rrg.batch_loss(tape, p, &batch);
                }
                let (l2, l_i, l_r) =
                    rrg.sample_loss(tape, p, &examples[0], &guides[0], &plans[0])?;
                Ok([l2, l_i, l_r][term])
            },
            DEFAULT_STEP,
        )
        .unwrap();
        report.push((name, worst(&errors)));
    }
    let pass = report.iter().all(|(_, (_, e))| *e < GRAD_TOL);
    let detail = report
        .iter()
        .map(|(n, (_, e))| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        pass,
        format!("max relative error per loss: {detail} (tol {GRAD_TOL:e})"),
    )
}

// ---------------------------------------------------------------- 2

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn oracle_contrastive(rng: &mut ChaCha8Rng) -> f64 {
    let b = rng.gen_range(1..6);
    let d = rng.gen_range(2..9);
    let tau = rng.gen_range(0.05..1.0);
    let v = rows(rng, b, d);
    let t = rows(rng, b, d);
    let batch = AlignBatch::new(
        v.iter().map(|r| Tensor::vector(r.clone())).collect(),
        t.iter().map(|r| Tensor::vector(r.clone())).collect(),
    )
    .unwrap();
    let got = contrastive_bidirectional(&batch, tau, 0.75, 0.25)
        .unwrap()
        .total;
    let s = |i: usize, j: usize| cos(&v[i], &t[j]) / tau;
    let mut expect = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| s(i, j).exp()).sum();
        let col: f64 = (0..b).map(|j| s(j, i).exp()).sum();
        expect -= 0.75 * (s(i, i).exp() / row).ln() + 0.25 * (s(i, i).exp() / col).ln();
    }
    (got - expect / b as f64).abs()
}

fn oracle_saliency(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..10);
    let d = rng.gen_range(2..8);
    let local = rows(rng, n, d);
    let global: Vec<f64> = (0..d)
        .map(|j| local.iter().map(|r| r[j]).fold(f64::MIN, f64::max))
        .collect();
    let got = saliency_scores(&Tensor::from_rows(&local).unwrap()).unwrap();
    got.iter()
        .zip(&local)
        .map(|(g, r)| (g - cos(r, &global)).abs())
        .fold(0.0, f64::max)
}

fn oracle_saliency_token(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..10);
    let d = rng.gen_range(2..8);
    let e = rows(rng, n, d);
    let m: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pooled: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| m[i] * e[i][j]).sum())
        .collect();
    let mean = pooled.iter().sum::<f64>() / d as f64;
    let var = pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
    let got = saliency_token(&m, &Tensor::from_rows(&e).unwrap()).unwrap();
    got.data()
        .iter()
        .zip(&pooled)
        .map(|(g, p)| (g - (p - mean) / (var + 1e-5).sqrt()).abs())
        .fold(0.0, f64::max)
}

fn oracle_report_loss(rng: &mut ChaCha8Rng) -> f64 {
    let l = rng.gen_range(1..6);
    let v = rng.gen_range(2..8);
    let probs: Vec<Vec<f64>> = (0..l)
        .map(|_| {
            let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|x| x / z).collect()
        })
        .collect();
    let refs: Vec<usize> = (0..l).map(|_| rng.gen_range(0..v)).collect();
    let got = report_loss(&Tensor::from_rows(&probs).unwrap(), &refs).unwrap();
    let expect = -(0..l).map(|i| probs[i][refs[i]].ln()).sum::<f64>() / l as f64;
    (got - expect).abs()
}

fn brute_bleu(pairs: &[(Vec<u8>, Vec<u8>)], n: usize) -> f64 {
    let c: usize = pairs.iter().map(|p| p.0.len()).sum();
    let r: usize = pairs.iter().map(|p| p.1.len()).sum();
    let mut logp = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (cand, reference) in pairs {
            if cand.len() < k {
                continue;
            }
            total += cand.len() + 1 - k;
            let mut seen: Vec<&[u8]> = Vec::new();
            for i in 0..=cand.len() - k {
                let g = &cand[i..i + k];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let count = |s: &[u8]| {
                    if s.len() < k {
                        0
                    } else {
                        (0..=s.len() - k).filter(|&j| &s[j..j + k] == g).count()
                    }
                };
                matched += count(cand).min(count(reference));
            }
        }
        if matched == 0 {
            return 0.0;
        }
        logp += (matched as f64 / total as f64).ln() / n as f64;
    }
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    bp * logp.exp()
}

fn oracle_bleu(rng: &mut ChaCha8Rng) -> f64 {
    let mut sentence = || -> Vec<u8> {
        (0..rng.gen_range(1..12))
            .map(|_| rng.gen_range(0..4))
            .collect()
    };
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..10).map(|_| (sentence(), sentence())).collect();
    let refs: Vec<(&[u8], &[u8])> = pairs
        .iter()
        .map(|(a, b)| (a.as_slice(), b.as_slice()))
        .collect();
    (1..=4)
        .map(|n| (corpus_bleu(&refs, n).value - brute_bleu(&pairs, n)).abs())
        .fold(0.0, f64::max)
}

fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u8> = (0..a.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| a[i])
                .collect();
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x)).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn oracle_rouge(rng: &mut ChaCha8Rng) -> f64 {
    let a: Vec<u8> = (0..rng.gen_range(1..10))
        .map(|_| rng.gen_range(0..3))
        .collect();
    let b: Vec<u8> = (0..rng.gen_range(1..10))
        .map(|_| rng.gen_range(0..3))
        .collect();
    let l = brute_lcs(&a, &b) as f64;
    let expect = if l == 0.0 {
        0.0
    } else {
        let (p, r) = (l / a.len() as f64, l / b.len() as f64);
        2.2 * p * r / (r + 1.2 * p)
    };
    (rouge_l(&a, &b).value - expect).abs()
}

fn criterion_oracles() -> Outcome {
    type Oracle = fn(&mut ChaCha8Rng) -> f64;
    let oracles: [(&str, Oracle); 6] = [
        ("contrastive", oracle_contrastive),
        ("saliency map", oracle_saliency),
        ("saliency token", oracle_saliency_token),
        ("report loss", oracle_report_loss),
        ("BLEU-1..4", oracle_bleu),
        ("ROUGE-L", oracle_rouge),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f) in oracles {
        let max = (0..ORACLE_TRIALS).map(|_| f(&mut rng)).fold(0.0, f64::max);
        pass &= max < ORACLE_TOL;
        parts.push(format!("{name} {max:.1e}"));
    }
    outcome(
        pass,
        format!(
            "max deviation over {ORACLE_TRIALS} instances: {} (tol {ORACLE_TOL:e})",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_masking() -> Outcome {
    let n_v = 64;
    let k = salient_count(n_v, 0.20);
    let rate = 0.75;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<f64> = (0..n_v).map(|_| rng.gen()).collect();
    let salient = select_salient(&scores, 0.20);
    let mut counts_ok = true;
    let mut rates = |phi: f64| {
        let (mut sal, mut other) = (0usize, 0usize);
        for seed in 0..MASK_SEEDS {
            let plan = masking_plan(&salient, n_v, phi, rate, seed).unwrap();
            counts_ok &= plan.masked_indices.len() == 48;
            let hits = plan
                .masked_indices
                .iter()
                .filter(|i| salient.binary_search(i).is_ok())
                .count();
            sal += hits;
            other += plan.masked_indices.len() - hits;
        }
        (
            sal as f64 / (k as u64 * MASK_SEEDS) as f64,
            other as f64 / ((n_v - k) as u64 * MASK_SEEDS) as f64,
        )
    };
    let (s35, o35) = rates(0.35);
    let (s0, o0) = rates(0.0);
    let (oracle_s, oracle_o) = masking_probabilities(n_v, k, 48, 0.35);
    let pass = counts_ok
        && (s35 - oracle_s).abs() <= MASK_ORACLE_TOL
        && (o35 - oracle_o).abs() <= MASK_ORACLE_TOL
        && s35 > o35
        && (s0 - o0).abs() <= MASK_EQUAL_TOL;
    outcome(
        pass,
        format!(
            "48 masked every time: {counts_ok}; phi=0.35 salient {s35:.4} (oracle {oracle_s:.4}), other {o35:.4} (oracle {oracle_o:.4}); phi=0 salient {s0:.4} vs other {o0:.4}"
        ),
    )
}

// ---------------------------------------------------------------- shared training

/// Corpus on disk plus loaded splits for one seed.
struct Prepared {
    _dir: tempfile::TempDir,
    train: LoadedSplit,
    test: LoadedSplit,
}

fn prepare_seed(cfg: &RunConfig) -> Prepared {
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_data(cfg, dir.path()).unwrap();
    Prepared {
        train: load_split(dir.path(), Split::Train, cfg).unwrap(),
        test: load_split(dir.path(), Split::Test, cfg).unwrap(),
        _dir: dir,
    }
}

/// Default-configuration stage-1 networks, trained once per seed and shared
/// by the localization and ablation criteria.
#[derive(Default)]
struct Stage1Cache {
    runs: HashMap<u64, (Prepared, IdentNetwork, Duration)>,
}

impl Stage1Cache {
    fn get(&mut self, seed: u64) -> &(Prepared, IdentNetwork, Duration) {
        self.runs.entry(seed).or_insert_with(|| {
            let cfg = RunConfig {
                seed,
                ..RunConfig::default()
            };
            let data = prepare_seed(&cfg);
            let t = Instant::now();
            let (net, _) = train_identification(
                &data.train.examples,
                data.train.vocab.len(),
                &cfg,
                |_, _| {},
            )
            .unwrap();
            (data, net, t.elapsed())
        })
    }
}

fn mean_recall(ident: &IdentNetwork, test: &LoadedSplit) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0;
    for ex in &test.examples {
        if ex.lesion_patches.is_empty() {
            continue;
        }
        let pred = ident.salient_regions(&ex.patches).unwrap();
        total += sisr_core::metrics::saliency_localization(&pred, &ex.lesion_patches)
            .0
            .unwrap();
        n += 1;
    }
    (total / n as f64, n)
}

// ---------------------------------------------------------------- 4

fn criterion_localization(cache: &mut Stage1Cache) -> Outcome {
    let (data, ident, elapsed) = cache.get(RunConfig::default().seed);
    let (recall, n) = mean_recall(ident, &data.test);
    let within = elapsed.as_secs_f64() <= 600.0;
    outcome(
        recall >= RECALL_FLOOR && within,
        format!(
            "mean salient-region recall {recall:.3} over {n} abnormal held-out images (floor {RECALL_FLOOR}, random baseline 0.20); stage 1 took {:.0} s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5 and 6

/// Stage-2 held-out metrics per (seed, arm config), memoized so the φ sweep
/// reuses the FULL and φ = 0 runs of the arm comparison.
#[derive(Default)]
struct Stage2Cache {
    runs: HashMap<(u64, String), MetricReport>,
    frozen_ok: bool,
    elapsed: Duration,
}

fn stage_two_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

impl Stage2Cache {
    fn run(&mut self, stage1: &mut Stage1Cache, cfg: &RunConfig) -> MetricReport {
        let canonical = RunConfig {
            phi: cfg.effective_phi(),
            use_sisr_masking: true,
            ..cfg.clone()
        };
        let key = (cfg.seed, canonical.to_json().to_string());
        if let Some(m) = self.runs.get(&key) {
            return m.clone();
        }
        let (data, ident, _) = stage1.get(cfg.seed);
        let before = ident.to_checkpoint().to_bytes();
        let t = Instant::now();
        let (_, m) = stage_two_run(cfg, &data.train, &data.test, ident).unwrap();
        self.elapsed += t.elapsed();
        if self.runs.is_empty() {
            self.frozen_ok = true;
        }
        self.frozen_ok &= ident.to_checkpoint().to_bytes() == before;
        self.runs.insert(key, m.clone());
        m
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_arms(stage1: &mut Stage1Cache, stage2: &mut Stage2Cache) -> Outcome {
    let arms = [Arm::FULL, Arm::MASKING, Arm::LM, Arm::BASE];
    let mut f1: HashMap<&str, Vec<f64>> = HashMap::new();
    for seed in ABLATION_SEEDS {
        for arm in arms {
            let m = stage2.run(stage1, &arm.apply(&stage_two_config(seed)));
            f1.entry(arm.name()).or_default().push(m.ce_f1);
        }
    }
    let stage1_time: f64 = ABLATION_SEEDS
        .iter()
        .map(|&s| stage1.get(s).2.as_secs_f64())
        .sum();
    let total = stage1_time + stage2.elapsed.as_secs_f64();
    let m = |arm: Arm| mean(&f1[arm.name()]);
    let (full, mask, lm, base) = (m(Arm::FULL), m(Arm::MASKING), m(Arm::LM), m(Arm::BASE));
    let pass = full >= mask
        && mask >= base
        && full >= lm
        && lm >= base
        && full - base >= MIN_FULL_GAIN
        && total <= 3600.0;
    let per_seed = arms
        .iter()
        .map(|a| {
            format!(
                "{} {:?}",
                a.name(),
                f1[a.name()]
                    .iter()
                    .map(|x| (x * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        pass,
        format!(
            "mean held-out micro F1 over seeds {ABLATION_SEEDS:?}: FULL {full:.3}, +Masking {mask:.3}, +LM {lm:.3}, BASE {base:.3} (per seed: {per_seed}); {total:.0} s"
        ),
    )
}

fn criterion_phi(stage1: &mut Stage1Cache, stage2: &mut Stage2Cache, csv_dir: &Path) -> Outcome {
    let mut by_phi: Vec<(f64, Vec<MetricReport>)> =
        DEFAULT_PHI_GRID.iter().map(|&p| (p, Vec::new())).collect();
    for seed in ABLATION_SEEDS {
        let mut rows = Vec::new();
        for (phi, acc) in by_phi.iter_mut() {
            let m = stage2.run(stage1, &phi_config(&stage_two_config(seed), *phi).unwrap());
            rows.push(PhiRow {
                phi: *phi,
                precision: m.ce_precision,
                recall: m.ce_recall,
                f1: m.ce_f1,
            });
            acc.push(m);
        }
        write_phi_csv(&csv_dir.join(format!("phi_sweep_seed{seed}.csv")), &rows).unwrap();
    }
    let csv_rows = ABLATION_SEEDS
        .iter()
        .map(|s| {
            std::fs::read_to_string(csv_dir.join(format!("phi_sweep_seed{s}.csv")))
                .unwrap()
                .lines()
                .count()
                - 1
        })
        .all(|n| n == DEFAULT_PHI_GRID.len());
    let f1 = |phi: f64| {
        mean(
            &by_phi
                .iter()
                .find(|(p, _)| *p == phi)
                .unwrap()
                .1
                .iter()
                .map(|m| m.ce_f1)
                .collect::<Vec<_>>(),
        )
    };
    let curve = by_phi
        .iter()
        .map(|(p, _)| format!("{p}: {:.3}", f1(*p)))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        csv_rows && f1(0.35) >= f1(0.0),
        format!("mean held-out F1 by phi over seeds {ABLATION_SEEDS:?}: {curve}; sweep CSV rows per seed = {}", DEFAULT_PHI_GRID.len()),
    )
}

// ---------------------------------------------------------------- 7

fn toy_cli_config() -> RunConfig {
    RunConfig {
        n_train: 12,
        n_test: 6,
        image_size: 16,
        patch_size: 4,
        d_model: 8,
        depth: 1,
        heads: 2,
        d_common: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        max_gen_len: 24,
        batch_size: 4,
        align_epochs: 3,
        rrg_epochs: 3,
        ..RunConfig::default()
    }
}

/// Full command pipeline in `dir`; returns every output file's bytes.
fn pipeline_outputs(cfg: &RunConfig, dir: &Path) -> (Vec<(String, Vec<u8>)>, bool) {
    cmd_gen_data(cfg, &dir.join("data")).unwrap();
    cmd_train_align(cfg, &dir.join("data"), &dir.join("ident")).unwrap();
    let ident = dir.join("ident/ident.sisr");
    let rrg = cmd_train_rrg(cfg, &dir.join("data"), &ident, &dir.join("rrg")).unwrap();
    let frozen = rrg.ident_hash_before == rrg.ident_hash_after
        && rrg.ident_hash_after == file_hash(&ident).unwrap();
    cmd_extract_saliency(
        cfg,
        &dir.join("data"),
        Split::Test,
        &ident,
        &dir.join("sal"),
    )
    .unwrap();
    for (mode, name) in [
        (DecodeMode::Greedy, "greedy.txt"),
        (DecodeMode::Beam(1), "beam1.txt"),
        (DecodeMode::Beam(3), "beam3.txt"),
    ] {
        let input = GenerateInput::Corpus {
            dir: &dir.join("data"),
            split: Split::Test,
        };
        cmd_generate(
            cfg,
            input,
            &dir.join("data/vocab.txt"),
            &ident,
            &rrg.checkpoint,
            mode,
            &dir.join(name),
        )
        .unwrap();
    }
    let mut files: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    (files, frozen)
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn criterion_invariants(stage2: &Stage2Cache) -> Outcome {
    let cfg = toy_cli_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (files_a, frozen_a) = pipeline_outputs(&cfg, a.path());
    let (files_b, frozen_b) = pipeline_outputs(&cfg, b.path());
    let reproducible = files_a == files_b;
    let get = |name: &str| &files_a.iter().find(|(n, _)| n == name).unwrap().1;
    let beam_equals_greedy = get("greedy.txt") == get("beam1.txt");
    let ablation_frozen = stage2.runs.is_empty() || stage2.frozen_ok;
    let frozen = frozen_a && frozen_b && ablation_frozen;
    outcome(
        reproducible && beam_equals_greedy && frozen,
        format!(
            "identification checkpoint unchanged by stage 2: {frozen}; two runs byte-identical over {} files: {reproducible}; beam 1 == greedy: {beam_equals_greedy}",
            files_a.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_overfit() -> Outcome {
    let cfg = RunConfig {
        n_train: 5,
        normal_ratio: 0.4,
        rrg_epochs: OVERFIT_EPOCHS,
        ..RunConfig::default()
    };
    let data = prepare_seed(&cfg);
    let (ident, _) = train_identification(
        &data.train.examples,
        data.train.vocab.len(),
        &cfg,
        |_, _| {},
    )
    .unwrap();
    let mut reached = None;
    let mut last = 0.0;
    let (net, _) = sisr_core::rrg::train_rrg(&data.train.examples, &ident, &cfg, |log, net| {
        if reached.is_none() && log.epoch % 10 == 0 {
            let m = evaluate_model(&ident, net, &data.train, DecodeMode::Greedy).unwrap();
            last = m.bleu4;
            if m.bleu4 == 1.0 {
                reached = Some(log.epoch);
            }
        }
    })
    .unwrap();
    let final_bleu = evaluate_model(&ident, &net, &data.train, DecodeMode::Greedy)
        .unwrap()
        .bleu4;
    let n_abnormal = data
        .train
        .records
        .iter()
        .filter(|r| r.labels.count() > 0)
        .count();
    outcome(
        reached.is_some(),
        match reached {
            Some(e) => format!("BLEU-4 = 1.0 on the 5 training samples ({n_abnormal} abnormal) by epoch {e} (limit {OVERFIT_EPOCHS}); final {final_bleu:.4}"),
            None => format!("BLEU-4 {last:.4} at last check, {final_bleu:.4} after {OVERFIT_EPOCHS} epochs"),
        },
    )
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let mut stage1 = Stage1Cache::default();
    let mut stage2 = Stage2Cache::default();
    let csv_dir = tempfile::tempdir().unwrap();
    let mut failed = Vec::new();
    let mut record = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !selected(n) {
            return;
        }
        let t = Instant::now();
        let o = f();
        emit(&format!(
            "acceptance {n} [{name}]: {} ({:.1} s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        ));
        if !o.pass {
            failed.push(n);
        }
    };
    record(1, "gradient correctness", &mut criterion_gradients);
    record(2, "oracle equivalence", &mut criterion_oracles);
    record(3, "masking statistics", &mut criterion_masking);
    record(4, "saliency localization", &mut || {
        criterion_localization(&mut stage1)
    });
    record(5, "ablation arms", &mut || {
        criterion_arms(&mut stage1, &mut stage2)
    });
    record(6, "phi sweep", &mut || {
        criterion_phi(&mut stage1, &mut stage2, csv_dir.path())
    });
    record(7, "protocol invariants", &mut || {
        criterion_invariants(&stage2)
    });
    record(8, "overfit sanity", &mut criterion_overfit);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
