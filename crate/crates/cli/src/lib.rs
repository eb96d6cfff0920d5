//! Commands behind the `sisr` binary: corpus generation, the two training
//! stages, saliency export, generation, evaluation and the φ sweep.
//!
//! Every command writes the resolved configuration to `config.json` in its
//! output directory, and none of them record timestamps, so a fixed
//! `(config, seed)` reproduces every output byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sisr_core::align::{train_identification, IdentNetwork};
use sisr_core::backbones::{detokenize, patchify, words, ImageGrid, Vocabulary};
use sisr_core::checkpoint::{load_tensors, save_tensors};
use sisr_core::config::RunConfig;
use sisr_core::corpus::{
    corpus_stats, extract_labels, generate_corpus, read_corpus, write_corpus, CorpusRecord,
    CorpusStats,
};
use sisr_core::dataset::{prepare, Example};
use sisr_core::metrics::{evaluate, EvalItem, MetricReport};
use sisr_core::rrg::{train_rrg, DecodeMode, Guidance, RrgNetwork};
use sisr_core::{Checkpoint, Error, Result, Tensor};

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.json";
pub const SEED_ENV: &str = "SISR_SEED";

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 1,
    }
}

/// Resolves the run configuration: defaults or `file`, then the seed from
/// `seed_env` if set, then `key=value` overrides.
pub fn resolve_config(
    file: Option<&Path>,
    seed_env: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&v)?
        }
        None => RunConfig::default(),
    };
    if let Some(raw) = seed_env {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
    }
    let cfg = cfg.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Writes the resolved configuration into `dir`.
pub fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    let mut text = serde_json::to_string_pretty(&cfg.to_json()).expect("config serializes");
    text.push('\n');
    write_file(&dir.join(CONFIG_FILE), text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").expect("string write");
            s
        })
}

/// Saves `ckpt` and a sibling `<file>.sha256`; returns the hash.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    ckpt.save(path)?;
    let hash = sha256_hex(&ckpt.to_bytes());
    let mut side = path.as_os_str().to_owned();
    side.push(".sha256");
    write_file(Path::new(&side), format!("{hash}\n"))?;
    Ok(hash)
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| io_err(path, e))?))
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(io_err(
            path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{what} checkpoint not found"),
            ),
        ));
    }
    Checkpoint::load(path)
}

pub fn load_ident(path: &Path) -> Result<IdentNetwork> {
    IdentNetwork::from_checkpoint(&load_checkpoint(path, "identification")?)
}

pub fn load_rrg(path: &Path) -> Result<RrgNetwork> {
    RrgNetwork::from_checkpoint(&load_checkpoint(path, "report generation")?)
}

/// Which half of a generated corpus to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn manifest(self) -> &'static str {
        match self {
            Split::Train => TRAIN_MANIFEST,
            Split::Test => TEST_MANIFEST,
        }
    }
}

/// A corpus split loaded from disk together with the shared vocabulary.
pub struct LoadedSplit {
    pub records: Vec<CorpusRecord>,
    pub examples: Vec<Example>,
    pub vocab: Vocabulary,
}

pub fn load_split(corpus: &Path, split: Split, cfg: &RunConfig) -> Result<LoadedSplit> {
    let vocab = Vocabulary::load(&corpus.join(VOCAB_FILE))?;
    let records = read_corpus(corpus, split.manifest())?;
    let examples = prepare(&records, &vocab, cfg.patch_size, cfg.max_len)?;
    Ok(LoadedSplit {
        records,
        examples,
        vocab,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GenDataSummary {
    pub train: CorpusStats,
    pub test: CorpusStats,
    pub vocab_size: usize,
}

/// Generates the train and held-out splits, the vocabulary (built from the
/// training reports) and the config echo under `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenDataSummary> {
    echo_config(out, cfg)?;
    let train: Vec<CorpusRecord> = generate_corpus(&cfg.train_corpus())?
        .into_iter()
        .map(Into::into)
        .collect();
    let test: Vec<CorpusRecord> = generate_corpus(&cfg.test_corpus())?
        .into_iter()
        .map(Into::into)
        .collect();
    let vocab = Vocabulary::build(&train.iter().map(|r| r.report.as_str()).collect::<Vec<_>>())?;
    write_corpus(out, TRAIN_MANIFEST, &train)?;
    write_corpus(out, TEST_MANIFEST, &test)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    Ok(GenDataSummary {
        train: corpus_stats(&train),
        test: corpus_stats(&test),
        vocab_size: vocab.len(),
    })
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    write_file(path, text)
}

/// On divergence, keeps the last good parameters next to the intended
/// output before passing the error on.
fn save_last_good(err: Error, out: &Path, name: &str) -> Error {
    if let Error::Divergence {
        last_good: Some(ckpt),
        ..
    } = &err
    {
        if let Err(e) = ckpt.save(&out.join(format!("{name}.last_good.sisr"))) {
            return e;
        }
    }
    err
}

pub struct AlignOutput {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub net: IdentNetwork,
    pub losses: Vec<sisr_core::align::EpochLog>,
}

/// Stage 1: writes `ident.sisr`, its hash and `ident_loss.csv`.
pub fn cmd_train_align(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<AlignOutput> {
    echo_config(out, cfg)?;
    let data = load_split(corpus, Split::Train, cfg)?;
    let (net, losses) = train_identification(&data.examples, data.vocab.len(), cfg, |_, _| {})
        .map_err(|e| save_last_good(e, out, "ident"))?;
    write_csv(
        &out.join("ident_loss.csv"),
        "epoch,L_v,L_t,L_bi,L1",
        losses.iter().map(|l| {
            let s = &l.losses;
            format!("{},{},{},{},{}", l.epoch, s.l_v, s.l_t, s.l_bi, s.l1)
        }),
    )?;
    let checkpoint = out.join("ident.sisr");
    let hash = save_checkpoint(&checkpoint, &net.to_checkpoint())?;
    Ok(AlignOutput {
        checkpoint,
        hash,
        net,
        losses,
    })
}

/// The two ablation switches of stage 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub sisr_masking: bool,
    pub sisr_lm: bool,
}

impl Arm {
    pub const FULL: Arm = Arm {
        sisr_masking: true,
        sisr_lm: true,
    };
    pub const BASE: Arm = Arm {
        sisr_masking: false,
        sisr_lm: false,
    };
    pub const MASKING: Arm = Arm {
        sisr_masking: true,
        sisr_lm: false,
    };
    pub const LM: Arm = Arm {
        sisr_masking: false,
        sisr_lm: true,
    };

    pub fn name(self) -> &'static str {
        match (self.sisr_masking, self.sisr_lm) {
            (true, true) => "FULL",
            (false, false) => "BASE",
            (true, false) => "BASE+SISR-Masking",
            (false, true) => "BASE+SISR-LM",
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        RunConfig {
            use_sisr_masking: cfg.use_sisr_masking && self.sisr_masking,
            use_sisr_lm: cfg.use_sisr_lm && self.sisr_lm,
            ..cfg.clone()
        }
    }
}

pub struct RrgOutput {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub net: RrgNetwork,
    pub ident_hash_before: String,
    pub ident_hash_after: String,
}

/// Stage 2 against a frozen identification checkpoint: writes `rrg.sisr`,
/// its hash and `rrg_loss.csv`, and checks the identification checkpoint
/// is unchanged on disk.
pub fn cmd_train_rrg(
    cfg: &RunConfig,
    corpus: &Path,
    ident_path: &Path,
    out: &Path,
) -> Result<RrgOutput> {
    let ident = load_ident(ident_path)?;
    let ident_hash_before = file_hash(ident_path)?;
    echo_config(out, cfg)?;
    let data = load_split(corpus, Split::Train, cfg)?;
    check_vocab(&ident, &data.vocab)?;
    let (net, logs) = train_rrg(&data.examples, &ident, cfg, |_, _| {})
        .map_err(|e| save_last_good(e, out, "rrg"))?;
    write_csv(
        &out.join("rrg_loss.csv"),
        "epoch,L_I,L_R,L2",
        logs.iter().map(|l| {
            format!(
                "{},{},{},{}",
                l.epoch, l.losses.l_i, l.losses.l_r, l.losses.l2
            )
        }),
    )?;
    let checkpoint = out.join("rrg.sisr");
    let hash = save_checkpoint(&checkpoint, &net.to_checkpoint())?;
    let ident_hash_after = file_hash(ident_path)?;
    if ident_hash_after != ident_hash_before {
        return Err(Error::Contract(format!(
            "{} changed during stage 2",
            ident_path.display()
        )));
    }
    Ok(RrgOutput {
        checkpoint,
        hash,
        net,
        ident_hash_before,
        ident_hash_after,
    })
}

fn check_vocab(ident: &IdentNetwork, vocab: &Vocabulary) -> Result<()> {
    if ident.vocab_size != vocab.len() {
        return Err(Error::Contract(format!(
            "checkpoint vocabulary has {} tokens, corpus vocabulary has {}",
            ident.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// Saliency scores and salient sets for every image of a split:
/// `saliency.sisr` (one `[N_v]` tensor per image id), `saliency.csv`
/// (image_id, patch_index, score) and `salient.csv` (image_id, patch_index).
pub fn cmd_extract_saliency(
    cfg: &RunConfig,
    corpus: &Path,
    split: Split,
    ident_path: &Path,
    out: &Path,
) -> Result<Vec<(String, Vec<usize>)>> {
    let ident = load_ident(ident_path)?;
    echo_config(out, cfg)?;
    let data = load_split(corpus, split, cfg)?;
    let mut tensors = Vec::with_capacity(data.examples.len());
    let mut scores_csv = Vec::new();
    let mut salient_csv = Vec::new();
    let mut sets = Vec::with_capacity(data.examples.len());
    for ex in &data.examples {
        let g = Guidance::from_ident(&ident, &ex.patches)?;
        for (i, s) in g.saliency.iter().enumerate() {
            scores_csv.push(format!("{},{i},{s}", ex.id));
        }
        salient_csv.extend(g.salient.iter().map(|i| format!("{},{i}", ex.id)));
        tensors.push((
            ex.id.clone(),
            Tensor::new(vec![g.saliency.len()], g.saliency)?,
        ));
        sets.push((ex.id.clone(), g.salient));
    }
    save_tensors(&out.join("saliency.sisr"), &tensors)?;
    write_csv(
        &out.join("saliency.csv"),
        "image_id,patch_index,score",
        scores_csv,
    )?;
    write_csv(
        &out.join("salient.csv"),
        "image_id,patch_index",
        salient_csv,
    )?;
    Ok(sets)
}

/// Where `generate` reads images from.
pub enum GenerateInput<'a> {
    Corpus {
        dir: &'a Path,
        split: Split,
    },
    /// A single image in the tensor container; its id is the file stem.
    Image(&'a Path),
}

/// One `id<TAB>report` line per image, written to `out`.
pub fn cmd_generate(
    cfg: &RunConfig,
    input: GenerateInput<'_>,
    vocab_path: &Path,
    ident_path: &Path,
    rrg_path: &Path,
    mode: DecodeMode,
    out: &Path,
) -> Result<Vec<(String, String)>> {
    let ident = load_ident(ident_path)?;
    let rrg = load_rrg(rrg_path)?;
    let vocab = Vocabulary::load(vocab_path)?;
    check_vocab(&ident, &vocab)?;
    let images: Vec<(String, Tensor)> = match input {
        GenerateInput::Corpus { dir, split } => load_split(dir, split, cfg)?
            .examples
            .into_iter()
            .map(|e| (e.id, e.patches))
            .collect(),
        GenerateInput::Image(path) => {
            let tensors = load_tensors(path)?;
            let (_, t) = tensors.first().ok_or_else(|| Error::Format {
                what: "image",
                detail: format!("{} holds no tensor", path.display()),
            })?;
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            vec![(id, patchify(&ImageGrid::from_tensor(t)?, cfg.patch_size)?)]
        }
    };
    let mut lines = Vec::with_capacity(images.len());
    for (id, patches) in images {
        let g = Guidance::from_ident(&ident, &patches)?;
        let report = rrg.generate(&patches, &g, mode)?;
        lines.push((id, detokenize(&report.tokens, &vocab)));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let text: String = lines.iter().map(|(id, r)| format!("{id}\t{r}\n")).collect();
    write_file(out, text)?;
    Ok(lines)
}

pub fn read_reports(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (id, report) = l.split_once('\t').ok_or_else(|| Error::Format {
                what: "reports file",
                detail: format!("line {l:?} has no tab"),
            })?;
            Ok((id.to_string(), report.to_string()))
        })
        .collect()
}

/// Lowercased whitespace tokens, the unit both BLEU and ROUGE count in.
pub fn report_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Scores generated reports against a corpus split. Samples without a
/// generated line count as empty predictions; saliency metrics are filled
/// when an identification checkpoint is supplied.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    reports: &Path,
    corpus: &Path,
    split: Split,
    ident_path: Option<&Path>,
) -> Result<MetricReport> {
    let generated: std::collections::HashMap<String, String> =
        read_reports(reports)?.into_iter().collect();
    let data = load_split(corpus, split, cfg)?;
    let ident = ident_path.map(load_ident).transpose()?;
    let items = data
        .records
        .iter()
        .zip(&data.examples)
        .map(|(rec, ex)| {
            let candidate = generated.get(&rec.id).cloned().unwrap_or_default();
            Ok(EvalItem {
                candidate: report_words(&candidate),
                reference: report_words(&rec.report),
                predicted_labels: extract_labels(&candidate),
                reference_labels: rec.labels,
                salient: ident
                    .as_ref()
                    .map(|n| n.salient_regions(&ex.patches))
                    .transpose()?,
                lesion_patches: rec.lesion_patches.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&items)
}

/// Greedy or beam generation over `examples` followed by evaluation.
pub fn evaluate_model(
    ident: &IdentNetwork,
    rrg: &RrgNetwork,
    data: &LoadedSplit,
    mode: DecodeMode,
) -> Result<MetricReport> {
    let items = data
        .records
        .iter()
        .zip(&data.examples)
        .map(|(rec, ex)| {
            let g = Guidance::from_ident(ident, &ex.patches)?;
            let out = rrg.generate(&ex.patches, &g, mode)?;
            Ok(EvalItem {
                candidate: words(&out.tokens, &data.vocab),
                reference: report_words(&rec.report),
                predicted_labels: extract_labels(&detokenize(&out.tokens, &data.vocab)),
                reference_labels: rec.labels,
                salient: Some(g.salient),
                lesion_patches: rec.lesion_patches.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&items)
}

pub const DEFAULT_PHI_GRID: [f64; 6] = [0.0, 0.25, 0.3, 0.35, 0.4, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct PhiRow {
    pub phi: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Trains stage 2 under `cfg` and scores greedy output on `test`.
pub fn stage_two_run(
    cfg: &RunConfig,
    train: &LoadedSplit,
    test: &LoadedSplit,
    ident: &IdentNetwork,
) -> Result<(RrgNetwork, MetricReport)> {
    check_vocab(ident, &train.vocab)?;
    let (net, _) = train_rrg(&train.examples, ident, cfg, |_, _| {})?;
    let metrics = evaluate_model(ident, &net, test, DecodeMode::Greedy)?;
    Ok((net, metrics))
}

pub fn write_phi_csv(path: &Path, rows: &[PhiRow]) -> Result<()> {
    write_csv(
        path,
        "phi,P,R,F1",
        rows.iter()
            .map(|r| format!("{},{},{},{}", r.phi, r.precision, r.recall, r.f1)),
    )
}

/// The stage-2 configuration for one grid point.
pub fn phi_config(cfg: &RunConfig, phi: f64) -> Result<RunConfig> {
    let run = RunConfig {
        phi,
        use_sisr_masking: true,
        ..cfg.clone()
    };
    run.validate()?;
    Ok(run)
}

/// One stage-2 run per φ against the shared identification checkpoint,
/// scored on the held-out split; writes `phi_sweep.csv`.
pub fn cmd_ablate_phi(
    cfg: &RunConfig,
    corpus: &Path,
    ident_path: &Path,
    grid: &[f64],
    out: &Path,
) -> Result<Vec<PhiRow>> {
    if grid.is_empty() {
        return Err(Error::Config("φ grid is empty".into()));
    }
    let ident = load_ident(ident_path)?;
    echo_config(out, cfg)?;
    let train = load_split(corpus, Split::Train, cfg)?;
    let test = load_split(corpus, Split::Test, cfg)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &phi in grid {
        let (_, m) = stage_two_run(&phi_config(cfg, phi)?, &train, &test, &ident)?;
        rows.push(PhiRow {
            phi,
            precision: m.ce_precision,
            recall: m.ce_recall,
            f1: m.ce_f1,
        });
    }
    write_phi_csv(&out.join("phi_sweep.csv"), &rows)?;
    Ok(rows)
}

/// Width 1 is plain greedy decoding; width 0 is rejected at generation.
pub fn decode_mode(beam: usize) -> DecodeMode {
    match beam {
        1 => DecodeMode::Greedy,
        w => DecodeMode::Beam(w),
    }
}
