use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sisr_cli::{load_ident, read_reports, VOCAB_FILE};
use sisr_core::config::RunConfig;
use sisr_core::metrics::MetricReport;

fn toy_config() -> RunConfig {
    RunConfig {
        n_train: 8,
        n_test: 6,
        image_size: 16,
        patch_size: 4,
        d_model: 8,
        depth: 1,
        heads: 2,
        d_common: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        max_gen_len: 12,
        batch_size: 4,
        align_epochs: 2,
        rrg_epochs: 1,
        ..RunConfig::default()
    }
}

struct Sandbox {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("toy.json");
        fs::write(
            &config,
            serde_json::to_string(&toy_config().to_json()).unwrap(),
        )
        .unwrap();
        Self {
            _dir: dir,
            root,
            config,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sisr"));
        cmd.arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove("SISR_SEED");
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    /// Corpus plus both checkpoints.
    fn pipeline(&self) {
        self.ok(&["gen-data", "--out", &self.s("data")]);
        self.ok(&[
            "train-align",
            "--corpus",
            &self.s("data"),
            "--out",
            &self.s("ident"),
        ]);
        self.ok(&[
            "train-rrg",
            "--corpus",
            &self.s("data"),
            "--ident",
            &self.s("ident/ident.sisr"),
            "--out",
            &self.s("rrg"),
        ]);
    }
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn gen_data_writes_reproducible_corpus() {
    let sb = Sandbox::new();
    let stdout = sb.ok(&["gen-data", "--out", &sb.s("a")]);
    let stats: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(stats["train"]["n_samples"], 8);
    assert_eq!(line_count(&sb.path("a/train.tsv")), 8);
    assert_eq!(line_count(&sb.path("a/test.tsv")), 6);
    assert!(sb.path("a/vocab.txt").exists());
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sb.path("a/config.json")).unwrap()).unwrap();
    assert_eq!(RunConfig::from_json(&echoed).unwrap(), toy_config());

    sb.ok(&["gen-data", "--out", &sb.s("b")]);
    assert_eq!(
        fs::read(sb.path("a/train.tsv")).unwrap(),
        fs::read(sb.path("b/train.tsv")).unwrap()
    );
    let first = fs::read_to_string(sb.path("a/train.tsv")).unwrap();
    let image = first.lines().next().unwrap().split('\t').next().unwrap();
    assert_eq!(
        fs::read(sb.path("a").join(image)).unwrap(),
        fs::read(sb.path("b").join(image)).unwrap()
    );

    let stdout = sb.ok(&["gen-data", "--out", &sb.s("c"), "--set", "normal_ratio=1.0"]);
    let stats: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(stats["train"]["n_abnormal"], 0);
}

#[test]
fn default_corpus_has_512_training_records() {
    let sb = Sandbox::new();
    let out = Command::new(env!("CARGO_BIN_EXE_sisr"))
        .args(["gen-data", "--out", &sb.s("d")])
        .env_remove("SISR_SEED")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(line_count(&sb.path("d/train.tsv")), 512);
}

#[test]
fn seed_comes_from_environment_then_flags() {
    let sb = Sandbox::new();
    let run = |extra: &[&str], out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sisr"));
        cmd.arg("--config")
            .arg(&sb.config)
            .args(["gen-data", "--out", &sb.s(out)])
            .args(extra);
        cmd.env("SISR_SEED", "99");
        assert!(cmd.output().unwrap().status.success());
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(sb.path(out).join("config.json")).unwrap())
                .unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&[], "e1"), 99);
    assert_eq!(run(&["--set", "seed=5"], "e2"), 5);
}

#[test]
fn config_errors_exit_with_code_2() {
    let sb = Sandbox::new();
    for bad in [
        ["--set", "phi=-1"],
        ["--set", "no_such_key=1"],
        ["--set", "tau=0"],
    ] {
        let out = sb.run(&["gen-data", "--out", &sb.s("x"), bad[0], bad[1]]);
        assert_eq!(out.status.code(), Some(2), "{bad:?}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_sisr"))
        .args(["gen-data", "--out", &sb.s("x")])
        .env("SISR_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_errors_exit_with_code_4() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data", "--out", &sb.s("data")]);
    let out = sb.run(&[
        "train-rrg",
        "--corpus",
        &sb.s("data"),
        "--ident",
        &sb.s("missing.sisr"),
        "--out",
        &sb.s("rrg"),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.sisr"));

    fs::write(sb.path("file"), "").unwrap();
    let out = sb.run(&["gen-data", "--out", &sb.s("file/sub")]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn divergence_exits_with_code_3_and_keeps_last_good_parameters() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data", "--out", &sb.s("data")]);
    let out = sb.run(&[
        "train-align",
        "--corpus",
        &sb.s("data"),
        "--out",
        &sb.s("ident"),
        "--set",
        "lr=1e300",
        "--set",
        "grad_clip=0",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(load_ident(&sb.path("ident/ident.last_good.sisr")).is_ok());
}

#[test]
fn training_stages_write_checkpoints_logs_and_hashes() {
    let sb = Sandbox::new();
    sb.pipeline();
    let ident = sb.path("ident/ident.sisr");
    assert!(load_ident(&ident).is_ok());
    assert_eq!(
        line_count(&sb.path("ident/ident_loss.csv")),
        1 + toy_config().align_epochs
    );
    assert_eq!(
        fs::read_to_string(sb.path("ident/ident_loss.csv"))
            .unwrap()
            .lines()
            .next(),
        Some("epoch,L_v,L_t,L_bi,L1")
    );
    assert_eq!(
        line_count(&sb.path("rrg/rrg_loss.csv")),
        1 + toy_config().rrg_epochs
    );
    let recorded = fs::read_to_string(sb.path("ident/ident.sisr.sha256")).unwrap();
    assert_eq!(recorded.trim(), sisr_cli::file_hash(&ident).unwrap());
    assert!(sb.path("rrg/rrg.sisr.sha256").exists());
    assert!(sb.path("rrg/config.json").exists());

    // Same config and seed: byte-identical checkpoints.
    sb.ok(&[
        "train-rrg",
        "--corpus",
        &sb.s("data"),
        "--ident",
        &sb.s("ident/ident.sisr"),
        "--out",
        &sb.s("rrg2"),
    ]);
    assert_eq!(
        fs::read(sb.path("rrg/rrg.sisr")).unwrap(),
        fs::read(sb.path("rrg2/rrg.sisr")).unwrap()
    );

    let base = sb.ok(&[
        "train-rrg",
        "--corpus",
        &sb.s("data"),
        "--ident",
        &sb.s("ident/ident.sisr"),
        "--out",
        &sb.s("base"),
        "--no-sisr-masking",
        "--no-sisr-lm",
    ]);
    assert!(base.contains("arm BASE\n"));
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sb.path("base/config.json")).unwrap()).unwrap();
    assert_eq!(
        (
            echoed["use_sisr_masking"].as_bool(),
            echoed["use_sisr_lm"].as_bool()
        ),
        (Some(false), Some(false))
    );
    assert_eq!(recorded.trim(), sisr_cli::file_hash(&ident).unwrap());
}

#[test]
fn saliency_export_generation_and_evaluation() {
    let sb = Sandbox::new();
    sb.pipeline();
    let ident = sb.s("ident/ident.sisr");
    let rrg = sb.s("rrg/rrg.sisr");
    let data = sb.s("data");

    sb.ok(&[
        "extract-saliency",
        "--corpus",
        &data,
        "--ident",
        &ident,
        "--out",
        &sb.s("sal"),
    ]);
    sb.ok(&[
        "extract-saliency",
        "--corpus",
        &data,
        "--ident",
        &ident,
        "--out",
        &sb.s("sal2"),
    ]);
    let n_v = 16;
    assert_eq!(line_count(&sb.path("sal/saliency.csv")), 1 + 6 * n_v);
    assert_eq!(line_count(&sb.path("sal/salient.csv")), 1 + 6 * 3);
    for f in ["saliency.sisr", "saliency.csv", "salient.csv"] {
        assert_eq!(
            fs::read(sb.path("sal").join(f)).unwrap(),
            fs::read(sb.path("sal2").join(f)).unwrap()
        );
    }
    let maps = sisr_core::checkpoint::load_tensors(&sb.path("sal/saliency.sisr")).unwrap();
    assert_eq!(maps.len(), 6);
    assert!(maps.iter().all(|(_, t)| t.shape() == [n_v]));

    let gen = |beam: &str, out: &str| {
        sb.ok(&[
            "generate",
            "--corpus",
            &data,
            "--ident",
            &ident,
            "--rrg",
            &rrg,
            "--beam",
            beam,
            "--out",
            &sb.s(out),
        ]);
        sb.path(out)
    };
    let greedy = gen("1", "greedy.txt");
    let beam1 = {
        sb.ok(&[
            "generate",
            "--corpus",
            &data,
            "--ident",
            &ident,
            "--rrg",
            &rrg,
            "--out",
            &sb.s("default.txt"),
        ]);
        sb.path("default.txt")
    };
    assert_eq!(fs::read(&greedy).unwrap(), fs::read(&beam1).unwrap());
    let lines = read_reports(&greedy).unwrap();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|(id, _)| id.starts_with("test_")));
    gen("3", "beam3.txt");
    assert_eq!(read_reports(&sb.path("beam3.txt")).unwrap().len(), 6);
    assert_eq!(
        sb.run(&[
            "generate",
            "--corpus",
            &data,
            "--ident",
            &ident,
            "--rrg",
            &rrg,
            "--beam",
            "0",
            "--out",
            &sb.s("z")
        ])
        .status
        .code(),
        Some(2)
    );
    let missing = sb.run(&[
        "generate",
        "--corpus",
        &data,
        "--ident",
        &ident,
        "--rrg",
        &sb.s("nope.sisr"),
        "--out",
        &sb.s("z"),
    ]);
    assert_eq!(missing.status.code(), Some(4));

    let first_image = fs::read_to_string(sb.path("data/test.tsv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split('\t')
        .next()
        .unwrap()
        .to_string();
    sb.ok(&[
        "generate",
        "--corpus",
        &data,
        "--image",
        &sb.s(&format!("data/{first_image}")),
        "--ident",
        &ident,
        "--rrg",
        &rrg,
        "--out",
        &sb.s("one.txt"),
    ]);
    assert_eq!(read_reports(&sb.path("one.txt")).unwrap()[0], lines[0]);

    let json = sb.ok(&[
        "evaluate",
        "--reports",
        &sb.s("greedy.txt"),
        "--corpus",
        &data,
        "--ident",
        &ident,
        "--out",
        &sb.s("m.json"),
    ]);
    let m: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(m.n_samples, 6);
    let written: MetricReport =
        serde_json::from_str(&fs::read_to_string(sb.path("m.json")).unwrap()).unwrap();
    assert_eq!(written, m);

    // References scored against themselves.
    let records = sisr_core::corpus::read_corpus(&sb.path("data"), "test.tsv").unwrap();
    let refs: String = records
        .iter()
        .map(|r| format!("{}\t{}\n", r.id, r.report))
        .collect();
    fs::write(sb.path("refs.txt"), refs).unwrap();
    let m: MetricReport = serde_json::from_str(&sb.ok(&[
        "evaluate",
        "--reports",
        &sb.s("refs.txt"),
        "--corpus",
        &data,
    ]))
    .unwrap();
    for v in [m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l] {
        assert!((v - 1.0).abs() < 1e-12);
    }
    let has_positive = records.iter().any(|r| r.labels.count() > 0);
    if has_positive {
        assert_eq!((m.ce_precision, m.ce_recall, m.ce_f1), (1.0, 1.0, 1.0));
    }
    assert!(m.degenerate.is_empty());

    fs::write(sb.path("empty.txt"), "").unwrap();
    let m: MetricReport = serde_json::from_str(&sb.ok(&[
        "evaluate",
        "--reports",
        &sb.s("empty.txt"),
        "--corpus",
        &data,
    ]))
    .unwrap();
    assert!(m.degenerate.contains(&"bleu1".into()) && m.degenerate.contains(&"rougeL".into()));
    assert!(
        fs::read_to_string(sb.path("data").join(VOCAB_FILE))
            .unwrap()
            .lines()
            .count()
            > 4
    );
}

#[test]
fn phi_sweep_writes_one_row_per_value() {
    let sb = Sandbox::new();
    sb.pipeline();
    let out = sb.ok(&[
        "ablate-phi",
        "--corpus",
        &sb.s("data"),
        "--ident",
        &sb.s("ident/ident.sisr"),
        "--out",
        &sb.s("phi"),
        "--grid",
        "0,0.35",
    ]);
    assert!(out.starts_with("phi,P,R,F1\n"));
    let csv = fs::read_to_string(sb.path("phi/phi_sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,") && rows[2].starts_with("0.35,"));

    sb.ok(&[
        "ablate-phi",
        "--corpus",
        &sb.s("data"),
        "--ident",
        &sb.s("ident/ident.sisr"),
        "--out",
        &sb.s("phi0"),
        "--grid",
        "0",
    ]);
    let single = fs::read_to_string(sb.path("phi0/phi_sweep.csv")).unwrap();
    assert_eq!(single.lines().nth(1), rows.get(1).copied());
}
