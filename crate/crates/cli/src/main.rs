use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sisr_cli::*;
use sisr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sisr",
    version,
    about = "Saliency-guided report generation on a synthetic corpus"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set phi=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the salient-region identification network.
    TrainAlign {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train image modeling and report generation.
    TrainRrg {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ident: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Random masking instead of saliency-biased masking.
        #[arg(long)]
        no_sisr_masking: bool,
        /// Replace the saliency token with zeros.
        #[arg(long)]
        no_sisr_lm: bool,
    },
    /// Export saliency maps and salient sets.
    ExtractSaliency {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        ident: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one `id<TAB>report` line per image.
    Generate {
        /// Corpus directory; its vocabulary is used for decoding.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Single image container to caption instead of the corpus split.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        ident: PathBuf,
        #[arg(long)]
        rrg: PathBuf,
        /// Beam width; defaults to the config's `beam_width`.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated reports and print the metric JSON.
    Evaluate {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also score salient-region localization.
        #[arg(long)]
        ident: Option<PathBuf>,
        /// Write the JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage-2 sweep over the salient masking increment.
    AblatePhi {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ident: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PHI_GRID)]
        grid: Vec<f64>,
    },
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    let seed = std::env::var(SEED_ENV).ok();
    let cfg = resolve_config(
        cli.common.config.as_deref(),
        seed.as_deref(),
        &cli.common.sets,
    )?;
    match cli.command {
        Command::GenData { out } => print_json(&cmd_gen_data(&cfg, &out)?),
        Command::TrainAlign { corpus, out } => {
            let r = cmd_train_align(&cfg, &corpus, &out)?;
            if let (Some(first), Some(last)) = (r.losses.first(), r.losses.last()) {
                println!("L_bi {} -> {}", first.losses.l_bi, last.losses.l_bi);
            }
            println!("{}  {}", r.hash, r.checkpoint.display());
        }
        Command::TrainRrg {
            corpus,
            ident,
            out,
            no_sisr_masking,
            no_sisr_lm,
        } => {
            let arm = Arm {
                sisr_masking: !no_sisr_masking,
                sisr_lm: !no_sisr_lm,
            };
            let r = cmd_train_rrg(&arm.apply(&cfg), &corpus, &ident, &out)?;
            println!("arm {}", arm.name());
            println!(
                "identification checkpoint unchanged: {}",
                r.ident_hash_after
            );
            println!("{}  {}", r.hash, r.checkpoint.display());
        }
        Command::ExtractSaliency {
            corpus,
            split,
            ident,
            out,
        } => {
            let sets = cmd_extract_saliency(&cfg, &corpus, split.into(), &ident, &out)?;
            println!("{} images written to {}", sets.len(), out.display());
        }
        Command::Generate {
            corpus,
            split,
            image,
            ident,
            rrg,
            beam,
            out,
        } => {
            let input = match &image {
                Some(p) => GenerateInput::Image(p),
                None => GenerateInput::Corpus {
                    dir: &corpus,
                    split: split.into(),
                },
            };
            let mode = decode_mode(beam.unwrap_or(cfg.beam_width));
            let lines = cmd_generate(
                &cfg,
                input,
                &corpus.join(VOCAB_FILE),
                &ident,
                &rrg,
                mode,
                &out,
            )?;
            println!("{} reports written to {}", lines.len(), out.display());
        }
        Command::Evaluate {
            reports,
            corpus,
            split,
            ident,
            out,
        } => {
            let m = cmd_evaluate(&cfg, &reports, &corpus, split.into(), ident.as_deref())?;
            if let Some(out) = out {
                let text = serde_json::to_string_pretty(&m).expect("serializable") + "\n";
                std::fs::write(&out, text).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
            }
            print_json(&m);
        }
        Command::AblatePhi {
            corpus,
            ident,
            out,
            grid,
        } => {
            println!("phi,P,R,F1");
            for r in cmd_ablate_phi(&cfg, &corpus, &ident, &grid, &out)? {
                println!("{},{},{},{}", r.phi, r.precision, r.recall, r.f1);
            }
            println!(
                "written to {}",
                Path::new(&out).join("phi_sweep.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
