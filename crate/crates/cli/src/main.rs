//! `xmodal`: contrastive pre-training, linear probing, ablations and
//! gradient checks from the command line.
//!
//! Configuration is layered: the `--preset` defaults, then the `--config`
//! file, then `--seed` and `--out`. Exit codes are 0 on success, 1 for
//! configuration or usage errors, 2 for data and I/O errors and 3 for numeric
//! failures (including a failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmodal_core::train::{append_metrics, load_corpus, model_from_checkpoint, CHECKPOINT_FILE, METRICS_FILE};
use xmodal_core::{ablate, gradcheck_report, pretrain, probe, write_corpus, Checkpoint, Error, MetricsRecord, Preset, Result, RunConfig};

const CORPUS_FILE: &str = "corpus.xclc";

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modal contrastive pre-training on synthetic documents")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file applied over the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (model init and batch order; the corpus seed for gen-corpus).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "NAME", default_value = "desk")]
    preset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic corpus to a file.
    GenCorpus {
        /// Destination; defaults to `<out>/corpus.xclc`.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Contrastive pre-training; writes the config echo, metrics log and checkpoint.
    Pretrain {
        /// Probe the final model and append the accuracies to the metrics log.
        #[arg(long)]
        probe: bool,
    },
    /// Linear probes on frozen features of a saved checkpoint.
    Probe {
        /// Defaults to `<out>/checkpoint.ckpt`.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Attention-module and objective ablation over the configured seeds.
    Ablate,
    /// Finite-difference audit of every op, block and loss.
    Gradcheck,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let preset: Preset = common.preset.parse()?;
    let mut cfg = RunConfig::preset(preset);
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::GenCorpus { output } => {
            if let Some(seed) = cli.common.seed {
                cfg.corpus.seed = seed;
            }
            cfg.corpus.validate()?;
            let path = output.unwrap_or_else(|| cfg.out_dir.join(CORPUS_FILE));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let corpus = xmodal_core::generate_corpus(&cfg.corpus)?;
            write_corpus(&path, &corpus)?;
            println!(
                "wrote {} records ({} train, {} val, {} test) to {}",
                corpus.len(),
                corpus.train.len(),
                corpus.val.len(),
                corpus.test.len(),
                path.display()
            );
        }
        Command::Pretrain { probe: with_probe } => {
            if let Some(seed) = cli.common.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let corpus = load_corpus(&cfg)?;
            let out = cfg.out_dir.clone();
            let run = pretrain(&cfg, &corpus, Some(&out))?;
            if let Some(last) = run.metrics.last() {
                println!("step {} loss {:.6}", last.step, last.loss.total);
            }
            if with_probe {
                let report = probe(&cfg, &run.model, &corpus)?;
                let mut rec: MetricsRecord = run
                    .metrics
                    .last()
                    .cloned()
                    .ok_or_else(|| Error::Config("probing needs at least one logged step".into()))?;
                rec.probe_vision = Some(report.vision);
                rec.probe_language = Some(report.language);
                append_metrics(out.join(METRICS_FILE), &rec)?;
                print_probe(report.vision, report.language);
            }
            println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Probe { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            let ck = Checkpoint::load(&path)?;
            if cli.common.config.is_none() {
                let out = cfg.out_dir.clone();
                cfg = ck.config.clone();
                cfg.out_dir = out;
            }
            cfg.validate()?;
            let corpus = load_corpus(&cfg)?;
            let model = model_from_checkpoint(&ck, &corpus)?;
            let report = probe(&cfg, &model, &corpus)?;
            print_probe(report.vision, report.language);
            write_json(&cfg.out_dir, "probe.json", &report)?;
        }
        Command::Ablate => {
            if let Some(seed) = cli.common.seed {
                cfg.ablation_seeds = vec![seed];
            }
            cfg.validate()?;
            let corpus = load_corpus(&cfg)?;
            let table = ablate(&cfg, &corpus, |v, seed, r| {
                eprintln!("{} seed {seed}: vision {:.4} language {:.4}", v.name, r.vision, r.language);
            })?;
            println!("{table}");
            for check in table.direction_checks() {
                println!(
                    "full vs {}: vision {:+.4} language {:+.4} {}",
                    check.against,
                    check.vision_margin,
                    check.language_margin,
                    if check.holds() { "holds" } else { "violated" }
                );
            }
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("ablation.md"), table.to_string())?;
            write_json(&cfg.out_dir, "ablation.json", &table)?;
        }
        Command::Gradcheck => {
            let report = gradcheck_report(cli.common.seed.unwrap_or(cfg.seed), None);
            println!("{report}");
            if !report.passed() {
                let names: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
                return Err(Error::Numeric(format!("gradient check failed for {}", names.join(", "))));
            }
        }
    }
    Ok(())
}

fn print_probe(vision: f64, language: f64) {
    println!("probe test top-1: vision {:.2}% language {:.2}%", 100.0 * vision, 100.0 * language);
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{name}: {e}")))?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
