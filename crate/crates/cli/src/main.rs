use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use xmtl::adaptor::enumerate_table4_grid;
use xmtl::finetune::{emit_budget_table, BudgetTable, FinetuneStrategy, ReferenceArchSpec};
use xmtl::harness::{
    evaluate, load_data, maybe_pretrain, run_ablation_grid, run_experiment, synth_generate, AblationGrid, Checkpoint, DataSource, Dataset,
    ExperimentConfig, Split,
};
use xmtl::numeric::layer_suite;

/// Speech-to-text translation with a pretrained speech encoder, an adaptor
/// and a pretrained multilingual text decoder.
#[derive(Parser)]
#[command(name = "xmtl", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for commands that write one).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task and write WAVs, manifests and vocabulary.
    SynthData,
    /// Pretrain, run the learning-rate sweep, save checkpoints and evaluate.
    Train,
    /// Decode a split with a checkpoint and report BLEU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the beam size stored in the checkpoint's config.
        #[arg(long)]
        beam: Option<usize>,
        /// Dataset directory; defaults to the checkpoint's data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finetuning parameter budgets of the full-size reference model.
    CountParams {
        /// `best`, `all`, or `table` for every ablation row.
        #[arg(long, default_value = "table")]
        strategy: String,
    },
    /// Train and score every cell of an ablation grid at desk scale.
    Ablate {
        #[arg(long, value_enum, default_value_t = GridKind::Strategies)]
        grid: GridKind,
        /// Cells trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference gradient check of every building block.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    Strategies,
    Adaptors,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData => {
            let cfg = config(cli)?;
            let DataSource::Synth(spec) = &cfg.data else { bail!("config data source is not a synthetic task") };
            let ds = synth_generate(spec, cfg.seed)?;
            ds.write(&cfg.out_dir)?;
            println!(
                "wrote {} train / {} valid / {} test utterances to {}",
                ds.train.len(),
                ds.valid.len(),
                ds.test.len(),
                cfg.out_dir.display()
            );
        }
        Command::Train => {
            let cfg = config(cli)?;
            for (run, report) in run_experiment(&cfg)? {
                let c = &run.checkpoint;
                println!("{}: lr {:e}, best step {}, valid loss {:.4}", run.label, c.learning_rate, c.step, c.best_valid);
                print!("{report}");
            }
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Eval { checkpoint, split, beam, data } => {
            let (ck, model) = Checkpoint::load(checkpoint)?;
            let split: Split = split.parse()?;
            let ds = match data {
                Some(dir) => Dataset::read(dir)?,
                None => load_data(&ck.config)?,
            };
            if ds.vocab != ck.vocab {
                bail!("dataset vocabulary does not match the checkpoint's");
            }
            let samples = ds.split(split);
            let samples: Vec<_> = match ck.label.split_once('-') {
                Some((src, tgt)) => samples.iter().filter(|s| s.src_lang == src && s.tgt_lang == tgt).cloned().collect(),
                None => samples.to_vec(),
            };
            let report = evaluate(&model, &ck.store, &ck.vocab, &samples, beam.unwrap_or(ck.config.eval.beam), ck.config.eval.max_len)?;
            print!("{report}");
            if let Some(out) = &cli.out {
                write(out, &report.translations_tsv())?;
            }
        }
        Command::CountParams { strategy } => {
            let arch = ReferenceArchSpec::default();
            let table = match strategy.as_str() {
                "table" => BudgetTable::reference(&arch),
                "best" => emit_budget_table(&arch, &[(FinetuneStrategy::best(), Some(21.5))]),
                "all" => emit_budget_table(&arch, &[(FinetuneStrategy::all(), Some(20.2))]),
                other => bail!("unknown strategy `{other}` (best, all, table)"),
            };
            print!("{table}");
            if let Some(out) = &cli.out {
                write(out, &table.to_tsv())?;
            }
        }
        Command::Ablate { grid, jobs } => {
            let cfg = config(cli)?;
            let grid = match grid {
                GridKind::Strategies => AblationGrid::Strategies(FinetuneStrategy::table3().into_iter().map(|(s, b)| (s, Some(b))).collect()),
                GridKind::Adaptors => AblationGrid::Adaptors(enumerate_table4_grid()),
            };
            let data = load_data(&cfg)?;
            let pre = maybe_pretrain(&cfg, &data)?;
            let report = run_ablation_grid(&cfg, &grid, &data, pre.as_ref().map(|p| &p.store), *jobs)?;
            print!("{report}");
            write(&cfg.out_dir.join("ablation.tsv"), &report.to_tsv())?;
        }
        Command::GradCheck { tolerance } => {
            let mut failed = Vec::new();
            for (name, err) in layer_suite(cli.seed.unwrap_or(1))? {
                let ok = err <= *tolerance;
                println!("{name:<20} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                bail!("relative gradient error above {tolerance:e} in: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their cause; skip repeated links.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
