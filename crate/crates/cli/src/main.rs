use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use growlength::data::synth::SynthSpec;
use growlength::data::CorpusFormat;
use growlength::eval::{EvalConfig, EvalMode};
use growlength::experiment::{self, load_config, EvalCorpus, TrainSelection};
use growlength::{Error, Result};

#[derive(Parser)]
#[command(name = "growlength", version, about = "Progressive sequence-length pretraining lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Extrapolation,
    Interpolation,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Bytes,
    U32le,
}

#[derive(Subcommand)]
enum Command {
    /// Train every arm of a config for every seed.
    Train {
        config: PathBuf,
        /// Run only these arms.
        #[arg(long = "arm")]
        arms: Vec<String>,
    },
    /// Time one training step per sequence length.
    Profile {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Held-out perplexity across context lengths for one or more checkpoints.
    Eval {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Take corpus, held-out split and eval defaults from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "bytes")]
        format: Format,
        #[arg(long, default_value_t = 0.1)]
        eval_fraction: f64,
        #[arg(long)]
        max_tokens: Option<usize>,
        /// Run id the comparison is normalized to (defaults to the first checkpoint).
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage budgets, batch sizes and step counts for each arm.
    SchedulePreview {
        config: PathBuf,
        /// Total tokens or seconds (defaults to the config's total).
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Write the seeded synthetic byte corpus.
    GenCorpus {
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, arms } => {
            let loaded = load_config(&config)?;
            let outcome = experiment::cmd_train(&loaded, &TrainSelection { arms }, &mut log)?;
            for r in &outcome.runs {
                println!(
                    "{}\tsteps={}\ttokens={}\telapsed_s={:.2}\tfinal_loss={:.4}",
                    r.run_id, r.steps, r.tokens_seen, r.elapsed_s, r.final_loss
                );
            }
            println!("artifacts in {}", outcome.output_dir.display());
        }
        Command::Profile { config, lengths } => {
            let loaded = load_config(&config)?;
            let (report, path) = experiment::cmd_profile(&loaded, lengths.as_deref())?;
            report.write_csv(std::io::stdout())?;
            log(&format!("wrote {}", path.display()));
        }
        Command::Eval {
            checkpoints,
            lengths,
            mode,
            config,
            corpus,
            format,
            eval_fraction,
            max_tokens,
            baseline,
            out,
        } => {
            let loaded = config.as_deref().map(load_config).transpose()?;
            let (source, defaults, default_out) = match (&loaded, corpus) {
                (Some(l), _) => (
                    EvalCorpus {
                        path: l.corpus_path(),
                        format: l.config.data.format,
                        eval_fraction: l.config.data.eval_fraction,
                    },
                    l.config.eval.clone(),
                    Some(l.output_dir().join("eval")),
                ),
                (None, Some(path)) => (
                    EvalCorpus {
                        path,
                        format: match format {
                            Format::Bytes => CorpusFormat::Bytes,
                            Format::U32le => CorpusFormat::U32le,
                        },
                        eval_fraction,
                    },
                    None,
                    None,
                ),
                (None, None) => return Err(Error::Config("eval needs --config or --corpus".into())),
            };
            let mut eval_cfg = defaults.unwrap_or_else(|| EvalConfig::new(Vec::new(), EvalMode::Extrapolation));
            if let Some(l) = lengths {
                eval_cfg.context_lengths = l;
            }
            if let Some(m) = mode {
                eval_cfg.mode = match m {
                    Mode::Extrapolation => EvalMode::Extrapolation,
                    Mode::Interpolation => EvalMode::Interpolation,
                    Mode::Both => EvalMode::Both,
                };
            }
            if max_tokens.is_some() {
                eval_cfg.max_tokens = max_tokens;
            }
            let out = out
                .or(default_out)
                .ok_or_else(|| Error::Config("eval with --corpus needs --out".into()))?;
            let outcome = experiment::cmd_eval(&checkpoints, &source, &eval_cfg, baseline.as_deref(), &out)?;
            match &outcome.comparison {
                Some(c) => c.write_csv(std::io::stdout())?,
                None => growlength::eval::write_rows_csv(&outcome.reports[0].rows, std::io::stdout())?,
            }
            log(&format!("wrote {}", out.display()));
        }
        Command::SchedulePreview { config, budget } => {
            let loaded = load_config(&config)?;
            let total = budget.unwrap_or(loaded.config.schedule.total);
            for (arm, p) in experiment::cmd_schedule_preview(&loaded, total)? {
                println!("{}", experiment::render_preview(&arm, &p));
            }
        }
        Command::GenCorpus { size, seed, out } => {
            let digest = experiment::cmd_gen_corpus(&SynthSpec::new(size, seed), &out)?;
            println!("{digest}  {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiment::exit_code(e.class()) as u8)
        }
    }
}
