//! Command-line driver for the style-masked language modeling pipeline.
//!
//! Stage subcommands (`train-attr` … `eval`) run the pipeline up to and
//! including that stage inside one output directory; finished stages are
//! resumed from their artifacts, so running `mask` and later `pipeline`
//! does not repeat work. `transfer` and `gen-toy` are standalone.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smlm_core::corpus::{save_corpus, ToyCorpusSpec};
use smlm_core::error::{Result, SmlmError};
use smlm_core::eval::{compare_table, sweep_to_csv};
use smlm_core::pipeline::{
    env_overrides, gen_toy, parse_run_config, run_pipeline, Pipeline, RunConfig, StageOutcome,
    DEFAULT_SWEEP_GRID,
};

const CONFIG_HELP: &str = "\
Configuration is a TOML document (sections: data, attribution, masking, \
smlm, eval). Every key can also be overridden through environment \
variables prefixed with SMLM_, with __ separating nesting levels: \
SMLM_MASKING__LAMBDA_EPSILON=0.3 sets masking.lambda_epsilon. Omitting \
--config runs the built-in defaults (synthetic corpus).";

#[derive(Parser)]
#[command(
    name = "smlm",
    version,
    about = "Attribution-driven style masking and masked style transfer",
    long_about = None,
    after_long_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the overrides shared by every staged subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    SmlmError::InvalidConfig(format!("cannot read {}: {e}", path.display()))
                })?;
                parse_run_config(&text, &env_overrides())?
            }
            None => parse_run_config("", &env_overrides())?,
        };
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-style corpus into a directory
    GenToy {
        /// Directory for train/dev/test/labels/planted/references/vocab
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// TOML file describing labels, lexicons, and templates
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Override the generation seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override training sentences per label
        #[arg(long)]
        train_per_label: Option<usize>,
        /// Override dev sentences per label
        #[arg(long)]
        dev_per_label: Option<usize>,
        /// Override test sentences per label
        #[arg(long)]
        test_per_label: Option<usize>,
    },
    /// Prepare corpora and train the attribution classifier
    TrainAttr(ConfigArgs),
    /// Mask all splits with the configured attribution method
    Mask(ConfigArgs),
    /// Bootstrap the reconstruction model on masked text
    TrainSmlm(ConfigArgs),
    /// Adversarially fine-tune the bootstrapped model
    Finetune(ConfigArgs),
    /// Rewrite a masked file toward an explicit destination style
    Transfer {
        /// Model checkpoint directory (bootstrap or finetuned)
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Vocabulary file from the run directory
        #[arg(long, value_name = "FILE")]
        vocab: PathBuf,
        /// labels.json from the run directory
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        /// Masked sentences (label TAB tokens TAB positions)
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Destination style label
        #[arg(long, value_name = "LABEL")]
        dst: String,
        /// Where to write outputs (stdout when omitted)
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Re-predict every position instead of copying unmasked tokens
        #[arg(long)]
        redecode: bool,
    },
    /// Score transferred text with a held-out judge (runs missing stages)
    Eval(ConfigArgs),
    /// Run every stage and print the evaluation report
    Pipeline(ConfigArgs),
    /// Sweep the surplus-masking margin on the dev split
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated margin values
        #[arg(long, value_delimiter = ',', value_name = "F,F,...")]
        grid: Vec<f64>,
    },
    /// Compare attribution methods' masking on the dev split
    CompareAttr(ConfigArgs),
}

fn print_outcomes(outcomes: &[StageOutcome]) {
    for o in outcomes {
        if o.skipped {
            println!("stage {:<12} resumed", o.name);
        } else {
            println!("stage {:<12} completed in {} ms", o.name, o.wall_ms);
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenToy {
            out,
            spec,
            seed,
            train_per_label,
            dev_per_label,
            test_per_label,
        } => {
            let mut spec: ToyCorpusSpec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| {
                        SmlmError::InvalidConfig(format!("cannot read {}: {e}", path.display()))
                    })?;
                    toml::from_str(&text).map_err(|e| {
                        SmlmError::InvalidConfig(format!("corpus spec error: {e}"))
                    })?
                }
                None => ToyCorpusSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = train_per_label {
                spec.train_per_label = n;
            }
            if let Some(n) = dev_per_label {
                spec.dev_per_label = n;
            }
            if let Some(n) = test_per_label {
                spec.test_per_label = n;
            }
            let files = gen_toy(&spec, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::TrainAttr(args) => {
            let mut p = Pipeline::open(&args.load()?)?;
            p.train_attr()?;
            print_outcomes(p.outcomes());
            Ok(())
        }
        Command::Mask(args) => {
            let config = args.load()?;
            let mut p = Pipeline::open(&config)?;
            p.mask()?;
            print_outcomes(p.outcomes());
            let stats_path = config.out_dir.join("masked").join("stats.json");
            let stats = fs::read_to_string(&stats_path)
                .map_err(|e| SmlmError::io(&stats_path, e))?;
            println!("mask rates per split: {}", stats.split_whitespace().collect::<Vec<_>>().join(" "));
            Ok(())
        }
        Command::TrainSmlm(args) => {
            let mut p = Pipeline::open(&args.load()?)?;
            p.train_smlm()?;
            print_outcomes(p.outcomes());
            Ok(())
        }
        Command::Finetune(args) => {
            let mut p = Pipeline::open(&args.load()?)?;
            p.finetune()?;
            print_outcomes(p.outcomes());
            Ok(())
        }
        Command::Transfer {
            model,
            vocab,
            labels,
            input,
            dst,
            out,
            redecode,
        } => {
            let (corpus, _) =
                Pipeline::transfer_file(&model, &vocab, &labels, &input, &dst, redecode)?;
            match out {
                Some(path) => save_corpus(&path, &corpus)?,
                None => {
                    for ex in &corpus.examples {
                        println!("{}\t{}", corpus.labels[ex.label], ex.tokens.join(" "));
                    }
                }
            }
            Ok(())
        }
        Command::Eval(args) => {
            let mut p = Pipeline::open(&args.load()?)?;
            let report = p.eval()?;
            print_outcomes(p.outcomes());
            print!("{}", report.render_table());
            Ok(())
        }
        Command::Pipeline(args) => {
            let outcome = run_pipeline(&args.load()?)?;
            print_outcomes(&outcome.stages);
            println!("manifest: {}", outcome.manifest_path.display());
            print!("{}", outcome.report.render_table());
            Ok(())
        }
        Command::Sweep { config, grid } => {
            let mut p = Pipeline::open(&config.load()?)?;
            let grid = if grid.is_empty() {
                DEFAULT_SWEEP_GRID.to_vec()
            } else {
                grid
            };
            let (rows, csv_path) = p.sweep(&grid)?;
            print_outcomes(p.outcomes());
            print!("{}", sweep_to_csv(&rows));
            println!("csv: {}", csv_path.display());
            Ok(())
        }
        Command::CompareAttr(args) => {
            let mut p = Pipeline::open(&args.load()?)?;
            let (rows, table_path) = p.compare_attr()?;
            print_outcomes(p.outcomes());
            print!("{}", compare_table(&rows));
            println!("table: {}", table_path.display());
            Ok(())
        }
    }
}

/// Usage and configuration problems exit 1; runtime failures exit 2.
fn exit_code(error: &SmlmError) -> u8 {
    match error {
        SmlmError::InvalidConfig(_)
        | SmlmError::UnknownLabel(_)
        | SmlmError::MalformedRecord { .. }
        | SmlmError::Unsupported(_) => 1,
        SmlmError::Io { .. }
        | SmlmError::CorruptedArtifact { .. }
        | SmlmError::ShapeMismatch(_)
        | SmlmError::Diverged(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and succeed; real parse
            // errors are usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
