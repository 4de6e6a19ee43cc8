use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use slotaug::config::PipelineConfig;
use slotaug::fixture::FixtureSizes;
use slotaug::pipeline::{self, Stage};

#[derive(Parser)]
#[command(name = "slotaug", version, about = "Perturbation-robust slot filling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit LDA and pre-train the word- and context-masking MLMs.
    Pretrain(StageArgs),
    /// Generate coarse-labeled augmented samples from the training set.
    Augment(StageArgs),
    /// Consistency-filter the augmented samples.
    Filter(StageArgs),
    /// Train the baseline and augmented taggers.
    Train(StageArgs),
    /// Build perturbed test sets.
    Perturb(StageArgs),
    /// Score both taggers and write the robustness report.
    Evaluate(StageArgs),
    /// Run every stage in order.
    Pipeline(StageArgs),
    /// Print the default configuration with provenance notes.
    EmitDefaultConfig,
    /// Write the bundled synthetic task and a config for it.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct StageArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set augment.copies_per_mode=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.output_dir`.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Overrides `paths.corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Overrides `paths.train`.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Overrides `paths.test`.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Overrides `augment.transform_prob`.
    #[arg(long)]
    transform_prob: Option<f64>,
}

#[derive(Args)]
struct FixtureArgs {
    /// Target directory.
    #[arg(short, long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    #[arg(long, default_value_t = FixtureSizes::default().corpus)]
    corpus_size: usize,
    #[arg(long, default_value_t = FixtureSizes::default().train)]
    train_size: usize,
    #[arg(long, default_value_t = FixtureSizes::default().test)]
    test_size: usize,
}

fn absolute(p: &Path) -> Result<String> {
    let abs = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    };
    Ok(serde_json::to_string(&abs)?)
}

impl StageArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut overrides = Vec::new();
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            overrides.push((k.to_string(), v.to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        // Paths given on the command line are relative to the working
        // directory, not to the config file.
        for (key, p) in [
            ("paths.output_dir", &self.output_dir),
            ("paths.corpus", &self.corpus),
            ("paths.train", &self.train),
            ("paths.test", &self.test),
        ] {
            if let Some(p) = p {
                overrides.push((key.into(), absolute(p)?));
            }
        }
        if let Some(p) = self.transform_prob {
            overrides.push(("augment.transform_prob".into(), p.to_string()));
        }
        let cfg = PipelineConfig::load(self.config.as_deref(), &overrides)
            .context("loading configuration")?;
        Ok(cfg)
    }
}

fn run_one(stage: Stage, args: &StageArgs) -> Result<()> {
    let cfg = args.load()?;
    let out = pipeline::run_stage(stage, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    if stage == Stage::Evaluate {
        print!("{}", pipeline::load_report(&cfg)?.to_text());
    }
    eprintln!("{stage}: artifacts in {}", out.dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => run_one(Stage::Pretrain, &a),
        Command::Augment(a) => run_one(Stage::Augment, &a),
        Command::Filter(a) => run_one(Stage::Filter, &a),
        Command::Train(a) => run_one(Stage::Train, &a),
        Command::Perturb(a) => run_one(Stage::Perturb, &a),
        Command::Evaluate(a) => run_one(Stage::Evaluate, &a),
        Command::Pipeline(a) => {
            let cfg = a.load()?;
            let (outcomes, report) = pipeline::run_pipeline(&cfg)?;
            for o in &outcomes {
                eprintln!("{}: artifacts in {}", o.stage, o.dir.display());
            }
            print!("{}", report.to_text());
            Ok(())
        }
        Command::EmitDefaultConfig => {
            println!("{}", PipelineConfig::default().with_default_notes().to_json_pretty());
            Ok(())
        }
        Command::Fixture(a) => {
            let sizes = FixtureSizes {
                corpus: a.corpus_size,
                train: a.train_size,
                test: a.test_size,
            };
            let p = pipeline::write_fixture_project(&a.dir, sizes, a.seed)?;
            println!("{}", p.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
