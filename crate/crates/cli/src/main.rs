//! gsrformer {train|index|eval|predict} --config PATH [--set key=value]...
//!
//! Exit codes: 0 success, 1 bad configuration or usage, 2 runtime
//! failure. GSR_SEED overrides the config seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gsrformer_core::config::RunConfig;
use gsrformer_core::dataset::Dataset;
use gsrformer_core::error::{Error, Result};
use gsrformer_core::infer;
use gsrformer_core::model::{build_index, Model};
use gsrformer_core::raster::GrayImage;
use gsrformer_core::retrieval::FeatureIndex;
use gsrformer_core::train;

#[derive(Parser)]
#[command(name = "gsrformer", version, about = "Grounded situation recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file path, or a preset name ("desk", "paper").
    #[arg(long, default_value = "desk")]
    config: String,
    /// Override one config field by dotted path, e.g. model.d=64.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = if Path::new(&self.config).exists() {
            RunConfig::load(Path::new(&self.config))?
        } else {
            RunConfig::preset(&self.config).map_err(|_| Error::Config {
                field: "--config".into(),
                message: format!("`{}` is neither a file nor a preset name", self.config),
            })?
        };
        base.with_overrides(&self.overrides)?.with_env_seed(std::env::var("GSR_SEED").ok())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train both phases; writes checkpoint, index, log, and the
    /// resolved config into the run directory.
    Train(ConfigArgs),
    /// Encode the training split with an existing checkpoint and write
    /// the support index.
    Index {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to {run}/checkpoint.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to {run}/index.bin.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a split under all three settings; prints the table and
    /// writes report.json plus predictions.jsonl into the run directory.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Dataset directory to score; defaults to the training split.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Predict one image's frame.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// PGM image path.
        #[arg(long)]
        image: PathBuf,
    },
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.paths.run)
}

fn default_artifact(cfg: &RunConfig, given: Option<PathBuf>, name: &str) -> PathBuf {
    given.unwrap_or_else(|| run_dir(cfg).join(name))
}

fn load_model(cfg: &RunConfig, dataset: &Dataset, checkpoint: Option<PathBuf>) -> Result<Model> {
    let path = default_artifact(cfg, checkpoint, "checkpoint.ckpt");
    Model::load(cfg, &dataset.lexicon, &path)
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let dataset = Dataset::load(Path::new(&cfg.paths.dataset))?;
    let out = run_dir(&cfg);
    std::fs::create_dir_all(&out)?;
    let outcome = train::train(&cfg, &dataset, Some(&out))?;
    outcome.model.save(&out.join("checkpoint.ckpt"))?;
    outcome.index.save(&out.join("index.bin"))?;
    std::fs::write(out.join("train.log"), outcome.log.join("\n") + "\n")?;
    cfg.save(&out.join("config.toml"))?;
    log::info!("run artifacts written to {}", out.display());
    Ok(())
}

fn cmd_index(args: &ConfigArgs, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = args.load()?;
    let dataset = Dataset::load(Path::new(&cfg.paths.dataset))?;
    if dataset.records.is_empty() {
        return Err(Error::Input("cannot index an empty dataset".into()));
    }
    let model = load_model(&cfg, &dataset, checkpoint)?;
    let index = build_index(&model, &dataset)?;
    let path = default_artifact(&cfg, out, "index.bin");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    index.save(&path)?;
    log::info!("{} entries written to {}", index.len(), path.display());
    Ok(())
}

fn cmd_eval(
    args: &ConfigArgs,
    checkpoint: Option<PathBuf>,
    index: Option<PathBuf>,
    split: Option<PathBuf>,
) -> Result<()> {
    let cfg = args.load()?;
    let train_dir = PathBuf::from(&cfg.paths.dataset);
    let split_dir = split.unwrap_or_else(|| train_dir.clone());
    // entry ids are positions in the indexed split, so self-exclusion is
    // only meaningful when scoring that same split
    let exclude_self = same_dir(&split_dir, &train_dir);
    let dataset = Dataset::load(&train_dir)?;
    let eval_set = if exclude_self { dataset.clone() } else { Dataset::load(&split_dir)? };
    let model = load_model(&cfg, &dataset, checkpoint)?;
    let index = FeatureIndex::load(&default_artifact(&cfg, index, "index.bin"))?;
    log::info!(
        "scoring {} ({} records, self-exclusion {})",
        split_dir.display(),
        eval_set.records.len(),
        if exclude_self { "on" } else { "off" }
    );
    let outcome = infer::evaluate(&model, &index, &eval_set, exclude_self)?;
    let out = run_dir(&cfg);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.json"), outcome.report.render_json()?)?;
    std::fs::write(out.join("predictions.jsonl"), infer::dump_jsonl(&outcome.records)?)?;
    print!("{}", outcome.report.render_table()?);
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn cmd_predict(
    args: &ConfigArgs,
    checkpoint: Option<PathBuf>,
    index: Option<PathBuf>,
    image: &Path,
) -> Result<()> {
    let cfg = args.load()?;
    let dataset = Dataset::load(Path::new(&cfg.paths.dataset))?;
    let model = load_model(&cfg, &dataset, checkpoint)?;
    let index = FeatureIndex::load(&default_artifact(&cfg, index, "index.bin"))?;
    let img = GrayImage::read_pgm(image)?;
    let out = infer::predict(&model, &index, &img)?;
    print!("{}", out.render());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Index { config, checkpoint, out } => {
            cmd_index(config, checkpoint.clone(), out.clone())
        }
        Command::Eval { config, checkpoint, index, split } => {
            cmd_eval(config, checkpoint.clone(), index.clone(), split.clone())
        }
        Command::Predict { config, checkpoint, index, image } => {
            cmd_predict(config, checkpoint.clone(), index.clone(), image)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_usage() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
