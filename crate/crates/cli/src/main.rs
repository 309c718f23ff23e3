use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use claws_core::config::{RunConfig, CONFIG_ENV};
use claws_core::data::{write_synthetic, SyntheticSpec, GROUND_TRUTH_FILE};
use claws_core::eval::{
    read_embeddings_bin, read_embeddings_csv, write_embeddings_bin, write_embeddings_csv, EmbeddingSet,
};
use claws_core::pipeline::{self, ensure_dir};
use claws_core::train::Checkpoint;
use claws_core::{Error, Result};

#[derive(Parser)]
#[command(name = "claws", version, about = "Dual-encoder contrastive learning with a hard attention mask")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic class-per-directory PNG dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 120)]
        height: usize,
        #[arg(long, default_value_t = 190)]
        width: usize,
        #[arg(long, default_value_t = 0.03)]
        noise: f32,
        #[arg(long, default_value_t = 0.05)]
        outlier_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate a dataset directory and print its manifest as JSON.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model; writes checkpoints, history.csv and resolved_config.toml.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write projection-head embeddings of every image.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// K-Means on the embeddings, scored with NMI/AMI/ARI.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Clusters; defaults to the number of classes.
        #[arg(long)]
        k: Option<usize>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fit a Gaussian mixture to one class's embeddings and flag outliers.
    Gmm {
        /// Embeddings file, CSV or binary.
        #[arg(long)]
        embeddings: PathBuf,
        /// Restrict to this class label; all rows otherwise.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Convert an embeddings file between CSV and binary.
    Export {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        let table: toml::Table = format!("v = {v}")
            .parse()
            .or_else(|_| format!("v = {:?}", v).parse())
            .map_err(|_| Error::Config(format!("cannot parse value in {o:?}")))?;
        cfg.set(k.trim(), &table["v"])?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &toml::Value::Integer(seed as i64))?;
    }
    Ok(cfg)
}

fn require_checkpoint(path: &Option<PathBuf>) -> Result<Checkpoint> {
    match path {
        Some(p) => Checkpoint::load(p),
        None => Err(Error::Config("no checkpoint given (use --checkpoint)".into())),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"CLAWSEMB") {
        read_embeddings_bin(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            what: "embeddings csv",
            detail: "not utf-8".into(),
        })?;
        read_embeddings_csv(&text)
    }
}

fn write_embeddings(set: &EmbeddingSet, path: &Path, format: Format, provenance: &str) -> Result<()> {
    match format {
        Format::Csv => write(path, write_embeddings_csv(set, provenance)),
        Format::Bin => write(path, write_embeddings_bin(set)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            height,
            width,
            noise,
            outlier_fraction,
            seed,
        } => {
            let mut spec = SyntheticSpec::new(classes, per_class, height, width, seed);
            spec.noise = noise;
            spec.outlier_fraction = outlier_fraction;
            ensure_dir(&out)?;
            let (manifest, truth) = write_synthetic(&spec, &out)?;
            println!(
                "wrote {} images in {} classes, {} planted outliers listed in {}",
                manifest.counts().iter().sum::<usize>(),
                manifest.classes.len(),
                truth.outliers.len(),
                out.join(GROUND_TRUTH_FILE).display()
            );
        }
        Command::Ingest { data, config } => {
            let cfg = load_config(&config)?;
            let (_, manifest) = pipeline::load_dataset(&data, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
        }
        Command::Train {
            data,
            out,
            epochs,
            resume,
            config,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (dataset, _) = pipeline::load_dataset(&data, &cfg)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let result = pipeline::train_run(&dataset, &mut cfg, &out, resume.as_ref())?;
            println!(
                "trained {} steps; checkpoint {} ({})",
                result.checkpoint.step,
                result.checkpoint_path.display(),
                result.checkpoint.id()
            );
        }
        Command::Embed {
            data,
            checkpoint,
            out,
            format,
            config,
        } => {
            let cfg = load_config(&config)?;
            let ck = require_checkpoint(&checkpoint)?;
            let (dataset, _) = pipeline::load_dataset(&data, &cfg)?;
            let set = pipeline::embed_run(&ck, &dataset, &cfg)?;
            write_embeddings(&set, &out, format, &format!("seed={}", ck.config.seed))?;
            println!("wrote {} embeddings to {}", set.len(), out.display());
        }
        Command::Evaluate {
            data,
            checkpoint,
            k,
            out,
            config,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(k) = k {
                cfg.eval.k = k;
            }
            let ck = require_checkpoint(&checkpoint)?;
            let (dataset, _) = pipeline::load_dataset(&data, &cfg)?;
            let report = pipeline::evaluate_run(&ck, &dataset, &cfg)?;
            match out {
                Some(path) => write(&path, report.to_json())?,
                None => print!("{}", report.to_json()),
            }
        }
        Command::Gmm {
            embeddings,
            class,
            out,
            config,
        } => {
            let cfg = load_config(&config)?;
            let set = read_embeddings(&embeddings)?;
            let result = pipeline::gmm_run(&set, class, &cfg)?;
            ensure_dir(&out)?;
            write(&out.join("outliers.json"), result.report.to_json())?;
            write(&out.join("projection.csv"), &result.projection_csv)?;
            println!(
                "{} of {} samples flagged as outliers; populations {:?}",
                result.report.outlier_ids.len(),
                result.report.n_samples,
                result.report.populations
            );
        }
        Command::Export {
            embeddings,
            out,
            format,
        } => {
            let set = read_embeddings(&embeddings)?;
            write_embeddings(&set, &out, format, "")?;
            println!("wrote {} embeddings to {}", set.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(2)
        }
    }
}
