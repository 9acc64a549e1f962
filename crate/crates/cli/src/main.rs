use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use didkit::manifest::Split;
use didkit::pipeline::commands;
use didkit::pipeline::PipelineConfig;

/// Dialect identification toolkit.
#[derive(Parser, Debug)]
#[command(name = "didkit", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set e2e.batch_size=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every stochastic stage (overrides the per-stage seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic audio + token corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Add speed/volume-perturbed rows to a manifest.
    AugmentManifest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract per-utterance acoustic features.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train the end-to-end CNN classifier.
    TrainE2e {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split with an end-to-end checkpoint.
    ScoreE2e {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "TEST")]
        split: Split,
        /// Score only the first this-many seconds of each utterance.
        #[arg(long)]
        truncate_s: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the n-gram dictionary and count vectors.
    BuildVsm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the Siamese embedding network.
    TrainSiamese {
        #[arg(long)]
        vsm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract language embeddings for every vector and representative.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vsm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split by embedding cosine, or raw VSM cosine without --embeddings.
    ScoreEmbed {
        #[arg(long)]
        vsm: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value = "TEST")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, EER and minimum C_avg of a score table.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Z-norm cohort score table (typically the dev scores).
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write DET operating points here.
        #[arg(long)]
        det: Option<PathBuf>,
    },
    /// Logistic-regression fusion of several systems.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        dev: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        test: Vec<PathBuf>,
        /// Z-norm every system by its dev scores before fusing.
        #[arg(long)]
        znorm: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Metrics table over several systems.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        test: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        dev: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(g: &Global) -> didkit::Result<PipelineConfig> {
    let base = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        for key in ["e2e.seed", "siamese.seed", "synth.seed"] {
            overrides.push(format!("{key}={s}"));
        }
    }
    base.with_overrides(&overrides)
}

fn opt(p: &Option<PathBuf>) -> Option<&Path> {
    p.as_deref()
}

fn run(cli: &Cli) -> didkit::Result<String> {
    let cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::SynthCorpus { out } => commands::synth_corpus(&cfg, out),
        Command::AugmentManifest { manifest, out } => commands::augment_manifest(&cfg, manifest, out),
        Command::Features { manifest, out, cache } => commands::features(&cfg, manifest, out, opt(cache)),
        Command::TrainE2e { manifest, features, out } => commands::train_e2e(&cfg, manifest, features, out),
        Command::ScoreE2e {
            checkpoint,
            manifest,
            features,
            split,
            truncate_s,
            out,
        } => commands::score_e2e(&cfg, checkpoint, manifest, features, *split, *truncate_s, out),
        Command::BuildVsm { manifest, tokens, out } => commands::build_vsm(&cfg, manifest, tokens, out),
        Command::TrainSiamese { vsm, out } => commands::train_siamese_cmd(&cfg, vsm, out),
        Command::Embed { checkpoint, vsm, out } => commands::embed(&cfg, checkpoint, vsm, out),
        Command::ScoreEmbed {
            vsm,
            embeddings,
            split,
            out,
        } => commands::score_embed(&cfg, vsm, opt(embeddings), *split, out),
        Command::Evaluate { scores, cohort, out, det } => {
            commands::evaluate(&cfg, scores, opt(cohort), opt(out), opt(det))
        }
        Command::Fuse {
            dev,
            test,
            znorm,
            out,
            weights,
        } => commands::fuse(&cfg, dev, test, *znorm, out, weights),
        Command::Report { test, dev, out } => commands::report(&cfg, test, dev, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 2 } else { 1 })
        }
    }
}
