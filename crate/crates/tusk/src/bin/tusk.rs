use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tusk::cli::{self, GenerateArgs};
use tusk::trainer::{load_config, TrainConfig};

#[derive(Parser)]
#[command(name = "tusk", version, about = "Unsupervised multi-instance keypoints")]
struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelRef {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Training config (defaults to config.toml beside the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset with ground truth.
    Generate {
        /// Dataset family: tetromino | glyphs.
        #[arg(long)]
        dataset: String,
        /// Number of samples.
        #[arg(long, short)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use real MNIST IDX files: <images> <labels>.
        #[arg(long, num_args = 2)]
        mnist_idx: Option<Vec<PathBuf>>,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        objects_min: usize,
        #[arg(long, default_value_t = 3)]
        objects_max: usize,
        #[arg(long, default_value_t = 19)]
        n_shapes: usize,
        #[arg(long, default_value_t = 6)]
        n_colors: usize,
        #[arg(long, default_value_t = 5)]
        cell_px: usize,
        #[arg(long, default_value_t = 4)]
        n_glyphs: usize,
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        #[arg(long, default_value_t = 20)]
        variants: usize,
        #[arg(long, default_value_t = 20.0)]
        min_center_dist: f64,
    },
    /// Train a model on a generated dataset.
    Train {
        /// TOML or JSON config file; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config step budget.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint: ARI, localization, classification, both.
    Eval {
        #[command(flatten)]
        model: ModelRef,
        #[arg(long)]
        dataset: PathBuf,
        /// Output JSON report path.
        #[arg(long)]
        report: PathBuf,
        /// Also export a 2D PCA scatter of descriptors + prototypes.
        #[arg(long)]
        scatter: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        box_size: f32,
    },
    /// Run one image through the model; dump reconstruction, heatmap
    /// overlay, per-keypoint RGBA layers and the keypoint JSON.
    Infer {
        #[command(flatten)]
        model: ModelRef,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the prototype bank as CSV plus a decoded-prototype PNG grid.
    ExportPrototypes {
        #[command(flatten)]
        model: ModelRef,
        /// Output CSV path (the PNG grid lands beside it).
        #[arg(long)]
        out: PathBuf,
        /// Tile size for the decoded grid.
        #[arg(long, default_value_t = 32)]
        tile: usize,
    },
    /// Train and score the loss/training ablation grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run a single custom row with these components disabled
        /// (sw, km, eqv, iterative). Empty: the full 5-row grid.
        #[arg(long)]
        disable: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 20.0)]
        box_size: f32,
    },
    /// Train once per prototype-count and report the metrics.
    SweepPrototypes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated prototype counts, e.g. 5,10,20.
        #[arg(long, value_delimiter = ',')]
        m_list: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 20.0)]
        box_size: f32,
    },
    /// Evaluate confidence-filtered detection on variable object counts.
    VarcountEval {
        #[command(flatten)]
        model: ModelRef,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn load_config_or_default(path: &Option<PathBuf>) -> tusk::Result<TrainConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cli: Cli) -> tusk::Result<()> {
    if let Some(t) = cli.threads {
        tusk::par::set_threads(t);
    }
    match cli.command {
        Command::Generate {
            dataset,
            n,
            seed,
            out,
            mnist_idx,
            image_size,
            objects_min,
            objects_max,
            n_shapes,
            n_colors,
            cell_px,
            n_glyphs,
            n_classes,
            variants,
            min_center_dist,
        } => cli::cmd_generate(&GenerateArgs {
            dataset,
            n,
            seed,
            out,
            mnist_idx: mnist_idx.map(|v| (v[0].clone(), v[1].clone())),
            image_size,
            objects_min,
            objects_max,
            n_shapes,
            n_colors,
            cell_px,
            n_glyphs,
            n_classes,
            variants,
            min_center_dist,
        }),
        Command::Train {
            config,
            dataset,
            out,
            resume,
            seed,
            steps,
        } => {
            let mut cfg = load_config_or_default(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cli::cmd_train(cfg, &dataset, &out, resume.as_deref())
        }
        Command::Eval {
            model,
            dataset,
            report,
            scatter,
            box_size,
        } => cli::cmd_eval(
            &model.ckpt,
            model.config.as_deref(),
            &dataset,
            &report,
            scatter.as_deref(),
            box_size,
        ),
        Command::Infer { model, image, out } => {
            cli::cmd_infer(&model.ckpt, model.config.as_deref(), &image, &out)
        }
        Command::ExportPrototypes { model, out, tile } => {
            cli::cmd_export_prototypes(&model.ckpt, model.config.as_deref(), &out, tile)
        }
        Command::Ablate {
            config,
            dataset,
            out,
            disable,
            seed,
            steps,
            box_size,
        } => {
            let mut cfg = load_config_or_default(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cli::cmd_ablate(cfg, &dataset, &out, &disable, box_size)
        }
        Command::SweepPrototypes {
            config,
            dataset,
            out,
            m_list,
            seed,
            steps,
            box_size,
        } => {
            let mut cfg = load_config_or_default(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cli::cmd_sweep_prototypes(cfg, &dataset, &out, &m_list, box_size)
        }
        Command::VarcountEval {
            model,
            dataset,
            out,
            threshold,
        } => cli::cmd_varcount_eval(
            &model.ckpt,
            model.config.as_deref(),
            &dataset,
            &out,
            threshold,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = serde_json::json!({ "error": e.to_string() });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
