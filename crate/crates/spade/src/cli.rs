//! Command-line surface. Subcommand flags override the matching values of the
//! `--config` file, which in turn override the built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bags::BagLevel;
use crate::config::{ClusterMode, PipelineConfig, Scheme};
use crate::error::{Result, SpadeError};
use crate::models::Task;
use crate::stages;

#[derive(Debug, Parser)]
#[command(name = "spade", version, about = "Mixture-of-data-experts pipeline for paired image and expression spots")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML configuration supplying defaults for every subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired bank with ground truth and labels.
    Synth(SynthArgs),
    /// Normalize counts and keep the union of per-slide variable genes.
    Preprocess(PreprocessArgs),
    /// Fine and coarse K-means; writes the cluster model and partition.
    Cluster(ClusterArgs),
    /// Train one contrastive expert per coarse cluster.
    TrainExperts(TrainExpertsArgs),
    /// Route every spot through the experts.
    Embed(EmbedArgs),
    /// Train an attention MIL head on embedded bags.
    TrainHead(TrainHeadArgs),
    /// Score predictions against labels.
    Eval(EvalArgs),
    /// Export per-spot attention of one bag.
    Heatmap(HeatmapArgs),
    /// Run every stage from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub organs: Option<u32>,
    #[arg(long)]
    pub clusters_per_organ: Option<u32>,
    #[arg(long)]
    pub spots_per_cluster: Option<u32>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub target_sum: Option<f64>,
    /// Genes taken from each slide before the union.
    #[arg(long)]
    pub hvg_top: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k1: Option<u32>,
    #[arg(long)]
    pub k2: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sample_per_organ: Option<u64>,
    #[arg(long)]
    pub restarts: Option<u32>,
    /// Every fine centroid becomes an expert.
    #[arg(long, conflicts_with = "single_expert")]
    pub one_step: bool,
    /// A single expert over all data.
    #[arg(long)]
    pub single_expert: bool,
    /// Comma-separated k values for a per-organ WCSS curve.
    #[arg(long, value_delimiter = ',')]
    pub wcss_sweep: Option<Vec<u32>>,
}

#[derive(Debug, Args)]
pub struct TrainExpertsArgs {
    #[arg(long)]
    pub cluster_model: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Fraction of each expert's records held out for retrieval scoring.
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub experts_dir: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Embedded bank holding the bag instances.
    #[arg(long)]
    pub bags: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub level: Option<BagLevel>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Embedded bank holding the bag.
    #[arg(long)]
    pub bag: PathBuf,
    /// Bag id; may be omitted when the bank holds one bag.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub model: PathBuf,
    /// CSV path; the PGM image is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "slide")]
    pub level: BagLevel,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(SpadeError::Usage("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, as in tests that call run twice.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => {
            let s = &mut config.synth;
            if let Some(v) = a.organs {
                s.n_organs = v;
            }
            if let Some(v) = a.clusters_per_organ {
                s.clusters_per_organ = v;
            }
            if let Some(v) = a.spots_per_cluster {
                s.spots_per_cluster = v;
            }
            if let Some(v) = a.noise {
                s.noise_sigma = v;
            }
            let seed = a.seed.or(s.seed).unwrap_or(config.seed);
            let mut synth = s.to_config(seed);
            synth.seed = seed;
            print_json(&stages::run_synth(&synth, &a.out)?);
        }
        Command::Preprocess(a) => {
            let p = &config.preprocess;
            let hvg = stages::run_preprocess(
                &a.bank,
                &a.out,
                a.target_sum.unwrap_or(p.target_sum),
                a.hvg_top.unwrap_or(p.hvg_top),
            )?;
            print_json(&serde_json::json!({"genes": hvg.gene_indices.len(), "dropped_spots": hvg.dropped_spots}));
        }
        Command::Cluster(a) => {
            let c = &mut config.cluster;
            if let Some(v) = a.k1 {
                c.k1 = v;
            }
            if let Some(v) = a.k2 {
                c.k2 = v;
            }
            if let Some(v) = a.sample_per_organ {
                c.sample_per_organ = Some(v);
            }
            if let Some(v) = a.restarts {
                c.restarts = v;
            }
            if let Some(v) = a.wcss_sweep {
                c.wcss_sweep = v;
            }
            if a.one_step {
                c.mode = ClusterMode::OneStep;
            } else if a.single_expert {
                c.mode = ClusterMode::SingleExpert;
            }
            if c.k1 == 0 || c.k2 == 0 {
                return Err(SpadeError::Usage("k1 and k2 must be at least 1".into()));
            }
            print_json(&stages::run_cluster(&a.bank, &a.out, c, a.seed.unwrap_or(config.seed))?);
        }
        Command::TrainExperts(a) => {
            let e = &mut config.experts;
            if let Some(v) = a.hidden {
                e.hidden = v;
            }
            if let Some(v) = a.dim {
                e.dim = v;
            }
            if let Some(v) = a.lr {
                e.lr = v;
            }
            if let Some(v) = a.epochs {
                e.epochs = v;
            }
            if let Some(v) = a.batch_size {
                e.batch_size = v;
            }
            if let Some(v) = a.tau {
                e.tau = v;
            }
            if let Some(v) = a.holdout {
                if !(0.0..1.0).contains(&v) {
                    return Err(SpadeError::Usage("--holdout must be in [0, 1)".into()));
                }
                e.holdout_fraction = v;
            }
            let summary =
                stages::run_train_experts(&a.bank, &a.cluster_model, &a.out_dir, e, a.seed.unwrap_or(config.seed))?;
            print_json(&summary);
        }
        Command::Embed(a) => {
            let r = &mut config.routing;
            if let Some(v) = a.scheme {
                r.scheme = v;
            }
            if let Some(v) = a.epsilon {
                r.epsilon = v;
            }
            let n = stages::run_embed(&a.bank, &a.experts_dir, r.scheme(), &a.out)?;
            print_json(&serde_json::json!({"records": n, "scheme": r.scheme.name()}));
        }
        Command::TrainHead(a) => {
            let h = &mut config.head;
            if let Some(v) = a.level {
                h.level = v;
            }
            if let Some(v) = a.hidden {
                h.hidden = v;
            }
            if let Some(v) = a.lr {
                h.lr = v;
            }
            if let Some(v) = a.epochs {
                h.epochs = v;
            }
            let summary = stages::run_train_head(&a.bags, &a.labels, a.task, h, a.seed.unwrap_or(config.seed), &a.out)?;
            print_json(&summary);
        }
        Command::Eval(a) => {
            let report = stages::run_eval(&a.preds, &a.labels, a.task, a.out.as_deref())?;
            print!("{}", report.table());
        }
        Command::Heatmap(a) => {
            let (csv, pgm) = stages::run_heatmap(&a.bag, &a.model, a.id.as_deref(), a.level, &a.out)?;
            print_json(&serde_json::json!({"csv": csv, "pgm": pgm}));
        }
        Command::Pipeline(a) => {
            if cli.config.is_none() {
                return Err(SpadeError::Usage("pipeline needs --config".into()));
            }
            if let Some(v) = a.out_dir {
                config.out_dir = v;
            }
            if let Some(v) = a.seed {
                config.seed = v;
            }
            let report = stages::run_pipeline(&config)?;
            print_json(&report);
        }
    }
    Ok(())
}
