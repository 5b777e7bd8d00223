//! Pipeline configuration, read from TOML. Every section and key is optional;
//! missing values take the library defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spade_core::clustering::{KmeansParams, DEFAULT_K};
use spade_core::corpus::{DEFAULT_TARGET_SUM, DEFAULT_TOP_PER_SAMPLE};
use spade_core::experts::{TrainConfig, DEFAULT_DIM, DEFAULT_HIDDEN, DEFAULT_TAU};
use spade_core::mil::{DEFAULT_ATTN_DIM, DEFAULT_DROPOUT, DEFAULT_MIL_HIDDEN};
use spade_core::routing::{RoutingScheme, RoutingVariant, DEFAULT_EPSILON};
use spade_core::synth::{SurvivalConfig, SynthConfig};

use crate::bags::BagLevel;
use crate::error::{Result, SpadeError};
use crate::io::read_text;
use crate::models::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub synth: SynthSection,
    pub preprocess: PreprocessSection,
    pub cluster: ClusterSection,
    pub experts: ExpertSection,
    pub routing: RoutingSection,
    pub head: HeadSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("spade-out"),
            data: DataSection::default(),
            synth: SynthSection::default(),
            preprocess: PreprocessSection::default(),
            cluster: ClusterSection::default(),
            experts: ExpertSection::default(),
            routing: RoutingSection::default(),
            head: HeadSection::default(),
        }
    }
}

/// Input data. Without `bank`, a synthetic corpus is generated from `[synth]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub bank: Option<PathBuf>,
    pub classify_labels: Option<PathBuf>,
    pub survival_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_organs: u32,
    pub clusters_per_organ: u32,
    pub spots_per_cluster: u32,
    pub latent_dim: u32,
    pub m: u32,
    #[serde(rename = "G")]
    pub g: u32,
    pub noise_sigma: f64,
    pub spots_per_slide: u32,
    pub center_scale: f64,
    pub embedding_noise: f64,
    pub log_rate: f64,
    /// Seed of the generator; defaults to one derived from the root seed.
    pub seed: Option<u64>,
    pub survival: Option<SurvivalSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalSection {
    pub base_hazard: f64,
    pub risk_coefficient: f64,
    pub censor_rate: f64,
    pub risk_shift: f64,
}

impl Default for SurvivalSection {
    fn default() -> Self {
        let d = SurvivalConfig::default();
        Self {
            base_hazard: d.base_hazard,
            risk_coefficient: d.risk_coefficient,
            censor_rate: d.censor_rate,
            risk_shift: d.risk_shift,
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            n_organs: d.n_organs,
            clusters_per_organ: d.clusters_per_organ,
            spots_per_cluster: d.spots_per_cluster,
            latent_dim: d.latent_dim,
            m: d.m,
            g: d.g,
            noise_sigma: d.noise_sigma,
            spots_per_slide: d.spots_per_slide,
            center_scale: d.center_scale,
            embedding_noise: d.embedding_noise,
            log_rate: d.log_rate,
            seed: None,
            survival: Some(SurvivalSection::default()),
        }
    }
}

impl SynthSection {
    pub fn to_config(&self, default_seed: u64) -> SynthConfig {
        SynthConfig {
            n_organs: self.n_organs,
            clusters_per_organ: self.clusters_per_organ,
            spots_per_cluster: self.spots_per_cluster,
            latent_dim: self.latent_dim,
            m: self.m,
            g: self.g,
            noise_sigma: self.noise_sigma,
            seed: self.seed.unwrap_or(default_seed),
            spots_per_slide: self.spots_per_slide,
            center_scale: self.center_scale,
            embedding_noise: self.embedding_noise,
            log_rate: self.log_rate,
            survival: self.survival.map(|s| SurvivalConfig {
                base_hazard: s.base_hazard,
                risk_coefficient: s.risk_coefficient,
                censor_rate: s.censor_rate,
                risk_shift: s.risk_shift,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub target_sum: f64,
    /// Top genes by variance taken from every slide before the union.
    pub hvg_top: u32,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            target_sum: DEFAULT_TARGET_SUM,
            hvg_top: DEFAULT_TOP_PER_SAMPLE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMode {
    /// Fine clusters per organ, then coarse clusters over the fine centroids.
    #[default]
    TwoStep,
    /// Every fine centroid is its own expert.
    OneStep,
    /// One expert over all data.
    SingleExpert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k1: u32,
    pub k2: u32,
    pub mode: ClusterMode,
    pub sample_per_organ: Option<u64>,
    pub max_iter: u32,
    pub tol: f64,
    pub restarts: u32,
    /// k values of the per-organ WCSS curve; empty skips the sweep.
    pub wcss_sweep: Vec<u32>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let p = KmeansParams::default();
        Self {
            k1: DEFAULT_K,
            k2: DEFAULT_K,
            mode: ClusterMode::TwoStep,
            sample_per_organ: None,
            max_iter: p.max_iter,
            tol: p.tol,
            restarts: p.restarts,
            wcss_sweep: Vec::new(),
        }
    }
}

impl ClusterSection {
    pub fn params(&self) -> KmeansParams {
        KmeansParams {
            max_iter: self.max_iter,
            tol: self.tol,
            restarts: self.restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub hidden: usize,
    pub dim: usize,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub patience: u32,
    pub cosine: bool,
    pub val_fraction: f64,
    /// Fraction of each expert's records kept out of training for the retrieval check.
    pub holdout_fraction: f64,
}

impl Default for ExpertSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: DEFAULT_HIDDEN,
            dim: DEFAULT_DIM,
            tau: DEFAULT_TAU,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            cosine: t.cosine,
            val_fraction: t.val_fraction,
            holdout_fraction: 0.0,
        }
    }
}

impl ExpertSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed,
            cosine: self.cosine,
            val_fraction: self.val_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Hard,
    Uniform,
    #[default]
    Invdist,
}

impl Scheme {
    pub fn variant(self) -> RoutingVariant {
        match self {
            Scheme::Hard => RoutingVariant::Hard,
            Scheme::Uniform => RoutingVariant::Uniform,
            Scheme::Invdist => RoutingVariant::InverseDistance,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Hard => "hard",
            Scheme::Uniform => "uniform",
            Scheme::Invdist => "invdist",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    pub scheme: Scheme,
    pub epsilon: f64,
}

impl Default for RoutingSection {
    fn default() -> Self {
        Self {
            scheme: Scheme::Invdist,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl RoutingSection {
    pub fn scheme(&self) -> RoutingScheme {
        RoutingScheme {
            variant: self.scheme.variant(),
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub tasks: Vec<Task>,
    pub level: BagLevel,
    pub hidden: usize,
    pub attn: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub patience: u32,
    /// Bags per optimizer step.
    pub batch_size: u32,
    pub cosine: bool,
}

impl Default for HeadSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            tasks: vec![Task::Classify, Task::Survival],
            level: BagLevel::Slide,
            hidden: DEFAULT_MIL_HIDDEN,
            attn: DEFAULT_ATTN_DIM,
            dropout: DEFAULT_DROPOUT,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            patience: t.patience,
            batch_size: 1,
            cosine: t.cosine,
        }
    }
}

impl HeadSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed,
            cosine: self.cosine,
            val_fraction: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| SpadeError::BadConfig {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        config.validate(path)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?, path)
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: &str| SpadeError::BadConfig {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if self.cluster.k1 == 0 || self.cluster.k2 == 0 {
            return Err(bad("k1 and k2 must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.experts.holdout_fraction) {
            return Err(bad("experts.holdout_fraction must be in [0, 1)"));
        }
        if self.head.tasks.is_empty() {
            return Err(bad("head.tasks is empty"));
        }
        if self.head.hidden == 0 || self.head.attn == 0 {
            return Err(bad("head layer sizes must be positive"));
        }
        Ok(())
    }
}
