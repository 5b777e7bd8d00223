//! Synthetic paired-modality corpora with known latent structure, plus the
//! oracles that score each pipeline stage against that ground truth.
//!
//! Every (organ, cluster) pair owns a latent center `μ` and an embedding map
//! `A`. A spot draws `z = μ + σ·n`, its patch embedding is `A·z + ε` and its
//! expression counts are `Poisson(exp(B·z + b))` with `B, b` shared by all
//! clusters. Slides mix clusters of one organ with one dominant cluster, which
//! is the slide label. With survival enabled each slide also gets a latent risk
//! `u ∈ [−1, 1]` that shifts its spots' latents along a fixed direction and sets
//! an exponential event time with rate `base_hazard · exp(risk_coefficient · u)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::corpus::{ExpressionKind, PairedSpotBank, SpotRecord};
use crate::experts::ExpertModel;
use crate::linalg::{dot, Matrix};
use crate::rng::{rng_from, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalConfig {
    pub base_hazard: f64,
    pub risk_coefficient: f64,
    /// Probability that a slide is censored before its event.
    pub censor_rate: f64,
    /// Latent shift applied per unit of slide risk.
    pub risk_shift: f64,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            base_hazard: 0.1,
            risk_coefficient: 20.0,
            censor_rate: 0.1,
            risk_shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_organs: u32,
    pub clusters_per_organ: u32,
    pub spots_per_cluster: u32,
    pub latent_dim: u32,
    pub m: u32,
    pub g: u32,
    pub noise_sigma: f64,
    pub seed: u64,
    pub spots_per_slide: u32,
    /// Standard deviation of the latent cluster centers.
    pub center_scale: f64,
    /// Embedding noise as a multiple of `noise_sigma`.
    pub embedding_noise: f64,
    /// Log of the mean expression rate.
    pub log_rate: f64,
    pub survival: Option<SurvivalConfig>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_organs: 3,
            clusters_per_organ: 3,
            spots_per_cluster: 200,
            latent_dim: 8,
            m: 32,
            g: 64,
            noise_sigma: 0.5,
            seed: 0,
            spots_per_slide: 20,
            center_scale: 4.0,
            embedding_noise: 0.1,
            log_rate: 3.0,
            survival: Some(SurvivalConfig::default()),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_organs", self.n_organs),
            ("clusters_per_organ", self.clusters_per_organ),
            ("spots_per_cluster", self.spots_per_cluster),
            ("latent_dim", self.latent_dim),
            ("m", self.m),
            ("g", self.g),
            ("spots_per_slide", self.spots_per_slide),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be finite and non-negative".into()));
        }
        if let Some(s) = &self.survival {
            if !(s.base_hazard > 0.0) || !(0.0..1.0).contains(&s.censor_rate) {
                return Err(Error::InvalidArgument("invalid survival settings".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideTruth {
    pub slide_id: String,
    pub patient_id: String,
    pub organ: String,
    /// Local index of the dominant cluster within the organ.
    pub label: u32,
    /// Latent risk `u`, when survival is enabled.
    pub risk: Option<f64>,
    pub time: Option<f64>,
    pub event: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// Global latent cluster id (`organ · clusters_per_organ + cluster`) per record.
    pub latent_cluster: Vec<u32>,
    pub slides: Vec<SlideTruth>,
}

/// Generates a raw-count bank and its ground truth.
pub fn generate(config: &SynthConfig) -> Result<(PairedSpotBank, SynthTruth)> {
    config.validate()?;
    let mut rng = rng_from(config.seed);
    let z = config.latent_dim as usize;
    let m = config.m as usize;
    let g = config.g as usize;
    let k = config.clusters_per_organ as usize;

    let expr_map = gaussian_matrix(g, z, 0.5 / libm::sqrt(z as f64), &mut rng);
    let expr_bias: Vec<f64> = (0..g).map(|_| config.log_rate + rng.random_range(-0.5..0.5)).collect();
    let mut risk_dir: Vec<f64> = (0..z).map(|_| normal(&mut rng)).collect();
    let len = crate::linalg::norm(&risk_dir).max(1e-12);
    risk_dir.iter_mut().for_each(|v| *v /= len);

    let mut records = Vec::new();
    let mut embeddings = Vec::new();
    let mut expression = Vec::new();
    let mut latent_cluster = Vec::new();
    let mut slides = Vec::new();

    for o in 0..config.n_organs as usize {
        let organ = format!("organ{o}");
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..z).map(|_| config.center_scale * normal(&mut rng)).collect())
            .collect();
        let maps: Vec<Matrix> = (0..k)
            .map(|_| gaussian_matrix(m, z, 1.0 / libm::sqrt(z as f64), &mut rng))
            .collect();

        for (s, members) in slide_layout(config, &mut rng).into_iter().enumerate() {
            let slide_id = format!("{organ}-slide{s:03}");
            let mut counts = vec![0u32; k];
            for &c in &members {
                counts[c] += 1;
            }
            let label = crate::linalg::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()).unwrap_or(0);
            let (risk, time, event) = match &config.survival {
                Some(sv) => {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    let rate = sv.base_hazard * libm::exp(sv.risk_coefficient * u);
                    let t = -libm::log(1.0 - rng.random::<f64>()) / rate;
                    let censored = rng.random::<f64>() < sv.censor_rate;
                    let observed = if censored { t * rng.random_range(0.05..1.0) } else { t };
                    (Some(u), Some(observed.max(f64::MIN_POSITIVE)), Some(!censored))
                }
                None => (None, None, None),
            };
            let shift = match (&config.survival, risk) {
                (Some(sv), Some(u)) => sv.risk_shift * u,
                _ => 0.0,
            };
            let width = libm::ceil(libm::sqrt(members.len() as f64)) as usize;
            for (j, &c) in members.iter().enumerate() {
                let latent: Vec<f64> = (0..z)
                    .map(|d| centers[c][d] + config.noise_sigma * normal(&mut rng) + shift * risk_dir[d])
                    .collect();
                let emb_noise = config.noise_sigma * config.embedding_noise;
                for row in maps[c].iter_rows() {
                    embeddings.push((dot(row, &latent) + emb_noise * normal(&mut rng)) as f32);
                }
                for (row, b) in expr_map.iter_rows().zip(&expr_bias) {
                    let lambda = libm::exp(dot(row, &latent) + b).clamp(1e-6, 1e6);
                    let draw: f64 = Poisson::new(lambda)
                        .map_err(|e| Error::InvalidArgument(format!("poisson rate {lambda}: {e}")))?
                        .sample(&mut rng);
                    expression.push(draw.min(f64::from(u32::MAX)) as u32 as f32);
                }
                records.push(SpotRecord {
                    id: records.len() as u64,
                    slide_id: slide_id.clone(),
                    patient_id: slide_id.clone(),
                    organ: organ.clone(),
                    spot_xy: ((j % width) as f64 * 100.0, (j / width) as f64 * 100.0),
                });
                latent_cluster.push((o * k + c) as u32);
            }
            slides.push(SlideTruth {
                slide_id: slide_id.clone(),
                patient_id: slide_id,
                organ: organ.clone(),
                label: label as u32,
                risk,
                time,
                event,
            });
        }
    }

    let bank = PairedSpotBank::new(
        records,
        m,
        g,
        (0..g).map(|j| format!("gene{j:04}")).collect(),
        (0..config.n_organs).map(|o| format!("organ{o}")).collect(),
        format!(
            "synthetic: seed={} latent_dim={} noise_sigma={}",
            config.seed, config.latent_dim, config.noise_sigma
        ),
        ExpressionKind::Counts,
        embeddings,
        expression,
    )?;
    Ok((
        bank,
        SynthTruth {
            latent_cluster,
            slides,
        },
    ))
}

/// Cluster membership of every slide of one organ.
///
/// Each cluster contributes exactly `spots_per_cluster` spots. Slides take a
/// dominant cluster in turn; a dominant slide holds roughly 60% of its spots
/// from that cluster and splits the rest evenly over the other clusters.
fn slide_layout(config: &SynthConfig, rng: &mut Rng) -> Vec<Vec<usize>> {
    let k = config.clusters_per_organ as usize;
    let per = config.spots_per_cluster as usize;
    let size = config.spots_per_slide as usize;
    let minor = if k > 1 { (size * 2 / 5) / (k - 1) } else { 0 };
    let major = size - minor * (k - 1);
    let mut left = vec![per; k];
    let mut slides = Vec::new();
    let mut turn = 0;
    loop {
        let dom = turn % k;
        if left[dom] < major || (0..k).any(|c| c != dom && left[c] < minor) {
            break;
        }
        let mut members = Vec::with_capacity(size);
        for c in 0..k {
            let take = if c == dom { major } else { minor };
            left[c] -= take;
            members.extend(core::iter::repeat_n(c, take));
        }
        members.shuffle(rng);
        slides.push(members);
        turn += 1;
    }
    // Remaining spots form slides of at most `size`, cluster-contiguous.
    let mut rest: Vec<usize> = (0..k).flat_map(|c| core::iter::repeat_n(c, left[c])).collect();
    while !rest.is_empty() {
        let take = rest.len().min(size);
        let mut members: Vec<usize> = rest.drain(..take).collect();
        members.shuffle(rng);
        slides.push(members);
    }
    slides
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Fraction of rows whose true partner ranks within the top `k` by dot-product
/// similarity. Ties are counted against the true partner.
pub fn recall_at_k(image_joint: &Matrix, expr_joint: &Matrix, k: usize) -> Result<f64> {
    if image_joint.rows() != expr_joint.rows() || image_joint.cols() != expr_joint.cols() {
        return Err(Error::DimMismatch {
            expected: image_joint.rows(),
            actual: expr_joint.rows(),
            context: "retrieval pairs",
        });
    }
    let b = image_joint.rows();
    if b == 0 {
        return Err(Error::InsufficientData("no held-out pairs".into()));
    }
    let sims = image_joint.mul_transpose(expr_joint);
    let hits = (0..b)
        .filter(|&i| {
            let own = sims.get(i, i);
            let better = (0..b).filter(|&j| j != i && sims.get(i, j) >= own).count();
            better < k
        })
        .count();
    Ok(hits as f64 / b as f64)
}

/// Cross-modal recall@k of an expert on held-out raw pairs.
pub fn oracle_retrieval(expert: &ExpertModel, images: &Matrix, exprs: &Matrix, k: usize) -> Result<f64> {
    recall_at_k(&expert.embed_images(images)?, &expert.embed_expressions(exprs)?, k)
}

/// `Σ_c max_latent |D_c ∩ latent| / n` for a record → group assignment.
pub fn oracle_partition_purity(groups: &[u32], truth: &[u32]) -> Result<f64> {
    if groups.len() != truth.len() {
        return Err(Error::DimMismatch {
            expected: truth.len(),
            actual: groups.len(),
            context: "partition vs truth",
        });
    }
    if groups.is_empty() {
        return Err(Error::InsufficientData("empty partition".into()));
    }
    let mut table: alloc::collections::BTreeMap<(u32, u32), usize> = alloc::collections::BTreeMap::new();
    for (&g, &t) in groups.iter().zip(truth) {
        *table.entry((g, t)).or_default() += 1;
    }
    let mut best: alloc::collections::BTreeMap<u32, usize> = alloc::collections::BTreeMap::new();
    for (&(g, _), &count) in &table {
        let slot = best.entry(g).or_default();
        *slot = (*slot).max(count);
    }
    Ok(best.values().sum::<usize>() as f64 / groups.len() as f64)
}
