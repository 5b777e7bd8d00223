//! Pipeline stages. Each reads its inputs from disk and writes its artifacts,
//! so running the subcommands one by one and running `pipeline` produce the
//! same files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spade_core::clustering::{
    assign_expert_data, coarse_cluster, fine_cluster_organ, one_step_model, organ_points, single_expert_model,
    wcss_curve, KmeansParams, OrganClusters,
};
use spade_core::corpus::{
    normalize_bank, restrict_genes, select_hvg_by_slide, subsample_per_organ, ExpressionKind, PairedSpotBank,
};
use spade_core::experts::{train_expert, ExpertDims, ExpertModel};
use spade_core::linalg::softmax_in_place;
use spade_core::metrics::{
    classification_report, stratified_split, survival_report, EvalReport, SplitSpec, SplitUnit,
};
use spade_core::mil::{
    risk_score, train_classifier, train_survival, AbmilArch, BagTarget, SlideBag, SurvivalSpec,
};
use spade_core::rng::{derive_indexed, derive_seed, rng_from};
use spade_core::routing::{embed_rows, MoeEncoder, RoutingScheme, RoutingVariant};
use spade_core::synth::{generate, oracle_partition_purity, oracle_retrieval, SynthConfig};
use spade_core::Matrix;

use crate::bags::{bag_from_rows, build_bags, group_rows, read_labels, write_labels, BagLevel, Label, Labels};
use crate::bank_io::{load_bank, save_bank};
use crate::config::{ClusterMode, ClusterSection, ExpertSection, HeadSection, PipelineConfig};
use crate::error::{Result, SpadeError};
use crate::heatmap::export_attention;
use crate::io::{create_dir, read_json, write_json};
use crate::models::{
    load_cluster_model, load_expert, load_experts, load_head, save_cluster_model, save_expert, save_head, HeadFile,
    Task,
};

pub const TRUTH: &str = "truth.json";
pub const CLASSIFY_LABELS: &str = "labels_classify.json";
pub const SURVIVAL_LABELS: &str = "labels_survival.json";

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    /// Latent cluster per record id.
    pub latent_cluster: BTreeMap<u64, u32>,
    pub slides: Vec<TruthSlide>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSlide {
    pub slide_id: String,
    pub patient_id: String,
    pub organ: String,
    pub label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub records: usize,
    pub slides: usize,
    pub bank: PathBuf,
    pub classify_labels: PathBuf,
    pub survival_labels: Option<PathBuf>,
}

/// Writes a synthetic raw-count bank, `truth.json` and slide-level label files.
pub fn run_synth(config: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    let (bank, truth) = generate(config)?;
    let bank_path = save_bank(&bank, out)?;
    let file = TruthFile {
        latent_cluster: bank.records.iter().map(|r| r.id).zip(truth.latent_cluster.iter().copied()).collect(),
        slides: truth
            .slides
            .iter()
            .map(|s| TruthSlide {
                slide_id: s.slide_id.clone(),
                patient_id: s.patient_id.clone(),
                organ: s.organ.clone(),
                label: s.label,
                risk: s.risk,
                time: s.time,
                event: s.event,
            })
            .collect(),
    };
    write_json(&out.join(TRUTH), &file)?;
    let classify: Labels = truth.slides.iter().map(|s| (s.slide_id.clone(), Label::Class(s.label))).collect();
    let classify_labels = out.join(CLASSIFY_LABELS);
    write_labels(&classify_labels, &classify)?;
    let survival_labels = if config.survival.is_some() {
        let survival: Labels = truth
            .slides
            .iter()
            .filter_map(|s| Some((s.slide_id.clone(), Label::Survival { time: s.time?, event: s.event? })))
            .collect();
        let path = out.join(SURVIVAL_LABELS);
        write_labels(&path, &survival)?;
        Some(path)
    } else {
        None
    };
    Ok(SynthSummary {
        records: bank.len(),
        slides: truth.slides.len(),
        bank: bank_path,
        classify_labels,
        survival_labels,
    })
}

// ---------------------------------------------------------------- preprocess

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HvgFile {
    pub per_sample_top: u32,
    pub gene_indices: Vec<u32>,
    pub gene_names: Vec<String>,
    pub dropped_spots: usize,
}

/// Count normalization (raw banks only), per-slide HVG union and gene restriction.
pub fn run_preprocess(bank: &Path, out: &Path, target_sum: f64, hvg_top: u32) -> Result<HvgFile> {
    let raw = load_bank(bank)?;
    let (normalized, dropped) = match raw.expression_kind {
        ExpressionKind::Counts => {
            let n = normalize_bank(&raw, target_sum)?;
            if n.dropped_spots > 0 {
                log::warn!("dropped {} spots with zero total count", n.dropped_spots);
            }
            (n.bank, n.dropped_spots)
        }
        ExpressionKind::Normalized => (raw, 0),
    };
    let sel = select_hvg_by_slide(&normalized, hvg_top)?;
    let restricted = restrict_genes(&normalized, &sel)?;
    save_bank(&restricted, out)?;
    log::info!(
        "preprocess: {} spots, {} of {} genes kept",
        restricted.len(),
        restricted.g,
        normalized.g
    );
    let file = HvgFile {
        per_sample_top: hvg_top,
        gene_indices: sel.gene_indices.clone(),
        gene_names: restricted.gene_names.clone(),
        dropped_spots: dropped,
    };
    write_json(&out.join("hvg.json"), &file)?;
    Ok(file)
}

// ---------------------------------------------------------------- cluster

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionFile {
    pub record_ids: Vec<u64>,
    pub fine_of: Vec<u32>,
    pub coarse_of: Vec<u32>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub mode: ClusterMode,
    pub n_fine: usize,
    pub n_experts: usize,
    pub sizes: Vec<usize>,
    pub clamped_organs: Vec<String>,
}

fn fine_clusters(bank: &PairedSpotBank, k1: usize, seed: u64, params: &KmeansParams) -> Result<Vec<OrganClusters>> {
    organ_points(bank)
        .par_iter()
        .map(|o| fine_cluster_organ(o, k1, seed, params))
        .collect::<spade_core::Result<Vec<_>>>()
        .map_err(Into::into)
}

/// Builds the cluster model on the (optionally subsampled) bank, then
/// partitions every record of the bank.
pub fn run_cluster(bank: &Path, out: &Path, settings: &ClusterSection, seed: u64) -> Result<ClusterSummary> {
    let bank = load_bank(bank)?;
    let params = settings.params();
    let sample = match settings.sample_per_organ {
        Some(n) => subsample_per_organ(&bank, n, derive_seed(seed, "subsample"))?,
        None => bank.clone(),
    };
    let fine = fine_clusters(&sample, settings.k1 as usize, derive_seed(seed, "fine"), &params)?;
    let model = match settings.mode {
        ClusterMode::TwoStep => coarse_cluster(&fine, settings.k2 as usize, derive_seed(seed, "coarse"), &params)?,
        ClusterMode::OneStep => one_step_model(&fine),
        ClusterMode::SingleExpert => single_expert_model(&fine),
    };
    save_cluster_model(&model, out)?;
    let part = assign_expert_data(&bank, &load_cluster_model(out)?)?;
    let sizes: Vec<usize> = part.members.iter().map(Vec::len).collect();
    write_json(
        &out.join("partition.json"),
        &PartitionFile {
            record_ids: bank.records.iter().map(|r| r.id).collect(),
            fine_of: part.fine_of.clone(),
            coarse_of: part.coarse_of.clone(),
            sizes: sizes.clone(),
        },
    )?;
    if !settings.wcss_sweep.is_empty() {
        let curves = organ_points(&sample)
            .par_iter()
            .map(|o| {
                let ks: Vec<u32> = settings
                    .wcss_sweep
                    .iter()
                    .copied()
                    .filter(|&k| k >= 1 && k as usize <= o.points.rows())
                    .collect();
                let curve = wcss_curve(&o.points, &ks, derive_seed(seed, &format!("wcss/{}", o.organ)), &params)?;
                Ok((o.organ.clone(), curve))
            })
            .collect::<spade_core::Result<BTreeMap<String, Vec<(u32, f64)>>>>()?;
        write_json(&out.join("wcss.json"), &curves)?;
    }
    let clamped_organs = fine.iter().filter(|o| o.clamped).map(|o| o.organ.clone()).collect();
    log::info!("cluster: {} fine centroids, {} experts", model.n_fine(), model.n_experts());
    Ok(ClusterSummary {
        mode: settings.mode,
        n_fine: model.n_fine(),
        n_experts: model.n_experts(),
        sizes,
        clamped_organs,
    })
}

// ---------------------------------------------------------------- experts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStat {
    pub coarse_id: u32,
    pub records: usize,
    pub train: usize,
    pub holdout: usize,
    pub trained: bool,
    pub epochs_run: u32,
    pub stopped_early: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub recall_at_1: Option<f64>,
    /// Record ids kept out of training.
    pub holdout_ids: Vec<u64>,
}

/// Held-out retrieval over all experts: `ratio` is hits over the hits
/// expected by chance, which is one per evaluated expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub experts_evaluated: usize,
    pub pairs: usize,
    pub hits: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertsSummary {
    pub experts: Vec<ExpertStat>,
    pub recall: Option<RecallSummary>,
}

fn rows_matrix(bank: &PairedSpotBank, rows: &[usize], expression: bool) -> Matrix {
    let (dim, data): (usize, Vec<f64>) = if expression {
        (bank.g, rows.iter().flat_map(|&r| bank.expression_f64(r)).collect())
    } else {
        (bank.m, rows.iter().flat_map(|&r| bank.embedding_f64(r)).collect())
    };
    Matrix::from_vec(rows.len(), dim, data).expect("row block shape")
}

/// Trains one expert per coarse cluster, in parallel, and scores held-out retrieval.
pub fn run_train_experts(
    bank: &Path,
    cluster: &Path,
    out: &Path,
    settings: &ExpertSection,
    seed: u64,
) -> Result<ExpertsSummary> {
    let bank = load_bank(bank)?;
    if bank.g == 0 {
        return Err(spade_core::Error::InvalidArgument("experts need expression profiles (G = 0)".into()).into());
    }
    let model = load_cluster_model(cluster)?;
    if model.dim() != bank.m {
        return Err(crate::error::dim_mismatch(model.dim(), bank.m, "cluster model vs bank embedding dim"));
    }
    let part = assign_expert_data(&bank, &model)?;
    create_dir(out)?;
    let dims = ExpertDims {
        m: bank.m,
        g: bank.g,
        hidden: settings.hidden,
        d: settings.dim,
    };
    let stats = part
        .members
        .par_iter()
        .enumerate()
        .map(|(c, members)| -> Result<ExpertStat> {
            let c32 = c as u32;
            let mut rows = members.clone();
            rows.shuffle(&mut rng_from(derive_indexed(seed, "holdout", c as u64)));
            let n_hold = (rows.len() as f64 * settings.holdout_fraction).floor() as usize;
            let (hold, train) = rows.split_at(n_hold);
            let mut train = train.to_vec();
            train.sort_unstable();
            let centroid = model.coarse_centroids.row(c).to_vec();
            let mut config = settings.train_config(derive_indexed(seed, "expert", c as u64));
            config.batch_size = config.batch_size.min(train.len() as u32);
            let (expert, history) = if train.len() >= 2 {
                let (e, h) = train_expert(
                    &rows_matrix(&bank, &train, false),
                    &rows_matrix(&bank, &train, true),
                    dims,
                    settings.tau,
                    c32,
                    centroid,
                    &config,
                )?;
                (e, Some(h))
            } else {
                log::warn!("expert {c} has {} training records; kept at initialization", train.len());
                let e = ExpertModel::init(dims, settings.tau, c32, centroid, &mut rng_from(config.seed))?;
                (e, None)
            };
            let path = save_expert(&expert, out)?;
            let recall_at_1 = if hold.len() >= 2 {
                let stored = load_expert(&path)?;
                Some(oracle_retrieval(
                    &stored,
                    &rows_matrix(&bank, hold, false),
                    &rows_matrix(&bank, hold, true),
                    1,
                )?)
            } else {
                None
            };
            Ok(ExpertStat {
                coarse_id: c32,
                records: members.len(),
                train: train.len(),
                holdout: hold.len(),
                trained: history.is_some(),
                epochs_run: history.as_ref().map_or(0, |h| h.epochs_run),
                stopped_early: history.as_ref().is_some_and(|h| h.stopped_early),
                initial_loss: history.as_ref().and_then(|h| h.train.first().copied()),
                final_loss: history.as_ref().and_then(|h| h.train.last().copied()),
                recall_at_1,
                holdout_ids: hold.iter().map(|&r| bank.records[r].id).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let evaluated: Vec<&ExpertStat> = stats.iter().filter(|s| s.recall_at_1.is_some()).collect();
    let recall = (!evaluated.is_empty()).then(|| {
        let hits: f64 = evaluated.iter().map(|s| s.recall_at_1.unwrap() * s.holdout as f64).sum();
        RecallSummary {
            experts_evaluated: evaluated.len(),
            pairs: evaluated.iter().map(|s| s.holdout).sum(),
            hits,
            ratio: hits / evaluated.len() as f64,
        }
    });
    let summary = ExpertsSummary { experts: stats, recall };
    write_json(&out.join("experts.json"), &summary)?;
    if let Some(r) = &summary.recall {
        log::info!("experts: held-out recall@1 at {:.2}x chance over {} pairs", r.ratio, r.pairs);
    }
    Ok(summary)
}

// ---------------------------------------------------------------- embed

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub scheme: String,
    pub epsilon: f64,
    pub experts: usize,
    pub record_ids: Vec<u64>,
    /// Routing weights per record, one entry per expert.
    pub weights: Vec<Vec<f64>>,
}

const EMBED_CHUNK: usize = 256;

pub fn scheme_name(s: &RoutingScheme) -> &'static str {
    match s.variant {
        RoutingVariant::Hard => "hard",
        RoutingVariant::Uniform => "uniform",
        RoutingVariant::InverseDistance => "invdist",
    }
}

/// Routes every record through the experts; writes an embedding-only bank
/// (`G = 0`) plus `weights.json`.
pub fn run_embed(bank: &Path, experts: &Path, scheme: RoutingScheme, out: &Path) -> Result<usize> {
    let bank = load_bank(bank)?;
    let encoder = MoeEncoder::new(load_experts(experts)?, scheme)?;
    let patches = rows_matrix(&bank, &(0..bank.len()).collect::<Vec<_>>(), false);
    let chunks: Vec<Vec<usize>> = (0..bank.len())
        .collect::<Vec<_>>()
        .chunks(EMBED_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = chunks
        .par_iter()
        .map(|rows| embed_rows(&encoder, &patches.select_rows(rows)))
        .collect::<spade_core::Result<Vec<_>>>()?;
    let d = encoder.output_dim();
    let mut embeddings = Vec::with_capacity(bank.len() * d);
    let mut weights = Vec::with_capacity(bank.len());
    for p in &parts {
        embeddings.extend(p.embeddings.as_slice().iter().map(|&v| v as f32));
        weights.extend(p.weights.iter_rows().map(<[f64]>::to_vec));
    }
    let embedded = PairedSpotBank::new(
        bank.records.clone(),
        d,
        0,
        Vec::new(),
        bank.organs.clone(),
        format!(
            "{}; routed through {} experts ({})",
            bank.provenance,
            encoder.experts().len(),
            scheme_name(&scheme)
        ),
        ExpressionKind::Normalized,
        embeddings,
        Vec::new(),
    )?;
    save_bank(&embedded, out)?;
    write_json(
        &out.join("weights.json"),
        &WeightsFile {
            scheme: scheme_name(&scheme).into(),
            epsilon: scheme.epsilon,
            experts: encoder.experts().len(),
            record_ids: bank.records.iter().map(|r| r.id).collect(),
            weights,
        },
    )?;
    Ok(embedded.len())
}

// ---------------------------------------------------------------- heads

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    /// Class probabilities.
    Scores(Vec<f64>),
    /// Survival risk; higher means an earlier expected event.
    Risk(f64),
}

pub type Predictions = BTreeMap<String, Prediction>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadSummary {
    pub task: Task,
    pub bags: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub best_epoch: u32,
    pub epochs_run: u32,
}

fn patient_of_bags(bank: &PairedSpotBank, level: BagLevel) -> BTreeMap<String, String> {
    group_rows(bank, level)
        .into_iter()
        .map(|(id, rows)| {
            let patient = match level {
                BagLevel::Slide => bank.records[rows[0]].patient_id.clone(),
                BagLevel::Patient => id.clone(),
            };
            (id, patient)
        })
        .collect()
}

fn stratum(target: &BagTarget) -> String {
    match target {
        BagTarget::Class(c) => c.to_string(),
        BagTarget::Survival { event: true, .. } => "event".into(),
        BagTarget::Survival { event: false, .. } => "censored".into(),
    }
}

/// Scores bags with a trained head.
pub fn predict(head: &HeadFile, bags: &[SlideBag]) -> Result<Predictions> {
    bags.par_iter()
        .map(|bag| {
            let p = match head.task {
                Task::Classify => {
                    let mut logits = head.model.forward(bag)?.logits;
                    softmax_in_place(&mut logits);
                    Prediction::Scores(logits)
                }
                Task::Survival => Prediction::Risk(risk_score(&head.model, bag)?),
            };
            Ok((bag.id.clone(), p))
        })
        .collect()
}

/// Patient-level stratified 70/10/20 split, head training with early
/// stopping on the validation bags, and predictions for the test bags.
pub fn run_train_head(
    bags: &Path,
    labels: &Path,
    task: Task,
    settings: &HeadSection,
    seed: u64,
    out: &Path,
) -> Result<HeadSummary> {
    let bank = load_bank(bags)?;
    let labels = read_labels(labels)?;
    let (all, _) = build_bags(&bank, &labels, settings.level);
    for bag in &all {
        let ok = matches!(
            (task, &bag.target),
            (Task::Classify, BagTarget::Class(_)) | (Task::Survival, BagTarget::Survival { .. })
        );
        if !ok {
            return Err(spade_core::Error::InvalidArgument(format!("label of {} does not fit task {}", bag.id, task.name())).into());
        }
    }
    if all.is_empty() {
        return Err(spade_core::Error::InsufficientData("no labeled bags".into()).into());
    }
    let patient_of = patient_of_bags(&bank, settings.level);
    let mut units: BTreeMap<String, String> = BTreeMap::new();
    for bag in &all {
        units.entry(patient_of[&bag.id].clone()).or_insert_with(|| stratum(&bag.target));
    }
    let units: Vec<SplitUnit> = units.into_iter().map(|(id, stratum)| SplitUnit { id, stratum }).collect();
    let split = stratified_split(
        &units,
        &SplitSpec {
            seed: derive_seed(seed, "split"),
            ..SplitSpec::default()
        },
    )?;
    let part = |patients: &[String]| -> Vec<SlideBag> {
        let set: BTreeSet<&str> = patients.iter().map(String::as_str).collect();
        all.iter().filter(|b| set.contains(patient_of[&b.id].as_str())).cloned().collect()
    };
    let (train, val, test) = (part(&split.train), part(&split.val), part(&split.test));
    let config = settings.train_config(derive_seed(seed, "train"));
    let mut arch = AbmilArch::new(bank.m, 1);
    arch.hidden = settings.hidden;
    arch.attn = settings.attn;
    arch.dropout = settings.dropout;
    let (model, history, survival) = match task {
        Task::Classify => {
            let max = all
                .iter()
                .filter_map(|b| match b.target {
                    BagTarget::Class(c) => Some(c),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            arch.outputs = max as usize + 1;
            let (m, h) = train_classifier(&train, &val, arch, &config)?;
            (m, h, None)
        }
        Task::Survival => {
            let (times, events): (Vec<f64>, Vec<bool>) = train
                .iter()
                .filter_map(|b| match b.target {
                    BagTarget::Survival { time, event } => Some((time, event)),
                    _ => None,
                })
                .unzip();
            let spec = SurvivalSpec::quartiles(&times, &events)?;
            arch.outputs = spec.n_bins();
            let (m, h) = train_survival(&train, &val, arch, &spec, &config)?;
            (m, h, Some(spec))
        }
    };
    let head = HeadFile { task, model, survival };
    let path = save_head(&head, out)?;
    let stored = load_head(&path)?;
    let ids = |b: &[SlideBag]| b.iter().map(|b| b.id.clone()).collect::<Vec<_>>();
    write_json(
        &out.join("split.json"),
        &SplitFile {
            train: ids(&train),
            val: ids(&val),
            test: ids(&test),
        },
    )?;
    write_json(&out.join("history.json"), &serde_json::json!({"train": history.train, "val": history.val, "best_epoch": history.best_epoch}))?;
    write_json(&out.join("preds.json"), &predict(&stored, &test)?)?;
    log::info!(
        "head {}: {} train / {} val / {} test bags, best epoch {}",
        task.name(),
        train.len(),
        val.len(),
        test.len(),
        history.best_epoch
    );
    Ok(HeadSummary {
        task,
        bags: all.len(),
        train: train.len(),
        val: val.len(),
        test: test.len(),
        best_epoch: history.best_epoch,
        epochs_run: history.epochs_run,
    })
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJson {
    pub task: Task,
    pub n: usize,
    pub auc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub c_index: Option<f64>,
    pub per_class: Vec<ClassRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: u32,
    pub auc: Option<f64>,
    pub f1: f64,
}

impl EvalJson {
    pub fn from_report(task: Task, r: &EvalReport) -> Self {
        Self {
            task,
            n: r.n,
            auc: r.auc,
            macro_f1: r.macro_f1,
            c_index: r.c_index,
            per_class: r
                .per_class_f1
                .iter()
                .enumerate()
                .map(|(k, &f1)| ClassRow {
                    class: k as u32,
                    auc: r.per_class_auc.get(k).copied().flatten(),
                    f1,
                })
                .collect(),
        }
    }

    /// Plain-text table of the report.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("task      {}\nn         {}\n", self.task.name(), self.n);
        s += &format!("auc       {}\nmacro_f1  {}\nc_index   {}\n", fmt(self.auc), fmt(self.macro_f1), fmt(self.c_index));
        if !self.per_class.is_empty() {
            s += "class  auc     f1\n";
            for row in &self.per_class {
                s += &format!("{:<6} {:<7} {:.4}\n", row.class, fmt(row.auc), row.f1);
            }
        }
        s
    }
}

/// Scores predictions against labels. Predictions without a label are an error.
pub fn evaluate(preds: &Predictions, labels: &Labels, task: Task) -> Result<EvalJson> {
    let missing: Vec<&String> = preds.keys().filter(|id| !labels.contains_key(*id)).collect();
    if let Some(id) = missing.first() {
        return Err(spade_core::Error::InvalidArgument(format!("no label for prediction {id} ({} missing)", missing.len())).into());
    }
    let report = match task {
        Task::Classify => {
            let mut rows = Vec::new();
            let mut truth = Vec::new();
            for (id, p) in preds {
                match (p, labels[id]) {
                    (Prediction::Scores(s), Label::Class(c)) => {
                        rows.push(s.clone());
                        truth.push(c);
                    }
                    _ => return Err(spade_core::Error::InvalidArgument(format!("{id}: expected class scores and a class label")).into()),
                }
            }
            let k = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != k) {
                return Err(spade_core::Error::InvalidArgument("score vectors differ in length".into()).into());
            }
            let scores = Matrix::from_rows(k, rows.iter().map(Vec::as_slice))?;
            classification_report(&scores, &truth)?
        }
        Task::Survival => {
            let mut risks = Vec::new();
            let mut times = Vec::new();
            let mut events = Vec::new();
            for (id, p) in preds {
                match (p, labels[id]) {
                    (Prediction::Risk(r), Label::Survival { time, event }) => {
                        risks.push(*r);
                        times.push(time);
                        events.push(event);
                    }
                    _ => return Err(spade_core::Error::InvalidArgument(format!("{id}: expected a risk and a survival label")).into()),
                }
            }
            survival_report(&risks, &times, &events)?
        }
    };
    Ok(EvalJson::from_report(task, &report))
}

pub fn run_eval(preds: &Path, labels: &Path, task: Task, out: Option<&Path>) -> Result<EvalJson> {
    let preds: Predictions = read_json(preds)?;
    let report = evaluate(&preds, &read_labels(labels)?, task)?;
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- heatmap

/// Attention heatmap of one bag of an embedded bank. `id` may be omitted
/// when the bank holds a single bag.
pub fn run_heatmap(bags: &Path, model: &Path, id: Option<&str>, level: BagLevel, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let bank = load_bank(bags)?;
    let head = load_head(model)?;
    let groups = group_rows(&bank, level);
    let (id, rows) = match id {
        Some(id) => groups
            .get_key_value(id)
            .ok_or_else(|| spade_core::Error::InvalidArgument(format!("no bag {id:?} in {}", bags.display())))?,
        None if groups.len() == 1 => groups.iter().next().unwrap(),
        None => {
            return Err(SpadeError::Usage(format!("{} bags in the bank; pass --id", groups.len())));
        }
    };
    let bag = bag_from_rows(&bank, id, rows, BagTarget::Class(0));
    let output = head.model.forward(&bag)?;
    export_attention(&bag, &output.attention, out)
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub mode: ClusterMode,
    pub k1: u32,
    pub k2: u32,
    pub scheme: String,
    pub n_experts: usize,
    pub purity: Option<f64>,
    pub recall: Option<RecallSummary>,
    pub evals: Vec<EvalJson>,
}

impl PipelineReport {
    pub fn eval(&self, task: Task) -> Option<&EvalJson> {
        self.evals.iter().find(|e| e.task == task)
    }
}

/// Paths of every stage output under the run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn raw(&self) -> PathBuf {
        self.root.join("raw")
    }
    pub fn bank(&self) -> PathBuf {
        self.root.join("bank")
    }
    pub fn cluster(&self) -> PathBuf {
        self.root.join("cluster")
    }
    pub fn experts(&self) -> PathBuf {
        self.root.join("experts")
    }
    pub fn embedded(&self) -> PathBuf {
        self.root.join("embedded")
    }
    pub fn head(&self, task: Task) -> PathBuf {
        self.root.join("heads").join(task.name())
    }
    pub fn eval(&self, task: Task) -> PathBuf {
        self.root.join("eval").join(format!("{}.json", task.name()))
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

fn purity_against_truth(cluster_dir: &Path, truth: &TruthFile) -> Result<f64> {
    let part: PartitionFile = read_json(&cluster_dir.join("partition.json"))?;
    let latent: Vec<u32> = part
        .record_ids
        .iter()
        .map(|id| {
            truth
                .latent_cluster
                .get(id)
                .copied()
                .ok_or_else(|| spade_core::Error::InvalidArgument(format!("record {id} missing from truth")))
        })
        .collect::<spade_core::Result<_>>()?;
    Ok(oracle_partition_purity(&part.coarse_of, &latent)?)
}

/// synth or input bank → preprocess → cluster → train-experts → embed →
/// train-head → eval, all seeded from `config.seed`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    let layout = RunLayout {
        root: config.out_dir.clone(),
    };
    let seed = config.seed;
    let started = Instant::now();
    let lap = |stage: &str| log::info!("{stage} done at {:.1}s", started.elapsed().as_secs_f64());

    let (raw_bank, mut classify_labels, mut survival_labels, truth) = match &config.data.bank {
        Some(bank) => (bank.clone(), None, None, None),
        None => {
            let s = run_synth(&config.synth.to_config(derive_seed(seed, "synth")), &layout.raw())?;
            let truth: TruthFile = read_json(&layout.raw().join(TRUTH))?;
            (s.bank, Some(s.classify_labels), s.survival_labels, Some(truth))
        }
    };
    if let Some(p) = &config.data.classify_labels {
        classify_labels = Some(p.clone());
    }
    if let Some(p) = &config.data.survival_labels {
        survival_labels = Some(p.clone());
    }
    lap("input");
    run_preprocess(&raw_bank, &layout.bank(), config.preprocess.target_sum, config.preprocess.hvg_top)?;
    lap("preprocess");
    let cluster = run_cluster(&layout.bank(), &layout.cluster(), &config.cluster, derive_seed(seed, "cluster"))?;
    lap("cluster");
    let purity = truth
        .as_ref()
        .map(|t| purity_against_truth(&layout.cluster(), t))
        .transpose()?;
    let experts = run_train_experts(
        &layout.bank(),
        &layout.cluster(),
        &layout.experts(),
        &config.experts,
        derive_seed(seed, "experts"),
    )?;
    lap("train-experts");
    run_embed(&layout.bank(), &layout.experts(), config.routing.scheme(), &layout.embedded())?;
    lap("embed");

    let mut evals = Vec::new();
    for &task in &config.head.tasks {
        let labels = match task {
            Task::Classify => classify_labels.as_ref(),
            Task::Survival => survival_labels.as_ref(),
        };
        let Some(labels) = labels else {
            log::warn!("no labels for task {}; skipped", task.name());
            continue;
        };
        let dir = layout.head(task);
        run_train_head(
            &layout.embedded(),
            labels,
            task,
            &config.head,
            derive_seed(seed, &format!("head/{}", task.name())),
            &dir,
        )?;
        evals.push(run_eval(&dir.join("preds.json"), labels, task, Some(&layout.eval(task)))?);
        lap(&format!("head {}", task.name()));
    }
    let report = PipelineReport {
        seed,
        mode: config.cluster.mode,
        k1: config.cluster.k1,
        k2: config.cluster.k2,
        scheme: config.routing.scheme.name().into(),
        n_experts: cluster.n_experts,
        purity,
        recall: experts.recall,
        evals,
    };
    write_json(&layout.report(), &report)?;
    Ok(report)
}
