//! Model files: a JSON header next to a `.bin` holding "SPDE" frames.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spade_core::clustering::ClusterModel;
use spade_core::experts::{ExpertModel, ProjectionHead};
use spade_core::mil::{AbmilModel, SurvivalSpec};
use spade_core::nn::{Activation, Dense};

use crate::error::{Result, SpadeError};
use crate::io::{create_dir, read_json, write_json};
use crate::tensor::{read_tensors, write_tensors, Tensor};

pub const MODEL_VERSION: u32 = 1;
pub const CLUSTER_HEADER: &str = "cluster.json";
pub const CLUSTER_PAYLOAD: &str = "cluster.bin";

fn bin_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version == MODEL_VERSION {
        Ok(())
    } else {
        Err(SpadeError::manifest(path, format!("unsupported model version {version}")))
    }
}

/// Pops the next frame and checks its shape.
fn take(frames: &mut std::vec::IntoIter<Tensor>, path: &Path, rows: usize, dim: usize, what: &str) -> Result<Tensor> {
    let t = frames
        .next()
        .ok_or_else(|| SpadeError::tensor(path, format!("missing frame for {what}")))?;
    if t.rows != rows || t.dim != dim {
        return Err(SpadeError::tensor(
            path,
            format!("{what}: expected {rows} × {dim}, found {} × {}", t.rows, t.dim),
        ));
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(spade_core::Error::NonFiniteValue(format!("{what} in {}", path.display())).into());
    }
    Ok(t)
}

fn finish(frames: std::vec::IntoIter<Tensor>, path: &Path) -> Result<()> {
    match frames.len() {
        0 => Ok(()),
        n => Err(SpadeError::tensor(path, format!("{n} unexpected trailing frames"))),
    }
}

fn dense_frames(d: &Dense) -> [Tensor; 2] {
    [Tensor::from_matrix(&d.weight), Tensor::from_row(&d.bias)]
}

fn read_dense(frames: &mut std::vec::IntoIter<Tensor>, path: &Path, input: usize, output: usize, what: &str) -> Result<Dense> {
    let weight = take(frames, path, input, output, what)?.to_matrix();
    let bias = take(frames, path, 1, output, what)?.to_row();
    Ok(Dense { weight, bias })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterHeader {
    version: u32,
    dim: usize,
    k1: u32,
    k2: usize,
    organs: Vec<OrganEntry>,
    fine_to_coarse: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OrganEntry {
    organ: String,
    fine_centroids: usize,
}

/// Writes `cluster.json` and `cluster.bin` (one frame per organ, then the coarse centroids).
pub fn save_cluster_model(model: &ClusterModel, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let header = ClusterHeader {
        version: MODEL_VERSION,
        dim: model.dim(),
        k1: model.k1,
        k2: model.n_experts(),
        organs: model
            .fine_centroids
            .iter()
            .map(|(organ, c)| OrganEntry {
                organ: organ.clone(),
                fine_centroids: c.rows(),
            })
            .collect(),
        fine_to_coarse: model.fine_to_coarse.clone(),
    };
    let mut frames: Vec<Tensor> = model.fine_centroids.iter().map(|(_, c)| Tensor::from_matrix(c)).collect();
    frames.push(Tensor::from_matrix(&model.coarse_centroids));
    write_tensors(&dir.join(CLUSTER_PAYLOAD), &frames)?;
    let path = dir.join(CLUSTER_HEADER);
    write_json(&path, &header)?;
    Ok(path)
}

/// Accepts the header file or its directory.
pub fn load_cluster_model(path: &Path) -> Result<ClusterModel> {
    let path = if path.is_dir() { path.join(CLUSTER_HEADER) } else { path.to_path_buf() };
    let header: ClusterHeader = read_json(&path)?;
    check_version(&path, header.version)?;
    let bin = bin_path(&path);
    let mut frames = read_tensors(&bin)?.into_iter();
    let mut fine_centroids = Vec::with_capacity(header.organs.len());
    for entry in &header.organs {
        let t = take(&mut frames, &bin, entry.fine_centroids, header.dim, "fine centroids")?;
        fine_centroids.push((entry.organ.clone(), t.to_matrix()));
    }
    let coarse_centroids = take(&mut frames, &bin, header.k2, header.dim, "coarse centroids")?.to_matrix();
    finish(frames, &bin)?;
    let model = ClusterModel {
        fine_centroids,
        coarse_centroids,
        fine_to_coarse: header.fine_to_coarse,
        k1: header.k1,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertHeader {
    version: u32,
    coarse_id: u32,
    tau: f64,
    m: usize,
    #[serde(rename = "G")]
    g: usize,
    hidden: usize,
    d: usize,
    activation: String,
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu",
        Activation::Relu => "relu",
    }
}

fn parse_activation(path: &Path, name: &str) -> Result<Activation> {
    match name {
        "gelu" => Ok(Activation::Gelu),
        "relu" => Ok(Activation::Relu),
        other => Err(SpadeError::manifest(path, format!("unknown activation {other:?}"))),
    }
}

pub fn expert_file_name(coarse_id: u32) -> String {
    format!("expert_{coarse_id:03}.json")
}

fn head_frames(h: &ProjectionHead) -> Vec<Tensor> {
    let mut out = vec![Tensor::from_row(&h.input_shift)];
    out.extend(dense_frames(&h.layer1));
    out.extend(dense_frames(&h.layer2));
    out
}

fn read_head(
    frames: &mut std::vec::IntoIter<Tensor>,
    path: &Path,
    input: usize,
    hidden: usize,
    d: usize,
    activation: Activation,
) -> Result<ProjectionHead> {
    let input_shift = take(frames, path, 1, input, "input shift")?.to_row();
    let layer1 = read_dense(frames, path, input, hidden, "head layer 1")?;
    let layer2 = read_dense(frames, path, hidden, d, "head layer 2")?;
    Ok(ProjectionHead {
        input_shift,
        layer1,
        layer2,
        activation,
    })
}

/// Writes `expert_<id>.json` and `expert_<id>.bin` into `dir`.
pub fn save_expert(expert: &ExpertModel, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let dims = expert.dims();
    let path = dir.join(expert_file_name(expert.coarse_id));
    let mut frames = vec![Tensor::from_row(&expert.centroid)];
    frames.extend(head_frames(&expert.image_head));
    frames.extend(head_frames(&expert.expr_head));
    write_tensors(&bin_path(&path), &frames)?;
    write_json(
        &path,
        &ExpertHeader {
            version: MODEL_VERSION,
            coarse_id: expert.coarse_id,
            tau: expert.tau,
            m: dims.m,
            g: dims.g,
            hidden: dims.hidden,
            d: dims.d,
            activation: activation_name(expert.image_head.activation).into(),
        },
    )?;
    Ok(path)
}

pub fn load_expert(path: &Path) -> Result<ExpertModel> {
    let header: ExpertHeader = read_json(path)?;
    check_version(path, header.version)?;
    if !(header.tau > 0.0 && header.tau.is_finite()) {
        return Err(SpadeError::manifest(path, "tau must be positive"));
    }
    let activation = parse_activation(path, &header.activation)?;
    let bin = bin_path(path);
    let mut frames = read_tensors(&bin)?.into_iter();
    let centroid = take(&mut frames, &bin, 1, header.m, "centroid")?.to_row();
    let image_head = read_head(&mut frames, &bin, header.m, header.hidden, header.d, activation)?;
    let expr_head = read_head(&mut frames, &bin, header.g, header.hidden, header.d, activation)?;
    finish(frames, &bin)?;
    Ok(ExpertModel {
        image_head,
        expr_head,
        tau: header.tau,
        coarse_id: header.coarse_id,
        centroid,
    })
}

/// Every `expert_*.json` in `dir`, ordered by file name.
pub fn load_experts(dir: &Path) -> Result<Vec<ExpertModel>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| SpadeError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("expert_"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SpadeError::manifest(dir, "no expert_*.json files"));
    }
    paths.iter().map(|p| load_expert(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Survival,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Survival => "survival",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadHeader {
    version: u32,
    task: Task,
    input: usize,
    hidden: usize,
    attn: usize,
    outputs: usize,
    dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bin_edges: Option<Vec<f64>>,
}

/// A trained attention-MIL head with what is needed to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFile {
    pub task: Task,
    pub model: AbmilModel,
    pub survival: Option<SurvivalSpec>,
}

pub const HEAD_HEADER: &str = "head.json";

pub fn save_head(head: &HeadFile, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let arch = head.model.arch();
    let path = dir.join(HEAD_HEADER);
    let m = &head.model;
    let frames: Vec<Tensor> = [&m.mlp1, &m.mlp2, &m.attn_v, &m.attn_u, &m.attn_w, &m.head]
        .into_iter()
        .flat_map(dense_frames)
        .collect();
    write_tensors(&bin_path(&path), &frames)?;
    write_json(
        &path,
        &HeadHeader {
            version: MODEL_VERSION,
            task: head.task,
            input: arch.input,
            hidden: arch.hidden,
            attn: arch.attn,
            outputs: arch.outputs,
            dropout: arch.dropout,
            bin_edges: head.survival.as_ref().map(|s| s.bin_edges.clone()),
        },
    )?;
    Ok(path)
}

/// Accepts `head.json` or its directory.
pub fn load_head(path: &Path) -> Result<HeadFile> {
    let path = if path.is_dir() { path.join(HEAD_HEADER) } else { path.to_path_buf() };
    let h: HeadHeader = read_json(&path)?;
    check_version(&path, h.version)?;
    let survival = match (h.task, h.bin_edges) {
        (Task::Survival, Some(edges)) => {
            let spec = SurvivalSpec::new(edges)?;
            if spec.n_bins() != h.outputs {
                return Err(SpadeError::manifest(&path, "bin edges do not match the head outputs"));
            }
            Some(spec)
        }
        (Task::Survival, None) => return Err(SpadeError::manifest(&path, "survival head without bin_edges")),
        (Task::Classify, _) => None,
    };
    let bin = bin_path(&path);
    let mut frames = read_tensors(&bin)?.into_iter();
    let model = AbmilModel {
        mlp1: read_dense(&mut frames, &bin, h.input, h.hidden, "mlp layer 1")?,
        mlp2: read_dense(&mut frames, &bin, h.hidden, h.hidden, "mlp layer 2")?,
        attn_v: read_dense(&mut frames, &bin, h.hidden, h.attn, "attention V")?,
        attn_u: read_dense(&mut frames, &bin, h.hidden, h.attn, "attention U")?,
        attn_w: read_dense(&mut frames, &bin, h.attn, 1, "attention w")?,
        head: read_dense(&mut frames, &bin, h.hidden, h.outputs, "output head")?,
        dropout: h.dropout,
    };
    finish(frames, &bin)?;
    Ok(HeadFile {
        task: h.task,
        model,
        survival,
    })
}
