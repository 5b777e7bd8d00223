//! On-disk banks: `bank.json` plus the `emb.bin` and `expr.bin` payloads.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spade_core::corpus::{ExpressionKind, PairedSpotBank, SpotRecord};

use crate::error::{dim_mismatch, Result, SpadeError};
use crate::io::{create_dir, read_json, write_json};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const MANIFEST: &str = "bank.json";
pub const EMBEDDINGS: &str = "emb.bin";
pub const EXPRESSION: &str = "expr.bin";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub m: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub gene_names: Vec<String>,
    /// Organ vocabulary; defaults to the organs seen in `records`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organs: Option<Vec<String>>,
    /// `"counts"` or `"normalized"` (the default).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    #[serde(default)]
    pub provenance: String,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub slide_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    pub organ: String,
    pub x: f64,
    pub y: f64,
    pub row: u64,
}

/// Accepts either the manifest file or the directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn load_bank(path: &Path) -> Result<PairedSpotBank> {
    let path = manifest_path(path);
    let manifest: Manifest = read_json(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    bank_from_manifest(&path, manifest, dir)
}

fn bank_from_manifest(path: &Path, manifest: Manifest, dir: &Path) -> Result<PairedSpotBank> {
    if manifest.version != MANIFEST_VERSION {
        return Err(SpadeError::manifest(path, format!("unsupported version {}", manifest.version)));
    }
    if manifest.gene_names.len() != manifest.g {
        return Err(SpadeError::manifest(
            path,
            format!("G = {} but {} gene names", manifest.g, manifest.gene_names.len()),
        ));
    }
    let kind = match manifest.expression.as_deref() {
        None | Some("normalized") => ExpressionKind::Normalized,
        Some("counts") => ExpressionKind::Counts,
        Some(other) => return Err(SpadeError::manifest(path, format!("unknown expression kind {other:?}"))),
    };
    let emb = read_tensor(&dir.join(EMBEDDINGS))?;
    if emb.dim != manifest.m {
        return Err(dim_mismatch(manifest.m, emb.dim, "embedding payload header vs manifest m"));
    }
    let expr_path = dir.join(EXPRESSION);
    let expr = if manifest.g == 0 && !expr_path.exists() {
        Tensor::new(emb.rows, 0, Vec::new())
    } else {
        read_tensor(&expr_path)?
    };
    if expr.dim != manifest.g {
        return Err(dim_mismatch(manifest.g, expr.dim, "expression payload header vs manifest G"));
    }
    if expr.rows != emb.rows {
        return Err(dim_mismatch(emb.rows, expr.rows, "expression payload rows vs embedding rows"));
    }

    let n = manifest.records.len();
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(n);
    let mut embeddings = Vec::with_capacity(n * manifest.m);
    let mut expression = Vec::with_capacity(n * manifest.g);
    for (i, r) in manifest.records.into_iter().enumerate() {
        let row = usize::try_from(r.row)
            .ok()
            .filter(|&row| row < emb.rows)
            .ok_or_else(|| SpadeError::manifest(path, format!("record {i}: row {} outside {} payload rows", r.row, emb.rows)))?;
        if !seen.insert(row) {
            return Err(SpadeError::manifest(path, format!("record {i}: row {row} used twice")));
        }
        embeddings.extend_from_slice(&emb.data[row * emb.dim..(row + 1) * emb.dim]);
        expression.extend_from_slice(&expr.data[row * expr.dim..(row + 1) * expr.dim]);
        records.push(SpotRecord {
            id: r.id.unwrap_or(i as u64),
            patient_id: r.patient_id.unwrap_or_else(|| r.slide_id.clone()),
            slide_id: r.slide_id,
            organ: r.organ,
            spot_xy: (r.x, r.y),
        });
    }
    let organs = manifest.organs.unwrap_or_else(|| {
        let set: BTreeSet<&str> = records.iter().map(|r| r.organ.as_str()).collect();
        set.into_iter().map(String::from).collect()
    });
    let bank = PairedSpotBank::new(
        records,
        manifest.m,
        manifest.g,
        manifest.gene_names,
        organs,
        manifest.provenance,
        kind,
        embeddings,
        expression,
    );
    match bank {
        Err(spade_core::Error::InvalidBank(reason)) => Err(SpadeError::manifest(path, reason)),
        other => Ok(other?),
    }
}

/// The manifest describing `bank` with rows in record order.
pub fn manifest_of(bank: &PairedSpotBank) -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        m: bank.m,
        g: bank.g,
        gene_names: bank.gene_names.clone(),
        organs: Some(bank.organs.clone()),
        expression: Some(
            match bank.expression_kind {
                ExpressionKind::Counts => "counts",
                ExpressionKind::Normalized => "normalized",
            }
            .into(),
        ),
        provenance: bank.provenance.clone(),
        records: bank
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ManifestRecord {
                id: Some(r.id),
                slide_id: r.slide_id.clone(),
                patient_id: Some(r.patient_id.clone()),
                organ: r.organ.clone(),
                x: r.spot_xy.0,
                y: r.spot_xy.1,
                row: i as u64,
            })
            .collect(),
    }
}

/// Writes `bank.json`, `emb.bin` and `expr.bin` into `dir`.
pub fn save_bank(bank: &PairedSpotBank, dir: &Path) -> Result<PathBuf> {
    bank.validate()?;
    create_dir(dir)?;
    let n = bank.len();
    write_tensor(&dir.join(EMBEDDINGS), &Tensor::new(n, bank.m, bank.embeddings.clone()))?;
    write_tensor(&dir.join(EXPRESSION), &Tensor::new(n, bank.g, bank.expression.clone()))?;
    let path = dir.join(MANIFEST);
    write_json(&path, &manifest_of(bank))?;
    Ok(path)
}
