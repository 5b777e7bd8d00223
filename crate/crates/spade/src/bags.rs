//! Slide and patient bags built from an embedded bank plus a `labels.json`
//! sidecar mapping bag id to a class label or `{time, event}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spade_core::corpus::PairedSpotBank;
use spade_core::mil::{BagTarget, SlideBag};
use spade_core::Matrix;

use crate::error::{Result, SpadeError};
use crate::io::{read_json, write_json};

pub const LABELS: &str = "labels.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(u32),
    Survival { time: f64, event: bool },
}

impl From<Label> for BagTarget {
    fn from(l: Label) -> Self {
        match l {
            Label::Class(c) => BagTarget::Class(c),
            Label::Survival { time, event } => BagTarget::Survival { time, event },
        }
    }
}

pub type Labels = BTreeMap<String, Label>;

pub fn read_labels(path: &Path) -> Result<Labels> {
    let labels: Labels = read_json(path)?;
    for (id, l) in &labels {
        if let Label::Survival { time, .. } = l {
            if !(*time > 0.0 && time.is_finite()) {
                return Err(SpadeError::manifest(path, format!("{id}: survival time must be positive")));
            }
        }
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &Labels) -> Result<()> {
    write_json(path, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BagLevel {
    /// One bag per slide.
    #[default]
    Slide,
    /// All slides of a patient concatenated into one bag.
    Patient,
}

/// Record indices per bag id, in bank order within each bag. Patient bags
/// list their slides in slide-id order.
pub fn group_rows(bank: &PairedSpotBank, level: BagLevel) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (i, r) in bank.records.iter().enumerate() {
        let key = match level {
            BagLevel::Slide => &r.slide_id,
            BagLevel::Patient => &r.patient_id,
        };
        groups
            .entry(key.clone())
            .or_default()
            .entry(r.slide_id.as_str())
            .or_default()
            .push(i);
    }
    groups
        .into_iter()
        .map(|(id, slides)| (id, slides.into_values().flatten().collect()))
        .collect()
}

pub fn bag_from_rows(bank: &PairedSpotBank, id: &str, rows: &[usize], target: BagTarget) -> SlideBag {
    let data = rows.iter().flat_map(|&r| bank.embedding(r).iter().map(|&v| f64::from(v))).collect();
    SlideBag {
        id: id.to_owned(),
        instances: Matrix::from_vec(rows.len(), bank.m, data).expect("bag shape"),
        coords: rows.iter().map(|&r| bank.records[r].spot_xy).collect(),
        target,
    }
}

/// One bag per labeled id. Ids without a label are skipped and counted.
pub fn build_bags(bank: &PairedSpotBank, labels: &Labels, level: BagLevel) -> (Vec<SlideBag>, usize) {
    let mut skipped = 0;
    let mut bags = Vec::new();
    for (id, rows) in group_rows(bank, level) {
        match labels.get(&id) {
            Some(&l) => bags.push(bag_from_rows(bank, &id, &rows, l.into())),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} bags have no label and were skipped");
    }
    (bags, skipped)
}
