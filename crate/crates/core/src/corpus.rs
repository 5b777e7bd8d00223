//! Paired embedding/expression banks and expression preprocessing.
//!
//! A bank stores one metadata record per spot plus two dense row-major `f32`
//! payloads: patch embeddings (`n × m`) and expression (`n × G`). Expression
//! is either raw counts (integral values) or log-normalized values.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use crate::rng::rng_from;
use crate::{Error, Result};

/// Standard count-normalization target.
pub const DEFAULT_TARGET_SUM: f64 = 10_000.0;
/// Highly variable genes kept per sample before the union.
pub const DEFAULT_TOP_PER_SAMPLE: u32 = 50;

/// What the expression payload of a bank holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpressionKind {
    /// Raw integer UMI counts stored as `f32`.
    Counts,
    /// `ln(1 + count · target / total)` values.
    Normalized,
}

/// Metadata of one spot. The vectors live in the owning bank.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotRecord {
    /// Stable identifier, preserved through subsampling and restriction.
    pub id: u64,
    pub slide_id: String,
    /// Patient the slide belongs to; equals the slide id when unknown.
    pub patient_id: String,
    pub organ: String,
    pub spot_xy: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSpotBank {
    pub records: Vec<SpotRecord>,
    /// Embedding dimension.
    pub m: usize,
    /// Gene count.
    pub g: usize,
    pub gene_names: Vec<String>,
    /// Closed organ vocabulary. Every record organ must appear here.
    pub organs: Vec<String>,
    /// Free-form encoder / patching description.
    pub provenance: String,
    pub expression_kind: ExpressionKind,
    /// `n × m`, row-major.
    pub embeddings: Vec<f32>,
    /// `n × G`, row-major.
    pub expression: Vec<f32>,
}

impl PairedSpotBank {
    /// Assembles and validates a bank.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        records: Vec<SpotRecord>,
        m: usize,
        g: usize,
        gene_names: Vec<String>,
        organs: Vec<String>,
        provenance: String,
        expression_kind: ExpressionKind,
        embeddings: Vec<f32>,
        expression: Vec<f32>,
    ) -> Result<Self> {
        let bank = Self {
            records,
            m,
            g,
            gene_names,
            organs,
            provenance,
            expression_kind,
            embeddings,
            expression,
        };
        bank.validate()?;
        Ok(bank)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.records.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    #[inline]
    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.m..(i + 1) * self.m]
    }

    #[inline]
    pub fn expression_row(&self, i: usize) -> &[f32] {
        &self.expression[i * self.g..(i + 1) * self.g]
    }

    pub fn embedding_f64(&self, i: usize) -> Vec<f64> {
        self.embedding(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn expression_f64(&self, i: usize) -> Vec<f64> {
        self.expression_row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Checks every structural and numeric invariant of the bank.
    pub fn validate(&self) -> Result<()> {
        let n = self.records.len();
        if n == 0 {
            return Err(Error::InvalidBank("bank has no records".into()));
        }
        if self.embeddings.len() != n * self.m {
            return Err(Error::DimMismatch {
                expected: n * self.m,
                actual: self.embeddings.len(),
                context: "embedding payload",
            });
        }
        if self.expression.len() != n * self.g {
            return Err(Error::DimMismatch {
                expected: n * self.g,
                actual: self.expression.len(),
                context: "expression payload",
            });
        }
        if self.gene_names.len() != self.g {
            return Err(Error::DimMismatch {
                expected: self.g,
                actual: self.gene_names.len(),
                context: "gene names",
            });
        }
        let mut seen = BTreeSet::new();
        for name in &self.gene_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidBank(format!("duplicate gene name {name:?}")));
            }
        }
        let vocab: BTreeSet<&str> = self.organs.iter().map(String::as_str).collect();
        let mut slide_organ: BTreeMap<&str, &str> = BTreeMap::new();
        for r in &self.records {
            if !vocab.contains(r.organ.as_str()) {
                return Err(Error::InvalidBank(format!(
                    "organ {:?} of slide {:?} is not in the organ vocabulary",
                    r.organ, r.slide_id
                )));
            }
            match slide_organ.insert(r.slide_id.as_str(), r.organ.as_str()) {
                Some(prev) if prev != r.organ => {
                    return Err(Error::InvalidBank(format!(
                        "slide {:?} spans organs {prev:?} and {:?}",
                        r.slide_id, r.organ
                    )))
                }
                _ => {}
            }
        }
        if let Some(row) = (0..n).find(|&i| self.embedding(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteValue(format!("embedding of row {row}")));
        }
        for (k, v) in self.expression.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(format!("expression of row {}", k / self.g)));
            }
            if *v < 0.0 {
                return Err(Error::InvalidBank(format!("negative expression in row {}", k / self.g)));
            }
            if self.expression_kind == ExpressionKind::Counts && libm::truncf(*v) != *v {
                return Err(Error::InvalidBank(format!("non-integral count in row {}", k / self.g)));
            }
        }
        Ok(())
    }

    /// Sorted organ names that actually occur in the records.
    pub fn present_organs(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.organ.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Record indices grouped by organ, organs in sorted order, indices ascending.
    pub fn indices_by_organ(&self) -> BTreeMap<String, Vec<usize>> {
        group_indices(&self.records, |r| r.organ.as_str())
    }

    /// Record indices grouped by slide, slides in sorted order.
    pub fn indices_by_slide(&self) -> BTreeMap<String, Vec<usize>> {
        group_indices(&self.records, |r| r.slide_id.as_str())
    }

    /// Copies the given rows (in order) into a new bank with the same header.
    pub fn select(&self, rows: &[usize]) -> PairedSpotBank {
        let mut embeddings = Vec::with_capacity(rows.len() * self.m);
        let mut expression = Vec::with_capacity(rows.len() * self.g);
        let mut records = Vec::with_capacity(rows.len());
        for &i in rows {
            records.push(self.records[i].clone());
            embeddings.extend_from_slice(self.embedding(i));
            expression.extend_from_slice(self.expression_row(i));
        }
        PairedSpotBank {
            records,
            m: self.m,
            g: self.g,
            gene_names: self.gene_names.clone(),
            organs: self.organs.clone(),
            provenance: self.provenance.clone(),
            expression_kind: self.expression_kind,
            embeddings,
            expression,
        }
    }
}

fn group_indices<'a>(
    records: &'a [SpotRecord],
    key: impl Fn(&'a SpotRecord) -> &'a str,
) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let k = key(r);
        match out.get_mut(k) {
            Some(v) => v.push(i),
            None => {
                out.insert(String::from(k), alloc::vec![i]);
            }
        }
    }
    out
}

/// Sorted, duplicate-free gene indices chosen by [`select_hvg`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HvgSelection {
    pub gene_indices: Vec<u32>,
    pub per_sample_top: u32,
}

impl HvgSelection {
    pub fn new(mut gene_indices: Vec<u32>, per_sample_top: u32) -> Self {
        gene_indices.sort_unstable();
        gene_indices.dedup();
        Self {
            gene_indices,
            per_sample_top,
        }
    }

    pub fn all(g: usize) -> Self {
        Self::new((0..g as u32).collect(), g as u32)
    }
}

/// Total-count normalization followed by `ln(1 + x)`.
pub fn normalize_expression(counts: &[u32], target_sum: f64) -> Result<Vec<f32>> {
    if !(target_sum > 0.0 && target_sum.is_finite()) {
        return Err(Error::InvalidArgument(format!("target_sum must be positive, got {target_sum}")));
    }
    let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    if total == 0 {
        return Err(Error::EmptySpot);
    }
    let scale = target_sum / total as f64;
    Ok(counts
        .iter()
        .map(|&c| libm::log1p(f64::from(c) * scale) as f32)
        .collect())
}

/// Outcome of [`normalize_bank`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub bank: PairedSpotBank,
    /// Number of all-zero spots removed.
    pub dropped_spots: usize,
}

/// Normalizes every spot of a raw-count bank. All-zero spots are dropped and counted.
pub fn normalize_bank(bank: &PairedSpotBank, target_sum: f64) -> Result<Normalized> {
    if bank.expression_kind != ExpressionKind::Counts {
        return Err(Error::InvalidArgument("bank is already normalized".into()));
    }
    let mut keep = Vec::with_capacity(bank.len());
    let mut expression = Vec::with_capacity(bank.expression.len());
    let mut counts = alloc::vec![0u32; bank.g];
    for i in 0..bank.len() {
        for (c, &v) in counts.iter_mut().zip(bank.expression_row(i)) {
            *c = v as u32;
        }
        match normalize_expression(&counts, target_sum) {
            Ok(row) => {
                keep.push(i);
                expression.extend_from_slice(&row);
            }
            Err(Error::EmptySpot) => {}
            Err(e) => return Err(e),
        }
    }
    let dropped_spots = bank.len() - keep.len();
    if dropped_spots > 0 {
        log::warn!("dropped {dropped_spots} spots with zero total count");
    }
    if keep.is_empty() {
        return Err(Error::InvalidBank("every spot has zero total count".into()));
    }
    let mut out = bank.select(&keep);
    out.expression = expression;
    out.expression_kind = ExpressionKind::Normalized;
    Ok(Normalized {
        bank: out,
        dropped_spots,
    })
}

/// Per-sample top-variance genes, unioned across samples.
///
/// Genes are ranked by the population variance of normalized expression across
/// a sample's spots; ties go to the lower gene index.
pub fn select_hvg(banks: &[PairedSpotBank], top_per_sample: u32) -> Result<HvgSelection> {
    let first = banks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples given".into()))?;
    let mut union = BTreeSet::new();
    for bank in banks {
        if bank.gene_names != first.gene_names {
            return Err(Error::GeneVocabularyMismatch);
        }
        ensure_normalized(bank)?;
        let rows: Vec<usize> = (0..bank.len()).collect();
        union.extend(top_variance_genes(bank, &rows, top_per_sample));
    }
    Ok(HvgSelection::new(union.into_iter().collect(), top_per_sample))
}

/// [`select_hvg`] treating each slide of one bank as a sample.
pub fn select_hvg_by_slide(bank: &PairedSpotBank, top_per_sample: u32) -> Result<HvgSelection> {
    ensure_normalized(bank)?;
    let mut union = BTreeSet::new();
    for rows in bank.indices_by_slide().values() {
        union.extend(top_variance_genes(bank, rows, top_per_sample));
    }
    Ok(HvgSelection::new(union.into_iter().collect(), top_per_sample))
}

fn ensure_normalized(bank: &PairedSpotBank) -> Result<()> {
    if bank.expression_kind != ExpressionKind::Normalized {
        return Err(Error::InvalidArgument("HVG selection needs normalized expression".into()));
    }
    Ok(())
}

/// Population variance of each gene over `rows`.
pub fn gene_variances(bank: &PairedSpotBank, rows: &[usize]) -> Vec<f64> {
    let g = bank.g;
    let n = rows.len() as f64;
    let mut mean = alloc::vec![0.0f64; g];
    for &i in rows {
        for (acc, &v) in mean.iter_mut().zip(bank.expression_row(i)) {
            *acc += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = alloc::vec![0.0f64; g];
    for &i in rows {
        for ((acc, &v), mu) in var.iter_mut().zip(bank.expression_row(i)).zip(&mean) {
            let d = f64::from(v) - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    var
}

fn top_variance_genes(bank: &PairedSpotBank, rows: &[usize], top: u32) -> Vec<u32> {
    if rows.is_empty() {
        return Vec::new();
    }
    let var = gene_variances(bank, rows);
    let mut order: Vec<u32> = (0..bank.g as u32).collect();
    // Descending variance, then ascending index.
    order.sort_by(|&a, &b| {
        var[b as usize]
            .partial_cmp(&var[a as usize])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(top as usize);
    order
}

/// Keeps only the selected gene columns, in selection order.
pub fn restrict_genes(bank: &PairedSpotBank, sel: &HvgSelection) -> Result<PairedSpotBank> {
    if let Some(&bad) = sel.gene_indices.iter().find(|&&i| i as usize >= bank.g) {
        return Err(Error::GeneIndexOutOfRange {
            index: bad,
            genes: bank.g,
        });
    }
    let cols: Vec<usize> = sel.gene_indices.iter().map(|&i| i as usize).collect();
    let mut expression = Vec::with_capacity(bank.len() * cols.len());
    for i in 0..bank.len() {
        let row = bank.expression_row(i);
        expression.extend(cols.iter().map(|&c| row[c]));
    }
    Ok(PairedSpotBank {
        records: bank.records.clone(),
        m: bank.m,
        g: cols.len(),
        gene_names: cols.iter().map(|&c| bank.gene_names[c].clone()).collect(),
        organs: bank.organs.clone(),
        provenance: bank.provenance.clone(),
        expression_kind: bank.expression_kind,
        embeddings: bank.embeddings.clone(),
        expression,
    })
}

/// Uniform sample without replacement of at most `n_per_organ` records per organ.
///
/// Organs are visited in sorted order from a single seeded stream; selected
/// records keep their original relative order.
pub fn subsample_per_organ(bank: &PairedSpotBank, n_per_organ: u64, seed: u64) -> Result<PairedSpotBank> {
    if n_per_organ == 0 {
        return Err(Error::InvalidArgument("n_per_organ must be positive".into()));
    }
    let mut rng = rng_from(seed);
    let mut rows = Vec::new();
    for idx in bank.indices_by_organ().values() {
        if (idx.len() as u64) <= n_per_organ {
            rows.extend_from_slice(idx);
        } else {
            let mut picked: Vec<usize> = index::sample(&mut rng, idx.len(), n_per_organ as usize)
                .into_iter()
                .map(|k| idx[k])
                .collect();
            picked.sort_unstable();
            rows.extend(picked);
        }
    }
    rows.sort_unstable();
    Ok(bank.select(&rows))
}
