//! Evaluation metrics and patient-level stratified splits.
//!
//! AUROC is computed from the Mann-Whitney rank statistic and the concordance
//! index with a Fenwick tree over risk ranks; both count ties as one half.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::linalg::Matrix;
use crate::rng::rng_from;
use crate::{Error, Result};

/// Binary AUROC of `scores` for the positive set; `None` unless both classes occur.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// 1-based ranks with tied values sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 2) as f64 / 2.0;
        for &i in &order[start..=end] {
            ranks[i] = avg;
        }
        start = end + 1;
    }
    ranks
}

/// One-vs-rest AUROC for each class; `None` for classes lacking positives or negatives.
pub fn auroc_per_class(scores: &Matrix, labels: &[u32]) -> Result<Vec<Option<f64>>> {
    if scores.rows() != labels.len() {
        return Err(Error::DimMismatch {
            expected: scores.rows(),
            actual: labels.len(),
            context: "scores vs labels",
        });
    }
    let k = scores.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::InvalidArgument(alloc::format!("label {bad} outside {k} classes")));
    }
    Ok((0..k)
        .map(|c| {
            let col: Vec<f64> = scores.iter_rows().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
            auroc_binary(&col, &pos)
        })
        .collect())
}

/// Macro average of the one-vs-rest AUROCs over classes that can be scored.
pub fn auroc_ovr_macro(scores: &Matrix, labels: &[u32]) -> Result<f64> {
    let per = auroc_per_class(scores, labels)?;
    let valid: Vec<f64> = per.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::NoValidClass);
    }
    let skipped = per.len() - valid.len();
    if skipped > 0 {
        log::warn!("{skipped} classes skipped in macro AUROC");
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Per-class F1 (0/0 := 0) for every class in `0..k`.
pub fn f1_per_class(preds: &[u32], labels: &[u32], k: usize) -> Vec<f64> {
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[l as usize] += 1;
        } else {
            if (p as usize) < k {
                fp[p as usize] += 1;
            }
            fn_[l as usize] += 1;
        }
    }
    (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / denom as f64
            }
        })
        .collect()
}

/// Unweighted mean F1 over the classes present in `labels`.
pub fn macro_f1(preds: &[u32], labels: &[u32], k: usize) -> f64 {
    let f1 = f1_per_class(preds, labels, k);
    let mut present = vec![false; k];
    for &l in labels {
        present[l as usize] = true;
    }
    let chosen: Vec<f64> = (0..k).filter(|&c| present[c]).map(|c| f1[c]).collect();
    if chosen.is_empty() {
        return 0.0;
    }
    chosen.iter().sum::<f64>() / chosen.len() as f64
}

/// Harrell's concordance index.
///
/// A pair is comparable when the earlier time carries an event. It is
/// concordant when the earlier subject has the higher risk; equal risks count
/// one half. Equal times are never comparable.
pub fn concordance_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: times.len().min(events.len()),
            context: "risks, times and events",
        });
    }
    // Dense ranks of risks for the Fenwick tree.
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank_of = |r: f64| sorted.partition_point(|&v| v.total_cmp(&r).is_lt());

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut tree = Fenwick::new(sorted.len());
    let mut inserted = 0u64;
    let mut doubled_concordant = 0u64;
    let mut comparable = 0u64;
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && times[by_time[end + 1]] == times[by_time[start]] {
            end += 1;
        }
        // Everyone inserted so far has a strictly later time.
        for &i in &by_time[start..=end] {
            if !events[i] {
                continue;
            }
            let r = rank_of(risks[i]);
            let lower = tree.prefix(r);
            let same = tree.prefix(r + 1) - lower;
            doubled_concordant += 2 * lower + same;
            comparable += inserted;
        }
        for &i in &by_time[start..=end] {
            tree.add(rank_of(risks[i]));
            inserted += 1;
        }
        start = end + 1;
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(doubled_concordant as f64 / (2 * comparable) as f64)
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Split proportions and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.10,
            test: 0.20,
            seed: 0,
        }
    }
}

/// A splitting unit (usually a patient) and its stratum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitUnit {
    pub id: String,
    pub stratum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Per-stratum seeded shuffle, then a proportional cut with largest-remainder rounding.
pub fn stratified_split(units: &[SplitUnit], spec: &SplitSpec) -> Result<Split> {
    if units.is_empty() {
        return Err(Error::InvalidArgument("nothing to split".into()));
    }
    let ratios = [spec.train, spec.val, spec.test];
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("split ratios must be non-negative and sum to 1".into()));
    }
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut seen = alloc::collections::BTreeSet::new();
    for u in units {
        if !seen.insert(u.id.as_str()) {
            return Err(Error::InvalidArgument(alloc::format!("unit {} listed twice", u.id)));
        }
        strata.entry(u.stratum.as_str()).or_default().push(u.id.as_str());
    }
    let mut rng = rng_from(spec.seed);
    let mut out = Split::default();
    for ids in strata.values_mut() {
        ids.shuffle(&mut rng);
        let sizes = largest_remainder(ids.len(), &ratios);
        let (train, rest) = ids.split_at(sizes[0]);
        let (val, test) = rest.split_at(sizes[1]);
        out.train.extend(train.iter().map(|s| String::from(*s)));
        out.val.extend(val.iter().map(|s| String::from(*s)));
        out.test.extend(test.iter().map(|s| String::from(*s)));
    }
    Ok(out)
}

/// Integer sizes summing to `n`, closest to `n·ratios`.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| libm::floor(q + 1e-9) as usize).collect();
    let mut left = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - sizes[a] as f64;
        let fb = quotas[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub c_index: Option<f64>,
    pub per_class_auc: Vec<Option<f64>>,
    pub per_class_f1: Vec<f64>,
    pub n: usize,
}

/// Classification report from class scores (`n × K`) and true labels.
pub fn classification_report(scores: &Matrix, labels: &[u32]) -> Result<EvalReport> {
    let k = scores.cols();
    let per_class_auc = auroc_per_class(scores, labels)?;
    let auc = auroc_ovr_macro(scores, labels)?;
    let preds: Vec<u32> = scores
        .iter_rows()
        .map(|r| crate::linalg::argmax(r).unwrap_or(0) as u32)
        .collect();
    Ok(EvalReport {
        auc: Some(auc),
        macro_f1: Some(macro_f1(&preds, labels, k)),
        c_index: None,
        per_class_auc,
        per_class_f1: f1_per_class(&preds, labels, k),
        n: labels.len(),
    })
}

/// Survival report from risks and observed outcomes.
pub fn survival_report(risks: &[f64], times: &[f64], events: &[bool]) -> Result<EvalReport> {
    Ok(EvalReport {
        c_index: Some(concordance_index(risks, times, events)?),
        n: risks.len(),
        ..EvalReport::default()
    })
}
