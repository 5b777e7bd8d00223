//! Lloyd's K-means with k-means++ seeding, the fine (per organ) / coarse
//! (over fine centroids) expert construction, and the record partition that
//! defines each expert's training data.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::corpus::PairedSpotBank;
use crate::linalg::{argmin, squared_distance, Matrix};
use crate::rng::{derive_indexed, derive_seed, rng_from, Rng};
use crate::{Error, Result};

/// Default cluster count for both clustering rounds.
pub const DEFAULT_K: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansParams {
    pub max_iter: u32,
    /// Convergence threshold on the relative centroid shift
    /// `‖C_new − C_old‖_F / ‖C_old‖_F`.
    pub tol: f64,
    /// Seeded runs per clustering in [`kmeans_best`]; the lowest WCSS wins.
    pub restarts: u32,
}

impl Default for KmeansParams {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    /// `k × m`.
    pub centroids: Matrix,
    pub assignments: Vec<u32>,
    /// `Σ ‖point − assigned centroid‖²` for the returned assignment.
    pub wcss: f64,
    pub iterations: u32,
    /// WCSS after every assignment step; the last entry equals `wcss`.
    pub wcss_trace: Vec<f64>,
}

/// K-means over the rows of `points`.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, params: &KmeansParams) -> Result<KmeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    if !points.is_finite() {
        return Err(Error::NonFiniteValue("k-means input".into()));
    }
    let mut rng = rng_from(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assign = vec![0u32; n];
    let mut dists = vec![0.0f64; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut previous: Option<Vec<u32>> = None;

    while iterations < params.max_iter {
        assign_nearest(points, &centroids, &mut assign, &mut dists);
        repair_empty(points, &mut centroids, &mut assign, &mut dists);
        trace.push(dists.iter().sum());
        iterations += 1;

        let stable = previous.as_deref() == Some(&assign[..]);
        let updated = cluster_means(points, &assign, &centroids);
        let shift = relative_shift(&centroids, &updated);
        centroids = updated;
        if stable || shift < params.tol {
            break;
        }
        previous = Some(assign.clone());
    }

    assign_nearest(points, &centroids, &mut assign, &mut dists);
    repair_empty(points, &mut centroids, &mut assign, &mut dists);
    let wcss = dists.iter().sum();
    trace.push(wcss);
    Ok(KmeansResult {
        centroids,
        assignments: assign,
        wcss,
        iterations,
        wcss_trace: trace,
    })
}

fn plus_plus_init(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen.push(first);
    let mut best: Vec<f64> = (0..n).map(|i| squared_distance(points.row(i), points.row(first))).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in best.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the final partial sum.
            pick.unwrap_or_else(|| best.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // Every point coincides with a chosen center.
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            let d = squared_distance(points.row(i), points.row(next));
            if d < *b {
                *b = d;
            }
        }
    }
    points.select_rows(&chosen)
}

/// Nearest centroid per point (lowest index on ties) and its squared distance.
fn assign_nearest(points: &Matrix, centroids: &Matrix, assign: &mut [u32], dists: &mut [f64]) {
    for i in 0..points.rows() {
        let (c, d) = nearest(points.row(i), centroids);
        assign[i] = c as u32;
        dists[i] = d;
    }
}

/// Index and squared distance of the nearest row of `centroids`.
pub fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = squared_distance(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Moves every empty centroid onto the point farthest from its own centroid,
/// taken from a cluster that keeps at least one member.
fn repair_empty(points: &Matrix, centroids: &mut Matrix, assign: &mut [u32], dists: &mut [f64]) {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    for &a in assign.iter() {
        sizes[a as usize] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut victim: Option<usize> = None;
        for i in 0..points.rows() {
            if sizes[assign[i] as usize] < 2 {
                continue;
            }
            match victim {
                Some(v) if dists[i] <= dists[v] => {}
                _ => victim = Some(i),
            }
        }
        let Some(v) = victim else { break };
        sizes[assign[v] as usize] -= 1;
        sizes[empty] = 1;
        assign[v] = empty as u32;
        dists[v] = 0.0;
        centroids.row_mut(empty).copy_from_slice(points.row(v));
    }
}

/// Per-cluster means. Clusters without members keep their previous centroid.
fn cluster_means(points: &Matrix, assign: &[u32], previous: &Matrix) -> Matrix {
    let k = previous.rows();
    let m = points.cols();
    let mut sums = Matrix::zeros(k, m);
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a as usize] += 1;
        for (s, &x) in sums.row_mut(a as usize).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        } else {
            let inv = counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v /= inv);
        }
    }
    sums
}

fn relative_shift(old: &Matrix, new: &Matrix) -> f64 {
    let moved: f64 = squared_distance(old.as_slice(), new.as_slice());
    let scale: f64 = old.as_slice().iter().map(|v| v * v).sum();
    if scale == 0.0 {
        return if moved == 0.0 { 0.0 } else { f64::INFINITY };
    }
    libm::sqrt(moved / scale)
}

/// `Σ ‖point − centroid[assignment]‖²`, recomputed from scratch.
pub fn wcss_of(points: &Matrix, centroids: &Matrix, assignments: &[u32]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(points.row(i), centroids.row(a as usize)))
        .sum()
}

/// Embeddings of one organ, as f64 rows, plus the bank rows they came from.
#[derive(Debug, Clone)]
pub struct OrganPoints {
    pub organ: String,
    pub rows: Vec<usize>,
    pub points: Matrix,
}

/// Splits a bank's patch embeddings by organ (sorted organ order).
pub fn organ_points(bank: &PairedSpotBank) -> Vec<OrganPoints> {
    bank.indices_by_organ()
        .into_iter()
        .map(|(organ, rows)| {
            let mut data = Vec::with_capacity(rows.len() * bank.m);
            for &r in &rows {
                data.extend(bank.embedding(r).iter().map(|&v| f64::from(v)));
            }
            let points = Matrix::from_vec(rows.len(), bank.m, data).expect("row-major buffer");
            OrganPoints { organ, rows, points }
        })
        .collect()
}

/// Fine clustering result for one organ.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganClusters {
    pub organ: String,
    pub result: KmeansResult,
    /// Whether `k1` had to be lowered to the organ's point count.
    pub clamped: bool,
}

/// Seed used for the fine clustering of `organ`.
pub fn organ_seed(seed: u64, organ: &str) -> u64 {
    derive_seed(seed, &format!("fine/{organ}"))
}

/// K-means on one organ's points, clamping `k1` to the number of points.
pub fn fine_cluster_organ(
    organ: &OrganPoints,
    k1: usize,
    seed: u64,
    params: &KmeansParams,
) -> Result<OrganClusters> {
    let n = organ.points.rows();
    let k = k1.min(n);
    let clamped = k < k1;
    if clamped {
        log::warn!("organ {} has {n} points; fine k lowered from {k1} to {k}", organ.organ);
    }
    let result = kmeans_best(&organ.points, k, organ_seed(seed, &organ.organ), params)?;
    Ok(OrganClusters {
        organ: organ.organ.clone(),
        result,
        clamped,
    })
}

/// Independent K-means per organ on the patch embeddings.
pub fn fine_cluster(bank: &PairedSpotBank, k1: usize, seed: u64, params: &KmeansParams) -> Result<Vec<OrganClusters>> {
    organ_points(bank)
        .iter()
        .map(|o| fine_cluster_organ(o, k1, seed, params))
        .collect()
}

/// Fine centroids per organ, coarse centroids, and the fine → coarse map.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `(organ, k1_organ × m)` in sorted organ order.
    pub fine_centroids: Vec<(String, Matrix)>,
    /// `k2 × m`; row `c` is the condition of expert `c`.
    pub coarse_centroids: Matrix,
    /// Coarse id of every fine centroid, indexed in stacked (organ-major) order.
    pub fine_to_coarse: Vec<u32>,
    /// Requested fine cluster count per organ.
    pub k1: u32,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.coarse_centroids.cols()
    }

    pub fn n_fine(&self) -> usize {
        self.fine_centroids.iter().map(|(_, c)| c.rows()).sum()
    }

    pub fn n_experts(&self) -> usize {
        self.coarse_centroids.rows()
    }

    /// All fine centroids stacked organ-major: the set `S`.
    pub fn stacked_fine(&self) -> Matrix {
        stack(&self.fine_centroids)
    }

    /// Totality of the map, density of coarse ids, and dimension agreement.
    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        for (organ, c) in &self.fine_centroids {
            if c.cols() != m {
                return Err(Error::DimMismatch {
                    expected: m,
                    actual: c.cols(),
                    context: "fine centroid dimension",
                });
            }
            if c.rows() == 0 {
                return Err(Error::InvalidArgument(format!("organ {organ} has no fine centroids")));
            }
        }
        if self.fine_to_coarse.len() != self.n_fine() {
            return Err(Error::DimMismatch {
                expected: self.n_fine(),
                actual: self.fine_to_coarse.len(),
                context: "fine_to_coarse length",
            });
        }
        let k2 = self.n_experts();
        let mut used = vec![false; k2];
        for &c in &self.fine_to_coarse {
            let slot = used
                .get_mut(c as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("coarse id {c} out of range {k2}")))?;
            *slot = true;
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(Error::InvalidArgument(format!("coarse id {c} has no fine centroid")));
        }
        Ok(())
    }
}

fn stack(parts: &[(String, Matrix)]) -> Matrix {
    let cols = parts.first().map_or(0, |(_, c)| c.cols());
    Matrix::from_rows(cols, parts.iter().flat_map(|(_, c)| c.iter_rows())).expect("uniform centroid dims")
}

fn fine_parts(fine: &[OrganClusters]) -> Vec<(String, Matrix)> {
    fine.iter()
        .map(|o| (o.organ.clone(), o.result.centroids.clone()))
        .collect()
}

/// K-means over the fine centroids; each fine centroid maps to its nearest coarse centroid.
///
/// Coarse clusters left without any fine centroid (possible only with duplicate
/// fine centroids) are dropped and the remaining ids renumbered densely.
pub fn coarse_cluster(fine: &[OrganClusters], k2: usize, seed: u64, params: &KmeansParams) -> Result<ClusterModel> {
    let parts = fine_parts(fine);
    let s = stack(&parts);
    if s.rows() < k2 {
        return Err(Error::TooFewPoints {
            needed: k2,
            got: s.rows(),
        });
    }
    let res = kmeans_best(&s, k2, derive_seed(seed, "coarse"), params)?;
    let mut remap = vec![u32::MAX; k2];
    let mut kept = Vec::new();
    for &a in &res.assignments {
        if remap[a as usize] == u32::MAX {
            remap[a as usize] = 0;
        }
    }
    for (c, slot) in remap.iter_mut().enumerate() {
        if *slot != u32::MAX {
            *slot = kept.len() as u32;
            kept.push(c);
        }
    }
    if kept.len() < k2 {
        log::warn!("{} empty coarse clusters dropped", k2 - kept.len());
    }
    let model = ClusterModel {
        fine_centroids: parts,
        coarse_centroids: res.centroids.select_rows(&kept),
        fine_to_coarse: res.assignments.iter().map(|&a| remap[a as usize]).collect(),
        k1: fine.iter().map(|o| o.result.centroids.rows() as u32).max().unwrap_or(0),
    };
    model.validate()?;
    Ok(model)
}

/// One-step ablation: every fine centroid is its own expert.
pub fn one_step_model(fine: &[OrganClusters]) -> ClusterModel {
    let parts = fine_parts(fine);
    let s = stack(&parts);
    ClusterModel {
        fine_to_coarse: (0..s.rows() as u32).collect(),
        coarse_centroids: s,
        fine_centroids: parts,
        k1: fine.iter().map(|o| o.result.centroids.rows() as u32).max().unwrap_or(0),
    }
}

/// Single-expert ablation: one expert whose condition is the mean fine centroid.
pub fn single_expert_model(fine: &[OrganClusters]) -> ClusterModel {
    let parts = fine_parts(fine);
    let s = stack(&parts);
    let mut mean = vec![0.0; s.cols()];
    for row in s.iter_rows() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= s.rows() as f64);
    ClusterModel {
        fine_to_coarse: vec![0; s.rows()],
        coarse_centroids: Matrix::from_vec(1, mean.len(), mean).expect("single row"),
        fine_centroids: parts,
        k1: fine.iter().map(|o| o.result.centroids.rows() as u32).max().unwrap_or(0),
    }
}

/// The training records of every expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPartition {
    /// Nearest fine centroid of each record (stacked index).
    pub fine_of: Vec<u32>,
    /// Coarse id of each record.
    pub coarse_of: Vec<u32>,
    /// Record indices per coarse id, ascending.
    pub members: Vec<Vec<usize>>,
}

impl ExpertPartition {
    pub fn len(&self) -> usize {
        self.coarse_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coarse_of.is_empty()
    }
}

/// Routes each record to its nearest fine centroid over all organs, then to
/// that centroid's coarse cluster.
pub fn assign_expert_data(bank: &PairedSpotBank, model: &ClusterModel) -> Result<ExpertPartition> {
    if bank.m != model.dim() {
        return Err(Error::DimMismatch {
            expected: model.dim(),
            actual: bank.m,
            context: "bank embedding vs centroid dimension",
        });
    }
    let s = model.stacked_fine();
    let mut fine_of = Vec::with_capacity(bank.len());
    let mut coarse_of = Vec::with_capacity(bank.len());
    let mut members = vec![Vec::new(); model.n_experts()];
    let mut h = vec![0.0; bank.m];
    for i in 0..bank.len() {
        for (dst, &v) in h.iter_mut().zip(bank.embedding(i)) {
            *dst = f64::from(v);
        }
        let (f, _) = nearest(&h, &s);
        let c = model.fine_to_coarse[f];
        fine_of.push(f as u32);
        coarse_of.push(c);
        members[c as usize].push(i);
    }
    Ok(ExpertPartition {
        fine_of,
        coarse_of,
        members,
    })
}

/// WCSS per `k`, normalized by the WCSS at `k = 1`. Each entry keeps the best
/// of `params.restarts` seeded runs.
pub fn wcss_curve(points: &Matrix, k_values: &[u32], seed: u64, params: &KmeansParams) -> Result<Vec<(u32, f64)>> {
    if k_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("k values must be sorted ascending".into()));
    }
    if let Some(&max) = k_values.last() {
        if max as usize > points.rows() {
            return Err(Error::TooFewPoints {
                needed: max as usize,
                got: points.rows(),
            });
        }
    }
    let base = kmeans(points, 1, seed, params)?.wcss;
    let mut out = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let best = kmeans_best(points, k as usize, derive_indexed(seed, "wcss", u64::from(k)), params)?.wcss;
        let normalized = if k == 1 {
            1.0
        } else if base > 0.0 {
            best / base
        } else {
            0.0
        };
        out.push((k, normalized));
    }
    Ok(out)
}

/// Best of `params.restarts` K-means runs by WCSS; earlier runs win ties.
/// A single restart is exactly [`kmeans`] with `seed`.
pub fn kmeans_best(points: &Matrix, k: usize, seed: u64, params: &KmeansParams) -> Result<KmeansResult> {
    let mut best = kmeans(points, k, seed, params)?;
    for r in 1..params.restarts {
        let res = kmeans(points, k, derive_indexed(seed, "restart", u64::from(r)), params)?;
        if res.wcss < best.wcss {
            best = res;
        }
    }
    Ok(best)
}

/// Brute-force nearest index for each row; used by tests as an oracle.
#[doc(hidden)]
pub fn nearest_bruteforce(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    points
        .iter_rows()
        .map(|p| {
            let d: Vec<f64> = centroids.iter_rows().map(|c| squared_distance(p, c)).collect();
            argmin(&d).unwrap()
        })
        .collect()
}
