//! Expert routing: per-patch weights over experts from the distances between
//! the patch embedding and each expert's centroid, and the weighted sum of the
//! experts' joint-space image embeddings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::PairedSpotBank;
use crate::experts::{embed_patch, ExpertModel};
use crate::linalg::{argmin, axpy, squared_distance, Matrix};
use crate::{Error, Result};

/// Default floor applied to squared distances before inversion.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingVariant {
    /// All weight on the nearest centroid.
    Hard,
    /// Equal weight on every expert.
    Uniform,
    /// Weight proportional to the inverse squared distance.
    InverseDistance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingScheme {
    pub variant: RoutingVariant,
    pub epsilon: f64,
}

impl RoutingScheme {
    pub fn new(variant: RoutingVariant) -> Self {
        Self {
            variant,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Routing weights of `h` over the rows of `centroids`.
pub fn route_weights(h: &[f64], centroids: &Matrix, scheme: &RoutingScheme) -> Result<Vec<f64>> {
    if centroids.rows() == 0 {
        return Err(Error::InvalidArgument("no experts to route to".into()));
    }
    if h.len() != centroids.cols() {
        return Err(Error::DimMismatch {
            expected: centroids.cols(),
            actual: h.len(),
            context: "routing input",
        });
    }
    let dists: Vec<f64> = centroids.iter_rows().map(|c| squared_distance(h, c)).collect();
    Ok(weights_from_distances(&dists, scheme))
}

/// Routing weights from precomputed squared distances.
pub fn weights_from_distances(dists: &[f64], scheme: &RoutingScheme) -> Vec<f64> {
    let k = dists.len();
    match scheme.variant {
        RoutingVariant::Hard => {
            let mut w = vec![0.0; k];
            if let Some(i) = argmin(dists) {
                w[i] = 1.0;
            }
            w
        }
        RoutingVariant::Uniform => vec![1.0 / k as f64; k],
        RoutingVariant::InverseDistance => {
            let inv: Vec<f64> = dists.iter().map(|&d| 1.0 / d.max(scheme.epsilon)).collect();
            let total: f64 = inv.iter().sum();
            inv.iter().map(|v| v / total).collect()
        }
    }
}

/// The set of experts plus the routing scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeEncoder {
    experts: Vec<ExpertModel>,
    centroids: Matrix,
    pub scheme: RoutingScheme,
}

impl MoeEncoder {
    /// Orders experts by coarse id, which must be exactly `0..n`.
    pub fn new(mut experts: Vec<ExpertModel>, scheme: RoutingScheme) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one expert".into()));
        }
        if !(scheme.epsilon > 0.0) {
            return Err(Error::InvalidArgument("routing epsilon must be positive".into()));
        }
        experts.sort_by_key(|e| e.coarse_id);
        for (i, e) in experts.iter().enumerate() {
            if e.coarse_id as usize != i {
                return Err(Error::InvalidArgument(format!(
                    "expert coarse ids must be dense and unique; position {i} holds {}",
                    e.coarse_id
                )));
            }
        }
        let dims = experts[0].dims();
        if let Some(bad) = experts.iter().find(|e| {
            let d = e.dims();
            d.m != dims.m || d.d != dims.d || e.centroid.len() != dims.m
        }) {
            return Err(Error::DimMismatch {
                expected: dims.m,
                actual: bad.dims().m,
                context: "experts must share embedding and joint dimensions",
            });
        }
        let centroids = Matrix::from_rows(dims.m, experts.iter().map(|e| &e.centroid[..]))?;
        Ok(Self {
            experts,
            centroids,
            scheme,
        })
    }

    pub fn experts(&self) -> &[ExpertModel] {
        &self.experts
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn input_dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.experts[0].dims().d
    }

    pub fn weights(&self, h: &[f64]) -> Result<Vec<f64>> {
        route_weights(h, &self.centroids, &self.scheme)
    }

    /// Routed embedding and the weights used.
    pub fn embed_with_weights(&self, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.weights(h)?;
        let mut out = vec![0.0; self.output_dim()];
        for (expert, &wc) in self.experts.iter().zip(&w) {
            if wc == 0.0 {
                continue;
            }
            axpy(wc, &embed_patch(expert, h)?, &mut out);
        }
        Ok((out, w))
    }
}

/// `Σ_c f(h|c)·p(c|h)`, not re-normalized.
pub fn moe_embed(encoder: &MoeEncoder, h: &[f64]) -> Result<Vec<f64>> {
    Ok(encoder.embed_with_weights(h)?.0)
}

/// Routed embeddings for every record and the per-record routing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedBank {
    /// `n × d`.
    pub embeddings: Matrix,
    /// `n × |C|`.
    pub weights: Matrix,
}

/// Embeds the given patch embeddings (rows of `patches`, `n × m`).
pub fn embed_rows(encoder: &MoeEncoder, patches: &Matrix) -> Result<EmbeddedBank> {
    if patches.cols() != encoder.input_dim() && patches.rows() > 0 {
        return Err(Error::DimMismatch {
            expected: encoder.input_dim(),
            actual: patches.cols(),
            context: "patch embedding dimension",
        });
    }
    let mut embeddings = Matrix::zeros(patches.rows(), encoder.output_dim());
    let mut weights = Matrix::zeros(patches.rows(), encoder.experts().len());
    for (i, h) in patches.iter_rows().enumerate() {
        let (e, w) = encoder.embed_with_weights(h)?;
        embeddings.row_mut(i).copy_from_slice(&e);
        weights.row_mut(i).copy_from_slice(&w);
    }
    Ok(EmbeddedBank { embeddings, weights })
}

/// [`embed_rows`] over every record of a bank.
pub fn embed_bank(encoder: &MoeEncoder, bank: &PairedSpotBank) -> Result<EmbeddedBank> {
    if bank.m != encoder.input_dim() {
        return Err(Error::DimMismatch {
            expected: encoder.input_dim(),
            actual: bank.m,
            context: "bank embedding dimension",
        });
    }
    let data = bank.embeddings.iter().map(|&v| f64::from(v)).collect();
    embed_rows(encoder, &Matrix::from_vec(bank.len(), bank.m, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{ExpertDims, ProjectionHead};
    use crate::rng::rng_from;

    fn centroids() -> Matrix {
        Matrix::from_vec(4, 2, vec![0.0, 0.0, 10.0, 0.0, 3.0, 3.0, -5.0, 5.0]).unwrap()
    }

    #[test]
    fn hard_picks_nearest() {
        let w = route_weights(&[3.2, 2.9], &centroids(), &RoutingScheme::new(RoutingVariant::Hard)).unwrap();
        assert_eq!(w, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn uniform_is_flat() {
        let w = route_weights(&[1.0, 1.0], &centroids(), &RoutingScheme::new(RoutingVariant::Uniform)).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn inverse_distance_closed_form() {
        let w = weights_from_distances(&[1.0, 2.0], &RoutingScheme::new(RoutingVariant::InverseDistance));
        assert_eq!(w, vec![2.0 / 3.0, 1.0 / 3.0]);
        // Exact hit saturates at the floor.
        let w = weights_from_distances(&[0.0, 1.0, 1.0], &RoutingScheme::new(RoutingVariant::InverseDistance));
        assert!(w[0] > 1.0 - 1e-11);
    }

    /// Expert whose image head maps everything onto basis vector `axis` of a 2-d joint space.
    fn constant_expert(axis: usize, coarse_id: u32, centroid: Vec<f64>) -> ExpertModel {
        let mut head = ProjectionHead::zeros(2, 1, 2);
        head.layer1.bias[0] = 1.0;
        head.layer2.weight.set(0, axis, 1.0);
        ExpertModel {
            image_head: head,
            expr_head: ProjectionHead::zeros(3, 1, 2),
            tau: 1.0,
            coarse_id,
            centroid,
        }
    }

    #[test]
    fn moe_combination_laws() {
        let e0 = constant_expert(0, 0, vec![0.0, 0.0]);
        let e1 = constant_expert(1, 1, vec![4.0, 0.0]);
        let uniform = MoeEncoder::new(vec![e1.clone(), e0.clone()], RoutingScheme::new(RoutingVariant::Uniform)).unwrap();
        let out = moe_embed(&uniform, &[1.0, 1.0]).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12 && (out[1] - 0.5).abs() < 1e-12);
        assert!((crate::linalg::norm(&out) - libm::sqrt(2.0) / 2.0).abs() < 1e-12);

        let hard = MoeEncoder::new(vec![e0.clone(), e1.clone()], RoutingScheme::new(RoutingVariant::Hard)).unwrap();
        assert_eq!(moe_embed(&hard, &[3.5, 0.0]).unwrap(), embed_patch(&e1, &[3.5, 0.0]).unwrap());

        for variant in [RoutingVariant::Hard, RoutingVariant::Uniform, RoutingVariant::InverseDistance] {
            let single = MoeEncoder::new(vec![e0.clone()], RoutingScheme::new(variant)).unwrap();
            assert_eq!(moe_embed(&single, &[2.0, 1.0]).unwrap(), embed_patch(&e0, &[2.0, 1.0]).unwrap());
        }
    }

    #[test]
    fn encoder_rejects_gapped_ids() {
        let e0 = constant_expert(0, 0, vec![0.0, 0.0]);
        let e2 = constant_expert(1, 2, vec![1.0, 0.0]);
        assert!(MoeEncoder::new(vec![e0, e2], RoutingScheme::new(RoutingVariant::Hard)).is_err());
    }

    #[test]
    fn embed_rows_matches_per_record_calls() {
        let mut rng = rng_from(5);
        let dims = ExpertDims { m: 3, g: 2, hidden: 4, d: 5 };
        let experts = (0..3)
            .map(|c| ExpertModel::init(dims, 2.0, c, vec![c as f64, 0.0, -1.0], &mut rng).unwrap())
            .collect();
        let enc = MoeEncoder::new(experts, RoutingScheme::new(RoutingVariant::InverseDistance)).unwrap();
        let pts = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 2.0, -1.0, 0.0]).unwrap();
        let out = embed_rows(&enc, &pts).unwrap();
        for i in 0..2 {
            assert_eq!(out.embeddings.row(i), &moe_embed(&enc, pts.row(i)).unwrap()[..]);
            assert!((out.weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let empty = embed_rows(&enc, &Matrix::zeros(0, 3)).unwrap();
        assert_eq!(empty.embeddings.rows(), 0);
    }
}
