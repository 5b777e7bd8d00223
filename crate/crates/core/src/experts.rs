//! Data experts: a pair of projection heads aligning patch embeddings with
//! expression profiles under a similarity-adjusted soft-target contrastive
//! loss, with hand-derived gradients and an AdamW training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::linalg::{log_sum_exp, softmax_in_place, Matrix};
use crate::nn::{cosine_lr, Activation, AdamW, Dense};
use crate::rng::{rng_from, Rng};
use crate::{Error, Result};

/// Default temperature, applied as a logit scale.
pub const DEFAULT_TAU: f64 = 1.0 / 0.07;
pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_DIM: usize = 256;
/// Lower clamp applied to every log-probability in the cross-entropies.
pub const LOG_CLAMP: f64 = -80.0;
const NORM_FLOOR: f64 = 1e-12;

/// Two-layer MLP followed by L2 normalization.
///
/// Inputs are centered on `input_shift` before the first layer. The shift is
/// fixed from the expert's training data and is not a trained parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub input_shift: Vec<f64>,
    pub layer1: Dense,
    pub layer2: Dense,
    pub activation: Activation,
}

/// Intermediate values of a batched head forward pass.
pub struct HeadCache {
    input: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    /// Normalized outputs.
    pub output: Matrix,
}

impl ProjectionHead {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            input_shift: vec![0.0; input],
            layer1: Dense::init(input, hidden, rng),
            layer2: Dense::init(hidden, output, rng),
            activation: Activation::Gelu,
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input_shift: vec![0.0; input],
            layer1: Dense::zeros(input, hidden),
            layer2: Dense::zeros(hidden, output),
            activation: Activation::Gelu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layer2.output_dim()
    }

    /// Maps one input to a unit vector in the joint space.
    pub fn project(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: input.len(),
                context: "projection head input",
            });
        }
        let centered: Vec<f64> = input.iter().zip(&self.input_shift).map(|(x, s)| x - s).collect();
        let mut hidden = self.layer1.forward_one(&centered);
        hidden.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        let mut out = self.layer2.forward_one(&hidden);
        normalize_or_basis(&mut out);
        Ok(out)
    }

    pub fn forward_batch(&self, input: &Matrix) -> Result<HeadCache> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: input.cols(),
                context: "projection head input",
            });
        }
        let mut input = input.clone();
        for r in 0..input.rows() {
            for (x, s) in input.row_mut(r).iter_mut().zip(&self.input_shift) {
                *x -= s;
            }
        }
        let pre1 = self.layer1.forward(&input);
        let act1 = self.activation.map(&pre1);
        let pre2 = self.layer2.forward(&act1);
        let mut output = pre2.clone();
        for r in 0..output.rows() {
            normalize_or_basis(output.row_mut(r));
        }
        Ok(HeadCache {
            input,
            pre1,
            act1,
            pre2,
            output,
        })
    }

    /// Accumulates parameter gradients for `∂L/∂output` into `grad`.
    pub fn backward_batch(&self, cache: &HeadCache, d_output: &Matrix, grad: &mut ProjectionHead) {
        let mut d_pre2 = Matrix::zeros(d_output.rows(), d_output.cols());
        for r in 0..d_output.rows() {
            normalize_backward(cache.pre2.row(r), cache.output.row(r), d_output.row(r), d_pre2.row_mut(r));
        }
        let d_act1 = self.layer2.backward(&cache.act1, &d_pre2, &mut grad.layer2);
        let d_pre1 = self.activation.backward(&cache.pre1, &d_act1);
        self.layer1.backward(&cache.input, &d_pre1, &mut grad.layer1);
    }

    fn params_mut(&mut self) -> [&mut [f64]; 4] {
        let [w1, b1] = self.layer1.params_mut();
        let [w2, b2] = self.layer2.params_mut();
        [w1, b1, w2, b2]
    }

    fn params(&self) -> [&[f64]; 4] {
        let [w1, b1] = self.layer1.params();
        let [w2, b2] = self.layer2.params();
        [w1, b1, w2, b2]
    }

    /// Sets the input shift to the column means of `rows` of `data`.
    pub fn fit_shift(&mut self, data: &Matrix, rows: &[usize]) {
        let mut mean = vec![0.0; data.cols()];
        for &r in rows {
            crate::linalg::axpy(1.0, data.row(r), &mut mean);
        }
        let inv = 1.0 / rows.len().max(1) as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        self.input_shift = mean;
    }

    pub fn is_finite(&self) -> bool {
        self.input_shift.iter().all(|v| v.is_finite()) && self.layer1.is_finite() && self.layer2.is_finite()
    }
}

/// L2-normalizes in place; near-zero vectors become the first basis vector.
fn normalize_or_basis(v: &mut [f64]) {
    let n = crate::linalg::norm(v);
    if n < NORM_FLOOR {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Backward of `y = u / ‖u‖`: `du = (dy − y (y·dy)) / ‖u‖`. Zero under the basis fallback.
fn normalize_backward(u: &[f64], y: &[f64], dy: &[f64], du: &mut [f64]) {
    let n = crate::linalg::norm(u);
    if n < NORM_FLOOR {
        du.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let proj = crate::linalg::dot(y, dy);
    for ((d, &yi), &dyi) in du.iter_mut().zip(y).zip(dy) {
        *d = (dyi - yi * proj) / n;
    }
}

/// Row-softmax of `τ·(Hx·Hxᵀ + Hv·Hvᵀ)/2`: the similarity-adjusted targets.
pub fn soft_targets(hv: &Matrix, hx: &Matrix, tau: f64) -> Result<Matrix> {
    check_pair(hv, hx)?;
    let mut s = hx.mul_transpose(hx);
    let sv = hv.mul_transpose(hv);
    for (a, b) in s.as_mut_slice().iter_mut().zip(sv.as_slice()) {
        *a = 0.5 * tau * (*a + b);
    }
    for r in 0..s.rows() {
        softmax_in_place(s.row_mut(r));
    }
    Ok(s)
}

fn check_pair(hv: &Matrix, hx: &Matrix) -> Result<()> {
    if hv.rows() != hx.rows() || hv.cols() != hx.cols() {
        return Err(Error::DimMismatch {
            expected: hv.rows() * hv.cols(),
            actual: hx.rows() * hx.cols(),
            context: "image and expression batches must have the same shape",
        });
    }
    if hv.rows() == 0 {
        return Err(Error::InvalidArgument("empty contrastive batch".into()));
    }
    Ok(())
}

/// Loss value and its gradients with respect to both embedding batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub grad_image: Matrix,
    pub grad_expr: Matrix,
}

/// Symmetric soft-target cross-entropy between `τ·Hv·Hxᵀ` and the soft targets.
///
/// `loss = ½ [ mean_i CE(softmax(L_i·), t_i·) + mean_j CE(softmax(L_·j), t_·j) ]`.
/// Gradients flow through both the logits and the targets.
pub fn contrastive_loss(hv: &Matrix, hx: &Matrix, tau: f64) -> Result<ContrastiveLoss> {
    check_pair(hv, hx)?;
    let b = hv.rows();
    let scale = 1.0 / (2.0 * b as f64);
    let t = soft_targets(hv, hx, tau)?;
    let mut logits = hv.mul_transpose(hx);
    logits.as_mut_slice().iter_mut().for_each(|v| *v *= tau);

    // Row direction (image → expression) and column direction (expression → image).
    let mut log_p = logits.clone();
    for i in 0..b {
        let lse = log_sum_exp(logits.row(i));
        log_p.row_mut(i).iter_mut().for_each(|v| *v -= lse);
    }
    let mut log_q = logits.clone();
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|i| logits.get(i, j)).collect();
        let lse = log_sum_exp(&col);
        for i in 0..b {
            log_q.set(i, j, logits.get(i, j) - lse);
        }
    }

    let mut loss = 0.0;
    let mut d_logits = Matrix::zeros(b, b);
    let mut d_t = Matrix::zeros(b, b);
    // Row terms.
    for i in 0..b {
        let mut g_sum = 0.0;
        let mut g = vec![0.0; b];
        for j in 0..b {
            let lp = log_p.get(i, j);
            let clamped = lp < LOG_CLAMP;
            let lp_c = lp.max(LOG_CLAMP);
            loss -= scale * t.get(i, j) * lp_c;
            d_t.add_at(i, j, -scale * lp_c);
            if !clamped {
                g[j] = -scale * t.get(i, j);
                g_sum += g[j];
            }
        }
        for j in 0..b {
            let p = libm::exp(log_p.get(i, j));
            d_logits.add_at(i, j, g[j] - p * g_sum);
        }
    }
    // Column terms.
    for j in 0..b {
        let mut g_sum = 0.0;
        let mut g = vec![0.0; b];
        for i in 0..b {
            let lq = log_q.get(i, j);
            let clamped = lq < LOG_CLAMP;
            let lq_c = lq.max(LOG_CLAMP);
            loss -= scale * t.get(i, j) * lq_c;
            d_t.add_at(i, j, -scale * lq_c);
            if !clamped {
                g[i] = -scale * t.get(i, j);
                g_sum += g[i];
            }
        }
        for i in 0..b {
            let q = libm::exp(log_q.get(i, j));
            d_logits.add_at(i, j, g[i] - q * g_sum);
        }
    }

    // Back through the row softmax producing t.
    let mut d_s = Matrix::zeros(b, b);
    for i in 0..b {
        let inner: f64 = (0..b).map(|k| t.get(i, k) * d_t.get(i, k)).sum();
        for j in 0..b {
            d_s.set(i, j, t.get(i, j) * (d_t.get(i, j) - inner));
        }
    }
    let mut d_s_sym = d_s.transpose();
    for (a, v) in d_s_sym.as_mut_slice().iter_mut().zip(d_s.as_slice()) {
        *a = 0.5 * tau * (*a + v);
    }

    let mut grad_image = d_logits.matmul(hx);
    let mut grad_expr = d_logits.transpose().matmul(hv);
    grad_image.as_mut_slice().iter_mut().for_each(|v| *v *= tau);
    grad_expr.as_mut_slice().iter_mut().for_each(|v| *v *= tau);
    for (g, v) in grad_image.as_mut_slice().iter_mut().zip(d_s_sym.matmul(hv).as_slice()) {
        *g += v;
    }
    for (g, v) in grad_expr.as_mut_slice().iter_mut().zip(d_s_sym.matmul(hx).as_slice()) {
        *g += v;
    }
    Ok(ContrastiveLoss {
        loss,
        grad_image,
        grad_expr,
    })
}

/// Head shapes shared by every expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertDims {
    /// Patch embedding dimension.
    pub m: usize,
    /// Gene count.
    pub g: usize,
    pub hidden: usize,
    /// Joint-space dimension.
    pub d: usize,
}

/// One contrastively trained expert and the coarse centroid it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub image_head: ProjectionHead,
    pub expr_head: ProjectionHead,
    pub tau: f64,
    pub coarse_id: u32,
    pub centroid: Vec<f64>,
}

impl ExpertModel {
    pub fn init(dims: ExpertDims, tau: f64, coarse_id: u32, centroid: Vec<f64>, rng: &mut Rng) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        if centroid.len() != dims.m {
            return Err(Error::DimMismatch {
                expected: dims.m,
                actual: centroid.len(),
                context: "expert centroid",
            });
        }
        Ok(Self {
            image_head: ProjectionHead::init(dims.m, dims.hidden, dims.d, rng),
            expr_head: ProjectionHead::init(dims.g, dims.hidden, dims.d, rng),
            tau,
            coarse_id,
            centroid,
        })
    }

    pub fn dims(&self) -> ExpertDims {
        ExpertDims {
            m: self.image_head.input_dim(),
            g: self.expr_head.input_dim(),
            hidden: self.image_head.hidden_dim(),
            d: self.image_head.output_dim(),
        }
    }

    pub fn embed_images(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.image_head.forward_batch(x)?.output)
    }

    pub fn embed_expressions(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.expr_head.forward_batch(x)?.output)
    }

    /// Contrastive loss of one batch, in eval mode.
    pub fn batch_loss(&self, images: &Matrix, exprs: &Matrix) -> Result<f64> {
        let hv = self.embed_images(images)?;
        let hx = self.embed_expressions(exprs)?;
        Ok(contrastive_loss(&hv, &hx, self.tau)?.loss)
    }

    fn params_mut(&mut self) -> [&mut [f64]; 8] {
        let [a, b, c, d] = self.image_head.params_mut();
        let [e, f, g, h] = self.expr_head.params_mut();
        [a, b, c, d, e, f, g, h]
    }
}

/// The image branch of an expert: its output enters the routed weighted sum.
pub fn embed_patch(expert: &ExpertModel, h: &[f64]) -> Result<Vec<f64>> {
    expert.image_head.project(h)
}

/// Optimizer and early-stopping settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub batch_size: u32,
    /// Epochs without validation improvement before stopping.
    pub patience: u32,
    pub seed: u64,
    /// Cosine decay of the learning rate over `epochs`.
    pub cosine: bool,
    /// Fraction of the data held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 20,
            batch_size: 64,
            patience: 10,
            seed: 0,
            cosine: true,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!("val_fraction {} not in [0,1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        if self.cosine {
            cosine_lr(self.lr, epoch, self.epochs)
        } else {
            self.lr
        }
    }
}

/// Per-epoch losses. `train[0]` and `val[0]` are measured before any update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub epochs_run: u32,
    pub stopped_early: bool,
}

/// Trains one expert on its paired records (`images: n × m`, `exprs: n × G`).
///
/// A seeded `val_fraction` of the rows is held out for early stopping when it
/// yields at least two pairs; otherwise every epoch runs.
pub fn train_expert(
    images: &Matrix,
    exprs: &Matrix,
    dims: ExpertDims,
    tau: f64,
    coarse_id: u32,
    centroid: Vec<f64>,
    config: &TrainConfig,
) -> Result<(ExpertModel, TrainHistory)> {
    config.validate()?;
    let n = images.rows();
    if exprs.rows() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: exprs.rows(),
            context: "paired record count",
        });
    }
    if images.cols() != dims.m || exprs.cols() != dims.g {
        return Err(Error::DimMismatch {
            expected: dims.m + dims.g,
            actual: images.cols() + exprs.cols(),
            context: "expert input dims",
        });
    }
    let batch = config.batch_size as usize;
    if batch < 2 {
        return Err(Error::InsufficientData("batch size must be at least 2".into()));
    }
    if n < batch {
        return Err(Error::InsufficientData(format!("{n} records for batch size {batch}")));
    }

    let mut rng = rng_from(config.seed);
    let mut model = ExpertModel::init(dims, tau, coarse_id, centroid, &mut rng)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = libm::floor(n as f64 * config.val_fraction) as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();
    let batch = batch.min(train_idx.len());
    if batch < 2 {
        return Err(Error::InsufficientData("fewer than two training pairs".into()));
    }
    model.image_head.fit_shift(images, &train_idx);
    model.expr_head.fit_shift(exprs, &train_idx);

    let eval = |model: &ExpertModel, idx: &[usize]| -> Result<f64> {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        mean_chunk_loss(model, images, exprs, &sorted, batch)
    };
    let use_val = val_idx.len() >= 2;
    let mut history = TrainHistory::default();
    history.train.push(eval(&model, &train_idx)?);
    if use_val {
        history.val.push(eval(&model, &val_idx)?);
    }

    let mut opt = AdamW::new(config.weight_decay);
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let x_img = images.select_rows(chunk);
            let x_expr = exprs.select_rows(chunk);
            let img = model.image_head.forward_batch(&x_img)?;
            let expr = model.expr_head.forward_batch(&x_expr)?;
            let loss = contrastive_loss(&img.output, &expr.output, model.tau)?;
            let dims = model.dims();
            let mut g_img = ProjectionHead::zeros(dims.m, dims.hidden, dims.d);
            let mut g_expr = ProjectionHead::zeros(dims.g, dims.hidden, dims.d);
            model.image_head.backward_batch(&img, &loss.grad_image, &mut g_img);
            model.expr_head.backward_batch(&expr, &loss.grad_expr, &mut g_expr);
            let [a, b, c, d] = g_img.params();
            let [e, f, g, h] = g_expr.params();
            opt.step(&mut model.params_mut(), &[a, b, c, d, e, f, g, h], lr);
        }
        history.epochs_run = epoch + 1;
        history.train.push(eval(&model, &train_idx)?);
        if use_val {
            let v = eval(&model, &val_idx)?;
            history.val.push(v);
            if v < best_val {
                best_val = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if !(model.image_head.is_finite() && model.expr_head.is_finite()) {
        return Err(Error::NonFiniteValue(format!("parameters of expert {coarse_id}")));
    }
    Ok((model, history))
}

/// Size-weighted mean loss over consecutive chunks of `idx`; singleton chunks are skipped.
fn mean_chunk_loss(model: &ExpertModel, images: &Matrix, exprs: &Matrix, idx: &[usize], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch) {
        if chunk.len() < 2 {
            continue;
        }
        let l = model.batch_loss(&images.select_rows(chunk), &exprs.select_rows(chunk))?;
        total += l * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng as _;

    fn random_unit_rows(b: usize, d: usize, rng: &mut Rng) -> Matrix {
        let mut m = Matrix::zeros(b, d);
        for r in 0..b {
            for v in m.row_mut(r) {
                *v = rng.random_range(-1.0..1.0);
            }
            normalize_or_basis(m.row_mut(r));
        }
        m
    }

    #[test]
    fn project_is_unit_norm_and_pure() {
        let mut rng = rng_from(3);
        let head = ProjectionHead::init(5, 8, 4, &mut rng);
        let x = [0.3, -1.0, 2.0, 0.0, 0.7];
        let a = head.project(&x).unwrap();
        assert!((crate::linalg::norm(&a) - 1.0).abs() < 1e-6);
        assert_eq!(a, head.project(&x).unwrap());
        assert!(matches!(head.project(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn zero_head_falls_back_to_basis_vector() {
        let head = ProjectionHead::zeros(3, 4, 5);
        assert_eq!(head.project(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn singleton_and_uniform_targets() {
        let mut rng = rng_from(1);
        let h = random_unit_rows(1, 3, &mut rng);
        assert_eq!(soft_targets(&h, &h, 5.0).unwrap().as_slice(), &[1.0]);
        assert_eq!(contrastive_loss(&h, &h, 5.0).unwrap().loss, 0.0);

        let row = [0.6, 0.8, 0.0];
        let same = Matrix::from_rows(3, [row; 4].iter()).unwrap();
        let t = soft_targets(&same, &same, DEFAULT_TAU).unwrap();
        for v in t.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn orthogonal_pairs_closed_form() {
        let eye = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = soft_targets(&eye, &eye, 1.0).unwrap();
        // softmax([1, 0]) = [e/(e+1), 1/(e+1)]
        let e = core::f64::consts::E;
        assert!((t.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((t.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((t.get(0, 1) - 0.2689).abs() < 1e-4);

        for tau in [1.0, 3.0, DEFAULT_TAU] {
            let out = contrastive_loss(&eye, &eye, tau).unwrap();
            let p1 = 1.0 / (1.0 + libm::exp(-tau));
            let ce = -(p1 * libm::log(p1) + (1.0 - p1) * libm::log(1.0 - p1));
            assert!((out.loss - ce).abs() < 1e-12, "tau={tau}");
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = rng_from(9);
        let hv = random_unit_rows(6, 5, &mut rng);
        let hx = random_unit_rows(6, 5, &mut rng);
        let a = contrastive_loss(&hv, &hx, 2.5).unwrap().loss;
        let perm = [3, 0, 5, 1, 4, 2];
        let c = contrastive_loss(&hv.select_rows(&perm), &hx.select_rows(&perm), 2.5)
            .unwrap()
            .loss;
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn modality_swap_symmetry_for_pairs() {
        // With two unit rows the target matrix is symmetric, so swapping the
        // modalities leaves the loss unchanged. Larger batches lose this.
        let mut rng = rng_from(4);
        for _ in 0..20 {
            let hv = random_unit_rows(2, 4, &mut rng);
            let hx = random_unit_rows(2, 4, &mut rng);
            let t = soft_targets(&hv, &hx, DEFAULT_TAU).unwrap();
            assert!((t.get(0, 1) - t.get(1, 0)).abs() < 1e-12);
            let a = contrastive_loss(&hv, &hx, DEFAULT_TAU).unwrap().loss;
            let b = contrastive_loss(&hx, &hv, DEFAULT_TAU).unwrap().loss;
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn central_difference(f: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
        let mut out = Matrix::zeros(at.rows(), at.cols());
        for k in 0..at.as_slice().len() {
            let mut p = at.clone();
            p.as_mut_slice()[k] += h;
            let mut q = at.clone();
            q.as_mut_slice()[k] -= h;
            out.as_mut_slice()[k] = (f(&p) - f(&q)) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let scale = a
            .as_slice()
            .iter()
            .chain(b.as_slice())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = rng_from(21);
        let hv = random_unit_rows(8, 16, &mut rng);
        let hx = random_unit_rows(8, 16, &mut rng);
        let tau = 2.0;
        let out = contrastive_loss(&hv, &hx, tau).unwrap();
        let fd_v = central_difference(|m| contrastive_loss(m, &hx, tau).unwrap().loss, &hv, 1e-5);
        let fd_x = central_difference(|m| contrastive_loss(&hv, m, tau).unwrap().loss, &hx, 1e-5);
        assert!(max_rel_err(&out.grad_image, &fd_v) < 1e-4);
        assert!(max_rel_err(&out.grad_expr, &fd_x) < 1e-4);
    }

    #[test]
    fn head_backprop_matches_finite_differences() {
        let mut rng = rng_from(4);
        let head = ProjectionHead::init(4, 6, 3, &mut rng);
        let x = random_unit_rows(5, 4, &mut rng);
        let target = random_unit_rows(5, 3, &mut rng);
        let loss = |h: &ProjectionHead| -> f64 {
            let y = h.forward_batch(&x).unwrap().output;
            crate::linalg::dot(y.as_slice(), target.as_slice())
        };
        let cache = head.forward_batch(&x).unwrap();
        let mut grad = ProjectionHead::zeros(4, 6, 3);
        head.backward_batch(&cache, &target, &mut grad);
        let analytic = grad.params();
        let eps = 1e-6;
        for group in 0..4 {
            for k in 0..analytic[group].len() {
                let mut p = head.clone();
                p.params_mut()[group][k] += eps;
                let mut q = head.clone();
                q.params_mut()[group][k] -= eps;
                let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
                assert!((fd - analytic[group][k]).abs() < 1e-6, "group {group} index {k}");
            }
        }
    }

    fn paired_data(n: usize, m: usize, g: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = rng_from(seed);
        let map: Vec<f64> = (0..m * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = Matrix::from_vec(m, g, map).unwrap();
        let mut x = Matrix::zeros(n, m);
        x.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let y = x.matmul(&map);
        (x, y)
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (x, y) = paired_data(80, 6, 10, 5);
        let dims = ExpertDims { m: 6, g: 10, hidden: 32, d: 16 };
        let config = TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 15,
            seed: 77,
            ..TrainConfig::default()
        };
        let (a, hist) = train_expert(&x, &y, dims, 5.0, 0, vec![0.0; 6], &config).unwrap();
        assert!(hist.train.last().unwrap() < &hist.train[0], "{:?}", hist.train);
        let (b, _) = train_expert(&x, &y, dims, 5.0, 0, vec![0.0; 6], &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let (x, y) = paired_data(30, 4, 5, 6);
        let dims = ExpertDims { m: 4, g: 5, hidden: 8, d: 4 };
        let config = TrainConfig {
            lr: 0.0,
            batch_size: 8,
            epochs: 3,
            seed: 1,
            ..TrainConfig::default()
        };
        let (trained, _) = train_expert(&x, &y, dims, 5.0, 2, vec![0.0; 4], &config).unwrap();
        let mut rng = rng_from(1);
        let fresh = ExpertModel::init(dims, 5.0, 2, vec![0.0; 4], &mut rng).unwrap();
        assert_eq!(trained.image_head.layer1, fresh.image_head.layer1);
        assert_eq!(trained.image_head.layer2, fresh.image_head.layer2);
        assert_eq!(trained.expr_head.layer1, fresh.expr_head.layer1);
        assert_eq!(trained.expr_head.layer2, fresh.expr_head.layer2);
        assert_eq!(trained.image_head.input_shift.len(), 4);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let (x, y) = paired_data(10, 4, 5, 6);
        let dims = ExpertDims { m: 4, g: 5, hidden: 8, d: 4 };
        let config = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_expert(&x, &y, dims, 5.0, 0, vec![0.0; 4], &config),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn embed_patch_uses_only_the_image_head() {
        let mut rng = rng_from(2);
        let dims = ExpertDims { m: 3, g: 4, hidden: 5, d: 6 };
        let mut e = ExpertModel::init(dims, 5.0, 0, vec![0.0; 3], &mut rng).unwrap();
        let h = [0.2, -0.1, 0.5];
        let before = embed_patch(&e, &h).unwrap();
        assert_eq!(before, e.image_head.project(&h).unwrap());
        assert!((crate::linalg::norm(&before) - 1.0).abs() < 1e-12);
        e.expr_head = ProjectionHead::zeros(4, 5, 6);
        assert_eq!(embed_patch(&e, &h).unwrap(), before);
    }
}
