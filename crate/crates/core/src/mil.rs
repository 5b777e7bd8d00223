//! Gated-attention multiple instance learning over routed patch embeddings,
//! with a classification head and a discrete-time survival head.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::linalg::{dot, log_sigmoid, log_sum_exp, sigmoid, softmax_in_place, Matrix};
use crate::nn::{dropout_mask, Activation, AdamW, Dense};
use crate::rng::{rng_from, Rng};
use crate::experts::TrainConfig;
use crate::{Error, Result};

pub const DEFAULT_MIL_HIDDEN: usize = 256;
pub const DEFAULT_ATTN_DIM: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.25;
const LOG_CLAMP: f64 = -80.0;

/// What a bag is labelled with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BagTarget {
    Class(u32),
    Survival { time: f64, event: bool },
}

/// All instances of one slide or patient.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub id: String,
    /// `n × d`.
    pub instances: Matrix,
    pub coords: Vec<(f64, f64)>,
    pub target: BagTarget,
}

impl SlideBag {
    pub fn validate(&self) -> Result<()> {
        if self.instances.rows() == 0 {
            return Err(Error::InvalidArgument(alloc::format!("bag {} is empty", self.id)));
        }
        if !self.instances.is_finite() {
            return Err(Error::NonFiniteValue(alloc::format!("instances of bag {}", self.id)));
        }
        if let BagTarget::Survival { time, .. } = self.target {
            if !(time > 0.0) {
                return Err(Error::InvalidArgument(alloc::format!("bag {} has non-positive time", self.id)));
            }
        }
        Ok(())
    }
}

/// Layer sizes of an attention MIL model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbmilArch {
    pub input: usize,
    pub hidden: usize,
    pub attn: usize,
    pub outputs: usize,
    pub dropout: f64,
}

impl AbmilArch {
    pub fn new(input: usize, outputs: usize) -> Self {
        Self {
            input,
            hidden: DEFAULT_MIL_HIDDEN,
            attn: DEFAULT_ATTN_DIM,
            outputs,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

/// Two-layer instance MLP, gated attention pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilModel {
    pub mlp1: Dense,
    pub mlp2: Dense,
    pub attn_v: Dense,
    pub attn_u: Dense,
    pub attn_w: Dense,
    pub head: Dense,
    pub dropout: f64,
}

/// Output of an attention forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilOutput {
    pub slide_vec: Vec<f64>,
    pub attention: Vec<f64>,
    pub logits: Vec<f64>,
}

struct Cache {
    x: Matrix,
    z1: Matrix,
    a1: Matrix,
    mask1: Vec<f64>,
    z2: Matrix,
    f: Matrix,
    mask2: Vec<f64>,
    tv: Matrix,
    su: Matrix,
    mask3: Vec<f64>,
    g: Matrix,
    out: AbmilOutput,
}

impl AbmilModel {
    pub fn init(arch: &AbmilArch, rng: &mut Rng) -> Result<Self> {
        if arch.attn == 0 || arch.hidden == 0 || arch.outputs == 0 {
            return Err(Error::InvalidArgument("attention MIL layer sizes must be positive".into()));
        }
        Ok(Self {
            mlp1: Dense::init(arch.input, arch.hidden, rng),
            mlp2: Dense::init(arch.hidden, arch.hidden, rng),
            attn_v: Dense::init(arch.hidden, arch.attn, rng),
            attn_u: Dense::init(arch.hidden, arch.attn, rng),
            attn_w: Dense::init(arch.attn, 1, rng),
            head: Dense::init(arch.hidden, arch.outputs, rng),
            dropout: arch.dropout,
        })
    }

    pub fn arch(&self) -> AbmilArch {
        AbmilArch {
            input: self.mlp1.input_dim(),
            hidden: self.mlp1.output_dim(),
            attn: self.attn_v.output_dim(),
            outputs: self.head.output_dim(),
            dropout: self.dropout,
        }
    }

    fn zeros_like(&self) -> Self {
        let a = self.arch();
        Self {
            mlp1: Dense::zeros(a.input, a.hidden),
            mlp2: Dense::zeros(a.hidden, a.hidden),
            attn_v: Dense::zeros(a.hidden, a.attn),
            attn_u: Dense::zeros(a.hidden, a.attn),
            attn_w: Dense::zeros(a.attn, 1),
            head: Dense::zeros(a.hidden, a.outputs),
            dropout: a.dropout,
        }
    }

    fn layers(&self) -> [&Dense; 6] {
        [&self.mlp1, &self.mlp2, &self.attn_v, &self.attn_u, &self.attn_w, &self.head]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 6] {
        [
            &mut self.mlp1,
            &mut self.mlp2,
            &mut self.attn_v,
            &mut self.attn_u,
            &mut self.attn_w,
            &mut self.head,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.is_finite())
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, bag: &SlideBag) -> Result<AbmilOutput> {
        Ok(self.forward_cached(&bag.instances, None)?.out)
    }

    fn forward_cached(&self, x: &Matrix, mut rng: Option<&mut Rng>) -> Result<Cache> {
        if x.cols() != self.mlp1.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.mlp1.input_dim(),
                actual: x.cols(),
                context: "bag instance dimension",
            });
        }
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty bag".into()));
        }
        let relu = Activation::Relu;
        let mut mask = |len: usize| match rng.as_deref_mut() {
            Some(r) => dropout_mask(len, self.dropout, r),
            None => vec![1.0; len],
        };
        let z1 = self.mlp1.forward(x);
        let mask1 = mask(z1.as_slice().len());
        let mut a1 = relu.map(&z1);
        apply_mask(&mut a1, &mask1);
        let z2 = self.mlp2.forward(&a1);
        let mask2 = mask(z2.as_slice().len());
        let mut f = relu.map(&z2);
        apply_mask(&mut f, &mask2);

        let mut tv = self.attn_v.forward(&f);
        tv.as_mut_slice().iter_mut().for_each(|v| *v = libm::tanh(*v));
        let mut su = self.attn_u.forward(&f);
        su.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mask3 = mask(tv.as_slice().len());
        let mut g = tv.clone();
        for ((gv, &s), &mk) in g.as_mut_slice().iter_mut().zip(su.as_slice()).zip(&mask3) {
            *gv *= s * mk;
        }
        let scores = self.attn_w.forward(&g);
        let mut attention = scores.into_vec();
        softmax_in_place(&mut attention);

        let mut slide_vec = vec![0.0; f.cols()];
        for (i, &a) in attention.iter().enumerate() {
            crate::linalg::axpy(a, f.row(i), &mut slide_vec);
        }
        let logits = self.head.forward_one(&slide_vec);
        Ok(Cache {
            x: x.clone(),
            z1,
            a1,
            mask1,
            z2,
            f,
            mask2,
            tv,
            su,
            mask3,
            g,
            out: AbmilOutput {
                slide_vec,
                attention,
                logits,
            },
        })
    }

    /// Accumulates parameter gradients for `∂L/∂logits` into `grad`.
    fn backward(&self, cache: &Cache, d_logits: &[f64], grad: &mut AbmilModel) {
        let att = &cache.out.attention;
        let slide = Matrix::from_vec(1, cache.f.cols(), cache.out.slide_vec.clone()).expect("row");
        let dl = Matrix::from_vec(1, d_logits.len(), d_logits.to_vec()).expect("row");
        let d_slide = self.head.backward(&slide, &dl, &mut grad.head);
        let d_slide = d_slide.row(0);

        let n = cache.f.rows();
        let mut d_f = Matrix::zeros(n, cache.f.cols());
        let mut d_att = vec![0.0; n];
        for i in 0..n {
            crate::linalg::axpy(att[i], d_slide, d_f.row_mut(i));
            d_att[i] = dot(cache.f.row(i), d_slide);
        }
        let inner: f64 = att.iter().zip(&d_att).map(|(a, d)| a * d).sum();
        let d_scores: Vec<f64> = att.iter().zip(&d_att).map(|(a, d)| a * (d - inner)).collect();
        let d_scores = Matrix::from_vec(n, 1, d_scores).expect("column");
        let mut d_g = self.attn_w.backward(&cache.g, &d_scores, &mut grad.attn_w);
        apply_mask(&mut d_g, &cache.mask3);
        let mut d_v = d_g.clone();
        let mut d_u = d_g;
        for k in 0..d_v.as_slice().len() {
            let t = cache.tv.as_slice()[k];
            let s = cache.su.as_slice()[k];
            d_v.as_mut_slice()[k] *= s * (1.0 - t * t);
            d_u.as_mut_slice()[k] *= t * s * (1.0 - s);
        }
        let from_v = self.attn_v.backward(&cache.f, &d_v, &mut grad.attn_v);
        let from_u = self.attn_u.backward(&cache.f, &d_u, &mut grad.attn_u);
        for ((d, a), b) in d_f.as_mut_slice().iter_mut().zip(from_v.as_slice()).zip(from_u.as_slice()) {
            *d += a + b;
        }

        apply_mask(&mut d_f, &cache.mask2);
        let d_z2 = Activation::Relu.backward(&cache.z2, &d_f);
        let mut d_a1 = self.mlp2.backward(&cache.a1, &d_z2, &mut grad.mlp2);
        apply_mask(&mut d_a1, &cache.mask1);
        let d_z1 = Activation::Relu.backward(&cache.z1, &d_a1);
        self.mlp1.backward(&cache.x, &d_z1, &mut grad.mlp1);
    }
}

fn apply_mask(m: &mut Matrix, mask: &[f64]) {
    for (v, k) in m.as_mut_slice().iter_mut().zip(mask) {
        *v *= k;
    }
}

/// Evaluation-mode forward pass.
pub fn abmil_forward(model: &AbmilModel, bag: &SlideBag) -> Result<AbmilOutput> {
    model.forward(bag)
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn class_loss(logits: &[f64], label: u32) -> Result<(f64, Vec<f64>)> {
    let y = label as usize;
    if y >= logits.len() {
        return Err(Error::InvalidArgument(alloc::format!("label {label} outside {} classes", logits.len())));
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[y];
    let mut grad = logits.to_vec();
    softmax_in_place(&mut grad);
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Discrete-time bins over follow-up time.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalSpec {
    /// Strictly increasing; `n_bins = edges + 1`.
    pub bin_edges: Vec<f64>,
}

impl SurvivalSpec {
    pub fn new(bin_edges: Vec<f64>) -> Result<Self> {
        if bin_edges.windows(2).any(|w| !(w[0] < w[1])) || bin_edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("bin edges must be finite and strictly increasing".into()));
        }
        Ok(Self { bin_edges })
    }

    /// Quartile edges of the event times (all times when there are no events).
    pub fn quartiles(times: &[f64], events: &[bool]) -> Result<Self> {
        let mut pool: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
        if pool.is_empty() {
            pool = times.to_vec();
        }
        if pool.is_empty() {
            return Err(Error::InsufficientData("no survival times".into()));
        }
        pool.sort_by(f64::total_cmp);
        let mut edges: Vec<f64> = [0.25, 0.5, 0.75].iter().map(|&q| quantile_sorted(&pool, q)).collect();
        edges.dedup();
        Self::new(edges)
    }

    pub fn n_bins(&self) -> usize {
        self.bin_edges.len() + 1
    }

    /// Bin index: the number of edges `≤ time`.
    pub fn bin_of(&self, time: f64) -> usize {
        self.bin_edges.partition_point(|&e| e <= time)
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Discrete-time hazard negative log-likelihood and its gradient.
///
/// Hazards are `σ(logit_b)`. An event in bin `k` costs
/// `−log h_k − Σ_{b<k} log(1−h_b)`; censoring in bin `k` costs
/// `−Σ_{b≤k} log(1−h_b)`. Every log term is clamped at −80.
pub fn survival_nll(logits: &[f64], time: f64, event: bool, spec: &SurvivalSpec) -> Result<(f64, Vec<f64>)> {
    if logits.len() != spec.n_bins() {
        return Err(Error::DimMismatch {
            expected: spec.n_bins(),
            actual: logits.len(),
            context: "survival logits",
        });
    }
    if !(time > 0.0) {
        return Err(Error::InvalidArgument("survival time must be positive".into()));
    }
    let k = spec.bin_of(time);
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &l) in logits.iter().enumerate().take(k + 1) {
        if event && b == k {
            // −log σ(l)
            let ls = log_sigmoid(l);
            loss -= ls.max(LOG_CLAMP);
            if ls >= LOG_CLAMP {
                grad[b] = sigmoid(l) - 1.0;
            }
        } else {
            // −log(1 − σ(l)) = −log σ(−l)
            let ls = log_sigmoid(-l);
            loss -= ls.max(LOG_CLAMP);
            if ls >= LOG_CLAMP {
                grad[b] = sigmoid(l);
            }
        }
    }
    Ok((loss, grad))
}

/// Sum of per-bin hazards; larger means an earlier expected event.
pub fn risk_from_logits(logits: &[f64]) -> f64 {
    logits.iter().map(|&l| sigmoid(l)).sum()
}

pub fn risk_score(model: &AbmilModel, bag: &SlideBag) -> Result<f64> {
    Ok(risk_from_logits(&model.forward(bag)?.logits))
}

/// Per-epoch mean losses; index 0 is before training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initial).
    pub best_epoch: u32,
    pub epochs_run: u32,
}

enum Objective<'a> {
    Classify,
    Survival(&'a SurvivalSpec),
}

impl Objective<'_> {
    fn loss(&self, logits: &[f64], target: &BagTarget) -> Result<(f64, Vec<f64>)> {
        match (self, target) {
            (Objective::Classify, BagTarget::Class(c)) => class_loss(logits, *c),
            (Objective::Survival(spec), BagTarget::Survival { time, event }) => {
                survival_nll(logits, *time, *event, spec)
            }
            _ => Err(Error::InvalidArgument("bag target does not match the task".into())),
        }
    }
}

/// Trains a classification head. Early stopping keeps the parameters with the
/// lowest validation loss.
pub fn train_classifier(
    train: &[SlideBag],
    val: &[SlideBag],
    arch: AbmilArch,
    config: &TrainConfig,
) -> Result<(AbmilModel, HeadHistory)> {
    let mut classes = alloc::collections::BTreeSet::new();
    for bag in train {
        match bag.target {
            BagTarget::Class(c) => {
                classes.insert(c);
            }
            BagTarget::Survival { .. } => {
                return Err(Error::InvalidArgument("classification needs class labels".into()))
            }
        }
    }
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels);
    }
    if let Some(&max) = classes.last() {
        if max as usize >= arch.outputs {
            return Err(Error::InvalidArgument(alloc::format!(
                "label {max} outside {} outputs",
                arch.outputs
            )));
        }
    }
    fit(train, val, arch, config, &Objective::Classify)
}

/// Trains a discrete-time survival head with `spec.n_bins()` outputs.
pub fn train_survival(
    train: &[SlideBag],
    val: &[SlideBag],
    arch: AbmilArch,
    spec: &SurvivalSpec,
    config: &TrainConfig,
) -> Result<(AbmilModel, HeadHistory)> {
    if arch.outputs != spec.n_bins() {
        return Err(Error::DimMismatch {
            expected: spec.n_bins(),
            actual: arch.outputs,
            context: "survival head outputs",
        });
    }
    if train.is_empty() {
        return Err(Error::InsufficientData("no training bags".into()));
    }
    fit(train, val, arch, config, &Objective::Survival(spec))
}

fn mean_loss(model: &AbmilModel, bags: &[SlideBag], objective: &Objective) -> Result<f64> {
    let mut total = 0.0;
    for bag in bags {
        total += objective.loss(&model.forward(bag)?.logits, &bag.target)?.0;
    }
    Ok(total / bags.len().max(1) as f64)
}

fn fit(
    train: &[SlideBag],
    val: &[SlideBag],
    arch: AbmilArch,
    config: &TrainConfig,
    objective: &Objective,
) -> Result<(AbmilModel, HeadHistory)> {
    config.validate()?;
    for bag in train.iter().chain(val) {
        bag.validate()?;
    }
    let mut rng = rng_from(config.seed);
    let mut model = AbmilModel::init(&arch, &mut rng)?;
    let mut opt = AdamW::new(config.weight_decay);
    let per_step = (config.batch_size as usize).max(1);

    let mut history = HeadHistory::default();
    history.train.push(mean_loss(&model, train, objective)?);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    if !val.is_empty() {
        best_val = mean_loss(&model, val, objective)?;
        history.val.push(best_val);
    }
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(per_step) {
            let mut grad = model.zeros_like();
            for &i in chunk {
                let cache = model.forward_cached(&train[i].instances, Some(&mut rng))?;
                let (_, d_logits) = objective.loss(&cache.out.logits, &train[i].target)?;
                model.backward(&cache, &d_logits, &mut grad);
            }
            let inv = 1.0 / chunk.len() as f64;
            let grads: Vec<Vec<f64>> = grad
                .layers()
                .iter()
                .flat_map(|l| l.params())
                .map(|p| p.iter().map(|v| v * inv).collect())
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f64]> = model.layers_mut().into_iter().flat_map(|l| l.params_mut()).collect();
            opt.step(&mut params, &grad_refs, lr);
        }
        history.epochs_run = epoch + 1;
        history.train.push(mean_loss(&model, train, objective)?);
        if val.is_empty() {
            best = model.clone();
            history.best_epoch = epoch + 1;
            continue;
        }
        let v = mean_loss(&model, val, objective)?;
        history.val.push(v);
        if v < best_val {
            best_val = v;
            best = model.clone();
            history.best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if !best.is_finite() {
        return Err(Error::NonFiniteValue("attention MIL parameters".into()));
    }
    Ok((best, history))
}
