//! White-box attacks in feature space against the kNN classifier.
//!
//! Both attacks pull the representation of `x + delta` towards a fixed group
//! of library representations from another class: the gradient attack takes
//! signed steps inside an `l_inf` ball, the optimization attack minimizes a
//! Lagrangian with Adam and binary-searches the penalty weight for the
//! smallest `l2` perturbation that flips the prediction.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::knn::{knn_predict, nearest_group, FeatureLibrary};
use crate::rng;
use crate::tensor::{Optimizer, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// `l_inf` budget.
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
    pub group_m: usize,
    pub random_init: bool,
    /// Neighbors used when judging success.
    pub k: usize,
    pub seed: u64,
}

impl AttackConfig {
    /// eps = 0.03, step = 0.005, 10 iterations.
    pub fn small() -> Self {
        Self {
            eps: 0.03,
            step: 0.005,
            iters: 10,
            group_m: 300,
            random_init: true,
            k: 75,
            seed: 0,
        }
    }

    /// eps = 0.06, step = 0.005, 20 iterations.
    pub fn large() -> Self {
        Self {
            eps: 0.06,
            iters: 20,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !(self.step > 0.0) || self.iters == 0 || self.group_m == 0 {
            return Err(Error::InvalidArgument(format!(
                "attack needs eps >= 0, step > 0, iters >= 1, group_m >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    /// The kNN label of `x_adv` differs from the true label.
    pub success: bool,
    pub objective_trace: Vec<f64>,
    pub l2: f64,
    pub linf: f64,
}

impl AttackResult {
    fn new(x: &[f64], x_adv: Vec<f64>, success: bool, objective_trace: Vec<f64>) -> Self {
        let (mut l2, mut linf) = (0.0f64, 0.0f64);
        for (a, b) in x_adv.iter().zip(x) {
            let d = a - b;
            l2 += d * d;
            linf = linf.max(d.abs());
        }
        Self {
            x_adv,
            success,
            objective_trace,
            l2: l2.sqrt(),
            linf,
        }
    }
}

/// `sum_i ||targets_i - f(x)||^2` and its gradient with respect to `x`.
pub fn group_objective(
    model: &EncoderModel,
    x: &[f64],
    targets: &Arc<Tensor>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?, true);
    let tv = tape.leaf_shared(Arc::clone(targets), false);
    let z = model.encode_on(&mut tape, &bound, xv)?;
    let loss = tape.sq_dist_to_rows(z, tv)?;
    let value = tape.value(loss).item().expect("scalar");
    let grad = match tape.backward(loss) {
        Ok(mut g) => g.take(xv).expect("x requires grad").into_data(),
        // a model whose output ignores the input leaves x detached
        Err(crate::tensor::TensorError::Detached) => vec![0.0; x.len()],
        Err(e) => return Err(e.into()),
    };
    Ok((value, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed-gradient descent on the group objective, projected onto the
/// `eps`-ball around `x` and onto `[0,1]^d` after every step.
///
/// Returns the final point and the objective before each step plus the
/// objective at the final point.
pub fn sign_descent(
    model: &EncoderModel,
    x: &[f64],
    targets: &Arc<Tensor>,
    eps: f64,
    step: f64,
    iters: usize,
    random_start: Option<u64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut x_adv: Vec<f64> = match random_start {
        Some(seed) if eps > 0.0 => {
            let mut r = rng::from_seed(seed);
            x.iter()
                .map(|&v| (v + r.gen_range(-eps..=eps)).clamp(0.0, 1.0))
                .collect()
        }
        _ => x.to_vec(),
    };
    let mut trace = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let (value, grad) = group_objective(model, &x_adv, targets)?;
        trace.push(value);
        for ((a, &x0), g) in x_adv.iter_mut().zip(x).zip(grad) {
            let moved = *a - step * sign(g);
            *a = moved.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        }
    }
    let (value, _) = group_objective(model, &x_adv, targets)?;
    trace.push(value);
    Ok((x_adv, trace))
}

fn predicted_label(
    model: &EncoderModel,
    library: &FeatureLibrary,
    x: &[f64],
    k: usize,
) -> Result<usize> {
    Ok(knn_predict(library, &model.encode_one(x)?, k)?.label)
}

/// Signed-gradient attack pulling `f(x)` towards the nearest other-class
/// group. The group is chosen once from the clean representation.
pub fn gradient_attack(
    model: &EncoderModel,
    library: &FeatureLibrary,
    x: &[f64],
    true_label: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    library.check_model(model)?;
    gradient_attack_unchecked(model, library, x, true_label, cfg)
}

pub(crate) fn gradient_attack_unchecked(
    model: &EncoderModel,
    library: &FeatureLibrary,
    x: &[f64],
    true_label: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let z = model.encode_one(x)?;
    let group = nearest_group(library, &z, cfg.group_m, true_label)?;
    let targets = Arc::new(library.gather(&group));
    let start = cfg.random_init.then_some(cfg.seed);
    let (x_adv, trace) = sign_descent(model, x, &targets, cfg.eps, cfg.step, cfg.iters, start)?;
    let success = predicted_label(model, library, &x_adv, cfg.k)? != true_label;
    Ok(AttackResult::new(x, x_adv, success, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptAttackConfig {
    pub group_m: usize,
    pub k: usize,
    pub adam_steps: usize,
    pub lr: f64,
    pub search_steps: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
}

impl Default for OptAttackConfig {
    fn default() -> Self {
        Self {
            group_m: 300,
            k: 75,
            adam_steps: 200,
            lr: 0.01,
            search_steps: 9,
            lambda_lo: 1e-3,
            lambda_hi: 1e3,
        }
    }
}

/// Minimizes `lambda ||delta||^2 + sum_i ||targets_i - f(x + delta)||^2`
/// with Adam from `delta = 0`, keeping `x + delta` in `[0,1]^d`.
fn minimize_lagrangian(
    model: &EncoderModel,
    x: &[f64],
    targets: &Arc<Tensor>,
    lambda: f64,
    cfg: &OptAttackConfig,
) -> Result<(Vec<f64>, f64)> {
    let d = x.len();
    let x_t = Arc::new(Tensor::matrix(1, d, x.to_vec())?);
    let zero = Arc::new(Tensor::zeros(vec![1, d]));
    let mut delta = Tensor::zeros(vec![1, d]);
    let mut opt = Optimizer::adam(cfg.lr);
    let mut last = f64::NAN;
    for _ in 0..cfg.adam_steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.leaf_shared(Arc::clone(&x_t), false);
        let dv = tape.leaf(delta.clone(), true);
        let zero_v = tape.leaf_shared(Arc::clone(&zero), false);
        let tv = tape.leaf_shared(Arc::clone(targets), false);
        let input = tape.add(xv, dv)?;
        let z = model.encode_on(&mut tape, &bound, input)?;
        let pull = tape.sq_dist_to_rows(z, tv)?;
        let norm = tape.sq_diff(dv, zero_v)?;
        let penalty = tape.scale(norm, lambda)?;
        let loss = tape.add(pull, penalty)?;
        last = tape.value(loss).item().expect("scalar");
        let mut grads = tape.backward(loss)?;
        let g = grads.take(dv);
        opt.step(&mut [&mut delta], &[g])?;
        let dd = delta.data_mut();
        for (dj, &xj) in dd.iter_mut().zip(x) {
            *dj = (xj + *dj).clamp(0.0, 1.0) - xj;
        }
    }
    let x_adv = x
        .iter()
        .zip(delta.data())
        .map(|(a, b)| (a + b).clamp(0.0, 1.0))
        .collect();
    Ok((x_adv, last))
}

/// Smallest-`l2` perturbation that flips the kNN label, found by a
/// log-space binary search over the penalty weight. A successful weight is
/// raised (smaller perturbation), a failed one lowered; the best success
/// across all weights tried is returned. Until some weight fails, each
/// success also widens the upper end of the bracket by its initial ratio.
pub fn optimization_attack(
    model: &EncoderModel,
    library: &FeatureLibrary,
    x: &[f64],
    true_label: usize,
    cfg: &OptAttackConfig,
) -> Result<AttackResult> {
    library.check_model(model)?;
    optimization_attack_unchecked(model, library, x, true_label, cfg)
}

pub(crate) fn optimization_attack_unchecked(
    model: &EncoderModel,
    library: &FeatureLibrary,
    x: &[f64],
    true_label: usize,
    cfg: &OptAttackConfig,
) -> Result<AttackResult> {
    if !(cfg.lambda_lo > 0.0 && cfg.lambda_hi > cfg.lambda_lo) {
        return Err(Error::InvalidArgument(format!(
            "penalty bracket must satisfy 0 < lo < hi, got [{}, {}]",
            cfg.lambda_lo, cfg.lambda_hi
        )));
    }
    let z = model.encode_one(x)?;
    if knn_predict(library, &z, cfg.k)?.label != true_label {
        return Ok(AttackResult::new(x, x.to_vec(), true, Vec::new()));
    }
    let group = nearest_group(library, &z, cfg.group_m, true_label)?;
    let targets = Arc::new(library.gather(&group));

    let (mut lo, mut hi) = (cfg.lambda_lo, cfg.lambda_hi);
    let mut best: Option<Vec<f64>> = None;
    let mut best_l2 = f64::INFINITY;
    let mut failed = false;
    let mut last = x.to_vec();
    let mut trace = Vec::with_capacity(cfg.search_steps);
    for _ in 0..cfg.search_steps {
        let lambda = (lo * hi).sqrt();
        let (x_adv, objective) = minimize_lagrangian(model, x, &targets, lambda, cfg)?;
        trace.push(objective);
        if predicted_label(model, library, &x_adv, cfg.k)? != true_label {
            let l2 = x_adv
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if l2 < best_l2 {
                best_l2 = l2;
                best = Some(x_adv.clone());
            }
            lo = lambda;
            if !failed {
                // the upper end has not been shown to fail yet
                hi *= cfg.lambda_hi / cfg.lambda_lo;
            }
        } else {
            hi = lambda;
            failed = true;
        }
        last = x_adv;
    }
    Ok(match best {
        Some(x_adv) => AttackResult::new(x, x_adv, true, trace),
        None => AttackResult::new(x, last, false, trace),
    })
}
