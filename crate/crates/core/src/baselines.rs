//! Training loops for every model that enters a comparison: contrastive
//! pretraining of the seed encoder, plain supervised training, and the
//! supervised adversarial baselines AT, MAT and ALP.
//!
//! Supervised models reuse the encoder body and add a linear
//! [`ClassifierHead`] on the representation, so SSL and supervised models
//! have the same capacity up to the representation layer.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationPolicy, Dataset};
use crate::encoder::{collect_grads, BoundMlp, EncoderModel, LayerSpec, Mlp, ScoreHeads};
use crate::error::{Error, Result};
use crate::rng;
use crate::sat::contrast_loss_on;
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor, Var};

/// Linear map from representations to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub linear: Mlp,
}

impl ClassifierHead {
    pub fn init(rep_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs at least 2 classes, got {classes}"
            )));
        }
        Ok(Self {
            linear: Mlp::init(vec![LayerSpec::linear(rep_dim, classes)], seed)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn rep_dim(&self) -> usize {
        self.linear.input_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdSettings {
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
}

impl Default for PgdSettings {
    fn default() -> Self {
        Self {
            eps: 0.03,
            step: 0.005,
            iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub pgd: PgdSettings,
    pub alp_lambda: f64,
    pub augmentation: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            pgd: PgdSettings::default(),
            alp_lambda: 0.5,
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epochs, batch_size and lr must be positive (got {self:?})"
            )));
        }
        if !(self.alp_lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ALP weight must be >= 0, got {}",
                self.alp_lambda
            )));
        }
        if !(self.pgd.eps >= 0.0) || !(self.pgd.step >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "PGD needs eps >= 0 and step >= 0, got {:?}",
                self.pgd
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

fn check_dims(model: &EncoderModel, dataset: &Dataset) -> Result<()> {
    if dataset.dim() != model.input_dim() {
        return Err(Error::Model(format!(
            "dataset width {} does not match encoder input {}",
            dataset.dim(),
            model.input_dim()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::from_seed(rng::derive(seed, &[epoch as u64])));
    order
}

/// Instance-discrimination pretraining: two augmented views of each
/// example are the positive pair, views of other examples the negatives.
/// Labels are never read.
pub fn pretrain_ssl(
    dataset: &Dataset,
    model: &mut EncoderModel,
    heads: &mut ScoreHeads,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "contrastive pretraining needs batch size >= 2".into(),
        ));
    }
    check_dims(model, dataset)?;
    let mut enc_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut head_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let d = dataset.dim();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        for batch in shuffled(dataset.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut a = Vec::with_capacity(batch.len() * d);
            let mut b = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                let x = dataset.example(i);
                let (e, i) = (epoch as u64, i as u64);
                a.extend(augment(x, &cfg.augmentation, rng::derive(cfg.seed, &[e, i, 1])));
                b.extend(augment(x, &cfg.augmentation, rng::derive(cfg.seed, &[e, i, 2])));
            }
            let mut tape = Tape::new();
            let enc = model.bind(&mut tape, true);
            let hb = heads.bind(&mut tape, true);
            let av = tape.constant(Tensor::matrix(batch.len(), d, a)?);
            let bv = tape.constant(Tensor::matrix(batch.len(), d, b)?);
            let z = model.encode_on(&mut tape, &enc, av)?;
            let zh = model.encode_on(&mut tape, &enc, bv)?;
            let logits = heads.logits_on(&mut tape, &hb, z, zh)?;
            let loss = contrast_loss_on(&mut tape, logits)?;
            losses.push(tape.value(loss).item().expect("scalar"));
            let mut grads = tape.backward(loss)?;
            let ge = collect_grads(&enc.vars(), &mut grads);
            let gh = collect_grads(&hb.vars(), &mut grads);
            enc_opt.step(&mut model.body_mut().params_mut(), &ge)?;
            head_opt.step(&mut heads.params_mut(), &gh)?;
        }
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        log::info!("ssl epoch {epoch}: contrast loss {mean:.5}");
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

struct Bound {
    enc: BoundMlp,
    head: BoundMlp,
}

fn bind(tape: &mut Tape, model: &EncoderModel, head: &ClassifierHead, trainable: bool) -> Bound {
    Bound {
        enc: model.bind(tape, trainable),
        head: head.linear.bind(tape, trainable),
    }
}

fn logits_on(
    tape: &mut Tape,
    model: &EncoderModel,
    head: &ClassifierHead,
    bound: &Bound,
    x: Var,
) -> Result<Var> {
    let z = model.encode_on(tape, &bound.enc, x)?;
    head.linear.forward(tape, &bound.head, z)
}

fn check_head(model: &EncoderModel, head: &ClassifierHead, x: &Tensor, y: &[usize]) -> Result<()> {
    if head.rep_dim() != model.rep_dim() {
        return Err(Error::Model(format!(
            "classifier expects width {}, encoder produces {}",
            head.rep_dim(),
            model.rep_dim()
        )));
    }
    if x.shape().len() != 2 || x.rows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "batch shape {:?} does not match {} labels",
            x.shape(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= head.classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            head.classes()
        )));
    }
    Ok(())
}

pub fn predict_logits(model: &EncoderModel, head: &ClassifierHead, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, head, false);
    let xv = tape.constant(x.clone());
    let l = logits_on(&mut tape, model, head, &bound, xv)?;
    Ok(tape.value(l).clone())
}

pub fn predict_labels(model: &EncoderModel, head: &ClassifierHead, x: &Tensor) -> Result<Vec<usize>> {
    let logits = predict_logits(model, head, x)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Per-example cross-entropy of the classifier.
pub fn per_example_loss(
    model: &EncoderModel,
    head: &ClassifierHead,
    x: &Tensor,
    y: &[usize],
) -> Result<Vec<f64>> {
    check_head(model, head, x, y)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, head, false);
    let xv = tape.constant(x.clone());
    let l = logits_on(&mut tape, model, head, &bound, xv)?;
    let ce = tape.cross_entropy(l, y)?;
    Ok(tape.value(ce).data().to_vec())
}

/// Sign-gradient ascent on the cross-entropy inside the `l_inf` ball,
/// from a uniform random start. Rows of `x` are attacked independently.
pub fn pgd_label_attack(
    model: &EncoderModel,
    head: &ClassifierHead,
    x: &Tensor,
    y: &[usize],
    pgd: &PgdSettings,
    seed: u64,
) -> Result<Tensor> {
    if !(pgd.eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "PGD radius must be >= 0, got {}",
            pgd.eps
        )));
    }
    check_head(model, head, x, y)?;
    if pgd.eps == 0.0 {
        return Ok(x.clone());
    }
    let eps = pgd.eps;
    let mut r = rng::from_seed(seed);
    let mut adv: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| (v + r.gen_range(-eps..=eps)).clamp(0.0, 1.0))
        .collect();
    for _ in 0..pgd.iters {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, model, head, false);
        let xv = tape.leaf(Tensor::new(x.shape().to_vec(), adv.clone())?, true);
        let l = logits_on(&mut tape, model, head, &bound, xv)?;
        let ce = tape.cross_entropy(l, y)?;
        let total = tape.sum(ce)?;
        let grad = match tape.backward(total) {
            Ok(mut g) => g.take(xv).expect("input requires grad").into_data(),
            Err(crate::tensor::TensorError::Detached) => vec![0.0; adv.len()],
            Err(e) => return Err(e.into()),
        };
        for ((a, &x0), g) in adv.iter_mut().zip(x.data()).zip(grad) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = (*a + pgd.step * s).clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), adv)?)
}

/// Which supervised objective a training loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Plain,
    At,
    Mat,
    Alp,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Plain => "sup",
            Objective::At => "at",
            Objective::Mat => "mat",
            Objective::Alp => "alp",
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn build_objective(
    tape: &mut Tape,
    model: &EncoderModel,
    head: &ClassifierHead,
    bound: &Bound,
    x: &Tensor,
    x_adv: Option<&Tensor>,
    y: &[usize],
    objective: Objective,
    lambda: f64,
) -> Result<Var> {
    let clean = |tape: &mut Tape| -> Result<(Var, Var)> {
        let xv = tape.constant(x.clone());
        let l = logits_on(tape, model, head, bound, xv)?;
        let ce = tape.cross_entropy(l, y)?;
        Ok((l, tape.mean(ce)?))
    };
    let adversarial = |tape: &mut Tape| -> Result<(Var, Var)> {
        let xa = tape.constant(x_adv.expect("adversarial batch").clone());
        let l = logits_on(tape, model, head, bound, xa)?;
        let ce = tape.cross_entropy(l, y)?;
        Ok((l, tape.mean(ce)?))
    };
    Ok(match objective {
        Objective::Plain => clean(tape)?.1,
        Objective::At => adversarial(tape)?.1,
        Objective::Mat => {
            let (_, a) = adversarial(tape)?;
            let (_, c) = clean(tape)?;
            tape.add(a, c)?
        }
        Objective::Alp => {
            let (lc, j) = clean(tape)?;
            if lambda == 0.0 {
                j
            } else {
                let (la, _) = adversarial(tape)?;
                let pair = tape.sq_diff(lc, la)?;
                let pair = tape.scale(pair, lambda / y.len() as f64)?;
                tape.add(j, pair)?
            }
        }
    })
}

/// Value of a supervised objective on one batch at fixed parameters. The
/// adversarial batch is generated with `seed`, exactly as the training loop
/// would for that batch.
pub fn objective_value(
    model: &EncoderModel,
    head: &ClassifierHead,
    x: &Tensor,
    y: &[usize],
    objective: Objective,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    check_head(model, head, x, y)?;
    let x_adv = match objective {
        Objective::Plain => None,
        _ => Some(pgd_label_attack(model, head, x, y, &cfg.pgd, seed)?),
    };
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, head, false);
    let loss = build_objective(
        &mut tape,
        model,
        head,
        &bound,
        x,
        x_adv.as_ref(),
        y,
        objective,
        cfg.alp_lambda,
    )?;
    Ok(tape.value(loss).item().expect("scalar"))
}

/// Shared loop for the four supervised objectives.
pub fn train_classifier(
    dataset: &Dataset,
    model: &mut EncoderModel,
    head: &mut ClassifierHead,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_dims(model, dataset)?;
    if head.classes() != dataset.num_classes() || head.rep_dim() != model.rep_dim() {
        return Err(Error::Model(format!(
            "classifier {}->{} does not fit encoder width {} and {} classes",
            head.rep_dim(),
            head.classes(),
            model.rep_dim(),
            dataset.num_classes()
        )));
    }
    let mut enc_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut head_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        for (b, batch) in shuffled(dataset.len(), cfg.seed, epoch)
            .chunks(cfg.batch_size)
            .enumerate()
        {
            let x = dataset.batch(batch);
            let y: Vec<usize> = batch.iter().map(|&i| dataset.label(i)).collect();
            let x_adv = match objective {
                Objective::Plain => None,
                Objective::Alp if cfg.alp_lambda == 0.0 => None,
                _ => {
                    let seed = rng::derive(cfg.seed, &[epoch as u64, b as u64, 0x7067]);
                    Some(pgd_label_attack(model, head, &x, &y, &cfg.pgd, seed)?)
                }
            };
            let mut tape = Tape::new();
            let bound = bind(&mut tape, model, head, true);
            let loss = build_objective(
                &mut tape,
                model,
                head,
                &bound,
                &x,
                x_adv.as_ref(),
                &y,
                objective,
                cfg.alp_lambda,
            )?;
            losses.push(tape.value(loss).item().expect("scalar"));
            let mut grads = tape.backward(loss)?;
            let ge = collect_grads(&bound.enc.vars(), &mut grads);
            let gh = collect_grads(&bound.head.vars(), &mut grads);
            enc_opt.step(&mut model.body_mut().params_mut(), &ge)?;
            head_opt.step(&mut head.linear.params_mut(), &gh)?;
        }
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        log::info!("{} epoch {epoch}: loss {mean:.5}", objective.name());
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

pub fn train_supervised(
    dataset: &Dataset,
    model: &mut EncoderModel,
    head: &mut ClassifierHead,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_classifier(dataset, model, head, cfg, Objective::Plain)
}

pub fn train_at(
    dataset: &Dataset,
    model: &mut EncoderModel,
    head: &mut ClassifierHead,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_classifier(dataset, model, head, cfg, Objective::At)
}

pub fn train_mat(
    dataset: &Dataset,
    model: &mut EncoderModel,
    head: &mut ClassifierHead,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_classifier(dataset, model, head, cfg, Objective::Mat)
}

pub fn train_alp(
    dataset: &Dataset,
    model: &mut EncoderModel,
    head: &mut ClassifierHead,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_classifier(dataset, model, head, cfg, Objective::Alp)
}

/// Fraction of correctly classified rows that stay correct under
/// [`pgd_label_attack`]. `None` when no row is classified correctly.
pub fn label_dsr(
    model: &EncoderModel,
    head: &ClassifierHead,
    x: &Tensor,
    y: &[usize],
    pgd: &PgdSettings,
    seed: u64,
) -> Result<Option<f64>> {
    let clean = predict_labels(model, head, x)?;
    let correct: Vec<usize> = (0..y.len()).filter(|&i| clean[i] == y[i]).collect();
    if correct.is_empty() {
        return Ok(None);
    }
    let d = x.cols();
    let data: Vec<f64> = correct.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    let xs = Tensor::matrix(correct.len(), d, data)?;
    let ys: Vec<usize> = correct.iter().map(|&i| y[i]).collect();
    let adv = pgd_label_attack(model, head, &xs, &ys, pgd, seed)?;
    let after = predict_labels(model, head, &adv)?;
    let kept = after.iter().zip(&ys).filter(|(a, b)| a == b).count();
    Ok(Some(kept as f64 / ys.len() as f64))
}
