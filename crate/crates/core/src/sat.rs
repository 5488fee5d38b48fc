//! Self-supervised adversarial fine-tuning.
//!
//! Every minibatch is attacked in feature space, then the encoder and score
//! heads take one optimizer step on the InfoNCE contrast loss between the
//! clean and adversarial representations. Negatives for row `i` are the
//! other adversarial representations in the batch, so the batch size is
//! also the number of scored pairs per row.
//!
//! No step reads dataset labels. Attack groups come from k-means clusters
//! of the representation library, recomputed at the start of every epoch.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::sign_descent;
use crate::data::Dataset;
use crate::encoder::{collect_grads, EncoderModel, ScoreHeads};
use crate::error::{Error, Result};
use crate::knn::{nearest_group, FeatureLibrary};
use crate::rng;
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor, Var};

/// Mean over rows of `logsumexp(L_i) - L_ii` for a square logit matrix.
pub fn contrast_loss_on(tape: &mut Tape, logits: Var) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    match shape.as_slice() {
        [n, m] if n == m && *n >= 2 => {}
        _ => {
            return Err(Error::InvalidArgument(format!(
                "contrast loss needs an N x N logit matrix with N >= 2, got {shape:?}"
            )))
        }
    }
    let positives: Vec<usize> = (0..shape[0]).collect();
    let rows = tape.cross_entropy(logits, &positives)?;
    Ok(tape.mean(rows)?)
}

pub fn contrast_loss_from_logits(logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = contrast_loss_on(&mut tape, l)?;
    Ok(tape.value(loss).item().expect("scalar"))
}

/// NCE lower bound on the mutual information implied by a logit matrix:
/// `ln N - contrast_loss`.
pub fn nce_from_logits(logits: &Tensor) -> Result<f64> {
    let n = logits.rows() as f64;
    Ok(n.ln() - contrast_loss_from_logits(logits)?)
}

fn score_logits(heads: &ScoreHeads, z: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    if z.shape() != z_hat.shape() {
        return Err(Error::InvalidArgument(format!(
            "clean and adversarial batches differ in shape: {:?} vs {:?}",
            z.shape(),
            z_hat.shape()
        )));
    }
    if z.rows() < 2 {
        return Err(Error::InvalidArgument(
            "contrast loss needs at least 2 pairs".into(),
        ));
    }
    let mut tape = Tape::new();
    let bound = heads.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let zh = tape.constant(z_hat.clone());
    let l = heads.logits_on(&mut tape, &bound, zv, zh)?;
    Ok(tape.value(l).clone())
}

/// Contrast loss for row-aligned representation batches `[N, rep_dim]`.
pub fn contrast_loss(heads: &ScoreHeads, z: &Tensor, z_hat: &Tensor) -> Result<f64> {
    contrast_loss_from_logits(&score_logits(heads, z, z_hat)?)
}

pub fn nce_estimate(heads: &ScoreHeads, z: &Tensor, z_hat: &Tensor) -> Result<f64> {
    nce_from_logits(&score_logits(heads, z, z_hat)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
    pub group_m: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Clusters used as pseudo-classes when choosing attack groups.
    pub pseudo_classes: usize,
    pub kmeans_iters: usize,
    /// Fingerprint of the pretrained seed model, if known.
    pub expected_seed: Option<[u8; 32]>,
}

impl Default for SatConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 100,
            // training radius above the evaluation radius; at desk scale
            // the evaluation radius barely moves the contrast loss
            eps: 0.12,
            step: 0.02,
            iters: 10,
            group_m: 300,
            lr: 0.02,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            pseudo_classes: 10,
            kmeans_iters: 20,
            expected_seed: None,
        }
    }
}

impl SatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "SAT batch size must be at least 2 (one negative per row)".into(),
            ));
        }
        if self.epochs == 0
            || self.iters == 0
            || self.group_m == 0
            || self.pseudo_classes < 2
            || !(self.eps >= 0.0)
            || !(self.step > 0.0)
            || !(self.lr > 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid SAT config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatLogRow {
    pub epoch: usize,
    pub batch: usize,
    pub contrast_loss: f64,
    pub i_nce: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SatReport {
    /// Mean contrast loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub rows: Vec<SatLogRow>,
    pub warnings: Vec<String>,
}

impl SatReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,batch,contrast_loss,i_nce,wall_ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.batch, r.contrast_loss, r.i_nce, r.wall_ms
            ));
        }
        s
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Deterministic k-means (k-means++ seeding, Lloyd updates). Returns the
/// cluster id of every row. Empty clusters keep their previous centroid.
pub fn kmeans(rows: &[f64], width: usize, k: usize, iters: usize, seed: u64) -> Vec<usize> {
    let n = rows.len() / width;
    let row = |i: usize| &rows[i * width..(i + 1) * width];
    let k = k.min(n).max(1);
    let mut r = rng::from_seed(seed);

    let mut centroids: Vec<Vec<f64>> = vec![row(r.gen_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = r.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            r.gen_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.push(c);
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let x = row(i);
                let mut best = (f64::INFINITY, 0);
                for (c, mu) in centroids.iter().enumerate() {
                    let d = sq_dist(x, mu);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut labels = assign(&centroids);
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; width]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next = assign(&centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

fn encode_rows(model: &EncoderModel, dataset: &Dataset) -> Result<Vec<f64>> {
    let mut reps = Vec::with_capacity(dataset.len() * model.rep_dim());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(1024) {
        reps.extend_from_slice(model.encode(&dataset.batch(chunk))?.data());
    }
    Ok(reps)
}

/// Pseudo-labelled representation library of the current model.
fn cluster_library(
    model: &EncoderModel,
    dataset: &Dataset,
    cfg: &SatConfig,
    epoch: usize,
) -> Result<FeatureLibrary> {
    let reps = encode_rows(model, dataset)?;
    let width = model.rep_dim();
    let clusters = kmeans(
        &reps,
        width,
        cfg.pseudo_classes,
        cfg.kmeans_iters,
        rng::derive(cfg.seed, &[epoch as u64, 0x6b6d]),
    );
    FeatureLibrary::new(reps, width, clusters, model.fingerprint())
}

/// Attack targets for library row `i`: the nearest other pseudo-class,
/// shrinking the group if no other cluster is large enough.
fn group_targets(library: &FeatureLibrary, i: usize, m: usize) -> Result<Option<Arc<Tensor>>> {
    let own = library.labels()[i];
    let classes = library.labels().iter().max().map_or(0, |&c| c + 1);
    let mut sizes = vec![0usize; classes];
    for &l in library.labels() {
        sizes[l] += 1;
    }
    let largest_other = (0..classes)
        .filter(|&c| c != own)
        .map(|c| sizes[c])
        .max()
        .unwrap_or(0);
    if largest_other == 0 {
        return Ok(None);
    }
    let group = nearest_group(library, library.row(i), m.min(largest_other), own)?;
    Ok(Some(Arc::new(library.gather(&group))))
}

/// Fine-tunes `model` and `heads` in place.
pub fn sat_train(
    model: &mut EncoderModel,
    heads: &mut ScoreHeads,
    dataset: &Dataset,
    cfg: &SatConfig,
) -> Result<SatReport> {
    cfg.validate()?;
    if dataset.dim() != model.input_dim() {
        return Err(Error::Model(format!(
            "dataset width {} does not match encoder input {}",
            dataset.dim(),
            model.input_dim()
        )));
    }
    if heads.rep_dim() != model.rep_dim() {
        return Err(Error::Model(format!(
            "score heads expect width {}, encoder produces {}",
            heads.rep_dim(),
            model.rep_dim()
        )));
    }
    let mut report = SatReport::default();
    if let Some(expected) = cfg.expected_seed {
        if model.fingerprint() != expected {
            let msg = "model does not match the expected pretrained seed fingerprint".to_string();
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
    }

    let mut enc_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut head_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let n = dataset.len();
    for epoch in 0..cfg.epochs {
        let library = cluster_library(model, dataset, cfg, epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::from_seed(rng::derive(cfg.seed, &[epoch as u64])));
        let mut losses = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let started = Instant::now();
            let x = dataset.batch(batch);
            let mut adv = Vec::with_capacity(x.len());
            for &i in batch {
                let xi = dataset.example(i);
                let start = rng::derive(cfg.seed, &[epoch as u64, i as u64, 0x6164]);
                match group_targets(&library, i, cfg.group_m)? {
                    Some(targets) => {
                        let (x_adv, _) = sign_descent(
                            model, xi, &targets, cfg.eps, cfg.step, cfg.iters, Some(start),
                        )?;
                        adv.extend(x_adv);
                    }
                    None => adv.extend_from_slice(xi),
                }
            }
            let x_adv = Tensor::matrix(batch.len(), dataset.dim(), adv)?;

            let mut tape = Tape::new();
            let enc_bound = model.bind(&mut tape, true);
            let head_bound = heads.bind(&mut tape, true);
            let xv = tape.constant(x);
            let xav = tape.constant(x_adv);
            let z = model.encode_on(&mut tape, &enc_bound, xv)?;
            let z_hat = model.encode_on(&mut tape, &enc_bound, xav)?;
            let logits = heads.logits_on(&mut tape, &head_bound, z, z_hat)?;
            let loss_v = contrast_loss_on(&mut tape, logits)?;
            let loss = tape.value(loss_v).item().expect("scalar");
            let mut grads = tape.backward(loss_v)?;
            let enc_grads = collect_grads(&enc_bound.vars(), &mut grads);
            let head_grads = collect_grads(&head_bound.vars(), &mut grads);
            enc_opt.step(&mut model.body_mut().params_mut(), &enc_grads)?;
            head_opt.step(&mut heads.params_mut(), &head_grads)?;

            losses.push(loss);
            report.rows.push(SatLogRow {
                epoch,
                batch: b,
                contrast_loss: loss,
                i_nce: (batch.len() as f64).ln() - loss,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        log::info!("sat epoch {epoch}: contrast loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
