#![allow(dead_code)]

use rand::Rng;
use satkit::baselines::{pretrain_ssl, train_supervised, ClassifierHead, TrainConfig};
use satkit::data::{gen_synthetic, split, Dataset, SyntheticSpec};
use satkit::encoder::{EncoderModel, EncoderSpec, LayerSpec, Mlp, ScoreHeads};
use satkit::knn::FeatureLibrary;
use satkit::rng;
use satkit::sat::contrast_loss_on;
use satkit::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps gradients that are
/// zero up to rounding from dominating the ratio.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Central-difference check of `f` over every element of `params`.
/// `f(params)` returns the loss and, when asked, the analytic gradients.
pub fn fd_check<F>(params: &[Tensor], f: F) -> f64
where
    F: Fn(&[Tensor], bool) -> (f64, Option<Vec<Tensor>>),
{
    let (_, grads) = f(params, true);
    let grads = grads.expect("gradients requested");
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            let with = |v: f64| {
                let mut d = params[p].data().to_vec();
                d[e] = v;
                Tensor::new(params[p].shape().to_vec(), d).unwrap()
            };
            work[p] = with(orig + FD_STEP);
            let up = f(&work, false).0;
            work[p] = with(orig - FD_STEP);
            let down = f(&work, false).0;
            work[p] = params[p].clone();
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[p].data()[e], numeric));
        }
    }
    worst
}

/// One step of a randomly generated computation. Operands index earlier
/// steps; `Leaf` steps are the differentiated inputs.
#[derive(Debug, Clone)]
pub enum Step {
    Leaf(Tensor),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    /// `ln(exp(a) + exp(b))`, keeping `ln` on a positive argument.
    SoftPlus2(usize, usize),
    Transpose(usize),
    Diag(usize),
    Gather(usize, Vec<usize>),
    ConcatRows(usize, usize),
    LogSumExp(usize),
    CrossEntropy(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    SqDiff(usize, usize),
    Dot(usize, usize),
    SqDistToRows(usize, usize),
}

#[derive(Debug, Clone)]
pub struct Program {
    pub steps: Vec<Step>,
}

fn apply(tape: &mut Tape, vars: &[Var], step: &Step) -> Result<Var, satkit::tensor::TensorError> {
    use Step::*;
    match step {
        Leaf(t) => Ok(tape.leaf(t.clone(), true)),
        MatMul(a, b) => tape.matmul(vars[*a], vars[*b]),
        AddBias(a, b) => tape.add_bias(vars[*a], vars[*b]),
        Add(a, b) => tape.add(vars[*a], vars[*b]),
        Sub(a, b) => tape.sub(vars[*a], vars[*b]),
        Mul(a, b) => tape.mul(vars[*a], vars[*b]),
        Scale(a, c) => tape.scale(vars[*a], *c),
        Relu(a) => tape.relu(vars[*a]),
        Exp(a) => tape.exp(vars[*a]),
        SoftPlus2(a, b) => {
            let ea = tape.exp(vars[*a])?;
            let eb = tape.exp(vars[*b])?;
            let s = tape.add(ea, eb)?;
            tape.ln(s)
        }
        Transpose(a) => tape.transpose(vars[*a]),
        Diag(a) => tape.diag(vars[*a]),
        Gather(a, idx) => tape.gather(vars[*a], idx),
        ConcatRows(a, b) => tape.concat_rows(vars[*a], vars[*b]),
        LogSumExp(a) => tape.log_sum_exp(vars[*a]),
        CrossEntropy(a, t) => tape.cross_entropy(vars[*a], t),
        Sum(a) => tape.sum(vars[*a]),
        Mean(a) => tape.mean(vars[*a]),
        SqDiff(a, b) => tape.sq_diff(vars[*a], vars[*b]),
        Dot(a, b) => tape.dot(vars[*a], vars[*b]),
        SqDistToRows(a, b) => tape.sq_dist_to_rows(vars[*a], vars[*b]),
    }
}

impl Program {
    pub fn leaf_values(&self) -> Vec<Tensor> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Leaf(t) => Some(t.clone()),
                _ => None,
            })
            .collect()
    }

    /// Runs the program with the given leaf values; the last step is the loss.
    pub fn run(&self, leaves: &[Tensor], with_grad: bool) -> (f64, Option<Vec<Tensor>>) {
        let mut tape = Tape::new();
        let (loss, leaf_vars) = record_with(&mut tape, self, leaves);
        let value = tape.value(loss).item().expect("scalar loss");
        if !with_grad {
            return (value, None);
        }
        let mut g = tape.backward(loss).expect("backward");
        let grads = leaf_vars
            .iter()
            .zip(leaves)
            .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        (value, Some(grads))
    }
}

/// Appends `prog` to `tape` with its own leaf values; returns the loss and
/// the leaf variables.
pub fn record(tape: &mut Tape, prog: &Program) -> (Var, Vec<Var>) {
    record_with(tape, prog, &prog.leaf_values())
}

fn record_with(tape: &mut Tape, prog: &Program, leaves: &[Tensor]) -> (Var, Vec<Var>) {
    let mut vars = Vec::with_capacity(prog.steps.len());
    let mut leaf_vars = Vec::new();
    for step in &prog.steps {
        let v = match step {
            Step::Leaf(_) => {
                let v = tape.leaf(leaves[leaf_vars.len()].clone(), true);
                leaf_vars.push(v);
                v
            }
            s => apply(tape, &vars, s).expect("program was valid at generation"),
        };
        vars.push(v);
    }
    (*vars.last().unwrap(), leaf_vars)
}

struct Builder {
    rng: rng::Rng,
    steps: Vec<Step>,
    tape: Tape,
    vars: Vec<Var>,
}

impl Builder {
    fn shape(&self, i: usize) -> Vec<usize> {
        self.tape.value(self.vars[i]).shape().to_vec()
    }

    fn value(&self, i: usize) -> &Tensor {
        self.tape.value(self.vars[i])
    }

    fn push(&mut self, step: Step) -> Option<usize> {
        let v = apply(&mut self.tape, &self.vars, &step).ok()?;
        self.steps.push(step);
        self.vars.push(v);
        Some(self.vars.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-2.0..2.0)).collect();
        self.push(Step::Leaf(Tensor::new(shape, data).unwrap())).unwrap()
    }

    fn random_shape(&mut self) -> Vec<usize> {
        if self.rng.gen_bool(0.7) {
            vec![self.rng.gen_range(1..=4), self.rng.gen_range(1..=4)]
        } else {
            vec![self.rng.gen_range(1..=4)]
        }
    }

    /// An existing node of `shape`, or a fresh leaf.
    fn partner(&mut self, shape: &[usize]) -> usize {
        let found: Vec<usize> = (0..self.vars.len()).filter(|&i| self.shape(i) == shape).collect();
        if !found.is_empty() && self.rng.gen_bool(0.5) {
            found[self.rng.gen_range(0..found.len())]
        } else {
            self.leaf(shape.to_vec())
        }
    }

    fn pick(&mut self) -> usize {
        let n = self.vars.len();
        // favour recent nodes so graphs get deep
        if self.rng.gen_bool(0.6) {
            n - 1
        } else {
            self.rng.gen_range(0..n)
        }
    }

    fn max_abs(&self, i: usize) -> f64 {
        self.value(i).data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn min_abs(&self, i: usize) -> f64 {
        self.value(i).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    fn grow(&mut self) {
        let a = self.pick();
        let sa = self.shape(a);
        let is_matrix = sa.len() == 2;
        match self.rng.gen_range(0..15) {
            0 if is_matrix => {
                let m = self.rng.gen_range(1..=4);
                let b = self.partner(&[sa[1], m]);
                self.push(Step::MatMul(a, b));
            }
            1 if is_matrix => {
                let b = self.partner(&[sa[1]]);
                self.push(Step::AddBias(a, b));
            }
            2 => {
                let b = self.partner(&sa);
                self.push(Step::Add(a, b));
            }
            3 => {
                let b = self.partner(&sa);
                self.push(Step::Sub(a, b));
            }
            4 => {
                let b = self.partner(&sa);
                self.push(Step::Mul(a, b));
            }
            5 => {
                let c = self.rng.gen_range(-2.0..2.0);
                self.push(Step::Scale(a, c));
            }
            6 if self.min_abs(a) > 1e-3 => {
                self.push(Step::Relu(a));
            }
            7 if self.max_abs(a) < 3.0 => {
                self.push(Step::Exp(a));
            }
            8 if self.max_abs(a) < 3.0 => {
                let b = self.partner(&sa);
                if self.max_abs(b) < 3.0 {
                    self.push(Step::SoftPlus2(a, b));
                }
            }
            9 if is_matrix => {
                self.push(Step::Transpose(a));
            }
            10 if is_matrix && sa[0] == sa[1] => {
                self.push(Step::Diag(a));
            }
            11 if is_matrix => {
                let idx = (0..sa[0]).map(|_| self.rng.gen_range(0..sa[1])).collect();
                self.push(Step::Gather(a, idx));
            }
            12 if is_matrix => {
                let rows = self.rng.gen_range(1..=3);
                let b = self.partner(&[rows, sa[1]]);
                self.push(Step::ConcatRows(a, b));
            }
            13 if !sa.is_empty() && self.max_abs(a) < 20.0 => {
                self.push(Step::LogSumExp(a));
            }
            14 if is_matrix && self.max_abs(a) < 20.0 => {
                let t = (0..sa[0]).map(|_| self.rng.gen_range(0..sa[1])).collect();
                self.push(Step::CrossEntropy(a, t));
            }
            _ => {}
        }
    }

    fn reduce(&mut self, a: usize) -> usize {
        let sa = self.shape(a);
        if sa.is_empty() {
            return a;
        }
        let choice = self.rng.gen_range(0..5);
        let out = match choice {
            0 => self.push(Step::Sum(a)),
            1 => self.push(Step::Mean(a)),
            2 => {
                let b = self.partner(&sa);
                self.push(Step::SqDiff(a, b))
            }
            3 => {
                let b = self.partner(&sa);
                self.push(Step::Dot(a, b))
            }
            _ if sa.len() == 2 => {
                let z = self.partner(&[sa[1]]);
                self.push(Step::SqDistToRows(z, a))
            }
            _ => self.push(Step::Sum(a)),
        };
        out.expect("reductions of finite values succeed")
    }
}

/// A random composed graph ending in a scalar. Deterministic in `seed`.
pub fn random_program(seed: u64) -> Program {
    let mut b = Builder {
        rng: rng::from_seed(seed),
        steps: Vec::new(),
        tape: Tape::new(),
        vars: Vec::new(),
    };
    let first = b.random_shape();
    b.leaf(first);
    let target = b.rng.gen_range(3..=10);
    let mut guard = 0;
    while b.steps.len() < target && guard < 200 {
        b.grow();
        guard += 1;
    }
    let last = b.vars.len() - 1;
    let r1 = b.reduce(last);
    let other = b.rng.gen_range(0..b.vars.len());
    let r2 = b.reduce(other);
    b.push(Step::Add(r1, r2)).unwrap();
    Program { steps: b.steps }
}

pub fn random_tensor(r: &mut rng::Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn mlp_from(specs: &[LayerSpec], params: &[Tensor]) -> Mlp {
    let mut m = Mlp::zeros(specs.to_vec()).unwrap();
    for (dst, src) in m.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    m
}

pub fn encoder_from(specs: &[LayerSpec], params: &[Tensor]) -> EncoderModel {
    let mut model = EncoderModel::zeros(&EncoderSpec::new(specs.to_vec())).unwrap();
    for (dst, src) in model.body_mut().params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    model
}

/// Forward pass of an MLP given as raw parameters, returning the output and
/// the smallest |pre-activation| seen at any ReLU.
fn relu_margin(specs: &[LayerSpec], params: &[Tensor], x: &Tensor) -> (Tensor, f64) {
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    for (l, s) in specs.iter().enumerate() {
        let (w, b) = (&params[2 * l], &params[2 * l + 1]);
        let n = h.rows();
        let mut out = vec![0.0; n * s.output];
        for i in 0..n {
            for j in 0..s.output {
                let mut v = b.data()[j];
                for k in 0..s.input {
                    v += h.row(i)[k] * w.data()[k * s.output + j];
                }
                if s.activation == satkit::encoder::Activation::Relu {
                    margin = margin.min(v.abs());
                    v = v.max(0.0);
                }
                out[i * s.output + j] = v;
            }
        }
        h = Tensor::matrix(n, s.output, out).unwrap();
    }
    (h, margin)
}

const KINK_MARGIN: f64 = 1e-3;

/// Small encoder + heads + two input batches, flattened into one parameter
/// list so the finite-difference driver can perturb any of them.
pub struct ContrastCase {
    pub enc: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
    pub temperature: f64,
    pub params: Vec<Tensor>,
}

impl ContrastCase {
    /// Redraws until every ReLU input is at least `KINK_MARGIN` from zero,
    /// so central differences never straddle a kink.
    pub fn random(seed: u64) -> Self {
        let mut r = rng::from_seed(seed);
        loop {
            let d = r.gen_range(2..=4);
            let h = r.gen_range(2..=5);
            let rep = r.gen_range(2..=4);
            let n = r.gen_range(2..=4);
            let enc = vec![LayerSpec::relu(d, h), LayerSpec::relu(h, rep)];
            let hh = r.gen_range(2..=4);
            let out = r.gen_range(1..=3);
            let head = vec![LayerSpec::relu(rep, hh), LayerSpec::linear(hh, out)];
            let temperature = r.gen_range(0.5..2.0);
            let mut params = Vec::new();
            for s in enc.iter().chain(&head).chain(&head) {
                params.push(random_tensor(&mut r, vec![s.input, s.output], -2.0, 2.0));
                params.push(random_tensor(&mut r, vec![s.output], 0.05, 0.5));
            }
            params.push(random_tensor(&mut r, vec![n, d], 0.0, 1.0));
            params.push(random_tensor(&mut r, vec![n, d], 0.0, 1.0));
            let (ne, nh) = (2 * enc.len(), 2 * head.len());
            let (z, m1) = relu_margin(&enc, &params[..ne], &params[params.len() - 2]);
            let (zh, m2) = relu_margin(&enc, &params[..ne], &params[params.len() - 1]);
            let (_, m3) = relu_margin(&head, &params[ne..ne + nh], &z);
            let (_, m4) = relu_margin(&head, &params[ne + nh..ne + 2 * nh], &zh);
            if m1.min(m2).min(m3).min(m4) >= KINK_MARGIN {
                return Self {
                    enc,
                    head,
                    temperature,
                    params,
                };
            }
        }
    }

    pub fn eval(&self, params: &[Tensor], with_grad: bool) -> (f64, Option<Vec<Tensor>>) {
        let ne = 2 * self.enc.len();
        let nh = 2 * self.head.len();
        let phi1 = mlp_from(&self.head, &params[ne..ne + nh]);
        let phi2 = mlp_from(&self.head, &params[ne + nh..ne + 2 * nh]);
        let model = encoder_from(&self.enc, &params[..ne]);
        let heads = ScoreHeads {
            phi1,
            phi2,
            temperature: self.temperature,
        };
        let mut tape = Tape::new();
        let eb = model.bind(&mut tape, true);
        let hb = heads.bind(&mut tape, true);
        let x = tape.leaf(params[params.len() - 2].clone(), true);
        let xh = tape.leaf(params[params.len() - 1].clone(), true);
        let z = model.encode_on(&mut tape, &eb, x).unwrap();
        let zh = model.encode_on(&mut tape, &eb, xh).unwrap();
        let logits = heads.logits_on(&mut tape, &hb, z, zh).unwrap();
        let loss = contrast_loss_on(&mut tape, logits).unwrap();
        let value = tape.value(loss).item().unwrap();
        if !with_grad {
            return (value, None);
        }
        let mut g = tape.backward(loss).unwrap();
        let mut vars = eb.vars();
        vars.extend(hb.vars());
        vars.push(x);
        vars.push(xh);
        let grads = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        (value, Some(grads))
    }
}

/// The feature-space attack objective `sum_i ||t_i - f(x)||^2`, differentiated
/// with respect to `x`, the encoder and the targets.
pub struct GroupCase {
    pub enc: Vec<LayerSpec>,
    pub params: Vec<Tensor>,
}

impl GroupCase {
    pub fn random(seed: u64) -> Self {
        let mut r = rng::from_seed(seed);
        loop {
            let d = r.gen_range(1..=4);
            let h = r.gen_range(2..=5);
            let rep = r.gen_range(1..=4);
            let m = r.gen_range(1..=5);
            let enc = vec![LayerSpec::relu(d, h), LayerSpec::linear(h, rep)];
            let mut params = Vec::new();
            for s in &enc {
                params.push(random_tensor(&mut r, vec![s.input, s.output], -2.0, 2.0));
                params.push(random_tensor(&mut r, vec![s.output], 0.05, 0.5));
            }
            params.push(random_tensor(&mut r, vec![1, d], 0.0, 1.0));
            params.push(random_tensor(&mut r, vec![m, rep], -2.0, 2.0));
            let (_, margin) = relu_margin(&enc, &params[..4], &params[4]);
            if margin >= KINK_MARGIN {
                return Self { enc, params };
            }
        }
    }

    pub fn eval(&self, params: &[Tensor], with_grad: bool) -> (f64, Option<Vec<Tensor>>) {
        let ne = 2 * self.enc.len();
        let model = encoder_from(&self.enc, &params[..ne]);
        let mut tape = Tape::new();
        let eb = model.bind(&mut tape, true);
        let x = tape.leaf(params[ne].clone(), true);
        let t = tape.leaf(params[ne + 1].clone(), true);
        let z = model.encode_on(&mut tape, &eb, x).unwrap();
        let loss = tape.sq_dist_to_rows(z, t).unwrap();
        let value = tape.value(loss).item().unwrap();
        if !with_grad {
            return (value, None);
        }
        let mut g = tape.backward(loss).unwrap();
        let mut vars = eb.vars();
        vars.push(x);
        vars.push(t);
        let grads = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        (value, Some(grads))
    }
}

/// Squared distances to every library row, in library order.
fn oracle_dists(lib: &FeatureLibrary, z: &[f64]) -> Vec<(f64, usize)> {
    (0..lib.len())
        .map(|i| {
            let d = lib.row(i).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (d, i)
        })
        .collect()
}

fn full_sort(mut v: Vec<(f64, usize)>) -> Vec<(f64, usize)> {
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    v
}

/// Exhaustive-sort kNN: neighbors in (distance, index) order, majority vote,
/// ties to the smaller mean neighbor distance and then the lower class.
pub fn oracle_knn(lib: &FeatureLibrary, z: &[f64], k: usize) -> (usize, Vec<usize>) {
    let sorted = full_sort(oracle_dists(lib, z));
    let top: Vec<(f64, usize)> = sorted.into_iter().take(k).collect();
    let mut best: Option<(usize, f64, usize)> = None; // (votes, mean, class)
    let max_class = lib.labels().iter().copied().max().unwrap();
    for c in 0..=max_class {
        let ds: Vec<f64> = top
            .iter()
            .filter(|(_, i)| lib.labels()[*i] == c)
            .map(|(d, _)| d.sqrt())
            .collect();
        if ds.is_empty() {
            continue;
        }
        let votes = ds.len();
        let mean = ds.iter().sum::<f64>() / votes as f64;
        let better = match best {
            None => true,
            Some((bv, bm, _)) => votes > bv || (votes == bv && mean < bm),
        };
        if better {
            best = Some((votes, mean, c));
        }
    }
    (best.unwrap().2, top.iter().map(|(_, i)| *i).collect())
}

/// Exhaustive nearest-group oracle. `None` when no class qualifies.
pub fn oracle_group(lib: &FeatureLibrary, z: &[f64], m: usize, true_label: usize) -> Option<Vec<usize>> {
    let sorted = full_sort(oracle_dists(lib, z));
    let count = |c: usize| lib.labels().iter().filter(|&&l| l == c).count();
    let target = sorted
        .iter()
        .map(|(_, i)| lib.labels()[*i])
        .find(|&c| c != true_label && count(c) >= m)?;
    Some(
        sorted
            .iter()
            .filter(|(_, i)| lib.labels()[*i] == target)
            .take(m)
            .map(|(_, i)| *i)
            .collect(),
    )
}

/// Default desk-scale dataset: 10 classes, 32 dims, 500/100 per class.
pub fn desk_data(seed: u64) -> (Dataset, Dataset) {
    let all = gen_synthetic(&SyntheticSpec {
        seed,
        classes: 10,
        dim: 32,
        per_class: 600,
        spread: 0.12,
    })
    .unwrap();
    split(&all, (500.0 / 600.0, 100.0 / 600.0), rng::derive(seed, &[0])).unwrap()
}

pub fn train_ssl(train: &Dataset, seed: u64) -> (EncoderModel, ScoreHeads) {
    let spec = EncoderSpec::default_for(train.dim());
    let mut model = EncoderModel::init(&spec, rng::derive(seed, &[1])).unwrap();
    let mut heads = ScoreHeads::default_for(model.rep_dim(), rng::derive(seed, &[2])).unwrap();
    let cfg = TrainConfig {
        seed: rng::derive(seed, &[4]),
        ..Default::default()
    };
    pretrain_ssl(train, &mut model, &mut heads, &cfg).unwrap();
    (model, heads)
}

pub fn train_sup(train: &Dataset, seed: u64) -> (EncoderModel, ClassifierHead) {
    let spec = EncoderSpec::default_for(train.dim());
    let mut model = EncoderModel::init(&spec, rng::derive(seed, &[1])).unwrap();
    let mut head = ClassifierHead::init(model.rep_dim(), train.num_classes(), rng::derive(seed, &[3])).unwrap();
    let cfg = TrainConfig {
        seed: rng::derive(seed, &[4]),
        ..Default::default()
    };
    train_supervised(train, &mut model, &mut head, &cfg).unwrap();
    (model, head)
}
