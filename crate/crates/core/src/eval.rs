//! Metrics over a frozen encoder and its feature library: clean kNN
//! accuracy, defense success rate under the gradient attack, and the mean
//! minimal `l2` perturbation found by the optimization attack.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    gradient_attack_unchecked, optimization_attack_unchecked, AttackConfig, OptAttackConfig,
};
use crate::data::Dataset;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::knn::{knn_predict, FeatureLibrary};
use crate::rng;

fn check_testset(model: &EncoderModel, library: &FeatureLibrary, testset: &Dataset) -> Result<()> {
    library.check_model(model)?;
    if testset.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    if testset.dim() != model.input_dim() {
        return Err(Error::Data(format!(
            "test set width {} does not match encoder input {}",
            testset.dim(),
            model.input_dim()
        )));
    }
    Ok(())
}

fn predictions(model: &EncoderModel, library: &FeatureLibrary, testset: &Dataset, k: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..testset.len()).collect();
    let mut out = Vec::with_capacity(testset.len());
    for chunk in all.chunks(1024) {
        let z = model.encode(&testset.batch(chunk))?;
        for i in 0..chunk.len() {
            out.push(knn_predict(library, z.row(i), k)?.label);
        }
    }
    Ok(out)
}

/// Fraction of test points whose kNN label matches the true label.
pub fn accuracy(model: &EncoderModel, library: &FeatureLibrary, testset: &Dataset, k: usize) -> Result<f64> {
    check_testset(model, library, testset)?;
    let pred = predictions(model, library, testset, k)?;
    let hits = pred.iter().zip(testset.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / testset.len() as f64)
}

/// Indices of the first `n_eval` correctly predicted test points.
pub fn eval_subset(
    model: &EncoderModel,
    library: &FeatureLibrary,
    testset: &Dataset,
    k: usize,
    n_eval: usize,
) -> Result<Vec<usize>> {
    check_testset(model, library, testset)?;
    if n_eval == 0 {
        return Err(Error::InvalidArgument("n_eval must be positive".into()));
    }
    let pred = predictions(model, library, testset, k)?;
    let correct: Vec<usize> = (0..testset.len())
        .filter(|&i| pred[i] == testset.label(i))
        .take(n_eval)
        .collect();
    if correct.len() < n_eval {
        return Err(Error::Data(format!(
            "only {} correctly predicted test points, {} requested ({} short)",
            correct.len(),
            n_eval,
            n_eval - correct.len()
        )));
    }
    Ok(correct)
}

fn has_group(library: &FeatureLibrary, m: usize, true_label: usize) -> bool {
    let classes = library.labels().iter().max().map_or(0, |&c| c + 1);
    let mut counts = vec![0usize; classes];
    for &l in library.labels() {
        counts[l] += 1;
    }
    (0..classes).any(|c| c != true_label && counts[c] >= m)
}

/// Fraction of the evaluation subset that keeps its label under
/// [`crate::attacks::gradient_attack`]. Point `i` uses the attack seed
/// `derive(cfg.seed, [i])`. Points with no eligible target group count as
/// defended.
pub fn dsr(
    model: &EncoderModel,
    library: &FeatureLibrary,
    testset: &Dataset,
    cfg: &AttackConfig,
    n_eval: usize,
) -> Result<f64> {
    cfg.validate()?;
    let subset = eval_subset(model, library, testset, cfg.k, n_eval)?;
    let mut defended = 0usize;
    for &i in &subset {
        let y = testset.label(i);
        if !has_group(library, cfg.group_m, y) {
            defended += 1;
            continue;
        }
        let point = AttackConfig {
            seed: rng::derive(cfg.seed, &[i as u64]),
            ..*cfg
        };
        let r = gradient_attack_unchecked(model, library, testset.example(i), y, &point)?;
        if !r.success {
            defended += 1;
        }
    }
    Ok(defended as f64 / subset.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Summary {
    /// `None` when no attack succeeded.
    pub mean: Option<f64>,
    pub successes: usize,
    pub attempted: usize,
}

/// Mean `l2` norm of successful minimal perturbations over the evaluation
/// subset.
pub fn l2_distance(
    model: &EncoderModel,
    library: &FeatureLibrary,
    testset: &Dataset,
    n_eval: usize,
    opt: &OptAttackConfig,
) -> Result<L2Summary> {
    let subset = eval_subset(model, library, testset, opt.k, n_eval)?;
    let mut total = 0.0;
    let mut successes = 0;
    for &i in &subset {
        let y = testset.label(i);
        if !has_group(library, opt.group_m, y) {
            continue;
        }
        let r = optimization_attack_unchecked(model, library, testset.example(i), y, opt)?;
        if r.success {
            total += r.l2;
            successes += 1;
        }
    }
    Ok(L2Summary {
        mean: (successes > 0).then(|| total / successes as f64),
        successes,
        attempted: subset.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub n_eval: usize,
    pub small: AttackConfig,
    pub large: AttackConfig,
    pub opt: OptAttackConfig,
    /// Skip the optimization attack (reported as undefined).
    pub skip_l2: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 75,
            n_eval: 200,
            small: AttackConfig::small(),
            large: AttackConfig::large(),
            opt: OptAttackConfig::default(),
            skip_l2: false,
        }
    }
}

impl EvalConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.small.seed = rng::derive(seed, &[1]);
        self.large.seed = rng::derive(seed, &[2]);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub model: String,
    /// Hex SHA-256 of the encoder parameters.
    pub model_fingerprint: String,
    pub dataset: String,
    pub seed: u64,
    pub acc: f64,
    pub dsr_small: f64,
    pub dsr_large: f64,
    pub l2_dist: Option<f64>,
    pub l2_successes: usize,
    pub n_eval: usize,
    pub config: EvalConfig,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    run_id: &str,
    model_name: &str,
    model: &EncoderModel,
    library: &FeatureLibrary,
    testset: &Dataset,
    dataset_id: &str,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let acc = accuracy(model, library, testset, cfg.k)?;
    log::info!("{run_id}: acc {acc:.4}");
    let small = AttackConfig { k: cfg.k, ..cfg.small };
    let large = AttackConfig { k: cfg.k, ..cfg.large };
    let dsr_small = dsr(model, library, testset, &small, cfg.n_eval)?;
    let dsr_large = dsr(model, library, testset, &large, cfg.n_eval)?;
    log::info!("{run_id}: dsr small {dsr_small:.4}, large {dsr_large:.4}");
    let l2 = if cfg.skip_l2 {
        L2Summary {
            mean: None,
            successes: 0,
            attempted: 0,
        }
    } else {
        let opt = OptAttackConfig { k: cfg.k, ..cfg.opt };
        l2_distance(model, library, testset, cfg.n_eval, &opt)?
    };
    Ok(MetricsReport {
        run_id: run_id.to_string(),
        model: model_name.to_string(),
        model_fingerprint: hex(&model.fingerprint()),
        dataset: dataset_id.to_string(),
        seed,
        acc,
        dsr_small,
        dsr_large,
        l2_dist: l2.mean,
        l2_successes: l2.successes,
        n_eval: cfg.n_eval,
        config: cfg.clone(),
    })
}

pub const RESULTS_HEADER: [&str; 9] = [
    "run_id", "model", "dataset", "seed", "acc", "dsr_small", "dsr_large", "l2_dist", "n_eval",
];

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub acc: f64,
    pub dsr_small: f64,
    pub dsr_large: f64,
    pub l2_dist: Option<f64>,
    pub n_eval: usize,
}

impl From<&MetricsReport> for ResultRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            run_id: r.run_id.clone(),
            model: r.model.clone(),
            dataset: r.dataset.clone(),
            seed: r.seed,
            acc: r.acc,
            dsr_small: r.dsr_small,
            dsr_large: r.dsr_large,
            l2_dist: r.l2_dist,
            n_eval: r.n_eval,
        }
    }
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(RESULTS_HEADER).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.model.clone(),
            r.dataset.clone(),
            r.seed.to_string(),
            r.acc.to_string(),
            r.dsr_small.to_string(),
            r.dsr_large.to_string(),
            r.l2_dist.map_or_else(|| "NA".to_string(), |v| v.to_string()),
            r.n_eval.to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Format(format!("csv: {e}")))?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Format(format!("unexpected results header {header:?}")));
    }
    let num = |s: &str, col: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad {col} value {s:?}")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("csv: {e}")))?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        rows.push(ResultRow {
            run_id: f(0).to_string(),
            model: f(1).to_string(),
            dataset: f(2).to_string(),
            seed: f(3)
                .parse()
                .map_err(|_| Error::Format(format!("bad seed {:?}", f(3))))?,
            acc: num(f(4), "acc")?,
            dsr_small: num(f(5), "dsr_small")?,
            dsr_large: num(f(6), "dsr_large")?,
            l2_dist: match f(7) {
                "NA" => None,
                s => Some(num(s, "l2_dist")?),
            },
            n_eval: f(8)
                .parse()
                .map_err(|_| Error::Format(format!("bad n_eval {:?}", f(8))))?,
        });
    }
    Ok(rows)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy (x) against small-setting DSR (y), one labelled mark per run.
pub fn scatter_svg(rows: &[ResultRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let sx = |v: f64| PAD + v * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - v * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#, sx(v), H - PAD + 15.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, PAD - 5.0, sy(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">ACC</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">DSR (small)</text>"#,
        H / 2.0,
        H / 2.0
    );
    for r in rows {
        let (x, y) = (sx(r.acc.clamp(0.0, 1.0)), sy(r.dsr_small.clamp(0.0, 1.0)));
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="steelblue"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 6.0,
            y - 6.0,
            escape(&r.run_id)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `results.csv` and `scatter.svg` into `dir`.
pub fn write_report(rows: &[ResultRow], dir: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("results.csv");
    fs::write(&csv_path, results_csv(rows)?).map_err(|e| Error::io(&csv_path, e))?;
    let svg_path = dir.join("scatter.svg");
    fs::write(&svg_path, scatter_svg(rows)).map_err(|e| Error::io(&svg_path, e))?;
    Ok(())
}
