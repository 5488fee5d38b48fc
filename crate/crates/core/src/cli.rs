//! Command-line front end.
//!
//! Every subcommand takes `--seed`, `--config` (a `key=value` file) and
//! `--out`; `--set key=value` overrides the file. Unknown keys are usage
//! errors. Exit codes: 0 success, 1 usage error, 2 data or model error.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attacks::{gradient_attack, optimization_attack, AttackConfig, OptAttackConfig};
use crate::baselines::{
    pretrain_ssl, train_classifier, ClassifierHead, Objective, PgdSettings, TrainConfig,
};
use crate::data::{
    gen_synthetic, load_raw8, read_f32, split, write_f32, AugmentationPolicy, Dataset,
    SyntheticSpec,
};
use crate::encoder::{load_params, save_params, EncoderModel, EncoderSpec, LayerSpec, ModelBundle, ScoreHeads};
use crate::error::Error;
use crate::eval::{evaluate, hex, write_report, EvalConfig, MetricsReport, ResultRow};
use crate::knn::{build_library, load_library, save_library, FeatureLibrary};
use crate::rng;
use crate::sat::{sat_train, SatConfig};
use crate::tensor::OptimizerKind;

#[derive(Debug, Parser)]
#[command(name = "satkit", version, about = "Self-supervised adversarial training testbed")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// File of `key=value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Override one config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArg {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackKind {
    Gradient,
    Optimization,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/test splits (synthetic, or RAW8 files) to --out.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "raw_test")]
        raw_train: Option<PathBuf>,
        #[arg(long, requires = "raw_train")]
        raw_test: Option<PathBuf>,
    },
    /// Contrastive pretraining of the seed encoder.
    PretrainSsl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Supervised training (cross-entropy) of encoder plus linear head.
    TrainSup {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Adversarial training on PGD examples only.
    TrainAt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Adversarial training on PGD plus clean examples.
    TrainMat {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Clean loss plus adversarial logit pairing.
    TrainAlp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Adversarial fine-tuning of a pretrained seed model.
    Sat {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
    },
    /// Encode the training split into library.satl.
    BuildLibrary {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
    },
    /// Attack one test point and print the result as JSON.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long)]
        index: usize,
        #[arg(long, value_enum, default_value_t = AttackKind::Gradient)]
        kind: AttackKind,
    },
    /// ACC, DSR and l2 distance; writes `<run-id>.json` to --out.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long)]
        run_id: String,
        /// Model label for the report (defaults to the run id).
        #[arg(long)]
        name: Option<String>,
    },
    /// Collect eval JSON files into results.csv and scatter.svg.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Usage(m),
            e => CliError::Run(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// `key=value` settings from `--config` and `--set`, with tracking of which
/// keys were consumed.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn parse_pair(line: &str, origin: &str) -> CliResult<(String, String)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("{origin}: expected key=value, got {line:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(CliError::Usage(format!("{origin}: empty key in {line:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

impl Settings {
    pub fn parse(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = parse_pair(line, &format!("config line {}", n + 1))?;
            values.insert(k, v);
        }
        for o in overrides {
            let (k, v) = parse_pair(o, "--set")?;
            values.insert(k, v);
        }
        Ok(Self {
            values,
            used: RefCell::default(),
        })
    }

    fn load(common: &Common) -> CliResult<Self> {
        let text = match &common.config {
            Some(p) => fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, &common.set)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        self.used.borrow_mut().insert(key.to_string());
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("bad value {v:?} for {key}"))),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.used.borrow_mut().insert(key.to_string());
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("bad value {v:?} for {key}")))
            })
            .transpose()
    }

    /// Fails on keys that no getter asked for.
    pub fn finish(&self) -> CliResult<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.values.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("unknown config keys: {unknown:?}")))
        }
    }
}

fn optimizer(s: &Settings, default: OptimizerKind) -> CliResult<OptimizerKind> {
    let name = match default {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam { .. } => "adam",
    };
    match s.get("optimizer", name.to_string())?.as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::adam()),
        other => Err(CliError::Usage(format!("optimizer must be sgd or adam, got {other:?}"))),
    }
}

fn train_config(s: &Settings, seed: u64) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let aug = AugmentationPolicy::default();
    Ok(TrainConfig {
        epochs: s.get("epochs", d.epochs)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        lr: s.get("lr", d.lr)?,
        optimizer: optimizer(s, d.optimizer)?,
        seed: rng::derive(seed, &[4]),
        pgd: PgdSettings {
            eps: s.get("pgd_eps", d.pgd.eps)?,
            step: s.get("pgd_step", d.pgd.step)?,
            iters: s.get("pgd_iters", d.pgd.iters)?,
        },
        alp_lambda: s.get("alp_lambda", d.alp_lambda)?,
        augmentation: AugmentationPolicy {
            jitter: s.get("jitter", aug.jitter)?,
            mask_prob: s.get("mask_prob", aug.mask_prob)?,
            flip: s.get("flip", aug.flip)?,
            row_width: s.get("row_width", aug.row_width)?,
        },
    })
}

fn encoder_spec(s: &Settings, dim: usize) -> CliResult<EncoderSpec> {
    let hidden = s.get("hidden", 256usize)?;
    let rep = s.get("rep_dim", 128usize)?;
    Ok(EncoderSpec::new(vec![LayerSpec::relu(dim, hidden), LayerSpec::relu(hidden, rep)]))
}

fn eval_config(s: &Settings, seed: u64) -> CliResult<EvalConfig> {
    let d = EvalConfig::default();
    let m = s.get("group_m", d.small.group_m)?;
    let mut cfg = EvalConfig {
        k: s.get("k", d.k)?,
        n_eval: s.get("n_eval", d.n_eval)?,
        small: AttackConfig {
            eps: s.get("small_eps", d.small.eps)?,
            step: s.get("small_step", d.small.step)?,
            iters: s.get("small_iters", d.small.iters)?,
            group_m: m,
            ..d.small
        },
        large: AttackConfig {
            eps: s.get("large_eps", d.large.eps)?,
            step: s.get("large_step", d.large.step)?,
            iters: s.get("large_iters", d.large.iters)?,
            group_m: m,
            ..d.large
        },
        opt: OptAttackConfig {
            group_m: m,
            adam_steps: s.get("adam_steps", d.opt.adam_steps)?,
            lr: s.get("opt_lr", d.opt.lr)?,
            search_steps: s.get("search_steps", d.opt.search_steps)?,
            ..d.opt
        },
        skip_l2: s.get("skip_l2", false)?,
    }
    .with_seed(seed);
    cfg.opt.k = cfg.k;
    Ok(cfg)
}

const META: &str = "data.meta";

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Run(Error::io(path, e)))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Run(Error::io(dir, e)))
}

struct DataDir {
    id: String,
    train: Dataset,
    test: Dataset,
}

fn load_data(dir: &Path) -> CliResult<DataDir> {
    let meta_path = dir.join(META);
    let meta = fs::read_to_string(&meta_path).map_err(|e| CliError::Run(Error::io(&meta_path, e)))?;
    let id = meta
        .lines()
        .find_map(|l| l.strip_prefix("id="))
        .ok_or_else(|| CliError::Run(Error::Format(format!("{}: missing id", meta_path.display()))))?
        .trim()
        .to_string();
    Ok(DataDir {
        id,
        train: read_f32(dir.join("train.satd"))?,
        test: read_f32(dir.join("test.satd"))?,
    })
}

fn gen_data(common: &Common, raw: Option<(&Path, &Path)>) -> CliResult<()> {
    let s = Settings::load(common)?;
    let (id, train, test) = match raw {
        Some((tr, te)) => {
            let dim = s.get("dim", 3072usize)?;
            let classes = s.get("classes", 10usize)?;
            s.finish()?;
            let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            (
                format!("raw8-{}", name(tr)),
                load_raw8(tr, dim, classes)?,
                load_raw8(te, dim, classes)?,
            )
        }
        None => {
            let classes = s.get("classes", 10usize)?;
            let dim = s.get("dim", 32usize)?;
            let train_n = s.get("per_class", 500usize)?;
            let test_n = s.get("test_per_class", 100usize)?;
            let spread = s.get("spread", 0.12f64)?;
            s.finish()?;
            let all = gen_synthetic(&SyntheticSpec {
                seed: common.seed,
                classes,
                dim,
                per_class: train_n + test_n,
                spread,
            })?;
            let total = (train_n + test_n) as f64;
            let (train, test) = split(&all, (train_n as f64 / total, test_n as f64 / total), rng::derive(common.seed, &[0]))?;
            (
                format!("synthetic-c{classes}-d{dim}-s{spread}-seed{}", common.seed),
                train,
                test,
            )
        }
    };
    ensure_dir(&common.out)?;
    write_f32(&train, common.out.join("train.satd"))?;
    write_f32(&test, common.out.join("test.satd"))?;
    write_file(
        &common.out.join(META),
        format!(
            "id={id}\nclasses={}\ndim={}\ntrain={}\ntest={}\nseed={}\n",
            train.num_classes(),
            train.dim(),
            train.len(),
            test.len(),
            common.seed
        ),
    )?;
    log::info!("wrote {} train and {} test examples ({id})", train.len(), test.len());
    Ok(())
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        s.push_str(&format!("{e},{l}\n"));
    }
    s
}

fn run_pretrain(common: &Common, data: &DataArg) -> CliResult<()> {
    let s = Settings::load(common)?;
    let d = load_data(&data.data)?;
    let spec = encoder_spec(&s, d.train.dim())?;
    let cfg = train_config(&s, common.seed)?;
    let head_hidden = s.get("head_hidden", 64usize)?;
    let head_out = s.get("head_out", 64usize)?;
    let temperature = s.get("temperature", 1.0f64)?;
    s.finish()?;
    let mut model = EncoderModel::init(&spec, rng::derive(common.seed, &[1]))?;
    let mut heads = ScoreHeads::init(
        model.rep_dim(),
        head_hidden,
        head_out,
        temperature,
        rng::derive(common.seed, &[2]),
    )?;
    let log = pretrain_ssl(&d.train, &mut model, &mut heads, &cfg)?;
    ensure_dir(&common.out)?;
    write_file(&common.out.join("train_log.csv"), loss_csv(&log.epoch_losses))?;
    write_file(&common.out.join("fingerprint.txt"), format!("{}\n", hex(&model.fingerprint())))?;
    let bundle = ModelBundle {
        encoder: model,
        heads: Some(heads),
        classifier: None,
    };
    save_params(&bundle, common.out.join("model.satm"))?;
    Ok(())
}

fn run_supervised(common: &Common, data: &DataArg, objective: Objective) -> CliResult<()> {
    let s = Settings::load(common)?;
    let d = load_data(&data.data)?;
    let spec = encoder_spec(&s, d.train.dim())?;
    let cfg = train_config(&s, common.seed)?;
    s.finish()?;
    let mut model = EncoderModel::init(&spec, rng::derive(common.seed, &[1]))?;
    let mut head = ClassifierHead::init(model.rep_dim(), d.train.num_classes(), rng::derive(common.seed, &[3]))?;
    let log = train_classifier(&d.train, &mut model, &mut head, &cfg, objective)?;
    ensure_dir(&common.out)?;
    write_file(&common.out.join("train_log.csv"), loss_csv(&log.epoch_losses))?;
    let bundle = ModelBundle {
        encoder: model,
        heads: None,
        classifier: Some(head),
    };
    save_params(&bundle, common.out.join("model.satm"))?;
    Ok(())
}

fn parse_fingerprint(s: &str) -> CliResult<[u8; 32]> {
    let s = s.trim();
    let bad = || CliError::Usage(format!("expected_fingerprint must be 64 hex digits, got {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn run_sat(common: &Common, data: &DataArg, model_path: &Path) -> CliResult<()> {
    let s = Settings::load(common)?;
    let d = SatConfig::default();
    let expected = s
        .get_opt::<String>("expected_fingerprint")?
        .map(|h| parse_fingerprint(&h))
        .transpose()?;
    let cfg = SatConfig {
        epochs: s.get("epochs", d.epochs)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        eps: s.get("eps", d.eps)?,
        step: s.get("step", d.step)?,
        iters: s.get("iters", d.iters)?,
        group_m: s.get("group_m", d.group_m)?,
        lr: s.get("lr", d.lr)?,
        optimizer: optimizer(&s, d.optimizer)?,
        seed: rng::derive(common.seed, &[5]),
        pseudo_classes: s.get("pseudo_classes", d.pseudo_classes)?,
        kmeans_iters: s.get("kmeans_iters", d.kmeans_iters)?,
        expected_seed: expected,
    };
    s.finish()?;
    let dd = load_data(&data.data)?;
    let bundle = load_params(model_path)?;
    let mut model = bundle.encoder;
    let mut heads = match bundle.heads {
        Some(h) => h,
        None => {
            log::warn!("model file has no score heads; initializing fresh ones");
            ScoreHeads::default_for(model.rep_dim(), rng::derive(common.seed, &[2]))?
        }
    };
    let report = sat_train(&mut model, &mut heads, &dd.train, &cfg)?;
    ensure_dir(&common.out)?;
    write_file(&common.out.join("sat_log.csv"), report.to_csv())?;
    let bundle = ModelBundle {
        encoder: model,
        heads: Some(heads),
        classifier: bundle.classifier,
    };
    save_params(&bundle, common.out.join("model.satm"))?;
    Ok(())
}

fn library_for(model: &EncoderModel, train: &Dataset, path: Option<&PathBuf>) -> CliResult<FeatureLibrary> {
    match path {
        Some(p) => {
            let lib = load_library(p)?;
            lib.check_model(model)?;
            Ok(lib)
        }
        None => Ok(build_library(model, train)?),
    }
}

fn run_build_library(common: &Common, data: &DataArg, model_path: &Path) -> CliResult<()> {
    Settings::load(common)?.finish()?;
    let d = load_data(&data.data)?;
    let model = load_params(model_path)?.encoder;
    let lib = build_library(&model, &d.train)?;
    ensure_dir(&common.out)?;
    save_library(&lib, common.out.join("library.satl"))?;
    Ok(())
}

fn run_attack(
    common: &Common,
    data: &DataArg,
    model_path: &Path,
    library: Option<&PathBuf>,
    index: usize,
    kind: AttackKind,
) -> CliResult<()> {
    let s = Settings::load(common)?;
    let ecfg = eval_config(&s, common.seed)?;
    let large = s.get("setting", "small".to_string())?;
    s.finish()?;
    let d = load_data(&data.data)?;
    if index >= d.test.len() {
        return Err(CliError::Usage(format!(
            "index {index} out of range for {} test points",
            d.test.len()
        )));
    }
    let model = load_params(model_path)?.encoder;
    let lib = library_for(&model, &d.train, library)?;
    let x = d.test.example(index);
    let y = d.test.label(index);
    let result = match kind {
        AttackKind::Gradient => {
            let base = match large.as_str() {
                "small" => ecfg.small,
                "large" => ecfg.large,
                other => return Err(CliError::Usage(format!("setting must be small or large, got {other:?}"))),
            };
            let cfg = AttackConfig {
                k: ecfg.k,
                seed: rng::derive(base.seed, &[index as u64]),
                ..base
            };
            gradient_attack(&model, &lib, x, y, &cfg)?
        }
        AttackKind::Optimization => optimization_attack(&model, &lib, x, y, &ecfg.opt)?,
    };
    let summary = serde_json::json!({
        "index": index,
        "label": y,
        "success": result.success,
        "l2": result.l2,
        "linf": result.linf,
        "objective_trace": result.objective_trace,
        "x_adv": result.x_adv,
    });
    // a closed pipe is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn run_eval(
    common: &Common,
    data: &DataArg,
    model_path: &Path,
    library: Option<&PathBuf>,
    run_id: &str,
    name: Option<&str>,
) -> CliResult<()> {
    if run_id.is_empty() || run_id.contains(['/', '\\']) {
        return Err(CliError::Usage(format!("run id {run_id:?} must be a plain name")));
    }
    let s = Settings::load(common)?;
    let cfg = eval_config(&s, common.seed)?;
    s.finish()?;
    let d = load_data(&data.data)?;
    let model = load_params(model_path)?.encoder;
    let lib = library_for(&model, &d.train, library)?;
    let report = evaluate(run_id, name.unwrap_or(run_id), &model, &lib, &d.test, &d.id, common.seed, &cfg)?;
    ensure_dir(&common.out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&common.out.join(format!("{run_id}.json")), json + "\n")?;
    Ok(())
}

fn run_report(common: &Common, runs: &[PathBuf]) -> CliResult<()> {
    Settings::load(common)?.finish()?;
    let mut files = Vec::new();
    for p in runs {
        if p.is_dir() {
            let entries = fs::read_dir(p).map_err(|e| CliError::Run(Error::io(p, e)))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut rows = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| CliError::Run(Error::io(f, e)))?;
        let r: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Run(Error::Format(format!("{}: {e}", f.display()))))?;
        rows.push(ResultRow::from(&r));
    }
    if rows.is_empty() {
        return Err(CliError::Usage("no eval reports found".into()));
    }
    write_report(&rows, &common.out)?;
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData {
            common,
            raw_train,
            raw_test,
        } => {
            let raw = raw_train.as_deref().zip(raw_test.as_deref());
            gen_data(common, raw)
        }
        Command::PretrainSsl { common, data } => run_pretrain(common, data),
        Command::TrainSup { common, data } => run_supervised(common, data, Objective::Plain),
        Command::TrainAt { common, data } => run_supervised(common, data, Objective::At),
        Command::TrainMat { common, data } => run_supervised(common, data, Objective::Mat),
        Command::TrainAlp { common, data } => run_supervised(common, data, Objective::Alp),
        Command::Sat {
            common,
            data,
            model,
        } => run_sat(common, data, model),
        Command::BuildLibrary {
            common,
            data,
            model,
        } => run_build_library(common, data, model),
        Command::Attack {
            common,
            data,
            model,
            library,
            index,
            kind,
        } => run_attack(common, data, model, library.as_ref(), *index, *kind),
        Command::Eval {
            common,
            data,
            model,
            library,
            run_id,
            name,
        } => run_eval(common, data, model, library.as_ref(), run_id, name.as_deref()),
        Command::Report { common, runs } => run_report(common, runs),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("satkit: {e}");
            e.exit_code()
        }
    }
}
