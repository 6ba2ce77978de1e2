//! `sfda`: data generation, source training, target adaptation, evaluation,
//! gradient checks and feature export.
//!
//! Settings resolve in order: built-in defaults, the architecture recorded in
//! an input checkpoint, `--config FILE`, then `--key=value` flags.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfda_core::config::{Config, ARCHITECTURE_KEYS, KEYS};
use sfda_core::io::container::{Container, Section};
use sfda_core::io::{checkpoint, dataset, metrics};
use sfda_core::model::Model;
use sfda_core::pipeline::{self, Precision};
use sfda_core::{consistency, gradsuite, pseudolabel, synthdata, CoreError};
use sfda_tensor::Real;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

/// File names written by `gen-data`.
const SOURCE_FILE: &str = "source.cadt";
const TARGET_FILE: &str = "target.cadt";

enum Failure {
    Core(CoreError),
    GradCheck,
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn cli() -> Command {
    let mut cmd = Command::new("sfda")
        .about("Source-free domain adaptation with an assistant attention module")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .global(true)
                .help("key=value settings file; '#' starts a comment"),
        )
        .next_help_heading("Settings");
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .global(true)
                .action(ArgAction::Set)
                .help(format!("{} [default: {}]", k.help, k.default_value())),
        );
    }
    cmd.next_help_heading(None)
        .subcommand(
            Command::new("gen-data")
                .about("Write the synthetic source and target sets")
                .arg(path_arg("out", "output directory")),
        )
        .subcommand(
            Command::new("train-source")
                .about("Train backbone, classifier and assistant module on labeled data")
                .arg(path_arg("data", "labeled dataset"))
                .arg(path_arg("out", "checkpoint to write")),
        )
        .subcommand(
            Command::new("adapt")
                .about("Adapt a source checkpoint to unlabeled target data")
                .arg(path_arg("checkpoint", "source checkpoint"))
                .arg(path_arg("data", "target dataset"))
                .arg(path_arg("out", "checkpoint to write"))
                .arg(path_arg("metrics", "per-epoch metrics CSV to write").required(false)),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Score a checkpoint against a dataset's ground truth")
                .arg(path_arg("checkpoint", "checkpoint"))
                .arg(path_arg("data", "dataset with labels or sidecar ground truth"))
                .arg(path_arg("predictions", "write predicted labels to this container").required(false)),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every loss on a toy model in f64")
                .arg(
                    Arg::new("coords")
                        .long("coords")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("24")
                        .help("parameter coordinates per loss"),
                )
                .arg(
                    Arg::new("step")
                        .long("step")
                        .value_name("H")
                        .value_parser(clap::value_parser!(f64))
                        .default_value("1e-5")
                        .help("central-difference step"),
                )
                .arg(
                    Arg::new("tolerance")
                        .long("tolerance")
                        .value_name("TOL")
                        .value_parser(clap::value_parser!(f64))
                        .default_value("1e-4")
                        .help("largest accepted relative error"),
                ),
        )
        .subcommand(
            Command::new("export-features")
                .about("Write features, pseudo-labels and easy/hard flags for external analysis")
                .arg(path_arg("checkpoint", "checkpoint"))
                .arg(path_arg("data", "dataset"))
                .arg(path_arg("out", "container to write")),
        )
}

/// Settings from defaults, an optional checkpoint's architecture, the config
/// file and explicit flags.
fn resolve(m: &ArgMatches, checkpoint_meta: Option<&BTreeMap<String, String>>) -> sfda_core::Result<Config> {
    let mut c = Config::default();
    if let Some(meta) = checkpoint_meta {
        for &k in ARCHITECTURE_KEYS {
            if let Some(v) = meta.get(k) {
                c.set(k, v)?;
            }
        }
    }
    if let Some(path) = m.get_one::<PathBuf>("config") {
        c.apply_file(path)?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            c.set(k.name, v)?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by the parser")
}

fn meta(c: &Config, stage: &str, epoch: usize) -> BTreeMap<String, String> {
    let mut meta = c.snapshot();
    meta.insert("stage".into(), stage.into());
    meta.insert("epoch".into(), epoch.to_string());
    meta
}

fn gen_data(top: &ArgMatches, m: &ArgMatches) -> Outcome {
    let c = resolve(top, None)?;
    let out = path(m, "out");
    std::fs::create_dir_all(out)?;
    let (src, tgt) = synthdata::generate(&c.data)?;
    dataset::labeled_container(&src.images, &src.labels)?.save(out.join(SOURCE_FILE))?;
    dataset::target_container(&tgt.images, &tgt.sidecar)?.save(out.join(TARGET_FILE))?;
    log::info!("wrote {} source and {} target images to {}", src.labels.len(), tgt.sidecar.truth.len(), out.display());
    Ok(())
}

fn train_source<T: Real>(c: &Config, m: &ArgMatches) -> Outcome {
    let data = dataset::load_dataset(path(m, "data"))?;
    let labels = data
        .labels
        .ok_or_else(|| CoreError::InvalidInput("source training needs a labeled dataset".into()))?;
    let mut model = Model::<T>::new(c.backbone(), c.adm()?, &mut ChaCha8Rng::seed_from_u64(c.adapt.seed))?;
    let hist = pipeline::train_source(&mut model, &data.images, &labels, &c.adapt)?;
    let report = pipeline::evaluate(&model, &data.images, &labels)?;
    if let Some(last) = hist.last() {
        log::info!("source done: ce {:.4}, training accuracy {:.4}", last.ce, report.accuracy);
    }
    checkpoint::save(path(m, "out"), &model.state, &meta(c, "source", hist.len()))?;
    Ok(())
}

fn load_model<T: Real>(c: &Config, ckpt: checkpoint::Checkpoint<T>) -> sfda_core::Result<Model<T>> {
    Model::from_state(c.backbone(), c.adm()?, ckpt.state)
}

fn adapt<T: Real>(c: &Config, ckpt: checkpoint::Checkpoint<T>, m: &ArgMatches) -> Outcome {
    let data_path = path(m, "data");
    let data = dataset::load_dataset(data_path)?;
    // Ground truth is read separately and only feeds the metrics file.
    let truth = dataset::load_truth(data_path).ok();
    let mut model = load_model(c, ckpt)?;
    let metrics_path = m.get_one::<PathBuf>("metrics");
    if let Some(p) = metrics_path {
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    let summary = pipeline::adapt_target(&mut model, &data.images, &c.adapt, &mut |r| {
        let row = match &truth {
            Some(t) => r.metrics(t),
            None => r.unscored_metrics(),
        };
        if let Some(p) = metrics_path {
            metrics::append_metrics_row(p, &row)?;
        }
        Ok(())
    })?;
    if let Some(t) = &truth {
        log::info!(
            "target accuracy {:.4} → {:.4}",
            pseudolabel::accuracy(&summary.initial_predictions, t),
            pseudolabel::accuracy(&summary.final_predictions, t)
        );
    }
    checkpoint::save(path(m, "out"), &model.state, &meta(c, "target", summary.losses.len()))?;
    Ok(())
}

fn evaluate<T: Real>(c: &Config, ckpt: checkpoint::Checkpoint<T>, m: &ArgMatches) -> Outcome {
    let data_path = path(m, "data");
    let data = dataset::load_dataset(data_path)?;
    let truth = dataset::load_truth(data_path)?;
    let model = load_model(c, ckpt)?;
    let r = pipeline::evaluate(&model, &data.images, &truth)?;
    println!("accuracy {:.6}", r.accuracy);
    for (k, a) in r.per_class.iter().enumerate() {
        println!("class {k} accuracy {a:.6}");
    }
    println!("L_im {:.6}", r.im_loss);
    println!("cross_entropy {:.6}", r.ce_loss);
    if let Some(p) = m.get_one::<PathBuf>("predictions") {
        let mut out = Container::new();
        out.push(Section::labels("predictions", &r.predictions))?;
        out.save(p)?;
    }
    Ok(())
}

fn export_features<T: Real>(c: &Config, ckpt: checkpoint::Checkpoint<T>, m: &ArgMatches) -> Outcome {
    let data = dataset::load_dataset(path(m, "data"))?;
    let model = load_model(c, ckpt)?;
    let ex = pipeline::extract(&model, &data.images)?;
    let lc = pseudolabel::evaluate(&ex.features, &ex.logits, c.adapt.centroids, pseudolabel::Space::Classifier)?;
    let lg = pseudolabel::evaluate(&ex.adm_features, &ex.adm_logits, c.adapt.centroids, pseudolabel::Space::Assistant)?;
    let cons = consistency::build(&lc, &lg, &ex.features, c.adapt.k, 0)?;
    let easy = cons.bank.easy_mask();
    let flags = |v: &[bool], want: bool| -> Vec<usize> { v.iter().map(|&e| (e == want) as usize).collect() };

    let mut out = Container::new();
    let sections = [
        Section::tensor("features", &ex.features),
        Section::tensor("adm_features", &ex.adm_features),
        Section::tensor("logits", &ex.logits),
        Section::labels("predictions", &pipeline::argmax_rows(&ex.logits)),
        Section::labels("pseudo_labels", &cons.labels),
        Section::labels("classifier_labels", &lc.labels),
        Section::labels("assistant_labels", &lg.labels),
        Section::labels("easy", &flags(&easy, true)),
        Section::labels("hard", &flags(&easy, false)),
    ];
    for s in sections {
        out.push(s)?;
    }
    out.save(path(m, "out"))?;
    Ok(())
}

fn gradcheck(m: &ArgMatches) -> Outcome {
    let want = *m.get_one::<usize>("coords").expect("has a default");
    let tol = *m.get_one::<f64>("tolerance").expect("has a default");
    let cfg = gradsuite::SuiteConfig {
        coords: want,
        h: *m.get_one::<f64>("step").expect("has a default"),
        ..gradsuite::SuiteConfig::default()
    };
    if !(cfg.h > 0.0) {
        return Err(CoreError::Config("--step must be positive".into()).into());
    }
    let mut ok = true;
    for check in gradsuite::run(&cfg)? {
        let pass = check.passes_within(want, tol);
        ok &= pass;
        println!(
            "{:<8} checked {:>3} skipped {:>3} max_rel_err {:.3e} {}",
            check.name,
            check.report.checked,
            check.report.skipped,
            check.report.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::GradCheck)
    }
}

/// Commands that read a checkpoint resolve settings against its recorded
/// architecture and run in the configured precision.
fn with_checkpoint(top: &ArgMatches, m: &ArgMatches, run: Runner) -> Outcome {
    let container = Container::load(path(m, "checkpoint"))?;
    let meta = checkpoint::parse_meta(&container.require("meta")?.to_text()?)?;
    let c = resolve(top, Some(&meta))?;
    match c.adapt.precision {
        Precision::F32 => (run.f32)(&c, checkpoint::from_container(&container)?, m),
        Precision::F64 => (run.f64)(&c, checkpoint::from_container(&container)?, m),
    }
}

struct Runner {
    f32: fn(&Config, checkpoint::Checkpoint<f32>, &ArgMatches) -> Outcome,
    f64: fn(&Config, checkpoint::Checkpoint<f64>, &ArgMatches) -> Outcome,
}

macro_rules! runner {
    ($f:ident) => {
        Runner {
            f32: $f::<f32>,
            f64: $f::<f64>,
        }
    };
}

fn dispatch(top: &ArgMatches) -> Outcome {
    match top.subcommand() {
        Some(("gen-data", m)) => gen_data(top, m),
        Some(("train-source", m)) => {
            let c = resolve(top, None)?;
            match c.adapt.precision {
                Precision::F32 => train_source::<f32>(&c, m),
                Precision::F64 => train_source::<f64>(&c, m),
            }
        }
        Some(("adapt", m)) => with_checkpoint(top, m, runner!(adapt)),
        Some(("evaluate", m)) => with_checkpoint(top, m, runner!(evaluate)),
        Some(("export-features", m)) => with_checkpoint(top, m, runner!(export_features)),
        Some(("gradcheck", m)) => {
            resolve(top, None)?;
            gradcheck(m)
        }
        _ => unreachable!("subcommand_required"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = cli().get_matches();
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradCheck) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(EXIT_GRADCHECK)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CoreError::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            })
        }
    }
}
