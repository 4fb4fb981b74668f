mod convert;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use dsiam::checks::{self, SuiteOptions};
use dsiam::config::{fold_dir, RunConfig, KEYS};
use dsiam::data::{build_fold, load_sequence, write_points, write_synth_dataset, Corpus, FoldData, FoldFile, FoldSpec, Raster};
use dsiam::net::Checkpoint;
use dsiam::predict::{
    evaluate_fold, write_predictions, write_predictions_to, PredictionRow, Predictor, RecallReport, REFERENCE_RECALLS,
};
use dsiam::tensor::OpKind;
use dsiam::train::{train, write_batches, write_history, write_timing};

use convert::{convert_text, ColumnTemplate, ConvertOptions};

/// Failure that maps to the numerical exit code.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

fn cli() -> Command {
    let mut cmd = Command::new("dsiam")
        .about("Domain-siamese RGB-LWIR patch matching: data, training, evaluation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("config").long("config").short('c').global(true).value_name("FILE").help("run config file (key = value lines)"));
    for k in KEYS {
        let mut arg = Arg::new(k.key).long(k.key).global(true).value_name("VALUE").help(k.help).help_heading("Config keys");
        if k.key.contains('_') {
            let hyphenated: &'static str = Box::leak(k.key.replace('_', "-").into_boxed_str());
            arg = arg.alias(hyphenated);
        }
        cmd = cmd.arg(arg);
    }
    cmd.subcommand(Command::new("synth").about("Write a synthetic dataset with its fold file to data_root"))
        .subcommand(
            Command::new("convert")
                .about("Convert point annotations to the frame,x,y,d CSV")
                .arg(Arg::new("input").required(true).value_name("ANNOTATIONS"))
                .arg(Arg::new("output").required(true).value_name("CSV"))
                .arg(
                    Arg::new("columns")
                        .long("columns")
                        .default_value("frame,x,y,d")
                        .help("input column roles: frame, x|x_rgb, y, d|x_lwir, _ to skip"),
                )
                .arg(Arg::new("frame").long("frame").value_parser(clap::value_parser!(u32)).help("frame index for files without a frame column"))
                .arg(Arg::new("negate").long("negate").action(ArgAction::SetTrue).help("flip the disparity sign")),
        )
        .subcommand(Command::new("train").about("Train every listed fold; artifacts go to <out>/<fold>/"))
        .subcommand(Command::new("eval").about("Evaluate checkpoints on the test split of every listed fold"))
        .subcommand(
            Command::new("predict")
                .about("Predict disparities for one query pixel or a point file")
                .arg(Arg::new("rgb").long("rgb").value_name("IMAGE").requires_all(["lwir", "x", "y"]))
                .arg(Arg::new("lwir").long("lwir").value_name("IMAGE"))
                .arg(Arg::new("x").long("x").value_parser(clap::value_parser!(i32)))
                .arg(Arg::new("y").long("y").value_parser(clap::value_parser!(i32)))
                .arg(Arg::new("points").long("points").value_name("CSV").requires("images").conflicts_with("rgb"))
                .arg(Arg::new("images").long("images").value_name("DIR").help("directory holding rgb/ and lwir/ frames"))
                .arg(Arg::new("output").long("output").short('o').value_name("CSV").help("predictions CSV (default: stdout)")),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every layer and the pair loss")
                .arg(Arg::new("step").long("step").value_parser(clap::value_parser!(f64)))
                .arg(Arg::new("tolerance").long("tolerance").value_parser(clap::value_parser!(f64)))
                .arg(Arg::new("slice").long("slice").value_parser(clap::value_parser!(usize)).help("network parameters probed by the pair-loss check"))
                .arg(Arg::new("fault").long("fault").value_name("OP").help("corrupt this operation's backward rule (conv2d, batchnorm, relu, ...)")),
        )
}

fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.key) {
            cfg.set(k.key, v)?;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| {
                c.downcast_ref::<Numerical>().is_some() || c.downcast_ref::<dsiam::Error>().is_some_and(|e| e.is_numerical())
            });
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_USAGE })
        }
    }
}

fn run(matches: &ArgMatches) -> Result<()> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = resolve_config(sub)?;
    let threads = cfg.threads()?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring worker threads")?;
    }
    match name {
        "synth" => cmd_synth(&cfg),
        "convert" => cmd_convert(sub),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "predict" => cmd_predict(&cfg, sub),
        "gradcheck" => cmd_gradcheck(&cfg, sub),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = format!("# config_hash = {}\n{}", cfg.hash(), cfg.render());
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let synth = cfg.synth_config()?;
    let root = cfg.data_root();
    create_dir(&root)?;
    let seqs = write_synth_dataset(&root, &synth)?;
    save_config(cfg, &root.join("config.txt"))?;
    let points: usize = seqs.iter().map(|s| s.points().len()).sum();
    println!("wrote {} sequences ({points} points) to {}", seqs.len(), root.display());
    Ok(())
}

fn cmd_convert(m: &ArgMatches) -> Result<()> {
    let input = PathBuf::from(m.get_one::<String>("input").unwrap());
    let output = PathBuf::from(m.get_one::<String>("output").unwrap());
    let opts = ConvertOptions {
        template: ColumnTemplate::parse(m.get_one::<String>("columns").unwrap())?,
        frame: m.get_one::<u32>("frame").copied(),
        negate: m.get_flag("negate"),
    };
    let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let points = convert_text(&text, &input, &opts)?;
    write_points(&output, &points)?;
    println!("{} points -> {}", points.len(), output.display());
    Ok(())
}

/// Fold spec plus the directory its sequence ids resolve against.
fn resolve_fold(cfg: &RunConfig, name: &str) -> Result<FoldFile> {
    let builtin = |prefix: &str| -> Option<Result<usize>> {
        name.strip_prefix(prefix).map(|k| k.parse().with_context(|| format!("bad fold index in {name}")))
    };
    if let Some(k) = builtin("litiv2014:") {
        return Ok(FoldFile { root: cfg.data_root(), folds: vec![FoldSpec::litiv2014(k?)?] });
    }
    if let Some(k) = builtin("litiv2018:") {
        return Ok(FoldFile { root: cfg.data_root(), folds: vec![FoldSpec::litiv2018(k?)?] });
    }
    let path = cfg.folds_path();
    let file = FoldFile::load(&path).with_context(|| format!("loading fold file {}", path.display()))?;
    let spec = file.get(name)?.clone();
    Ok(FoldFile { root: file.root, folds: vec![spec] })
}

fn prepare_fold(cfg: &RunConfig, name: &str) -> Result<(Corpus, FoldData)> {
    let file = resolve_fold(cfg, name)?;
    let spec = &file.folds[0];
    let mut corpus = file.load_corpus(spec, cfg.geometry()?)?;
    let fold = build_fold(spec, &mut corpus, &cfg.augment_options()?, cfg.seed()?)?;
    Ok((corpus, fold))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let net = cfg.net_config()?;
    let tc = cfg.train_config()?;
    for name in cfg.fold_names()? {
        let (corpus, fold) = prepare_fold(cfg, &name)?;
        let dir = cfg.out().join(fold_dir(&name));
        create_dir(&dir)?;
        save_config(cfg, &dir.join("config.txt"))?;
        std::fs::write(dir.join("fold_report.json"), serde_json::to_string_pretty(&fold.report)?)?;
        eprintln!(
            "{name}: {} training samples, {} validation points, {} test points",
            fold.train.len(),
            fold.validation.len(),
            fold.test.len()
        );
        let mut observer = |r: &dsiam::train::LossRecord, secs: f64| {
            let val = r.val_r3.map_or(String::from("-"), |v| format!("{v:.3}"));
            eprintln!("epoch {:>3}  lr {:.2e}  loss {:.4}  val@3 {val}  ({secs:.1}s)", r.epoch, r.lr, r.loss_total);
        };
        let mut out = train::<f32>(&corpus, &fold, &net, &tc, &mut observer)?;
        for ck in [&mut out.best, &mut out.last] {
            ck.header.config_hash = cfg.hash();
        }
        out.best.save(dir.join("best.ckpt"))?;
        out.last.save(dir.join("last.ckpt"))?;
        write_history(dir.join("train_log.csv"), &out.history)?;
        write_batches(dir.join("batch_log.csv"), &out.batches)?;
        write_timing(dir.join("timing.csv"), &out.epoch_seconds)?;
        eprintln!("{name}: best epoch {} -> {}", out.best_epoch, dir.display());
        if let Some(e) = out.status.error() {
            return Err(e).context(format!("training {name} stopped; checkpoints hold the last finite state"));
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn warn_on_mismatch(cfg: &RunConfig, ck: &Checkpoint<f32>, path: &Path) {
    if !ck.header.config_hash.is_empty() && ck.header.config_hash != cfg.hash() {
        eprintln!("warning: {} was trained with a different configuration (hash {})", path.display(), ck.header.config_hash);
    }
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let thresholds = cfg.thresholds()?;
    let geometry = cfg.geometry()?;
    let mut all_rows: Vec<PredictionRow> = Vec::new();
    let mut folds = Vec::new();
    for name in cfg.fold_names()? {
        let (corpus, fold) = prepare_fold(cfg, &name)?;
        let path = cfg.checkpoint_path(&name);
        let ck = load_checkpoint(&path)?;
        warn_on_mismatch(cfg, &ck, &path);
        let norm = match &ck.header.normalization {
            Some(n) => {
                if *n != fold.normalization {
                    eprintln!("warning: normalization stored in {} differs from the statistics of this fold's data", path.display());
                }
                n.clone()
            }
            None => fold.normalization.clone(),
        };
        let model = ck.model()?;
        let predictor = Predictor::new(&model, &norm, geometry, ck.header.heads).with_score_norm(cfg.score_norm()?);
        let (rows, recall) = evaluate_fold(&predictor, &corpus, &fold.name, &fold.test, &thresholds)?;
        let dir = cfg.out().join(fold_dir(&name));
        create_dir(&dir)?;
        write_predictions(dir.join("predictions.csv"), &rows)?;
        all_rows.extend(rows);
        folds.push(recall);
    }
    let report = RecallReport::aggregate(&thresholds, folds)?;
    let out = cfg.out();
    create_dir(&out)?;
    write_predictions(out.join("predictions.csv"), &all_rows)?;
    report.write_csv(out.join("recall.csv"))?;
    save_config(cfg, &out.join("eval_config.txt"))?;
    print!("{}", report.render());
    let references: Vec<String> = report
        .folds
        .iter()
        .flat_map(|f| {
            REFERENCE_RECALLS.iter().filter(move |r| f.name == format!("{}-{}", r.dataset, r.fold)).map(|r| {
                let cells: Vec<String> = r.thresholds.iter().zip(r.recalls).map(|(t, v)| format!("<={t}px {v:.3}")).collect();
                format!("  {}-{}: {}", r.dataset, r.fold, cells.join("  "))
            })
        })
        .collect();
    if !references.is_empty() {
        println!("published reference values:");
        for line in references {
            println!("{line}");
        }
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let fold = cfg.fold_names()?.remove(0);
    let path = cfg.checkpoint_path(&fold);
    let ck = load_checkpoint(&path)?;
    warn_on_mismatch(cfg, &ck, &path);
    let norm = ck.header.normalization.clone().context("checkpoint carries no normalization statistics")?;
    let model = ck.model()?;
    let geometry = cfg.geometry()?;
    let predictor = Predictor::new(&model, &norm, geometry, ck.header.heads).with_score_norm(cfg.score_norm()?);
    let fmt = |v: Option<f64>| v.map_or(String::from("-"), |v| format!("{v:.4}"));

    if let Some(rgb) = m.get_one::<String>("rgb") {
        let frames = dsiam::data::FramePair { rgb: Raster::load(rgb)?, lwir: Raster::load(m.get_one::<String>("lwir").unwrap())? };
        let (x, y) = (*m.get_one::<i32>("x").unwrap(), *m.get_one::<i32>("y").unwrap());
        let p = predictor.predict(&frames, x, y)?;
        println!("x {x} y {y}  d_corr {}  d_concat {}  d {:.4}", fmt(p.signed_corr()), fmt(p.signed_concat()), p.signed());
        return Ok(());
    }
    let Some(points) = m.get_one::<String>("points") else {
        bail!("predict needs --rgb/--lwir/--x/--y or --points with --images");
    };
    let images = PathBuf::from(m.get_one::<String>("images").unwrap());
    let name = images.file_name().map_or("query".into(), |s| s.to_string_lossy().into_owned());
    let seq = load_sequence(&name, &images, Path::new(points), &geometry)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for p in seq.points.iter().chain(&seq.unusable) {
        let frames = &seq.frames[&p.frame];
        if !frames.queryable(&geometry, p.x, p.y) {
            skipped += 1;
            continue;
        }
        let pred = predictor.predict(frames, p.x, p.y)?;
        rows.push(PredictionRow::new(&name, p, &pred));
    }
    rows.sort_by_key(|r| (r.frame, r.y, r.x));
    if skipped > 0 {
        eprintln!("skipped {skipped} points whose widened patch leaves the frame");
    }
    match m.get_one::<String>("output") {
        Some(out) => write_predictions(out, &rows)?,
        None => write_predictions_to(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let mut opts = SuiteOptions { seed: cfg.seed()?, ..SuiteOptions::default() };
    if let Some(&s) = m.get_one::<f64>("step") {
        opts.step = s;
    }
    if let Some(&t) = m.get_one::<f64>("tolerance") {
        opts.tolerance = t;
    }
    if let Some(&n) = m.get_one::<usize>("slice") {
        opts.slice = n;
    }
    if let Some(f) = m.get_one::<String>("fault") {
        opts.fault = Some(f.parse::<OpKind>()?);
    }
    let start = Instant::now();
    let results = checks::run_suite(&opts)?;
    print!("{}", checks::render(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    println!("{} checks in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        return Err(Numerical(format!("gradient check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsiam::net::HeadMode;

    #[test]
    fn every_key_has_a_flag() {
        let m = cli().try_get_matches_from(["dsiam", "train", "--lr0", "0.5", "--batch-size", "16", "--heads", "corr"]).unwrap();
        let cfg = resolve_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.get("lr0"), "0.5");
        assert_eq!(cfg.get("batch_size"), "16");
        assert_eq!(cfg.heads().unwrap(), HeadMode::Corr);
        cli().debug_assert();
    }
}
