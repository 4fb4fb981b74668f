use std::path::Path;
use std::process::{Command, Output};

fn dsiam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsiam")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&dsiam(&["--help"])), 0);
    assert_eq!(code(&dsiam(&["train", "--no-such-flag", "1"])), 1);
    assert_eq!(code(&dsiam(&[])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nwidth = 3\n").unwrap();
    let o = dsiam(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("width"), "{}", text(&o));
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let o = dsiam(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("pair_loss/slice"));
    let o = dsiam(&["gradcheck", "--fault", "conv2d"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("conv2d/input"));
}

#[test]
fn convert_writes_canonical_points() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("gt.txt");
    std::fs::write(&input, "frame x_rgb y x_lwir\n4 120 40 110\n4 121 40 112\n").unwrap();
    let out = dir.path().join("gt.csv");
    let o = dsiam(&["convert", input.to_str().unwrap(), out.to_str().unwrap(), "--columns", "frame,x_rgb,y,x_lwir"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "frame,x,y,d\n4,120,40,-10\n4,121,40,-9\n");
}

const TINY: &[&str] = &[
    "--synth-frames",
    "3",
    "--synth-points",
    "6",
    "--synth-validation-images",
    "1",
    "--channels",
    "2,2,2,2,2,2,2,2,4",
    "--head-hidden",
    "8,4",
    "--epochs",
    "2",
    "--batch-size",
    "32",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(TINY).chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = dsiam(&refs);
    assert_eq!(code(&o), 0, "{:?}\n{}", args, text(&o));
    o
}

#[test]
fn synth_train_eval_predict_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    let paths = ["--data-root", data.to_str().unwrap(), "--out", runs.to_str().unwrap()];

    run(with(&["synth"], &paths));
    assert!(data.join("folds.txt").is_file());
    let gt = std::fs::read(data.join("synth01/gt.csv")).unwrap();
    run(with(&["synth"], &paths));
    assert_eq!(std::fs::read(data.join("synth01/gt.csv")).unwrap(), gt, "same seed, same points");

    run(with(&["train"], &paths));
    let fold = runs.join("fold1");
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "batch_log.csv", "timing.csv", "config.txt", "fold_report.json"] {
        assert!(fold.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(fold.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,loss_corr,loss_concat,loss_total,val_r1,val_r3,val_r5\n"));
    assert_eq!(log.lines().count(), 3);

    let o = run(with(&["eval"], &paths));
    assert!(text(&o).contains("overall"));
    let recall = std::fs::read_to_string(runs.join("recall.csv")).unwrap();
    assert!(recall.starts_with("fold,points,le_1px,le_3px,le_5px\n"), "{recall}");
    let preds = std::fs::read_to_string(fold.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("sequence,frame,x,y,gt_d,d_corr,d_concat,d_final\n"));

    let o = run(with(&["eval"], &[&paths[..], &["--lr0", "0.5"]].concat()));
    assert!(text(&o).contains("different configuration"), "{}", text(&o));

    let seq = data.join("synth01");
    let o = run(with(&["predict", "--points", seq.join("gt.csv").to_str().unwrap(), "--images", seq.to_str().unwrap()], &paths));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.starts_with("sequence,frame,x,y,gt_d"), "{out}");
    let first = out.lines().nth(1).expect("at least one prediction");
    let cells: Vec<&str> = first.split(',').collect();
    let (x, y) = (cells[2], cells[3]);
    let frame: u32 = cells[1].parse().unwrap();
    let img = |d: &str| seq.join(d).join(format!("{frame:06}.png"));
    let o = run(with(
        &["predict", "--rgb", img("rgb").to_str().unwrap(), "--lwir", img("lwir").to_str().unwrap(), "--x", x, "--y", y],
        &paths,
    ));
    assert!(text(&o).contains(&format!("d {}", cells[7])), "{}\n{first}", text(&o));
}

#[test]
fn unknown_fold_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(with(&["synth", "--data-root", data.to_str().unwrap()], &[]));
    let o = dsiam(&["train", "--data-root", data.to_str().unwrap(), "--fold", "fold9"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("fold9"));
    assert!(Path::new(&data).join("synth.json").is_file());
}
