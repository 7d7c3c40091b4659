use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ogreg_core::numerics::ogt;
use ogreg_core::{tempo, Tensor};

fn ogreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ogreg"))
        .args(args)
        .output()
        .expect("spawn ogreg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_MODEL: &str = "\
model.t_in = 8
model.h_in = 16
model.w_in = 16
model.stem_channels = 8
model.depths = 1, 1
model.dims = 8, 16
model.heads = 1, 2
model.ratios = 2, 1
";

fn write_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let path = dir.join("run.txt");
    let text = format!(
        "# tiny smoke run\n{SMALL_MODEL}epochs = 2\nwarmup_epochs = 1\nbatch_size = 4\nbase_lr = 1e-3\ndata = {}\n",
        data.display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_train_eval_tempo_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = ogreg(&[
        "gen-data",
        "--task",
        "order",
        "--out",
        p(&data),
        "--frames",
        "8",
        "--size",
        "16",
        "--train-per-class",
        "4",
        "--val-per-class",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train/manifest.csv").exists());

    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &data);
    let o = ogreg(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,split,loss,top1,seconds"));
    assert_eq!(lines.count(), 4);
    let best = run.join("best");

    let o = ogreg(&["eval", "--ckpt", p(&best), "--data", p(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("clips 4"), "{out}");
    assert!(out.contains("pool path Identity"), "{out}");

    let o = ogreg(&[
        "eval",
        "--ckpt",
        p(&best),
        "--synthetic",
        "order",
        "--per-class",
        "2",
        "--frames",
        "12",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("frames 12"));

    let clip = tmp.path().join("tempo");
    let o = ogreg(&[
        "gen-data",
        "--task",
        "tempo",
        "--out",
        p(&clip),
        "--frames",
        "8",
        "--size",
        "16",
        "--speeds",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sim = tmp.path().join("sim");
    let input = clip.join("sample_00000.ogt");
    let o = ogreg(&[
        "tempo",
        "--ckpt",
        p(&best),
        "--input",
        p(&input),
        "--layer",
        "0",
        "--out",
        p(&sim),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = tempo::parse_csv(&fs::read_to_string(sim.join("a_prime_0.csv")).unwrap()).unwrap();
    let bin: Tensor<f64> = ogt::load(sim.join("a_prime_0.ogt")).unwrap();
    assert_eq!(csv, bin.elems());
    let t = bin.dims()[0];
    for row in csv.chunks(t) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let o = ogreg(&[
        "tempo",
        "--ckpt",
        p(&best),
        "--input",
        p(&input),
        "--layer",
        "7",
        "--out",
        p(&sim),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("layer"));
}

#[test]
fn single_frame_tempo_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(ogreg(&[
        "gen-data",
        "--task",
        "order",
        "--out",
        p(&data),
        "--frames",
        "8",
        "--size",
        "16",
        "--train-per-class",
        "2",
        "--val-per-class",
        "1",
    ])
    .status
    .success());
    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &data);
    assert!(ogreg(&["train", "--config", p(&cfg), "--out", p(&run)])
        .status
        .success());

    let frame = Tensor::<f32>::from_fn([1, 16, 16, 3], |i| (i % 7) as f32 / 7.0).unwrap();
    let input = tmp.path().join("frame.ogt");
    ogt::save(&input, &frame).unwrap();
    let sim = tmp.path().join("sim");
    let o = ogreg(&[
        "tempo",
        "--ckpt",
        p(&run.join("best")),
        "--input",
        p(&input),
        "--layer",
        "1",
        "--out",
        p(&sim),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(sim.join("a_prime_0.csv"))
            .unwrap()
            .trim_end(),
        "1.0"
    );
}

#[test]
fn flops_verify_agrees_and_reports_both_conventions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("model.txt");
    fs::write(&cfg, SMALL_MODEL).unwrap();
    let o = ogreg(&["flops", "--config", p(&cfg), "--verify"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("instrumented tally agrees"));
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    let nums: Vec<u64> = total
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(nums[1], 2 * nums[0]);
}

#[test]
fn default_flops_is_tiny_desk() {
    let o = ogreg(&["flops"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("169834144"));
}

#[test]
fn gradcheck_primitive_passes() {
    let o = ogreg(&["gradcheck", "--scope", "primitive", "--seed", "0"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("pass"));
}

#[test]
fn gradcheck_block_passes() {
    let o = ogreg(&["gradcheck", "--scope", "block", "--seed", "0"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "epochs = 2\nwarmup_epochs = 2\n").unwrap();
    let o = ogreg(&["train", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup_epochs"));

    fs::write(&cfg, "lerning_rate = 1\n").unwrap();
    let o = ogreg(&["train", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lerning_rate"));

    let o = Command::new(env!("CARGO_BIN_EXE_ogreg"))
        .args(["flops"])
        .env("OGREG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("OGREG_THREADS"));

    let o = ogreg(&["eval", "--ckpt", p(tmp.path())]);
    assert!(!o.status.success());
}
