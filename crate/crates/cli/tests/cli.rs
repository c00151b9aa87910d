use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
encoder = transformer
hidden_size = 16
stacks = 1
heads = 2
ffn_dim = 32
max_seq_len = 12
init_std = 0.1
lr = 0.01
epochs = 3
batch_size = 16
seed = 3
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointnlu"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn jointnlu")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(train: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let o = bin(&[
            "synth",
            "--out",
            p(&data),
            "--train",
            &train.to_string(),
            "--valid",
            "30",
            "--test",
            "30",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str) -> Output {
        bin(&[
            "train",
            "--data",
            p(&self.path("data")),
            "--config",
            p(&self.path("tiny.cfg")),
            "--out",
            p(&self.path(out)),
        ])
    }
}

#[test]
fn train_eval_predict_end_to_end() {
    let fx = Fixture::new(60);
    let o = fx.train("run");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.ckpt", "final.ckpt", "metrics.csv", "config.txt"] {
        assert!(fx.path("run").join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(fx.path("run/metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,"));

    let report = fx.path("report.csv");
    let o = bin(&[
        "eval",
        "--model",
        p(&fx.path("run/best.ckpt")),
        "--data",
        p(&fx.path("data")),
        "--report",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "metric,value");
    let names: Vec<&str> = lines[1..4].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["intent_acc", "slot_f1", "semantic_acc"]);
    for l in &lines[1..4] {
        let v: f64 = l.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(lines[4], "intent,precision,recall,f1,support");

    let input = fx.path("in.txt");
    fs::write(&input, "play adele\nbook thai in paris\nzzz unseen words\n").unwrap();
    let output = fx.path("out.txt");
    let o = bin(&[
        "predict",
        "--model",
        p(&fx.path("run/best.ckpt")),
        "--input",
        p(&input),
        "--output",
        p(&output),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = fs::read_to_string(&output).unwrap();
    let rows: Vec<&str> = pred.lines().collect();
    assert_eq!(rows.len(), 3);
    for (row, words) in rows.iter().zip([2, 4, 3]) {
        let (intent, tags) = row.split_once('\t').unwrap();
        assert!(
            ["PlayMusic", "BookRestaurant", "GetWeather"].contains(&intent),
            "{intent}"
        );
        assert_eq!(tags.split(' ').count(), words);
        assert!(!tags.contains("[PAD]"));
    }
}

#[test]
fn missing_slot_file_names_it() {
    let fx = Fixture::new(20);
    fs::remove_file(fx.path("data/train/seq.out")).unwrap();
    let o = fx.train("run");
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("seq.out"), "{err}");
    assert!(err.contains("error[E_IO]"), "{err}");
    assert!(!fx.path("run").exists());
}

#[test]
fn same_seed_same_metrics() {
    let fx = Fixture::new(40);
    assert!(fx.train("a").status.success());
    assert!(fx.train("b").status.success());
    let a = fs::read(fx.path("a/metrics.csv")).unwrap();
    let b = fs::read(fx.path("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(fx.path("a/best.ckpt")).unwrap(),
        fs::read(fx.path("b/best.ckpt")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_config() {
    let fx = Fixture::new(40);
    let out = fx.path("s");
    let o = bin(&[
        "train",
        "--data",
        p(&fx.path("data")),
        "--config",
        p(&fx.path("tiny.cfg")),
        "--out",
        p(&out),
        "--seed",
        "11",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.lines().any(|l| l == "seed = 11"), "{echo}");
}

#[test]
fn config_echo_round_trips() {
    let fx = Fixture::new(20);
    assert!(fx.train("run").status.success());
    let echo = fs::read_to_string(fx.path("run/config.txt")).unwrap();
    for line in TINY.lines() {
        let (k, v) = line.split_once(" = ").unwrap();
        assert!(
            echo.lines().any(|l| l.split_once(" = ") == Some((k, v))),
            "{line} not echoed"
        );
    }
    // Training again from the echo reproduces the run.
    fs::write(fx.path("echo.cfg"), &echo).unwrap();
    let o = bin(&[
        "train",
        "--data",
        p(&fx.path("data")),
        "--config",
        p(&fx.path("echo.cfg")),
        "--out",
        p(&fx.path("again")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(fx.path("run/metrics.csv")).unwrap(),
        fs::read(fx.path("again/metrics.csv")).unwrap()
    );
    assert_eq!(fs::read_to_string(fx.path("again/config.txt")).unwrap(), echo);
}

#[test]
fn bad_config_reports_line() {
    let fx = Fixture::new(20);
    fs::write(fx.path("tiny.cfg"), "hidden_size = 16\nheads = three\n").unwrap();
    let o = fx.train("run");
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("E_CONFIG") && err.contains("line 2"), "{err}");
}

#[test]
fn predict_empty_and_overlong_input() {
    let fx = Fixture::new(20);
    assert!(fx.train("run").status.success());
    let model = fx.path("run/final.ckpt");
    let empty = fx.path("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = fx.path("empty.out");
    let o = bin(&[
        "predict",
        "--model",
        p(&model),
        "--input",
        p(&empty),
        "--output",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");

    let long = fx.path("long.txt");
    fs::write(&long, format!("play adele\n{}\n", vec!["play"; 40].join(" "))).unwrap();
    let out = fx.path("long.out");
    let o = bin(&[
        "predict",
        "--model",
        p(&model),
        "--input",
        p(&long),
        "--output",
        p(&out),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("E_DATA") && err.contains("long.txt:2:"), "{err}");
    assert!(!out.exists());
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let fx = Fixture::new(20);
    fs::write(fx.path("bad.ckpt"), b"not a checkpoint").unwrap();
    let o = bin(&[
        "eval",
        "--model",
        p(&fx.path("bad.ckpt")),
        "--data",
        p(&fx.path("data")),
        "--report",
        p(&fx.path("r.csv")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("E_CORRUPT"), "{}", stderr(&o));
}

fn shipped_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn gradcheck_on_default_tiny_config() {
    let o = bin(&["gradcheck", "--config", p(&shipped_config("tiny.cfg"))]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}\n{}", stderr(&o));
    assert!(out.lines().any(|l| l.starts_with("W_I\t")));
    assert!(out.lines().any(|l| l.starts_with("encoder.layer1.ffn.outer.weight\t")));
    assert!(out.contains("max relative error"));
}

#[test]
fn gradcheck_detached_reports_zero_upstream() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("g.cfg");
    let text = fs::read_to_string(shipped_config("tiny.cfg")).unwrap() + "detach_links = true\n";
    fs::write(&cfg, text).unwrap();
    let o = bin(&["gradcheck", "--config", p(&cfg), "--eps", "1e-4"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}\n{}", stderr(&o));
    for name in ["W_I", "b_I", "W_S", "b_S"] {
        let row: Vec<&str> = out
            .lines()
            .find(|l| l.starts_with(&format!("{name}\t")))
            .unwrap()
            .split('\t')
            .collect();
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.0, "{name}");
    }
}

#[test]
fn gradcheck_rejects_bad_eps() {
    let o = bin(&["gradcheck", "--config", p(&shipped_config("tiny.cfg")), "--eps", "0"]);
    assert!(!o.status.success());
}

#[test]
fn ablation_grid_writes_every_cell() {
    let fx = Fixture::new(30);
    let grid = fx.path("grid.cfg");
    fs::write(
        &grid,
        "hidden_size = 8\nstacks = 1\nheads = 2\nffn_dim = 16\nmax_seq_len = 12\nepochs = 1\nbatch_size = 16\n\
         encoder = lstm, gru\nembedding_file = none\nbidirectional = true, false\nlr = 0.01, 0.001\n",
    )
    .unwrap();
    let out = fx.path("abl");
    let o = bin(&[
        "ablate",
        "--data",
        p(&fx.path("data")),
        "--grid",
        p(&grid),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "encoder,embedding,bidirectional,slot_f1,intent_acc,semantic_acc"
    );
    assert_eq!(lines.len(), 9);
    assert!(lines[1].starts_with("lstm,learned,on,"));
    assert!(lines[3].starts_with("lstm,learned,off,"));
    assert!(lines[8].starts_with("gru,learned,off,"));
}

#[test]
fn ablation_records_failed_cells() {
    let fx = Fixture::new(20);
    let grid = fx.path("grid.cfg");
    let missing = fx.path("nowhere.txt");
    fs::write(
        &grid,
        format!(
            "encoder = lstm\nhidden_size = 8\nmax_seq_len = 12\nepochs = 1\nembedding_file = none, {}\n",
            missing.display()
        ),
    )
    .unwrap();
    let out = fx.path("abl");
    let o = bin(&[
        "ablate",
        "--data",
        p(&fx.path("data")),
        "--grid",
        p(&grid),
        "--out",
        p(&out),
    ]);
    assert!(!o.status.success());
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(!lines[1].contains("NaN"));
    assert_eq!(lines[2], "lstm,nowhere,on,NaN,NaN,NaN");
}
