use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[synth]
length = 512

[model]
channels = 8
tokens = 4
widths = [4, 8, 8]
signal_length = 64
signal_stem = 4
signal_strides = [2, 2, 1, 1]
image_height = 96
image_width = 32
image_pool = 1
image_stem = 2
image_strides = [2, 2, 1, 1]
hidden = 8

[train]
epochs = 1
batch_size = 4
"#;

fn vizecg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vizecg")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Work { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn gen(&self, name: &str, n: usize, seed: u64, extra: &[&str]) -> PathBuf {
        let out = self.s(name);
        let (n, seed) = (n.to_string(), seed.to_string());
        let cfg = self.s("tiny.toml");
        let mut args = vec!["--config", &cfg, "gen-data", "--n", &n, "--seed", &seed, "--out", &out];
        args.extend_from_slice(extra);
        ok(&vizecg(&args));
        self.path(name)
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let cfg = self.s("tiny.toml");
        let data = data.display().to_string();
        let out = self.s(out);
        let mut args = vec!["--config", &cfg, "train", "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        ok(&vizecg(&args));
        PathBuf::from(out)
    }
}

fn pgm_header(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    let text: String = bytes.iter().take(32).map(|&b| b as char).collect();
    text.split_whitespace().take(4).collect::<Vec<_>>().join(" ")
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let w = Work::new();
    let a = w.gen("a.vzec", 5, 9, &[]);
    let b = w.gen("b.vzec", 5, 9, &[]);
    let c = w.gen("c.vzec", 5, 10, &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let manifest = std::fs::read_to_string(w.path("a.vzec.manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"gen-data\""));
}

#[test]
fn zero_records_is_a_usage_error() {
    let w = Work::new();
    let out = vizecg(&["gen-data", "--n", "0", "--out", &w.s("x.vzec")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--n"));
}

#[test]
fn forced_prevalence_labels_every_record() {
    let w = Work::new();
    w.gen("af.vzec", 6, 1, &["--prevalence", "af=1.0"]);
    let ds = vizecg_core::data::load_dataset(w.path("af.vzec")).unwrap();
    assert!(ds.records.iter().all(|r| r.labels.0[4]));
}

#[test]
fn grid_toggle_changes_pixels_and_size_sets_header() {
    let w = Work::new();
    let data = w.gen("d.vzec", 1, 2, &[]);
    let data = data.display().to_string();
    let render = |grid: &str, name: &str| {
        ok(&vizecg(&[
            "render", "--data", &data, "--index", "0", "--size", "160x120", "--grid", grid, "--out", &w.s(name),
        ]));
        std::fs::read(w.path(name)).unwrap()
    };
    let on = render("on", "on.pgm");
    let off = render("off", "off.pgm");
    assert_ne!(on, off);
    assert_eq!(pgm_header(&w.path("on.pgm")), "P5 160 120 255");
}

#[test]
fn train_without_distillation_logs_zero_kd_term() {
    let w = Work::new();
    let data = w.gen("d.vzec", 10, 3, &[]);
    let run = w.train(&data, "run", &["--lambda2", "0"]);
    for name in ["model.vzck", "train_log.jsonl", "manifest.json"] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["kd_term"].as_f64(), Some(0.0));

    // The manifest replays the run.
    let manifest = run.join("manifest.json").display().to_string();
    let again = w.s("again");
    ok(&vizecg(&["--config", &manifest, "train", "--data", &data.display().to_string(), "--out", &again]));
    assert_eq!(
        std::fs::read(run.join("model.vzck")).unwrap(),
        std::fs::read(w.path("again").join("model.vzck")).unwrap()
    );

    let ckpt = run.join("model.vzck").display().to_string();
    let table = ok(&vizecg(&[
        "eval", "--checkpoint", &ckpt, "--data", &data.display().to_string(), "--on", "all", "--out", &w.s("m.csv"),
    ]));
    assert!(table.contains("macro"));
    assert!(std::fs::read_to_string(w.path("m.csv")).unwrap().lines().count() >= 7);

    let img = w.s("one.pgm");
    ok(&vizecg(&["render", "--data", &data.display().to_string(), "--index", "0", "--size", "32x96", "--out", &img]));
    let probs = ok(&vizecg(&["infer", "--checkpoint", &ckpt, "--image", &img]));
    assert_eq!(probs.lines().count(), 6);
    assert!(probs.starts_with("1dAVb\t"));
}

#[test]
fn infer_rejects_missing_checkpoint_and_bad_images() {
    let w = Work::new();
    let out = vizecg(&["infer", "--checkpoint", &w.s("nope.vzck"), "--image", &w.s("nope.pgm")]);
    assert_eq!(out.status.code(), Some(2));

    let data = w.gen("d.vzec", 4, 4, &[]);
    let run = w.train(&data, "run", &[]);
    let ckpt = run.join("model.vzck").display().to_string();
    std::fs::write(w.path("bad.pgm"), b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    let out = vizecg(&["infer", "--checkpoint", &ckpt, "--image", &w.s("bad.pgm")]);
    assert_eq!(out.status.code(), Some(2));

    let wrong = w.s("wrong.pgm");
    ok(&vizecg(&["render", "--data", &data.display().to_string(), "--index", "0", "--size", "64x96", "--out", &wrong]));
    let out = vizecg(&["infer", "--checkpoint", &ckpt, "--image", &wrong]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects 32x96"));
}

#[test]
fn impossible_gradcheck_tolerance_exits_numeric() {
    let out = vizecg(&["gradcheck", "--seeds", "1", "--tol", "1e-15", "--model-tol", "1e-15"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn ablation_reports_four_settings() {
    let w = Work::new();
    let data = w.gen("d.vzec", 10, 5, &[]);
    let cfg = w.s("tiny.toml");
    ok(&vizecg(&[
        "--config", &cfg, "ablate", "--data", &data.display().to_string(), "--seeds", "1", "--split", "0.6,0,0.4",
        "--out", &w.s("ab.csv"),
    ]));
    let csv = std::fs::read_to_string(w.path("ab.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
}
