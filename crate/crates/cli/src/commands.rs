use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use vizecg_core::data::{detrend, import_csv, load_dataset, save_dataset, Dataset, EcgRecord, SplitPlan, CLASS_NAMES};
use vizecg_core::model::{load_model, save_model, ModelState};
use vizecg_core::raster::{read_pgm, render_record, write_pgm};
use vizecg_core::train::{
    ablate, evaluate, fit, gradcheck_suite, prepare_samples, write_ablation_csv, write_metrics_csv, InferenceMode,
    MetricsReport, Sample,
};

use crate::config::{manifest_path, Config};
use crate::error::{CliError, Result};
use crate::{
    AblateArgs, Cli, Command, EvalArgs, FitArgs, GenDataArgs, GradcheckArgs, InferArgs, ModeArg, RasterArgs,
    RenderArgs, SplitArgs, SplitName, TrainArgs,
};

/// Written beside every output; `--config <manifest>` replays the resolved config.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'static str,
    seed: Option<u64>,
    /// Command-specific values that are not part of [`Config`].
    params: serde_json::Value,
    config: &'a Config,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl RunManifest<'_> {
    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text)?;
        Ok(())
    }
}

fn display(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let config_given = cli.config.is_some();
    let cfg = Config::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::Render(a) => render(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, config_given, a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate_cmd(cfg, a),
    }
}

fn gen_data(mut cfg: Config, a: GenDataArgs) -> Result<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if let Some(t) = a.length {
        cfg.synth.length = t;
    }
    for (class, p) in &a.prevalence {
        cfg.synth.prevalence[*class] = *p;
    }
    if let Some(c) = a.co_occurrence {
        cfg.synth.co_occurrence = c;
    }
    if let Some(v) = a.noise_mv {
        cfg.synth.noise_mv = v;
    }
    cfg.synth.validate()?;
    let ds = vizecg_core::data::generate_dataset(&cfg.synth, a.n, a.seed)?;
    save_dataset(&ds, &a.out)?;
    let counts = ds.label_counts();
    eprintln!("wrote {} records to {}", ds.len(), a.out.display());
    for (name, c) in CLASS_NAMES.iter().zip(counts) {
        eprintln!("  {name:6} {c}");
    }
    RunManifest {
        command: "gen-data",
        version: env!("CARGO_PKG_VERSION"),
        seed: Some(a.seed),
        params: json!({ "n": a.n }),
        config: &cfg,
        inputs: vec![],
        outputs: display(&[&a.out]),
    }
    .write(&manifest_path(&a.out))
}

fn apply_raster(cfg: &mut Config, r: &RasterArgs) {
    if let Some(g) = r.grid {
        cfg.layout.draw_grid = g.on();
    }
    if let Some((w, h)) = r.size {
        cfg.model.image_width = w;
        cfg.model.image_height = h;
    }
    if let Some(t) = r.thickness {
        cfg.layout.thickness = t;
    }
}

fn render(mut cfg: Config, a: RenderArgs) -> Result<()> {
    apply_raster(&mut cfg, &a.raster);
    cfg.layout.validate()?;
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    let (records, input): (Vec<(usize, EcgRecord)>, &Path) = match (&a.data, &a.csv) {
        (Some(path), _) => {
            let ds = load_dataset(path)?;
            let picked = match a.index {
                Some(i) if i >= ds.len() => {
                    return Err(CliError::Usage(format!("--index {i} out of range for {} records", ds.len())))
                }
                Some(i) => vec![(i, ds.records[i].clone())],
                None => ds.records.into_iter().enumerate().collect(),
            };
            (picked, path)
        }
        (None, Some(path)) => (vec![(0, import_csv(path)?)], path),
        (None, None) => return Err(CliError::Usage("one of --data or --csv is required".into())),
    };
    let single_file = records.len() == 1 && a.out.extension().is_some_and(|e| e == "pgm");
    if !single_file {
        fs::create_dir_all(&a.out)?;
    }
    let mut outputs = Vec::new();
    for (i, record) in &records {
        let image = render_record(&detrend(record), &cfg.layout, h, w)?;
        let path = if single_file {
            a.out.clone()
        } else {
            a.out.join(format!("record_{i:05}.pgm"))
        };
        write_pgm(&image, &path)?;
        outputs.push(path);
    }
    eprintln!("wrote {} image(s) of {w}x{h}", outputs.len());
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    RunManifest {
        command: "render",
        version: env!("CARGO_PKG_VERSION"),
        seed: None,
        params: json!({ "index": a.index }),
        config: &cfg,
        inputs: display(&[input]),
        outputs: display(&outs),
    }
    .write(&manifest_path(&a.out))
}

fn apply_split(cfg: &mut Config, s: &SplitArgs) -> Result<()> {
    if let Some(seed) = s.split_seed {
        cfg.split.seed = seed;
    }
    if let Some(text) = &s.split {
        let parts: Vec<f64> = text
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--split expects three comma-separated fractions, got {text:?}")))?;
        let [train, val, test] = parts[..] else {
            return Err(CliError::Usage(format!("--split expects three fractions, got {text:?}")));
        };
        cfg.split = SplitPlan { seed: cfg.split.seed, train, val, test };
    }
    cfg.split.validate()?;
    Ok(())
}

fn apply_fit(cfg: &mut Config, f: &FitArgs) -> Result<()> {
    let t = &mut cfg.train;
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    if let Some(e) = f.epochs {
        t.epochs = e;
    }
    if let Some(b) = f.batch_size {
        t.batch_size = b;
    }
    set(&mut t.lr_max, f.lr_max);
    set(&mut t.lr_min, f.lr_min);
    set(&mut t.lambda1, f.lambda1);
    set(&mut t.lambda2, f.lambda2);
    if let Some(s) = f.seed {
        t.seed = s;
    }
    if f.detach_teacher {
        t.kd_teacher_detach = true;
    }
    apply_split(cfg, &f.split)?;
    apply_raster(cfg, &f.raster);
    cfg.train.validate()?;
    cfg.layout.validate()?;
    cfg.model.validate()?;
    Ok(())
}

fn samples_for(cfg: &Config, ds: &Dataset, which: &[usize]) -> Result<Vec<Sample>> {
    Ok(prepare_samples(ds, which, &cfg.layout, cfg.model.image_height, cfg.model.image_width)?)
}

fn train(mut cfg: Config, a: TrainArgs) -> Result<()> {
    if a.no_cmam {
        cfg.train.enable_cmam = false;
    }
    if a.no_smam {
        cfg.train.enable_smam = false;
    }
    apply_fit(&mut cfg, &a.fit)?;
    // The switches become part of the saved architecture.
    cfg.model.cmam = cfg.train.enable_cmam;
    cfg.model.smam = cfg.train.enable_smam;
    let ds = load_dataset(&a.data)?;
    let split = cfg.split.split(ds.len())?;
    let train_set = samples_for(&cfg, &ds, &split.train)?;
    let val_set = samples_for(&cfg, &ds, &split.val)?;
    eprintln!("training on {} records, validating on {}", train_set.len(), val_set.len());
    let mut state = ModelState::new(cfg.model.clone(), cfg.train.seed)?;
    let log = fit(&mut state, &train_set, &val_set, &cfg.train, |r| {
        eprintln!("{}", serde_json::to_string(r).expect("log records serialize"));
    })?;
    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.vzck");
    let log_path = a.out.join("train_log.jsonl");
    save_model(&state, &ckpt)?;
    fs::write(&log_path, log.to_jsonl())?;
    RunManifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        seed: Some(cfg.train.seed),
        params: json!({ "train_records": train_set.len(), "val_records": val_set.len() }),
        config: &cfg,
        inputs: display(&[&a.data]),
        outputs: display(&[&ckpt, &log_path]),
    }
    .write(&a.out.join("manifest.json"))
}

fn print_report(title: &str, r: &MetricsReport) {
    println!("{title}");
    println!("{:8} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
    for (name, m) in CLASS_NAMES.iter().zip(&r.classes) {
        println!("{name:8} {:>9.4} {:>9.4} {:>9.4}", m.precision, m.recall, m.f1);
    }
    println!("{:8} {:>9.4} {:>9.4} {:>9.4}", "macro", r.macro_precision, r.macro_recall, r.macro_f1);
}

fn eval(mut cfg: Config, config_given: bool, a: EvalArgs) -> Result<()> {
    apply_split(&mut cfg, &a.split)?;
    if let Some(g) = a.grid {
        cfg.layout.draw_grid = g.on();
    }
    if let Some(t) = a.thickness {
        cfg.layout.thickness = t;
    }
    let state = load_model(&a.checkpoint)?;
    if config_given {
        state.check_config(&cfg.model)?;
    }
    cfg.model = state.config.clone();
    let ds = load_dataset(&a.data)?;
    let split = cfg.split.split(ds.len())?;
    let idx: Vec<usize> = match a.on {
        SplitName::Train => split.train,
        SplitName::Val => split.val,
        SplitName::Test => split.test,
        SplitName::All => (0..ds.len()).collect(),
    };
    if idx.is_empty() {
        return Err(CliError::Usage(format!("the {:?} split is empty", a.on).to_lowercase()));
    }
    let samples = samples_for(&cfg, &ds, &idx)?;
    let mode = match a.mode {
        ModeArg::Signal => InferenceMode::Signal,
        ModeArg::Image => InferenceMode::Image,
    };
    let report = evaluate(&state, &samples, mode, cfg.train.threshold)?;
    print_report(&format!("{mode:?}-inference metrics on {} records", samples.len()), &report);
    let mut outputs = vec![];
    if let Some(out) = &a.out {
        write_metrics_csv(&report, BufWriter::new(File::create(out)?))?;
        outputs.push(out.as_path());
        RunManifest {
            command: "eval",
            version: env!("CARGO_PKG_VERSION"),
            seed: None,
            params: json!({ "mode": format!("{mode:?}").to_lowercase(), "on": format!("{:?}", a.on).to_lowercase() }),
            config: &cfg,
            inputs: display(&[&a.checkpoint, &a.data]),
            outputs: display(&outputs),
        }
        .write(&manifest_path(out))?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let image = read_pgm(&a.image)?;
    let (h, w) = (state.config.image_height, state.config.image_width);
    if (image.height(), image.width()) != (h, w) {
        return Err(CliError::Data(format!(
            "image is {}x{} but the checkpoint expects {w}x{h}",
            image.width(),
            image.height()
        )));
    }
    let probs = state.forward_infer(&image)?;
    for (name, p) in CLASS_NAMES.iter().zip(probs) {
        println!("{name}\t{p:.6}");
    }
    if let Some(out) = &a.out {
        let map: serde_json::Map<String, serde_json::Value> =
            CLASS_NAMES.iter().zip(probs).map(|(n, p)| (n.to_string(), json!(p))).collect();
        fs::write(out, serde_json::to_string_pretty(&map)? + "\n")?;
        let cfg = Config { model: state.config.clone(), ..Config::default() };
        RunManifest {
            command: "infer",
            version: env!("CARGO_PKG_VERSION"),
            seed: None,
            params: json!({}),
            config: &cfg,
            inputs: display(&[&a.checkpoint, &a.image]),
            outputs: display(&[out]),
        }
        .write(&manifest_path(out))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 || !(a.tol > 0.0) || !(a.model_tol > 0.0) {
        return Err(CliError::Usage("--seeds and both tolerances must be positive".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let lines = gradcheck_suite(&seeds, a.tol, a.model_tol)?;
    // Worst seed per check, in suite order.
    let mut worst: Vec<(String, f64, bool)> = Vec::new();
    for l in &lines {
        match worst.iter_mut().find(|w| w.0 == l.name) {
            Some(w) => {
                w.1 = w.1.max(l.max_rel_error);
                w.2 &= l.passed;
            }
            None => worst.push((l.name.clone(), l.max_rel_error, l.passed)),
        }
    }
    println!("{:22} {:>12}  status", "check", "max rel err");
    for (name, err, ok) in &worst {
        println!("{name:22} {err:>12.3e}  {}", if *ok { "PASS" } else { "FAIL" });
    }
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out)?));
        for l in &lines {
            w.serialize(l).map_err(|e| CliError::Data(e.to_string()))?;
        }
        w.flush()?;
        let cfg = Config::default();
        RunManifest {
            command: "gradcheck",
            version: env!("CARGO_PKG_VERSION"),
            seed: None,
            params: json!({ "tol": a.tol, "model_tol": a.model_tol, "seeds": a.seeds }),
            config: &cfg,
            inputs: vec![],
            outputs: display(&[out]),
        }
        .write(&manifest_path(out))?;
    }
    let failed = worst.iter().filter(|w| !w.2).count();
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient check(s) exceeded tolerance")));
    }
    Ok(())
}

fn ablate_cmd(mut cfg: Config, a: AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    apply_fit(&mut cfg, &a.fit)?;
    let ds = load_dataset(&a.data)?;
    let split = cfg.split.split(ds.len())?;
    let train_set = samples_for(&cfg, &ds, &split.train)?;
    let test_set = samples_for(&cfg, &ds, &split.test)?;
    if test_set.is_empty() {
        return Err(CliError::Usage("the test split is empty".into()));
    }
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (0..a.seeds).map(|k| base + k).collect();
    let rows = ablate(&cfg.model, &cfg.train, &train_set, &test_set, &seeds, |name, seed, f1| {
        eprintln!("{name:16} seed {seed}: image macro-F1 {f1:.4}");
    })?;
    println!("{:16} {:>10}", "setting", "median F1");
    for r in &rows {
        println!("{:16} {:>10.4}", r.setting, r.median_f1);
    }
    write_ablation_csv(&rows, BufWriter::new(File::create(&a.out)?))?;
    RunManifest {
        command: "ablate",
        version: env!("CARGO_PKG_VERSION"),
        seed: Some(base),
        params: json!({ "seeds": seeds }),
        config: &cfg,
        inputs: display(&[&a.data]),
        outputs: display(&[&a.out]),
    }
    .write(&manifest_path(&a.out))
}
