use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vizecg_core::data::{Dataset, EcgRecord, Labels, N_CLASSES, N_LEADS};
use vizecg_core::model::{bind_params, forward_train_graph, image_input, signal_input, ModelConfig, ModelState};
use vizecg_core::raster::LayoutSpec;
use vizecg_core::tensor::Graph;
use vizecg_core::train::{
    ablate, compute_metrics, evaluate, fit, kd_kl, prepare_samples, InferenceMode, Sample, TrainConfig, TrainError,
    ABLATION_SETTINGS, ATTENTION_MOMENTUM,
};

/// Tiny extractor widths with a raster large enough for the 6x2 layout.
fn small_config() -> ModelConfig {
    ModelConfig {
        image_height: 96,
        image_width: 32,
        ..ModelConfig::tiny()
    }
}

/// Class c is present iff every lead carries a tone with period `PERIODS[c]`.
/// The signal stream pools over leads and tokens, so classes must differ in
/// local waveform shape rather than in lead or position.
const PERIODS: [f64; N_CLASSES] = [4.0, 6.0, 8.0, 12.0, 21.0, 32.0];

fn tone_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let mask: u8 = rng.random_range(0..64);
            let labels = Labels::from_mask(mask);
            let mut s: Vec<f64> = (0..N_LEADS * 64).map(|_| rng.random_range(-0.02..0.02)).collect();
            for c in 0..N_CLASSES {
                if labels.0[c] {
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    for lead in 0..N_LEADS {
                        for t in 0..64 {
                            s[lead * 64 + t] += 0.5 * (std::f64::consts::TAU * t as f64 / PERIODS[c] + phase).sin();
                        }
                    }
                }
            }
            EcgRecord::new(s, 64, labels, 400.0).unwrap()
        })
        .collect();
    Dataset::new(records)
}

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let ds = tone_dataset(n, seed);
    let idx: Vec<usize> = (0..n).collect();
    prepare_samples(&ds, &idx, &LayoutSpec::default(), 96, 32).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr_max: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let data = samples(12, 1);
    let run = || {
        let mut s = ModelState::new(small_config(), 3).unwrap();
        let log = fit(&mut s, &data[..8], &data[8..], &quick(2), |_| {}).unwrap();
        (log.to_jsonl(), s.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.lines().count(), 3);
    assert!(a.lines().next().unwrap().contains("\"epoch\":0"));
}

#[test]
fn distillation_weight_changes_the_result() {
    let data = samples(8, 2);
    let train = |lambda2| {
        let mut s = ModelState::new(small_config(), 4).unwrap();
        let cfg = TrainConfig { lambda2, ..quick(1) };
        let log = fit(&mut s, &data, &[], &cfg, |_| {}).unwrap();
        (s.params, log)
    };
    let (with_kd, _) = train(1.0);
    let (without, log) = train(0.0);
    assert_ne!(with_kd, without);
    // The divergence is still measured when its weight is zero.
    assert!(log.steps.iter().all(|s| s.kd > 0.0));
    assert!(log.steps.iter().all(|s| (s.total - s.cls).abs() < 1e-12));
}

#[test]
fn detached_teacher_leaves_signal_parameters_untouched_by_kd() {
    let data = samples(1, 3);
    let state = ModelState::new(small_config(), 5).unwrap();
    let mut g = Graph::new();
    let p = bind_params(&mut g, &state);
    let s = signal_input(&mut g, &data[0].record).unwrap();
    let i = image_input(&mut g, &data[0].image()).unwrap();
    let out = forward_train_graph(&mut g, &state, &p, s, i).unwrap();
    let kd = kd_kl(&mut g, out.p_signal, out.p_image, 1e-7, true).unwrap();
    g.backward(kd).unwrap();
    let nonzero = |v| g.grad(v).is_some_and(|gr: &[f64]| gr.iter().any(|&x| x != 0.0));
    // Modules that only feed the signal head see no gradient from the divergence.
    let signal_only = ["cmam_signal.", "smam_signal.", "head_signal."];
    for (name, &v) in state.names.iter().zip(&p) {
        if signal_only.iter().any(|pre| name.starts_with(pre)) {
            assert!(!nonzero(v), "{name}");
        }
    }
    let has = |prefix: &str| state.names.iter().zip(&p).any(|(n, &v)| n.starts_with(prefix) && nonzero(v));
    assert!(has("head_image."));
    // The signal extractor still reaches the image head through the image-side
    // cross attention, whose queries and keys come from signal tokens.
    assert!(has("signal."));
}

#[test]
fn running_attention_mean_follows_each_batch() {
    let data = samples(6, 12);
    let init = ModelState::new(small_config(), 12).unwrap();
    let l = init.config.tokens;
    // Oracle: batch mean of the image-side cross attention under the initial weights.
    let mut batch = vec![0.0; l * l];
    for s in &data {
        let mut g = Graph::new();
        let p = bind_params(&mut g, &init);
        let sig = signal_input(&mut g, &s.record).unwrap();
        let img = image_input(&mut g, &s.image()).unwrap();
        let out = forward_train_graph(&mut g, &init, &p, sig, img).unwrap();
        let a = g.value(out.image_cross_attention.unwrap());
        batch.iter_mut().zip(a).for_each(|(m, v)| *m += v / data.len() as f64);
    }
    let cfg = TrainConfig { batch_size: 6, ..quick(1) };
    let mut s = init.clone();
    fit(&mut s, &data, &[], &cfg, |_| {}).unwrap();
    let m = ATTENTION_MOMENTUM;
    for (got, b) in s.image_attention_mean.data().iter().zip(&batch) {
        let want = (1.0 - m) / l as f64 + m * b;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
    for row in s.image_attention_mean.data().chunks(l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    let mut off = init.clone();
    fit(&mut off, &data, &[], &TrainConfig { enable_cmam: false, ..cfg }, |_| {}).unwrap();
    assert_eq!(off.image_attention_mean, init.image_attention_mean);
}

#[test]
fn nan_parameters_abort_with_the_step() {
    let data = samples(4, 4);
    let mut s = ModelState::new(small_config(), 6).unwrap();
    s.param_mut("head_image.b2").unwrap().data_mut()[0] = f64::NAN;
    match fit(&mut s, &data, &[], &quick(1), |_| {}) {
        Err(TrainError::NonFinite { step, epoch, .. }) => assert_eq!((epoch, step), (1, 1)),
        other => panic!("unexpected {other:?}"),
    }
    let msg = fit(&mut s, &data, &[], &quick(1), |_| {}).unwrap_err().to_string();
    assert!(msg.contains("step 1"), "{msg}");
}

#[test]
fn empty_training_split_is_an_error() {
    let mut s = ModelState::new(small_config(), 0).unwrap();
    assert!(matches!(fit(&mut s, &[], &[], &quick(1), |_| {}), Err(TrainError::EmptySplit)));
}

#[test]
fn attention_free_baseline_still_learns() {
    let train = samples(16, 7);
    let mut s = ModelState::new(small_config(), 8).unwrap();
    let cfg = TrainConfig {
        enable_cmam: false,
        enable_smam: false,
        ..quick(200)
    };
    let log = fit(&mut s, &train, &[], &cfg, |_| {}).unwrap();
    assert!(!s.config.cmam && !s.config.smam);
    let first = log.epochs[1].total;
    let last = log.epochs.last().unwrap().total;
    assert!(last < 0.5 * first, "{first} -> {last}");
    for mode in [InferenceMode::Signal, InferenceMode::Image] {
        let f1 = evaluate(&s, &train, mode, 0.5).unwrap().macro_f1;
        assert!(f1 > 0.8, "{mode:?} {f1}");
    }
}

#[test]
fn untrained_model_scores_at_chance() {
    // With predictions independent of labels, class c has expected F1
    // 2 pi q / (pi + q) for prevalence pi and predicted-positive rate q.
    let data = samples(120, 9);
    for seed in 0..3 {
        let s = ModelState::new(small_config(), seed).unwrap();
        for mode in [InferenceMode::Signal, InferenceMode::Image] {
            let preds = vizecg_core::train::predict(&s, &data, mode).unwrap();
            let n = data.len() as f64;
            let mut expected = 0.0;
            for c in 0..N_CLASSES {
                let pi = data.iter().filter(|d| d.labels.0[c]).count() as f64 / n;
                let q = preds.iter().filter(|p| p[c] >= 0.5).count() as f64 / n;
                expected += if pi + q == 0.0 { 0.0 } else { 2.0 * pi * q / (pi + q) };
            }
            expected /= N_CLASSES as f64;
            let labels: Vec<Labels> = data.iter().map(|d| d.labels).collect();
            let f1 = compute_metrics(&preds, &labels, 0.5).unwrap().macro_f1;
            assert!((f1 - expected).abs() < 0.12, "seed {seed} {mode:?}: {f1} vs {expected}");
        }
    }
}

#[test]
fn ablation_emits_rows_in_reporting_order() {
    let train = samples(8, 10);
    let test = samples(4, 11);
    let cfg = quick(1);
    let run = || ablate(&small_config(), &cfg, &train, &test, &[1, 2], |_, _, _| {}).unwrap();
    let rows = run();
    let names: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    let want: Vec<&str> = ABLATION_SETTINGS.iter().map(|s| s.0).collect();
    assert_eq!(names, want);
    assert!(rows.iter().all(|r| r.f1.len() == 2));
    assert_eq!(rows, run());
}

/// Confusion counts from indicator products, independent of the match-based tally.
fn oracle_counts(preds: &[[f64; 6]], labels: &[Labels], thr: f64, c: usize) -> [usize; 4] {
    let mut out = [0.0f64; 4];
    for (p, l) in preds.iter().zip(labels) {
        let yhat = (p[c] >= thr) as u8 as f64;
        let y = l.as_f64()[c];
        out[0] += yhat * y;
        out[1] += yhat * (1.0 - y);
        out[2] += (1.0 - yhat) * y;
        out[3] += (1.0 - yhat) * (1.0 - y);
    }
    out.map(|v| v as usize)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_match_brute_force_counts(
        preds in prop::collection::vec(prop::array::uniform6(0.0f64..1.0), 16),
        masks in prop::collection::vec(0u8..64, 16),
        thr in 0.05f64..0.95,
    ) {
        let labels: Vec<Labels> = masks.iter().map(|&m| Labels::from_mask(m)).collect();
        let r = compute_metrics(&preds, &labels, thr).unwrap();
        for c in 0..N_CLASSES {
            let m = r.classes[c];
            prop_assert_eq!([m.tp, m.fp, m.fn_, m.tn], oracle_counts(&preds, &labels, thr, c));
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }
}
