use std::io::Write;

use proptest::prelude::*;
use vizecg_core::data::{
    detrend, generate_dataset, generate_record, import_csv, Class, DataError, EcgRecord, Labels, SynthConfig,
    LEAD_NAMES, N_LEADS,
};

/// Beat statistics measured on lead II without any knowledge of the generator.
struct BeatStats {
    bpm: f64,
    rr_cv: f64,
    /// Median width of the R lobe at half its height, seconds.
    qrs_width_s: f64,
}

/// R-peak detector: remove a 1 s centred moving average, take local maxima above
/// 40% of the record maximum with a 200 ms refractory period.
fn beat_stats(record: &EcgRecord) -> BeatStats {
    let fs = record.sample_rate_hz;
    let x = record.lead(1);
    let n = x.len();
    let half = (0.5 * fs) as usize;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    let hp: Vec<f64> = (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(half), (i + half + 1).min(n));
            x[i] - (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();
    let max = hp.iter().cloned().fold(f64::MIN, f64::max);
    let thresh = 0.4 * max;
    let refractory = (0.2 * fs) as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..n - 1 {
        if hp[i] > thresh && hp[i] >= hp[i - 1] && hp[i] > hp[i + 1] {
            match peaks.last() {
                Some(&p) if i - p < refractory => {
                    if hp[i] > hp[p] {
                        *peaks.last_mut().unwrap() = i;
                    }
                }
                _ => peaks.push(i),
            }
        }
    }
    let rr: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64 / fs).collect();
    let mean = rr.iter().sum::<f64>() / rr.len() as f64;
    let sd = (rr.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rr.len() as f64).sqrt();
    let mut widths: Vec<f64> = peaks
        .iter()
        .map(|&p| {
            let level = 0.5 * hp[p];
            let mut lo = p;
            while lo > 0 && hp[lo - 1] > level {
                lo -= 1;
            }
            let mut hi = p;
            while hi + 1 < n && hp[hi + 1] > level {
                hi += 1;
            }
            (hi - lo + 1) as f64 / fs
        })
        .collect();
    widths.sort_by(f64::total_cmp);
    BeatStats {
        bpm: 60.0 / mean,
        rr_cv: sd / mean,
        qrs_width_s: widths[widths.len() / 2],
    }
}

#[test]
fn normal_record_is_reproducible_sinus_rhythm() {
    let cfg = SynthConfig::default();
    let a = generate_record(&cfg, Labels::none(), 11).unwrap();
    let b = generate_record(&cfg, Labels::none(), 11).unwrap();
    assert_eq!(a, b);
    let stats = beat_stats(&a);
    assert!((60.0..=100.0).contains(&stats.bpm), "bpm {}", stats.bpm);
}

#[test]
fn bradycardia_rate_below_sixty() {
    let cfg = SynthConfig::default();
    for seed in 0..20 {
        let r = generate_record(&cfg, Labels::none().with(Class::SinusBradycardia), seed).unwrap();
        let stats = beat_stats(&r);
        assert!(stats.bpm < 60.0, "seed {seed}: {} bpm", stats.bpm);
    }
}

#[test]
fn atrial_fibrillation_rr_is_irregular() {
    let cfg = SynthConfig::default();
    for seed in 0..20 {
        let r = generate_record(&cfg, Labels::none().with(Class::AtrialFibrillation), seed).unwrap();
        let stats = beat_stats(&r);
        assert!(stats.rr_cv > 0.1, "seed {seed}: cv {}", stats.rr_cv);
    }
}

#[test]
fn signatures_agree_with_labels_over_200_records() {
    let ds = generate_dataset(&SynthConfig::default(), 200, 2024).unwrap();
    let (mut rate_ok, mut af_ok, mut wide_ok) = (0, 0, 0);
    for r in &ds.records {
        let s = beat_stats(r);
        let rate_class = if s.bpm < 60.0 {
            Some(Class::SinusBradycardia)
        } else if s.bpm > 100.0 {
            Some(Class::SinusTachycardia)
        } else {
            None
        };
        let want_rate = [Class::SinusBradycardia, Class::SinusTachycardia]
            .into_iter()
            .find(|c| r.labels.has(*c));
        rate_ok += (rate_class == want_rate) as usize;
        af_ok += ((s.rr_cv > 0.1) == r.labels.has(Class::AtrialFibrillation)) as usize;
        let bbb = r.labels.has(Class::RightBundleBranchBlock) || r.labels.has(Class::LeftBundleBranchBlock);
        wide_ok += ((s.qrs_width_s > 0.04) == bbb) as usize;
    }
    for (name, ok) in [("rate", rate_ok), ("af", af_ok), ("qrs width", wide_ok)] {
        assert!(ok >= 190, "{name}: {ok}/200 agree");
    }
}

#[test]
fn bundle_branch_blocks_flip_their_precordial_leads() {
    let cfg = SynthConfig::default();
    let normal = detrend(&generate_record(&cfg, Labels::none(), 5).unwrap());
    let rbbb = detrend(&generate_record(&cfg, Labels::none().with(Class::RightBundleBranchBlock), 5).unwrap());
    let lbbb = detrend(&generate_record(&cfg, Labels::none().with(Class::LeftBundleBranchBlock), 5).unwrap());
    let peak = |r: &EcgRecord, l: usize| {
        let lead = r.lead(l);
        let max = lead.iter().cloned().fold(f64::MIN, f64::max);
        let min = lead.iter().cloned().fold(f64::MAX, f64::min);
        if max > -min {
            1.0
        } else {
            -1.0
        }
    };
    assert_eq!(peak(&normal, 6), -1.0);
    assert_eq!(peak(&rbbb, 6), 1.0);
    assert_eq!(peak(&normal, 10), 1.0);
    assert_eq!(peak(&lbbb, 10), -1.0);
    assert_eq!(peak(&rbbb, 10), 1.0);
}

#[test]
fn first_degree_block_lengthens_pr() {
    // P peak sits pr seconds before the R peak; find it as the largest bump in the
    // 0.45 s window preceding each R peak of lead II, excluding the QRS itself.
    // Bradycardic records keep the previous T wave out of that window.
    let cfg = SynthConfig::default();
    let measure = |labels: Labels, seed: u64| {
        let r = detrend(&generate_record(&cfg, labels, seed).unwrap());
        let fs = r.sample_rate_hz;
        let x = r.lead(1);
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        let mut prs = Vec::new();
        let mut i = (0.5 * fs) as usize;
        while i < x.len() - 1 {
            if x[i] > 0.6 * max && x[i] >= x[i - 1] && x[i] > x[i + 1] {
                let lo = i - (0.45 * fs) as usize;
                let hi = i - (0.08 * fs) as usize;
                let p = (lo..hi).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
                prs.push((i - p) as f64 / fs);
                i += (0.25 * fs) as usize;
            }
            i += 1;
        }
        prs.sort_by(f64::total_cmp);
        prs[prs.len() / 2]
    };
    for seed in 0..5 {
        let slow = Labels::none().with(Class::SinusBradycardia);
        assert!(measure(slow, seed) < 0.2);
        assert!(measure(slow.with(Class::FirstDegreeAvBlock), seed) > 0.2);
    }
}

#[test]
fn dataset_generation_is_deterministic() {
    let cfg = SynthConfig {
        length: 256,
        ..SynthConfig::default()
    };
    assert_eq!(generate_dataset(&cfg, 10, 3).unwrap(), generate_dataset(&cfg, 10, 3).unwrap());
}

#[test]
fn certain_prevalence_labels_every_record() {
    let mut cfg = SynthConfig {
        length: 64,
        ..SynthConfig::default()
    };
    cfg.prevalence[Class::AtrialFibrillation.index()] = 1.0;
    let ds = generate_dataset(&cfg, 50, 1).unwrap();
    assert!(ds.records.iter().all(|r| r.labels.has(Class::AtrialFibrillation)));
}

#[test]
fn half_prevalence_falls_in_binomial_interval() {
    // 99% interval of Binomial(1000, 0.5) is about 500 +/- 41.
    let mut cfg = SynthConfig {
        length: 16,
        ..SynthConfig::default()
    };
    cfg.prevalence[Class::AtrialFibrillation.index()] = 0.5;
    let ds = generate_dataset(&cfg, 1000, 77).unwrap();
    let af = ds.label_counts()[Class::AtrialFibrillation.index()];
    assert!((450..=550).contains(&af), "{af}");
}

fn write_csv(rows: usize, columns: usize, bad_cell: Option<(usize, &str)>) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "{}", LEAD_NAMES[..columns.min(12)].join(",")).unwrap();
    for r in 1..=rows {
        let cells: Vec<String> = (0..columns)
            .map(|c| match bad_cell {
                Some((row, text)) if row == r && c == 3 => text.to_string(),
                _ => format!("{:.4}", (r as f64 * 0.01 + c as f64).sin()),
            })
            .collect();
        writeln!(f, "{}", cells.join(",")).unwrap();
    }
    f
}

#[test]
fn csv_import_reads_all_rows() {
    let f = write_csv(4096, 12, None);
    let r = import_csv(f.path()).unwrap();
    assert_eq!(r.len(), 4096);
    assert_eq!(r.labels, Labels::none());
    assert!((r.lead(2)[0] - (0.01f64 + 2.0).sin()).abs() < 1e-4);
}

#[test]
fn csv_with_eleven_columns_is_rejected() {
    let f = write_csv(10, 11, None);
    match import_csv(f.path()) {
        Err(DataError::ColumnCount { expected, found }) => assert_eq!((expected, found), (12, 11)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn csv_non_numeric_cell_cites_row() {
    let f = write_csv(10, 12, Some((7, "abc")));
    match import_csv(f.path()) {
        Err(DataError::Parse { row, column, .. }) => assert_eq!((row, column), (7, 4)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn csv_needs_two_rows() {
    let f = write_csv(1, 12, None);
    assert!(import_csv(f.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detrend_is_idempotent_and_zero_mean(seed in any::<u64>(), len in 2usize..300) {
        let cfg = SynthConfig { length: len, ..SynthConfig::default() };
        let r = generate_record(&cfg, Labels::none(), seed).unwrap();
        let once = detrend(&r);
        let twice = detrend(&once);
        for l in 0..N_LEADS {
            let mean = once.lead(l).iter().sum::<f64>() / len as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
        for (a, b) in once.samples().iter().zip(twice.samples()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
