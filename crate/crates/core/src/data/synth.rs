//! Gaussian-bump PQRST phantom with label-conditioned distortions.
//!
//! Every beat is a sum of five Gaussian bumps (P, Q, R, S, T) placed
//! relative to the R-peak time and projected onto each lead with a fixed
//! per-lead gain. Class signatures:
//!
//! * SB / ST: heart rate drawn from the brady / tachy range.
//! * AF: RR intervals jittered, P waves suppressed, low-amplitude
//!   fibrillatory waves added.
//! * 1dAVb: PR interval lengthened past 200 ms.
//! * RBBB / LBBB: QRS widened; QRS and T polarity flipped in leads 6-8
//!   (RBBB) or 9-11 (LBBB).
//!
//! Baseline wander (slow sine plus linear drift) and white noise are added
//! on top. Samples are rounded to `f32` precision so a record survives the
//! on-disk format bit-exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Class, DataError, Dataset, EcgRecord, Labels, Result, N_CLASSES, N_LEADS};

const P_GAIN: [f64; N_LEADS] = [0.6, 1.0, 0.4, -0.8, 0.2, 0.7, 0.5, 0.6, 0.6, 0.6, 0.6, 0.5];
const QRS_GAIN: [f64; N_LEADS] = [0.7, 1.1, 0.5, -0.9, 0.25, 0.8, -0.7, -0.4, 0.5, 1.0, 1.2, 0.9];
const T_GAIN: [f64; N_LEADS] = [0.7, 1.0, 0.4, -0.8, 0.3, 0.6, 0.3, 0.8, 1.0, 1.0, 0.9, 0.7];

/// Leads whose QRS/T polarity flips under right bundle branch block (V1-V3).
pub const RBBB_LEADS: std::ops::Range<usize> = 6..9;
/// Leads whose QRS/T polarity flips under left bundle branch block (V4-V6).
pub const LBBB_LEADS: std::ops::Range<usize> = 9..12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Samples per lead.
    pub length: usize,
    pub sample_rate_hz: f64,
    pub normal_rate_bpm: [f64; 2],
    pub brady_rate_bpm: [f64; 2],
    pub tachy_rate_bpm: [f64; 2],
    /// P-peak to R-peak delay of a normal beat, seconds.
    pub pr_interval_s: [f64; 2],
    /// Extra PR delay for first-degree AV block, seconds.
    pub avb_pr_offset_s: [f64; 2],
    pub rbbb_qrs_width: [f64; 2],
    pub lbbb_qrs_width: [f64; 2],
    /// Half-width of the uniform RR perturbation, as a fraction of the mean RR.
    pub sinus_rr_jitter: f64,
    pub af_rr_jitter: f64,
    /// P-wave amplitude multiplier under AF.
    pub af_p_scale: f64,
    pub af_fibrillation_mv: f64,
    pub noise_mv: f64,
    pub baseline_wander_mv: f64,
    /// Marginal probability of each class, in label order.
    pub prevalence: [f64; N_CLASSES],
    /// Probability that the four non-rate classes share one uniform draw,
    /// which makes them co-occur without changing their marginals.
    pub co_occurrence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            length: super::DEFAULT_LENGTH,
            sample_rate_hz: super::DEFAULT_SAMPLE_RATE_HZ,
            normal_rate_bpm: [62.0, 98.0],
            brady_rate_bpm: [40.0, 54.0],
            tachy_rate_bpm: [110.0, 150.0],
            pr_interval_s: [0.12, 0.18],
            avb_pr_offset_s: [0.14, 0.18],
            rbbb_qrs_width: [2.0, 2.6],
            lbbb_qrs_width: [2.2, 2.8],
            sinus_rr_jitter: 0.02,
            af_rr_jitter: 0.35,
            af_p_scale: 0.05,
            af_fibrillation_mv: 0.04,
            noise_mv: 0.02,
            baseline_wander_mv: 0.15,
            prevalence: [0.25, 0.25, 0.25, 0.2, 0.25, 0.2],
            co_occurrence: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.length < 2 {
            return bad(format!("length must be at least 2, got {}", self.length));
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad(format!("sample rate must be positive, got {}", self.sample_rate_hz));
        }
        let ranges = [
            ("normal_rate_bpm", self.normal_rate_bpm),
            ("brady_rate_bpm", self.brady_rate_bpm),
            ("tachy_rate_bpm", self.tachy_rate_bpm),
            ("pr_interval_s", self.pr_interval_s),
            ("avb_pr_offset_s", self.avb_pr_offset_s),
            ("rbbb_qrs_width", self.rbbb_qrs_width),
            ("lbbb_qrs_width", self.lbbb_qrs_width),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} must be a positive range lo <= hi, got [{lo}, {hi}]"));
            }
        }
        for (i, p) in self.prevalence.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return bad(format!("prevalence of {} must lie in [0, 1], got {p}", Class::ALL[i].name()));
            }
        }
        let rate = self.prevalence[Class::SinusBradycardia.index()] + self.prevalence[Class::SinusTachycardia.index()];
        if rate > 1.0 {
            return bad(format!("SB and ST are exclusive, their prevalences sum to {rate} > 1"));
        }
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return bad(format!("co_occurrence must lie in [0, 1], got {}", self.co_occurrence));
        }
        for (name, v) in [
            ("sinus_rr_jitter", self.sinus_rr_jitter),
            ("af_rr_jitter", self.af_rr_jitter),
        ] {
            if !(0.0..0.9).contains(&v) {
                return bad(format!("{name} must lie in [0, 0.9), got {v}"));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct Bump {
    amp: f64,
    offset_s: f64,
    sigma_s: f64,
}

/// Generates one 12-lead record; deterministic in `(config, labels, seed)`.
pub fn generate_record(config: &SynthConfig, labels: Labels, seed: u64) -> Result<EcgRecord> {
    config.validate()?;
    if labels.has(Class::SinusBradycardia) && labels.has(Class::SinusTachycardia) {
        return Err(DataError::ContradictoryLabels(
            "sinus bradycardia and sinus tachycardia cannot co-occur".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = config.sample_rate_hz;
    let n = config.length;
    let duration = n as f64 / fs;

    let rate_range = if labels.has(Class::SinusBradycardia) {
        config.brady_rate_bpm
    } else if labels.has(Class::SinusTachycardia) {
        config.tachy_rate_bpm
    } else {
        config.normal_rate_bpm
    };
    let rr_mean = 60.0 / uniform(&mut rng, rate_range);
    let af = labels.has(Class::AtrialFibrillation);
    let jitter = if af { config.af_rr_jitter } else { config.sinus_rr_jitter };
    let mut pr = uniform(&mut rng, config.pr_interval_s);
    if labels.has(Class::FirstDegreeAvBlock) {
        pr += uniform(&mut rng, config.avb_pr_offset_s);
    }
    let mut width: f64 = 1.0;
    if labels.has(Class::RightBundleBranchBlock) {
        width = width.max(uniform(&mut rng, config.rbbb_qrs_width));
    }
    if labels.has(Class::LeftBundleBranchBlock) {
        width = width.max(uniform(&mut rng, config.lbbb_qrs_width));
    }
    let p_scale = if af { config.af_p_scale } else { 1.0 };
    let amplitude = rng.random_range(0.8..1.2);

    let mut qrs_gain = QRS_GAIN;
    let mut t_gain = T_GAIN;
    for (active, leads) in [
        (labels.has(Class::RightBundleBranchBlock), RBBB_LEADS),
        (labels.has(Class::LeftBundleBranchBlock), LBBB_LEADS),
    ] {
        if active {
            for l in leads {
                qrs_gain[l] = -qrs_gain[l];
                t_gain[l] = -t_gain[l];
            }
        }
    }

    let mut beats = Vec::new();
    let mut t = -rng.random_range(0.0..rr_mean) - rr_mean;
    while t < duration + rr_mean {
        beats.push(t);
        t += rr_mean * (1.0 + jitter * rng.random_range(-1.0..1.0));
    }

    let mut samples = vec![0.0; N_LEADS * n];
    for (b, &r_time) in beats.iter().enumerate() {
        // T timing follows the preceding interval (QT shortens with rate).
        let rr = if b > 0 { r_time - beats[b - 1] } else { rr_mean };
        let qt_scale = rr.clamp(0.3, 2.0).sqrt();
        let waves: [(Bump, &[f64; N_LEADS]); 5] = [
            (Bump { amp: 0.15 * p_scale, offset_s: -pr, sigma_s: 0.022 }, &P_GAIN),
            (Bump { amp: -0.12, offset_s: -0.028 * width, sigma_s: 0.009 * width }, &qrs_gain),
            (Bump { amp: 1.0, offset_s: 0.0, sigma_s: 0.011 * width }, &qrs_gain),
            (Bump { amp: -0.3, offset_s: 0.03 * width, sigma_s: 0.011 * width }, &qrs_gain),
            (Bump { amp: 0.3, offset_s: 0.3 * qt_scale, sigma_s: 0.045 * qt_scale }, &t_gain),
        ];
        for (bump, gains) in waves {
            let centre = r_time + bump.offset_s;
            let lo = ((centre - 5.0 * bump.sigma_s) * fs).floor().max(0.0) as usize;
            let hi = (((centre + 5.0 * bump.sigma_s) * fs).ceil().max(0.0) as usize).min(n);
            for i in lo..hi {
                let z = (i as f64 / fs - centre) / bump.sigma_s;
                let v = amplitude * bump.amp * (-0.5 * z * z).exp();
                for (l, gain) in gains.iter().enumerate() {
                    samples[l * n + i] += gain * v;
                }
            }
        }
    }

    let wander_hz = rng.random_range(0.15..0.45);
    let drift = rng.random_range(-1.0..1.0) * config.baseline_wander_mv;
    let fib_hz = rng.random_range(5.0..7.0);
    for l in 0..N_LEADS {
        let phase = rng.random_range(0.0..2.0 * PI);
        let fib_phase = rng.random_range(0.0..2.0 * PI);
        let lead = &mut samples[l * n..(l + 1) * n];
        for (i, v) in lead.iter_mut().enumerate() {
            let ts = i as f64 / fs;
            *v += config.baseline_wander_mv * (2.0 * PI * wander_hz * ts + phase).sin();
            *v += drift * (ts / duration - 0.5);
            if af {
                *v += config.af_fibrillation_mv * P_GAIN[l].abs() * (2.0 * PI * fib_hz * ts + fib_phase).sin();
            }
            let noise: f64 = rng.sample(StandardNormal);
            *v += config.noise_mv * noise;
            *v = *v as f32 as f64;
        }
    }
    EcgRecord::new(samples, n, labels, fs)
}

/// Draws a label vector whose per-class marginals equal `config.prevalence`.
///
/// SB and ST share one uniform draw split into disjoint intervals, so they
/// never co-occur. 1dAVb and AF are split the same way whenever their
/// prevalences allow it: a prolonged PR interval has no waveform signature
/// once P waves are replaced by fibrillation. The conduction classes share
/// a single uniform with probability `co_occurrence`, otherwise RBBB, LBBB
/// and the 1dAVb/AF pair each draw their own.
pub fn sample_labels(config: &SynthConfig, rng: &mut impl Rng) -> Labels {
    let p = &config.prevalence;
    let mut labels = [false; N_CLASSES];
    let rate: f64 = rng.random();
    labels[Class::SinusBradycardia.index()] = rate < p[Class::SinusBradycardia.index()];
    labels[Class::SinusTachycardia.index()] = rate >= 1.0 - p[Class::SinusTachycardia.index()];
    let shared = rng.random_bool(config.co_occurrence);
    let common: f64 = rng.random();
    let mut draw = || -> f64 { if shared { common } else { rng.random() } };
    for class in [Class::RightBundleBranchBlock, Class::LeftBundleBranchBlock] {
        labels[class.index()] = draw() < p[class.index()];
    }
    let atrial = draw();
    labels[Class::FirstDegreeAvBlock.index()] = atrial < p[Class::FirstDegreeAvBlock.index()];
    labels[Class::AtrialFibrillation.index()] = atrial >= 1.0 - p[Class::AtrialFibrillation.index()];
    Labels(labels)
}

/// `n` labelled records; deterministic in `(config, n, seed)`.
pub fn generate_dataset(config: &SynthConfig, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(DataError::InvalidConfig("dataset size must be at least 1".into()));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let labels = sample_labels(config, &mut rng);
        let record_seed: u64 = rng.random();
        records.push(generate_record(config, labels, record_seed)?);
    }
    Ok(Dataset::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contradictory_rate_labels_rejected() {
        let labels = Labels::none().with(Class::SinusBradycardia).with(Class::SinusTachycardia);
        assert!(matches!(
            generate_record(&SynthConfig::default(), labels, 1),
            Err(DataError::ContradictoryLabels(_))
        ));
    }

    #[test]
    fn record_is_reproducible_and_f32_exact() {
        let cfg = SynthConfig::default();
        let a = generate_record(&cfg, Labels::none(), 42).unwrap();
        let b = generate_record(&cfg, Labels::none(), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4096);
        assert!(a.samples().iter().all(|&v| v as f32 as f64 == v));
        let c = generate_record(&cfg, Labels::none(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.prevalence[0] = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.prevalence[3] = 0.7;
        cfg.prevalence[5] = 0.7;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.brady_rate_bpm = [60.0, 50.0];
        assert!(cfg.validate().is_err());
        assert!(generate_dataset(&SynthConfig::default(), 0, 1).is_err());
    }

    #[test]
    fn rate_labels_never_co_occur() {
        let mut cfg = SynthConfig::default();
        cfg.prevalence[3] = 0.5;
        cfg.prevalence[5] = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let l = sample_labels(&cfg, &mut rng);
            assert!(!(l.has(Class::SinusBradycardia) && l.has(Class::SinusTachycardia)));
        }
    }

    #[test]
    fn av_block_and_fibrillation_split_one_draw() {
        let mut cfg = SynthConfig::default();
        cfg.co_occurrence = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut avb, mut af) = (0, 0);
        for _ in 0..4000 {
            let l = sample_labels(&cfg, &mut rng);
            assert!(!(l.has(Class::FirstDegreeAvBlock) && l.has(Class::AtrialFibrillation)));
            avb += l.has(Class::FirstDegreeAvBlock) as usize;
            af += l.has(Class::AtrialFibrillation) as usize;
        }
        // Binomial(4000, 0.25) lies within 4 standard deviations (~110) of 1000.
        assert!(avb.abs_diff(1000) < 110 && af.abs_diff(1000) < 110, "{avb} {af}");
        // Prevalences summing past one force overlap instead of failing.
        cfg.prevalence[4] = 1.0;
        let l = sample_labels(&cfg, &mut rng);
        assert!(l.has(Class::AtrialFibrillation));
    }
}
