//! 12-lead ECG records, preprocessing, synthetic generation and dataset files.

mod format;
mod split;
pub mod synth;

pub use format::{import_csv, load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use split::{Split, SplitPlan};
pub use synth::{generate_dataset, generate_record, SynthConfig};

use std::fmt;

use thiserror::Error;

pub const N_LEADS: usize = 12;
pub const N_CLASSES: usize = 6;
pub const DEFAULT_LENGTH: usize = 4096;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 400.0;

pub const LEAD_NAMES: [&str; N_LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

pub const CLASS_NAMES: [&str; N_CLASSES] = ["1dAVb", "RBBB", "LBBB", "SB", "AF", "ST"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("csv row {row}, column {column}: {msg}")]
    Parse { row: usize, column: usize, msg: String },
    #[error("expected {expected} columns, found {found}")]
    ColumnCount { expected: usize, found: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("contradictory labels: {0}")]
    ContradictoryLabels(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// The six target abnormalities, in label-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    FirstDegreeAvBlock,
    RightBundleBranchBlock,
    LeftBundleBranchBlock,
    SinusBradycardia,
    AtrialFibrillation,
    SinusTachycardia,
}

impl Class {
    pub const ALL: [Class; N_CLASSES] = [
        Class::FirstDegreeAvBlock,
        Class::RightBundleBranchBlock,
        Class::LeftBundleBranchBlock,
        Class::SinusBradycardia,
        Class::AtrialFibrillation,
        Class::SinusTachycardia,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }

    /// Case-insensitive lookup by short name (`af`, `1davb`, `rbbb`, ...).
    pub fn from_name(name: &str) -> Option<Class> {
        Class::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(name))
    }
}

/// Multi-label target vector, bit `i` of the mask is class `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Labels(pub [bool; N_CLASSES]);

impl Labels {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, class: Class) -> Self {
        self.0[class.index()] = true;
        self
    }

    pub fn has(&self, class: Class) -> bool {
        self.0[class.index()]
    }

    pub fn to_mask(self) -> u8 {
        self.0
            .iter()
            .enumerate()
            .fold(0u8, |m, (i, &on)| m | ((on as u8) << i))
    }

    pub fn from_mask(mask: u8) -> Self {
        let mut out = [false; N_CLASSES];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = mask & (1 << i) != 0;
        }
        Self(out)
    }

    pub fn as_f64(&self) -> [f64; N_CLASSES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl fmt::Display for Labels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Class::ALL.iter().filter(|c| self.has(**c)).map(|c| c.name()).collect();
        if names.is_empty() {
            f.write_str("normal")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

/// Twelve equally long leads in millivolts, stored lead-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    samples: Vec<f64>,
    len: usize,
    pub labels: Labels,
    pub sample_rate_hz: f64,
}

impl EcgRecord {
    /// `samples` holds lead 0 first, then lead 1, and so on.
    pub fn new(samples: Vec<f64>, len: usize, labels: Labels, sample_rate_hz: f64) -> Result<Self> {
        if len == 0 || samples.len() != N_LEADS * len {
            return Err(DataError::InvalidRecord(format!(
                "expected {N_LEADS} leads of {len} samples, got {} values",
                samples.len()
            )));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(DataError::InvalidRecord(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(Self {
            samples,
            len,
            labels,
            sample_rate_hz,
        })
    }

    pub fn from_leads(leads: &[Vec<f64>], labels: Labels, sample_rate_hz: f64) -> Result<Self> {
        if leads.len() != N_LEADS {
            return Err(DataError::InvalidRecord(format!(
                "expected {N_LEADS} leads, got {}",
                leads.len()
            )));
        }
        let len = leads[0].len();
        if leads.iter().any(|l| l.len() != len) {
            return Err(DataError::InvalidRecord("leads differ in length".into()));
        }
        Self::new(leads.concat(), len, labels, sample_rate_hz)
    }

    /// Samples per lead (T).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        &self.samples[i * self.len..(i + 1) * self.len]
    }

    pub fn lead_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.samples[i * self.len..(i + 1) * self.len]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn duration_s(&self) -> f64 {
        self.len as f64 / self.sample_rate_hz
    }
}

/// Removes the least-squares linear trend of every lead, then its residual mean.
pub fn detrend(record: &EcgRecord) -> EcgRecord {
    let mut out = record.clone();
    for i in 0..N_LEADS {
        detrend_lead(out.lead_mut(i));
    }
    out
}

pub(crate) fn detrend_lead(x: &mut [f64]) {
    let n = x.len();
    if n < 2 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let t_mean = (n - 1) as f64 / 2.0;
    let x_mean = x.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (t, v) in x.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (v - x_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    for (t, v) in x.iter_mut().enumerate() {
        *v -= x_mean + slope * (t as f64 - t_mean);
    }
    let residual_mean = x.iter().sum::<f64>() / n as f64;
    x.iter_mut().for_each(|v| *v -= residual_mean);
}

/// An ordered collection of records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<EcgRecord>,
}

impl Dataset {
    pub fn new(records: Vec<EcgRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Per-class positive counts.
    pub fn label_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0; N_CLASSES];
        for r in &self.records {
            for (c, &on) in r.labels.0.iter().enumerate() {
                counts[c] += on as usize;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_from_fn(len: usize, f: impl Fn(usize) -> f64) -> EcgRecord {
        let lead: Vec<f64> = (0..len).map(f).collect();
        EcgRecord::from_leads(&vec![lead; N_LEADS], Labels::none(), 400.0).unwrap()
    }

    #[test]
    fn constant_lead_detrends_to_zero() {
        let r = detrend(&record_from_fn(100, |_| 3.7));
        assert!(r.samples().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ramp_detrends_to_zero() {
        let r = detrend(&record_from_fn(4096, |t| 0.01 * t as f64 - 2.0));
        assert!(r.samples().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn ramp_plus_sine_leaves_sine_minus_fit() {
        // Oracle: least-squares line of the sine alone, computed in closed form
        // from the normal equations; detrending ramp+sine must equal sine minus that line.
        let n = 1000;
        let sine = |t: usize| (t as f64 * 0.05).sin();
        let r = detrend(&record_from_fn(n, |t| 0.002 * t as f64 + 0.5 + sine(t)));
        let (mut st, mut stt, mut sy, mut sty) = (0.0, 0.0, 0.0, 0.0);
        for t in 0..n {
            let (tf, y) = (t as f64, sine(t));
            st += tf;
            stt += tf * tf;
            sy += y;
            sty += tf * y;
        }
        let nf = n as f64;
        let slope = (nf * sty - st * sy) / (nf * stt - st * st);
        let intercept = (sy - slope * st) / nf;
        for t in 0..n {
            let want = sine(t) - (intercept + slope * t as f64);
            assert!((r.lead(0)[t] - want).abs() < 1e-6);
        }
        let mean = r.lead(0).iter().sum::<f64>() / nf;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn label_mask_round_trip() {
        for mask in 0u8..64 {
            assert_eq!(Labels::from_mask(mask).to_mask(), mask);
        }
        let l = Labels::none().with(Class::AtrialFibrillation).with(Class::FirstDegreeAvBlock);
        assert_eq!(l.to_mask(), 0b010001);
        assert_eq!(l.to_string(), "1dAVb+AF");
    }

    #[test]
    fn class_lookup_by_name() {
        assert_eq!(Class::from_name("af"), Some(Class::AtrialFibrillation));
        assert_eq!(Class::from_name("1dAVb"), Some(Class::FirstDegreeAvBlock));
        assert_eq!(Class::from_name("xyz"), None);
    }

    #[test]
    fn record_rejects_ragged_leads() {
        let mut leads = vec![vec![0.0; 10]; N_LEADS];
        leads[3].pop();
        assert!(EcgRecord::from_leads(&leads, Labels::none(), 400.0).is_err());
        assert!(EcgRecord::from_leads(&leads[..11], Labels::none(), 400.0).is_err());
    }
}
