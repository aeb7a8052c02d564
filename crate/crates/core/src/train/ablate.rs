use std::io::Write;

use serde::Serialize;

use super::{evaluate, fit, InferenceMode, Result, Sample, TrainConfig};
use crate::model::{ModelConfig, ModelState};

/// `(name, cmam, smam)` in reporting order.
pub const ABLATION_SETTINGS: [(&str, bool, bool); 4] = [
    ("full", true, true),
    ("no_smam", true, false),
    ("no_cmam", false, true),
    ("no_smam_no_cmam", false, false),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub cmam: bool,
    pub smam: bool,
    /// Image-inference macro F1 per seed, in seed order.
    pub f1: Vec<f64>,
    pub median_f1: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every attention setting once per seed (seeding both initialization and
/// shuffling) and scores image-only inference on `test`.
pub fn ablate(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[Sample],
    test: &[Sample],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, f64),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cmam, smam) in ABLATION_SETTINGS {
        let mut f1 = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                enable_cmam: cmam,
                enable_smam: smam,
                ..train_cfg.clone()
            };
            let mut state = ModelState::new(model.clone(), seed)?;
            fit(&mut state, train, &[], &cfg, |_| {})?;
            let score = evaluate(&state, test, InferenceMode::Image, cfg.threshold)?.macro_f1;
            progress(name, seed, score);
            f1.push(score);
        }
        rows.push(AblationRow {
            setting: name.to_string(),
            cmam,
            smam,
            median_f1: if f1.is_empty() { f64::NAN } else { median(&f1) },
            f1,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["setting", "cmam", "smam", "median_f1", "f1_per_seed"])?;
    for r in rows {
        let per_seed: Vec<String> = r.f1.iter().map(|v| format!("{v:.6}")).collect();
        w.write_record([
            r.setting.clone(),
            r.cmam.to_string(),
            r.smam.to_string(),
            format!("{:.6}", r.median_f1),
            per_seed.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
