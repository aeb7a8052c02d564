use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Seeded train/val/test partition parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Disjoint index sets covering `0..n` exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidConfig(format!(
                "split fractions must be in [0, 1] and sum to 1, got {fr:?}"
            )));
        }
        Ok(())
    }

    /// Shuffles `0..n` with the plan's seed and cuts it by the fractions
    /// (train and val rounded, test takes the remainder).
    pub fn split(&self, n: usize) -> Result<Split> {
        self.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let n_train = ((n as f64 * self.train).round() as usize).min(n);
        let n_val = ((n as f64 * self.val).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Split { train: idx, val, test })
    }
}
