use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Log};
use crate::{Error, Result};

/// Train/validation/test fractions and the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train,
            val,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} fraction {f} is not in (0, 1)")));
            }
        }
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.1,
            test: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Students whose logs could not populate all three splits.
    pub warnings: Vec<String>,
}

/// Per-student counts `(train, val, test)` for `n ≥ 3` logs. Validation and
/// test get at least one log each; train absorbs the remainder.
fn counts(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let mut val = ((spec.val * n as f64).round() as usize).max(1);
    let mut test = ((spec.test * n as f64).round() as usize).max(1);
    while val + test >= n {
        if test >= val && test > 1 {
            test -= 1;
        } else {
            val -= 1;
        }
    }
    (n - val - test, val, test)
}

/// Per-student seeded split. Each student's logs are shuffled and divided by
/// the spec's fractions; students with fewer than three logs go entirely to
/// train.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut warnings = Vec::new();
    for (student, mut logs) in dataset.logs_by_student().into_iter().enumerate() {
        if logs.is_empty() {
            continue;
        }
        logs.shuffle(&mut rng);
        if logs.len() < 3 {
            warnings.push(format!(
                "student {} has {} logs; all assigned to train",
                dataset.ids().students[student],
                logs.len()
            ));
            train.extend(logs);
            continue;
        }
        let (n_train, n_val, _) = counts(logs.len(), spec);
        let mut rest: Vec<Log> = logs.split_off(n_train);
        let tail = rest.split_off(n_val);
        train.extend(logs);
        val.extend(rest);
        test.extend(tail);
    }
    Ok(Splits {
        train: dataset.with_logs(train)?,
        val: dataset.with_logs(val)?,
        test: dataset.with_logs(test)?,
        warnings,
    })
}
