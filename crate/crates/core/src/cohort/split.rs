//! Stratified train/validation/test assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use numkit::seeded_rng;

use crate::ehr::PatientId;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.75,
            valid: 0.10,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(CoreError::Config(format!("split fractions {parts:?} must lie in [0,1]")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Train and validation sizes are floored; the test split takes the rest.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let valid = floor(self.valid).min(n - train);
        [train, valid, n - train - valid]
    }
}

/// Shuffles cases and controls independently and apportions each class.
pub fn stratified_split(
    patients: &[(PatientId, u8)],
    fractions: SplitFractions,
    seed: u64,
) -> Result<BTreeMap<PatientId, Split>> {
    fractions.validate()?;
    let mut rng = seeded_rng(seed);
    let mut out = BTreeMap::new();
    for label in [1u8, 0] {
        let mut ids: Vec<PatientId> = patients
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(id, _)| *id)
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let [train, valid, _] = fractions.apportion(ids.len());
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + valid {
                Split::Valid
            } else {
                Split::Test
            };
            out.insert(id, split);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_fractions_put_everything_in_train() {
        let ps: Vec<_> = (0..7).map(|i| (i, u8::from(i == 0))).collect();
        let f = SplitFractions {
            train: 1.0,
            valid: 0.0,
            test: 0.0,
        };
        let split = stratified_split(&ps, f, 1).unwrap();
        assert!(split.values().all(|s| *s == Split::Train));
    }

    #[test]
    fn bad_fractions_are_config_errors() {
        let f = SplitFractions {
            train: 0.7,
            valid: 0.1,
            test: 0.1,
        };
        assert!(matches!(stratified_split(&[], f, 1), Err(CoreError::Config(_))));
    }
}
