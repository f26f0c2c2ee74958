use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// (train, test, validation)
    pub ratios: (f64, f64, f64),
    pub stratify_by_label: bool,
    pub group_by_patient: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: (0.70, 0.15, 0.15),
            stratify_by_label: true,
            group_by_patient: true,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.ratios;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios {:?} must be in [0, 1] and sum to 1",
                self.ratios
            )));
        }
        Ok(())
    }
}

/// What the splitter needs to know about one item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitItem {
    pub class: String,
    pub group: Option<String>,
}

/// Item indices per partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Partitions items into train, test and validation sets.
///
/// Units are patients when grouping, single items otherwise. Within each
/// stratum (one per class, or one overall) the units are shuffled and dealt
/// to test until it holds at least `floor(test_ratio * items)` items, then to
/// validation the same way, and the rest go to train. Each partition thus
/// overshoots its floor target by less than one unit.
pub fn make_splits(items: &[SplitItem], config: &SplitConfig) -> Result<Splits> {
    config.validate()?;
    // unit key -> item indices; BTreeMap keeps iteration order seed-independent.
    let mut units: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let key = if config.group_by_patient {
            match &item.group {
                Some(g) => g.clone(),
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "item {i} has no patient id but grouping is enabled"
                    )))
                }
            }
        } else {
            format!("{i:012}")
        };
        units.entry(key).or_default().push(i);
    }
    if units.len() < 3 {
        return Err(Error::TooFewGroups { found: units.len() });
    }

    let mut strata: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    for members in units.into_values() {
        let stratum = if config.stratify_by_label {
            majority_class(items, &members)
        } else {
            String::new()
        };
        strata.entry(stratum).or_default().push(members);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Splits::default();
    for mut stratum in strata.into_values() {
        stratum.shuffle(&mut rng);
        let total: usize = stratum.iter().map(Vec::len).sum();
        let test_target = (config.ratios.1 * total as f64 + 1e-9).floor() as usize;
        let val_target = (config.ratios.2 * total as f64 + 1e-9).floor() as usize;
        let (mut n_test, mut n_val) = (0, 0);
        for unit in stratum {
            if n_test < test_target {
                n_test += unit.len();
                out.test.extend(unit);
            } else if n_val < val_target {
                n_val += unit.len();
                out.validation.extend(unit);
            } else {
                out.train.extend(unit);
            }
        }
    }
    out.train.sort_unstable();
    out.test.sort_unstable();
    out.validation.sort_unstable();
    Ok(out)
}

fn majority_class(items: &[SplitItem], members: &[usize]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in members {
        *counts.entry(items[i].class.as_str()).or_default() += 1;
    }
    // max_by_key keeps the last maximum; iterate in reverse so ties go to
    // the lexicographically smallest class.
    counts
        .into_iter()
        .rev()
        .max_by_key(|&(_, n)| n)
        .map(|(c, _)| c.to_string())
        .unwrap_or_default()
}
