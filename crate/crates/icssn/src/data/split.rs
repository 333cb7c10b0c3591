//! Deterministic stratified train/val/test splitting.

use super::{ClassCounts, DatasetManifest, ObjectClass, Sample};
use crate::error::{IcssnError, Result};
use crate::seed::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Integer split proportions, e.g. the default 6:2:2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 6,
            val: 2,
            test: 2,
        }
    }
}

/// Largest-remainder apportionment of `n` items over the three ratios.
/// Each part differs from its exact quota by less than one.
fn apportion(n: usize, ratios: SplitRatios) -> (usize, usize, usize) {
    let weights = [ratios.train as f64, ratios.val as f64, ratios.test as f64];
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut parts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    // Hand out the leftover items by descending fractional part; ties go to
    // the earlier split (train, then val, then test).
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        parts[order[i % 3]] += 1;
    }
    (parts[0], parts[1], parts[2])
}

/// Splits samples into train/val/test, stratified by object label so each
/// split preserves the class ratio to within one sample.  Deterministic
/// given `seed`.
pub fn split_dataset(samples: &[Sample], ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    if samples.len() < 3 {
        return Err(IcssnError::invalid(
            "split_dataset",
            format!("need at least 3 samples to form 3 splits, got {}", samples.len()),
        ));
    }
    if ratios.train + ratios.val + ratios.test == 0 {
        return Err(IcssnError::Config("split ratios sum to zero".into()));
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut train_counts = ClassCounts::default();
    let mut val_counts = ClassCounts::default();
    let mut test_counts = ClassCounts::default();

    for (stratum_ix, class) in [ObjectClass::Landslide, ObjectClass::Slope]
        .into_iter()
        .enumerate()
    {
        let mut ids: Vec<&str> = samples
            .iter()
            .filter(|s| s.object_label == class)
            .map(|s| s.id.as_str())
            .collect();
        let mut rng = rng_for(seed, "split", &[stratum_ix as u64]);
        ids.shuffle(&mut rng);

        let (n_train, n_val, _) = apportion(ids.len(), ratios);
        for (ix, id) in ids.iter().enumerate() {
            let (list, counts) = if ix < n_train {
                (&mut train, &mut train_counts)
            } else if ix < n_train + n_val {
                (&mut val, &mut val_counts)
            } else {
                (&mut test, &mut test_counts)
            };
            list.push((*id).to_string());
            match class {
                ObjectClass::Landslide => counts.landslide += 1,
                ObjectClass::Slope => counts.slope += 1,
            }
        }
    }

    Ok(DatasetManifest {
        train,
        val,
        test,
        seed,
        train_counts,
        val_counts,
        test_counts,
    })
}
