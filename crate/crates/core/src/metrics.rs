//! Accuracy bookkeeping and the confusion / forgetting split of test errors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{input_err, shape_err, Result};

/// Class → meta-class (group of mutually similar classes).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaClassMap(BTreeMap<ClassId, u32>);

impl MetaClassMap {
    pub fn new(map: BTreeMap<ClassId, u32>) -> Self {
        Self(map)
    }

    pub fn get(&self, class: ClassId) -> Result<u32> {
        self.0
            .get(&class)
            .copied()
            .ok_or_else(|| input_err!("class {class} has no meta-class"))
    }

    pub fn into_inner(self) -> BTreeMap<ClassId, u32> {
        self.0
    }

    pub fn as_map(&self) -> &BTreeMap<ClassId, u32> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSplit {
    /// Wrong class inside the true class's meta-class.
    pub confusion: usize,
    /// Wrong class in a different meta-class.
    pub forgetting: usize,
}

impl ErrorSplit {
    pub fn total(&self) -> usize {
        self.confusion + self.forgetting
    }
}

pub fn decompose_errors(
    truth: &[ClassId],
    predicted: &[ClassId],
    meta: &MetaClassMap,
) -> Result<ErrorSplit> {
    if truth.len() != predicted.len() {
        return Err(shape_err!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        ));
    }
    let mut split = ErrorSplit::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        let (mt, mp) = (meta.get(t)?, meta.get(p)?);
        if t == p {
            continue;
        }
        if mt == mp {
            split.confusion += 1;
        } else {
            split.forgetting += 1;
        }
    }
    Ok(split)
}

/// Accuracy per true class. Classes without test samples are omitted.
pub fn per_class_accuracy(
    truth: &[ClassId],
    predicted: &[ClassId],
) -> Result<BTreeMap<ClassId, f64>> {
    if truth.len() != predicted.len() {
        return Err(shape_err!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        ));
    }
    let mut counts: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        let e = counts.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect())
}

/// Unweighted mean over classes.
pub fn mean_accuracy(per_class: &BTreeMap<ClassId, f64>) -> Result<f64> {
    if per_class.is_empty() {
        return Err(input_err!("mean accuracy over zero classes"));
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Outcome of one round of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round number.
    pub round: usize,
    pub method: String,
    pub seed: u64,
    pub new_classes: Vec<ClassId>,
    pub per_class_accuracy: BTreeMap<ClassId, f64>,
    pub mean_accuracy: f64,
    pub confusion_errors: usize,
    pub forgetting_errors: usize,
    pub test_samples: usize,
    /// (new class, selected similar old class) pairs.
    pub similar_pairs: Vec<(ClassId, ClassId)>,
    pub expert_classes: Vec<ClassId>,
    pub expert_epoch_losses: Vec<f64>,
    pub train_epoch_losses: Vec<f64>,
    pub memory: BTreeMap<ClassId, Vec<usize>>,
    /// Excluded from serialized output so results stay reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}
