//! Budgeted exemplar memory filled by herding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{input_err, state_err, Result};
use crate::matrix::Matrix;

/// Greedy herding order over the rows of `features`.
///
/// The k-th pick is the unpicked row whose inclusion brings the running mean of
/// picks closest (Euclidean) to the mean of all rows. Ties go to the lower index.
pub fn herding_select(features: &Matrix, m: usize) -> Result<Vec<usize>> {
    let n = features.rows();
    if n == 0 {
        return Err(input_err!("herding over an empty feature set"));
    }
    if m == 0 {
        return Err(input_err!("herding needs m >= 1"));
    }
    let target = features.column_mean();
    let mut running = vec![0.0; features.cols()];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(m.min(n));
    for k in 1..=m.min(n) {
        let kf = k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in features.row_iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = target
                .iter()
                .zip(&running)
                .zip(row)
                .map(|((mu, s), x)| {
                    let d = mu - (s + x) / kf;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (pick, _) = best.expect("at least one unpicked row remains");
        taken[pick] = true;
        running
            .iter_mut()
            .zip(features.row(pick))
            .for_each(|(s, x)| *s += x);
        order.push(pick);
    }
    Ok(order)
}

/// Per-class exemplar lists under a total budget.
///
/// Stored indices refer to rows of the class's own training data, in
/// selection order, so truncation always keeps a herding prefix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    budget: usize,
    per_class: BTreeMap<ClassId, Vec<usize>>,
}

impl ExemplarMemory {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            per_class: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn quota(&self, total_classes: usize) -> usize {
        self.budget / total_classes.max(1)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.per_class.keys().copied()
    }

    pub fn get(&self, class: ClassId) -> Option<&[usize]> {
        self.per_class.get(&class).map(Vec::as_slice)
    }

    pub fn per_class(&self) -> &BTreeMap<ClassId, Vec<usize>> {
        &self.per_class
    }

    pub fn len(&self) -> usize {
        self.per_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    pub fn total_stored(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    /// Truncates every list to `floor(K / total_classes)` entries.
    pub fn rebalance(&mut self, total_classes: usize) {
        let q = self.quota(total_classes);
        for list in self.per_class.values_mut() {
            list.truncate(q);
        }
    }

    /// Herds a new class into memory. `samples[i]` is the index recorded for
    /// feature row `i`. Existing classes are first rebalanced to make room.
    pub fn admit_class(
        &mut self,
        class: ClassId,
        features: &Matrix,
        samples: &[usize],
    ) -> Result<()> {
        if features.rows() != samples.len() {
            return Err(input_err!(
                "{} feature rows for {} sample indices",
                features.rows(),
                samples.len()
            ));
        }
        self.check_new(class)?;
        let classes = self.per_class.len() + 1;
        self.rebalance(classes);
        let q = self.quota(classes);
        let picks = if q == 0 {
            Vec::new()
        } else {
            herding_select(features, q)?
        };
        self.per_class
            .insert(class, picks.into_iter().map(|i| samples[i]).collect());
        Ok(())
    }

    /// Stores an explicit selection (used by the random-exemplar ablation).
    /// The list is truncated to the quota after rebalancing.
    pub fn admit_selected(&mut self, class: ClassId, mut samples: Vec<usize>) -> Result<()> {
        self.check_new(class)?;
        let mut dedup = samples.clone();
        dedup.sort_unstable();
        if dedup.windows(2).any(|w| w[0] == w[1]) {
            return Err(input_err!(
                "duplicate sample index in selection for class {class}"
            ));
        }
        let classes = self.per_class.len() + 1;
        self.rebalance(classes);
        samples.truncate(self.quota(classes));
        self.per_class.insert(class, samples);
        Ok(())
    }

    fn check_new(&self, class: ClassId) -> Result<()> {
        if self.per_class.contains_key(&class) {
            return Err(state_err!("class {class} is already in memory"));
        }
        Ok(())
    }
}
