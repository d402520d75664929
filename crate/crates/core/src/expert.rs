//! Temporary expert classifier over the new classes and their selected
//! similar old classes.
//!
//! Training runs in two phases: plain cross-entropy over everything that is
//! available (many new-class samples, few stored old-class exemplars), then
//! fine-tuning on per-epoch class-balanced subsets obtained by down-sampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{input_err, state_err, Result};
use crate::losses::{cross_entropy, DistillSpec};
use crate::matrix::Matrix;
use crate::nn::MlpClassifier;
use crate::rng;
use crate::train::{self, TrainSchedule, TrainSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertPhases {
    /// Epochs over all available data.
    pub full: usize,
    /// Epochs on class-balanced down-sampled data.
    pub balanced: usize,
}

impl Default for ExpertPhases {
    fn default() -> Self {
        Self {
            full: 80,
            balanced: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertInit {
    /// Copy the old classifier's feature extractor, fresh head.
    #[default]
    WarmStart,
    /// Fresh weights everywhere.
    Scratch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle {
    pub model: MlpClassifier,
    /// Global class id of each expert output: new classes, then old ones.
    pub class_list: Vec<ClassId>,
    pub phase_epochs: ExpertPhases,
    pub epoch_losses: Vec<f64>,
}

/// Inputs for one expert.
pub struct ExpertData<'a> {
    pub new_classes: &'a BTreeMap<ClassId, Matrix>,
    /// Stored exemplars of the selected old classes, in selection order.
    pub similar_old: &'a [(ClassId, Matrix)],
}

/// Stacks per-class blocks into a train set whose targets index `classes`.
pub fn stack_classes<'a, I>(blocks: I, dim: usize) -> Result<(TrainSet, Vec<ClassId>)>
where
    I: IntoIterator<Item = (ClassId, &'a Matrix)>,
{
    let mut x = Matrix::zeros(0, dim);
    let mut targets = Vec::new();
    let mut classes = Vec::new();
    for (class, block) in blocks {
        if classes.contains(&class) {
            return Err(input_err!("class {class} supplied twice"));
        }
        targets.extend(std::iter::repeat_n(classes.len(), block.rows()));
        classes.push(class);
        x = x.vstack(block)?;
    }
    Ok((TrainSet::new(x, targets)?, classes))
}

/// Two-phase cross-entropy fit. Returns the mean loss of each epoch.
pub fn fit_two_phase(
    model: &mut MlpClassifier,
    set: &TrainSet,
    schedule: &TrainSchedule,
    phases: ExpertPhases,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = rng::seeded(rng::derive_seed(seed, &[rng::tag("expert-batches")]));
    let total = phases.full + phases.balanced;
    let mut epoch_losses = Vec::with_capacity(total);
    for epoch in 0..total {
        let order = if epoch < phases.full {
            train::shuffled(set.len(), &mut rng)
        } else {
            train::balanced_epoch_indices(&set.targets, &mut rng)
        };
        let lr = schedule.lr_at(epoch, total);
        let losses = train::run_epoch(model, set, &order, schedule.batch_size, lr, |b| {
            cross_entropy(b.logits, b.targets)
        })?;
        epoch_losses.push(train::mean(&losses));
    }
    Ok(epoch_losses)
}

pub fn train_expert(
    data: ExpertData<'_>,
    base: &MlpClassifier,
    init: ExpertInit,
    schedule: &TrainSchedule,
    phases: ExpertPhases,
    seed: u64,
) -> Result<ExpertBundle> {
    if data.new_classes.is_empty() || data.new_classes.values().all(|m| m.rows() == 0) {
        return Err(input_err!("expert needs data for at least one new class"));
    }
    let blocks = data
        .new_classes
        .iter()
        .map(|(c, m)| (*c, m))
        .chain(data.similar_old.iter().map(|(c, m)| (*c, m)));
    let (set, class_list) = stack_classes(blocks, base.input_dim())?;
    let head_seed = rng::derive_seed(seed, &[rng::tag("expert-head")]);
    let mut model = match init {
        ExpertInit::WarmStart => base.with_fresh_head(class_list.len(), head_seed)?,
        ExpertInit::Scratch => {
            let mut dims = base.layer_dims().to_vec();
            *dims.last_mut().unwrap() = class_list.len();
            MlpClassifier::new(&dims, head_seed)?
        }
    };
    let epoch_losses = fit_two_phase(&mut model, &set, schedule, phases, seed)?;
    Ok(ExpertBundle {
        model,
        class_list,
        phase_epochs: phases,
        epoch_losses,
    })
}

/// Student output position of every expert output.
pub fn expert_index_map(bundle: &ExpertBundle, student_order: &[ClassId]) -> Result<Vec<usize>> {
    bundle
        .class_list
        .iter()
        .map(|c| {
            student_order
                .iter()
                .position(|s| s == c)
                .ok_or_else(|| state_err!("expert class {c} is not a student output"))
        })
        .collect()
}

/// Distillation target produced by the expert on `batch`.
pub fn expert_teacher_spec(
    bundle: &ExpertBundle,
    student_order: &[ClassId],
    temperature: f64,
    batch: &Matrix,
) -> Result<DistillSpec> {
    let index_map = expert_index_map(bundle, student_order)?;
    DistillSpec::new(bundle.model.logits(batch)?, index_map, temperature)
}
