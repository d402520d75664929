//! The class-incremental loop.
//!
//! Each round with an existing classifier runs up to three steps:
//! 1. pick, for every new class, its closest old class(es) by class centre
//!    in the old feature space;
//! 2. train a temporary expert on the new classes plus those old classes;
//! 3. train the new classifier (old classifier with a grown head) on new data
//!    and stored exemplars under cross-entropy plus distillation from the old
//!    classifier and, for the proposed method, from the expert.
//!
//! Afterwards the new classes are herded into exemplar memory.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset, SampleSet};
use crate::error::{input_err, state_err, Error, Result};
use crate::expert::{self, ExpertBundle, ExpertData, ExpertInit, ExpertPhases};
use crate::losses::{combined_loss, cross_entropy, DistillSpec, LossWeights};
use crate::matrix::Matrix;
use crate::memory::ExemplarMemory;
use crate::metrics::{self, MetaClassMap, RoundReport};
use crate::nn::MlpClassifier;
use crate::rng;
use crate::similarity::{class_centres, select_similar};
use crate::train::{self, TrainSchedule, TrainSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-entropy on new data only; no memory, no teachers.
    Finetune,
    /// Exemplar replay plus distillation from the old classifier.
    DistillOldOnly,
    /// As above, plus distillation from the per-round expert.
    DistillOldPlusExpert,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::DistillOldOnly => "distill_old_only",
            Method::DistillOldPlusExpert => "distill_old_plus_expert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "finetune" => Some(Method::Finetune),
            "distill_old_only" => Some(Method::DistillOldOnly),
            "distill_old_plus_expert" => Some(Method::DistillOldPlusExpert),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceRule {
    #[default]
    Softmax,
    NearestMeanExemplars,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarPolicy {
    #[default]
    Herding,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default = "one")]
    pub m_similar: usize,
    #[serde(default = "unit")]
    pub lambda1: f64,
    #[serde(default = "unit")]
    pub lambda2: f64,
    #[serde(default = "two")]
    pub t_n: f64,
    #[serde(default = "two")]
    pub t_o: f64,
    #[serde(default)]
    pub inference: InferenceRule,
    pub memory_k: usize,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub expert: ExpertPhases,
    #[serde(default)]
    pub expert_init: ExpertInit,
    /// L2-normalise features before herding, class centres and NME.
    #[serde(default)]
    pub normalize_features: bool,
    #[serde(default)]
    pub exemplar_policy: ExemplarPolicy,
    #[serde(default = "head_scale")]
    pub head_init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn head_scale() -> f64 {
    0.05
}

impl MethodConfig {
    pub fn new(method: Method, memory_k: usize) -> Self {
        Self {
            method,
            m_similar: 1,
            lambda1: 1.0,
            lambda2: 1.0,
            t_n: 2.0,
            t_o: 2.0,
            inference: InferenceRule::Softmax,
            memory_k,
            schedule: TrainSchedule::default(),
            expert: ExpertPhases::default(),
            expert_init: ExpertInit::WarmStart,
            normalize_features: false,
            exemplar_policy: ExemplarPolicy::Herding,
            head_init_scale: 0.05,
            seed: 0,
        }
    }

    /// Checks value ranges; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, msg: String| Error::Config {
            path: path.to_string(),
            msg,
        };
        for (name, t) in [("t_n", self.t_n), ("t_o", self.t_o)] {
            if !(t >= 1.0 && t.is_finite()) {
                return Err(field(name, format!("temperature must be >= 1, got {t}")));
            }
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(field(name, format!("must be finite and >= 0, got {l}")));
            }
        }
        if !(self.head_init_scale >= 0.0 && self.head_init_scale.is_finite()) {
            return Err(field("head_init_scale", "must be finite and >= 0".into()));
        }
        if self.method != Method::Finetune && self.memory_k == 0 {
            return Err(field(
                "memory_k",
                "replay methods need a positive budget".into(),
            ));
        }
        self.schedule
            .validate()
            .map_err(|e| field("schedule", e.to_string()))?;
        Ok(())
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    /// Seed of one stage (`init`, `expert`, `head`, `student-batches`, ...) of a round.
    pub fn stage_seed(&self, round: usize, stage: &str) -> u64 {
        rng::derive_seed(self.seed, &[round as u64, rng::tag(stage)])
    }
}

/// New classes of one round with their training data.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSpec {
    pub index: usize,
    pub classes: Vec<ClassId>,
    pub data: BTreeMap<ClassId, Matrix>,
}

impl RoundSpec {
    pub fn new(
        index: usize,
        classes: Vec<ClassId>,
        data: BTreeMap<ClassId, Matrix>,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(input_err!("round {index} introduces no classes"));
        }
        if classes.len() != data.len() || classes.iter().any(|c| !data.contains_key(c)) {
            return Err(input_err!("round {index}: class list and data disagree"));
        }
        if let Some((c, _)) = data.iter().find(|(_, m)| m.rows() == 0) {
            return Err(input_err!(
                "round {index}: class {c} has no training samples"
            ));
        }
        Ok(Self {
            index,
            classes,
            data,
        })
    }
}

/// Everything carried from one round to the next.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub hidden: Vec<usize>,
    pub model: Option<MlpClassifier>,
    /// Global class id of each model output.
    pub class_order: Vec<ClassId>,
    pub memory: ExemplarMemory,
    /// Stored exemplar rows per class, aligned with `memory`'s lists.
    pub exemplars: BTreeMap<ClassId, Matrix>,
}

impl LearnerState {
    pub fn new(hidden: &[usize], memory_k: usize) -> Self {
        Self {
            hidden: hidden.to_vec(),
            model: None,
            class_order: Vec::new(),
            memory: ExemplarMemory::new(memory_k),
            exemplars: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> Result<&MlpClassifier> {
        self.model
            .as_ref()
            .ok_or_else(|| state_err!("no classifier has been trained yet"))
    }
}

/// Diagnostics of one `run_round` call.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub similar: BTreeMap<ClassId, Vec<ClassId>>,
    pub expert: Option<ExpertBundle>,
    /// Frozen old classifier used as a teacher, as it was after training.
    pub old_teacher: Option<MlpClassifier>,
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

fn l2_normalize_rows(m: &mut Matrix) {
    m.map_rows_inplace(|row| {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    });
}

fn feature_space(model: &MlpClassifier, x: &Matrix, normalize: bool) -> Result<Matrix> {
    let mut f = model.features(x)?;
    if normalize {
        l2_normalize_rows(&mut f);
    }
    Ok(f)
}

/// Similar-class selection in the old classifier's feature space.
pub fn select_similar_classes(
    old: &MlpClassifier,
    new_data: &BTreeMap<ClassId, Matrix>,
    exemplars: &BTreeMap<ClassId, Matrix>,
    m_similar: usize,
    normalize: bool,
) -> Result<BTreeMap<ClassId, Vec<ClassId>>> {
    let embed = |blocks: &BTreeMap<ClassId, Matrix>| -> Result<BTreeMap<ClassId, Matrix>> {
        blocks
            .iter()
            .filter(|(_, m)| m.rows() > 0)
            .map(|(c, m)| Ok((*c, feature_space(old, m, normalize)?)))
            .collect()
    };
    let new_centres = class_centres(&embed(new_data)?)?;
    let old_centres = class_centres(&embed(exemplars)?)?;
    Ok(select_similar(&new_centres, &old_centres, m_similar))
}

fn check_round(state: &LearnerState, round: &RoundSpec, dim: usize) -> Result<()> {
    if let Some(c) = round.classes.iter().find(|c| state.class_order.contains(c)) {
        return Err(input_err!(
            "class {c} was already learned in an earlier round"
        ));
    }
    let mut sorted = round.classes.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(input_err!("round {} lists a class twice", round.index));
    }
    if let Some((c, m)) = round.data.iter().find(|(_, m)| m.cols() != dim) {
        return Err(input_err!(
            "class {c} has {}-dimensional samples, expected {dim}",
            m.cols()
        ));
    }
    Ok(())
}

/// Teachers for step 3.
pub struct Teachers<'a> {
    pub old: Option<&'a MlpClassifier>,
    pub expert: Option<&'a ExpertBundle>,
}

/// Step 3: minimise `L_c + λ1·L_old + λ2·L_expert` over `set`.
///
/// Teacher logits are recomputed for every minibatch. Returns per-batch and
/// per-epoch mean losses.
pub fn train_student(
    student: &mut MlpClassifier,
    set: &TrainSet,
    class_order: &[ClassId],
    teachers: Teachers<'_>,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = rng::seeded(seed);
    let weights = cfg.loss_weights();
    let expert_map = teachers
        .expert
        .map(|e| expert::expert_index_map(e, class_order))
        .transpose()?;
    let old_map: Option<Vec<usize>> = teachers.old.map(|m| (0..m.output_dim()).collect());
    let epochs = cfg.schedule.epochs;
    let mut batch_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = train::shuffled(set.len(), &mut rng);
        let lr = cfg.schedule.lr_at(epoch, epochs);
        let losses = train::run_epoch(student, set, &order, cfg.schedule.batch_size, lr, |b| {
            let old_spec = match (teachers.old, &old_map) {
                (Some(t), Some(map)) => {
                    Some(DistillSpec::new(t.logits(b.x)?, map.clone(), cfg.t_o)?)
                }
                _ => None,
            };
            let expert_spec = match (teachers.expert, &expert_map) {
                (Some(e), Some(map)) => Some(DistillSpec::new(
                    e.model.logits(b.x)?,
                    map.clone(),
                    cfg.t_n,
                )?),
                _ => None,
            };
            if old_spec.is_none() && expert_spec.is_none() {
                return cross_entropy(b.logits, b.targets);
            }
            let c = combined_loss(
                b.logits,
                b.targets,
                old_spec.as_ref(),
                expert_spec.as_ref(),
                weights,
            )?;
            if !c.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}: loss diverged (ce {}, old {}, expert {})",
                    c.cross_entropy, c.old_distill, c.expert_distill
                )));
            }
            Ok((c.total, c.grad))
        })
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, lr {lr}: {msg}")),
            other => other,
        })?;
        epoch_losses.push(train::mean(&losses));
        batch_losses.extend(losses);
    }
    Ok((batch_losses, epoch_losses))
}

/// Builds step-3 training data: new classes first, then stored exemplars.
fn assemble_training_set(
    round: &RoundSpec,
    exemplars: Option<&BTreeMap<ClassId, Matrix>>,
    class_order: &[ClassId],
    dim: usize,
) -> Result<TrainSet> {
    let position = |c: ClassId| {
        class_order
            .iter()
            .position(|&o| o == c)
            .ok_or_else(|| state_err!("class {c} has no output"))
    };
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let blocks = round
        .data
        .iter()
        .chain(exemplars.into_iter().flat_map(|e| e.iter()));
    for (&c, m) in blocks {
        let p = position(c)?;
        rows.extend_from_slice(m.data());
        targets.extend(std::iter::repeat_n(p, m.rows()));
    }
    TrainSet::new(Matrix::from_vec(targets.len(), dim, rows)?, targets)
}

fn update_memory(state: &mut LearnerState, round: &RoundSpec, cfg: &MethodConfig) -> Result<()> {
    let model = state.model()?.clone();
    for (&c, data) in &round.data {
        match cfg.exemplar_policy {
            ExemplarPolicy::Herding => {
                let feats = feature_space(&model, data, cfg.normalize_features)?;
                let idx: Vec<usize> = (0..data.rows()).collect();
                state.memory.admit_class(c, &feats, &idx)?;
            }
            ExemplarPolicy::Random => {
                let mut r = rng::seeded(rng::derive_seed(
                    cfg.stage_seed(round.index, "random-exemplars"),
                    &[u64::from(c)],
                ));
                let mut idx: Vec<usize> = (0..data.rows()).collect();
                idx.shuffle(&mut r);
                state.memory.admit_selected(c, idx)?;
            }
        }
        let picks = state.memory.get(c).expect("just admitted").to_vec();
        state.exemplars.insert(c, data.select_rows(&picks));
    }
    state.memory.rebalance(state.memory.len());
    for (c, rows) in state.exemplars.iter_mut() {
        let keep = state.memory.get(*c).map_or(0, <[usize]>::len);
        if rows.rows() > keep {
            *rows = rows.select_rows(&(0..keep).collect::<Vec<_>>());
        }
    }
    Ok(())
}

/// Learns one round of new classes, updating `state` in place.
pub fn run_round(
    state: &mut LearnerState,
    round: &RoundSpec,
    cfg: &MethodConfig,
) -> Result<RoundOutcome> {
    let dim = round
        .data
        .values()
        .next()
        .map(Matrix::cols)
        .ok_or_else(|| input_err!("round {} carries no data", round.index))?;
    check_round(state, round, dim)?;
    let r = round.index;
    let n_new = round.classes.len();
    let replay = cfg.method != Method::Finetune;

    let mut outcome = RoundOutcome {
        similar: BTreeMap::new(),
        expert: None,
        old_teacher: None,
        batch_losses: Vec::new(),
        epoch_losses: Vec::new(),
    };

    let Some(old) = state.model.clone() else {
        // First round: plain supervised training, identical for all methods.
        let mut dims = vec![dim];
        dims.extend_from_slice(&state.hidden);
        dims.push(n_new);
        let mut model = MlpClassifier::new(&dims, cfg.stage_seed(r, "init"))?;
        let order: Vec<ClassId> = round.data.keys().copied().collect();
        let set = assemble_training_set(round, None, &order, dim)?;
        let (batch, epoch) = train_student(
            &mut model,
            &set,
            &order,
            Teachers {
                old: None,
                expert: None,
            },
            cfg,
            cfg.stage_seed(r, "student-batches"),
        )?;
        state.model = Some(model);
        state.class_order = order;
        outcome.batch_losses = batch;
        outcome.epoch_losses = epoch;
        if replay {
            update_memory(state, round, cfg)?;
        }
        return Ok(outcome);
    };
    if old.input_dim() != dim {
        return Err(input_err!(
            "round {r} has {dim}-dimensional samples, model expects {}",
            old.input_dim()
        ));
    }

    // Steps 1 and 2.
    let expert = if cfg.method == Method::DistillOldPlusExpert {
        let similar = select_similar_classes(
            &old,
            &round.data,
            &state.exemplars,
            cfg.m_similar,
            cfg.normalize_features,
        )?;
        let mut chosen: Vec<(ClassId, Matrix)> = Vec::new();
        for list in similar.values() {
            for &o in list {
                chosen.push((o, state.exemplars[&o].clone()));
            }
        }
        let bundle = expert::train_expert(
            ExpertData {
                new_classes: &round.data,
                similar_old: &chosen,
            },
            &old,
            cfg.expert_init,
            &cfg.schedule,
            cfg.expert,
            cfg.stage_seed(r, "expert"),
        )?;
        outcome.similar = similar;
        Some(bundle)
    } else {
        None
    };

    // Step 3.
    let mut student = old.expand_head(n_new, cfg.head_init_scale, cfg.stage_seed(r, "head"))?;
    let mut class_order = state.class_order.clone();
    class_order.extend(round.data.keys().copied());
    let set = assemble_training_set(round, replay.then_some(&state.exemplars), &class_order, dim)?;
    let (batch, epoch) = train_student(
        &mut student,
        &set,
        &class_order,
        Teachers {
            old: replay.then_some(&old),
            expert: expert.as_ref(),
        },
        cfg,
        cfg.stage_seed(r, "student-batches"),
    )?;
    if !student.is_finite() {
        return Err(Error::Numeric(format!(
            "round {r}: parameters became non-finite"
        )));
    }

    state.model = Some(student);
    state.class_order = class_order;
    outcome.batch_losses = batch;
    outcome.epoch_losses = epoch;
    outcome.old_teacher = Some(old);
    outcome.expert = expert;
    if replay {
        update_memory(state, round, cfg)?;
    }
    Ok(outcome)
}

/// Class prediction under the chosen rule. Ties resolve to the lowest class id.
pub fn predict(
    state: &LearnerState,
    batch: &Matrix,
    rule: InferenceRule,
    normalize_features: bool,
) -> Result<Vec<ClassId>> {
    let model = state.model()?;
    match rule {
        InferenceRule::Softmax => {
            let logits = model.logits(batch)?;
            Ok(logits
                .row_iter()
                .map(|row| {
                    let mut best = (f64::NEG_INFINITY, ClassId::MAX);
                    for (&v, &c) in row.iter().zip(&state.class_order) {
                        if v > best.0 || (v == best.0 && c < best.1) {
                            best = (v, c);
                        }
                    }
                    best.1
                })
                .collect())
        }
        InferenceRule::NearestMeanExemplars => {
            let means: Vec<(ClassId, Vec<f64>)> = state
                .exemplars
                .iter()
                .filter(|(_, m)| m.rows() > 0)
                .map(|(c, m)| {
                    Ok((
                        *c,
                        feature_space(model, m, normalize_features)?.column_mean(),
                    ))
                })
                .collect::<Result<_>>()?;
            if means.is_empty() {
                return Err(state_err!(
                    "nearest-mean-of-exemplars inference with an empty memory"
                ));
            }
            let feats = feature_space(model, batch, normalize_features)?;
            Ok(feats
                .row_iter()
                .map(|f| {
                    let mut best = (f64::INFINITY, ClassId::MAX);
                    // means are in ascending class order, so strict < keeps the lowest id
                    for (c, mu) in &means {
                        let d: f64 = f.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d < best.0 {
                            best = (d, *c);
                        }
                    }
                    best.1
                })
                .collect())
        }
    }
}

/// Test-set evaluation restricted to classes learned so far.
pub struct Evaluation {
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean_accuracy: f64,
    pub errors: metrics::ErrorSplit,
    pub samples: usize,
}

pub fn evaluate(
    state: &LearnerState,
    test: &SampleSet,
    meta: &MetaClassMap,
    cfg: &MethodConfig,
) -> Result<Evaluation> {
    let learned: std::collections::BTreeSet<ClassId> = state.class_order.iter().copied().collect();
    let picked: Vec<_> = test
        .samples()
        .iter()
        .filter(|s| learned.contains(&s.class_id))
        .collect();
    if picked.is_empty() {
        return Err(input_err!("no test samples for the learned classes"));
    }
    let x = Matrix::from_rows(
        &picked
            .iter()
            .map(|s| s.features.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let truth: Vec<ClassId> = picked.iter().map(|s| s.class_id).collect();
    let pred = predict(state, &x, cfg.inference, cfg.normalize_features)?;
    let per_class = metrics::per_class_accuracy(&truth, &pred)?;
    Ok(Evaluation {
        mean_accuracy: metrics::mean_accuracy(&per_class)?,
        per_class,
        errors: metrics::decompose_errors(&truth, &pred, meta)?,
        samples: truth.len(),
    })
}

/// Runs all rounds in order and evaluates after each one.
pub fn run_experiment(
    dataset: &Dataset,
    rounds: &[RoundSpec],
    hidden: &[usize],
    cfg: &MethodConfig,
) -> Result<Vec<RoundReport>> {
    run_experiment_with(dataset, rounds, hidden, cfg, |_, _| Ok(()))
}

/// [`run_experiment`] with a callback invoked after each round's training.
pub fn run_experiment_with<F>(
    dataset: &Dataset,
    rounds: &[RoundSpec],
    hidden: &[usize],
    cfg: &MethodConfig,
    mut after_round: F,
) -> Result<Vec<RoundReport>>
where
    F: FnMut(&RoundSpec, &LearnerState) -> Result<()>,
{
    if rounds.is_empty() {
        return Err(input_err!("an experiment needs at least one round"));
    }
    cfg.validate()?;
    let meta = dataset.meta_map()?;
    let mut state = LearnerState::new(hidden, cfg.memory_k);
    let mut reports = Vec::with_capacity(rounds.len());
    for round in rounds {
        let started = Instant::now();
        let outcome = run_round(&mut state, round, cfg)?;
        after_round(round, &state)?;
        let eval = evaluate(&state, &dataset.test, &meta, cfg)?;
        log::info!(
            "{} seed {} round {}: acc {:.4}, confusion {}, forgetting {}",
            cfg.method.as_str(),
            cfg.seed,
            round.index + 1,
            eval.mean_accuracy,
            eval.errors.confusion,
            eval.errors.forgetting
        );
        reports.push(RoundReport {
            round: round.index + 1,
            method: cfg.method.as_str().to_string(),
            seed: cfg.seed,
            new_classes: round.classes.clone(),
            per_class_accuracy: eval.per_class,
            mean_accuracy: eval.mean_accuracy,
            confusion_errors: eval.errors.confusion,
            forgetting_errors: eval.errors.forgetting,
            test_samples: eval.samples,
            similar_pairs: outcome
                .similar
                .iter()
                .flat_map(|(n, olds)| olds.iter().map(move |o| (*n, *o)))
                .collect(),
            expert_classes: outcome
                .expert
                .as_ref()
                .map(|e| e.class_list.clone())
                .unwrap_or_default(),
            expert_epoch_losses: outcome
                .expert
                .as_ref()
                .map(|e| e.epoch_losses.clone())
                .unwrap_or_default(),
            train_epoch_losses: outcome.epoch_losses,
            memory: state.memory.per_class().clone(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(reports)
}
