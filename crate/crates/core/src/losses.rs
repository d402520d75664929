//! Training objective: cross-entropy on labels plus two temperature-softened
//! distillation terms (old classifier, expert classifier), with gradients
//! w.r.t. the student logits.
//!
//! The distillation terms are used exactly as
//! `-(1/N) Σ_i Σ_j p_ij · log p̂_ij`; there is no `T²` rescaling, so the
//! temperature reaches the gradient only through the softmax.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result};
use crate::matrix::Matrix;

const LOG_FLOOR: f64 = 1e-300;

/// `softmax(logits / T)` with max-subtraction.
pub fn temperature_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Teacher side of one distillation term.
///
/// Teacher output `j` is compared against student output `index_map[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSpec {
    pub teacher_logits: Matrix,
    pub index_map: Vec<usize>,
    pub temperature: f64,
}

impl DistillSpec {
    pub fn new(teacher_logits: Matrix, index_map: Vec<usize>, temperature: f64) -> Result<Self> {
        if !(temperature >= 1.0 && temperature.is_finite()) {
            return Err(input_err!("temperature must be >= 1, got {temperature}"));
        }
        if index_map.len() != teacher_logits.cols() {
            return Err(shape_err!(
                "index_map has {} entries for {} teacher outputs",
                index_map.len(),
                teacher_logits.cols()
            ));
        }
        let mut seen = index_map.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(input_err!(
                "index_map entries must be distinct: {index_map:?}"
            ));
        }
        Ok(Self {
            teacher_logits,
            index_map,
            temperature,
        })
    }

    fn validate_against(&self, student: &Matrix) -> Result<()> {
        if let Some(&bad) = self.index_map.iter().find(|&&i| i >= student.cols()) {
            return Err(input_err!(
                "index_map position {bad} is outside the student's {} outputs",
                student.cols()
            ));
        }
        if self.teacher_logits.rows() != student.rows() {
            return Err(shape_err!(
                "teacher batch of {} rows vs student batch of {}",
                self.teacher_logits.rows(),
                student.rows()
            ));
        }
        Ok(())
    }
}

/// Weights of the two distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Old-classifier distillation.
    pub lambda1: f64,
    /// Expert distillation.
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(input_err!(
                    "{name} must be finite and non-negative, got {v}"
                ));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

/// Mean cross-entropy at temperature 1, and its gradient `(softmax − onehot)/n`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(shape_err!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        ));
    }
    if logits.rows() == 0 {
        return Err(input_err!("cross-entropy over an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(input_err!("label {bad} outside {} outputs", logits.cols()));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let p = temperature_softmax(logits.row(i), 1.0);
        loss -= p[label].max(LOG_FLOOR).ln();
        let g = grad.row_mut(i);
        for (gj, pj) in g.iter_mut().zip(&p) {
            *gj = pj / n;
        }
        g[label] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Distillation of `spec`'s teacher into the mapped student outputs.
pub fn distillation_loss(student: &Matrix, spec: &DistillSpec) -> Result<(f64, Matrix)> {
    spec.validate_against(student)?;
    let n = student.rows();
    if n == 0 {
        return Err(input_err!("distillation over an empty batch"));
    }
    let t = spec.temperature;
    let scale = 1.0 / (n as f64 * t);
    let mut grad = Matrix::zeros(n, student.cols());
    let mut loss = 0.0;
    let mut sub = vec![0.0; spec.index_map.len()];
    for i in 0..n {
        let srow = student.row(i);
        sub.iter_mut()
            .zip(&spec.index_map)
            .for_each(|(s, &k)| *s = srow[k]);
        let p = temperature_softmax(spec.teacher_logits.row(i), t);
        let q = temperature_softmax(&sub, t);
        let g = grad.row_mut(i);
        for ((&pj, &qj), &k) in p.iter().zip(&q).zip(&spec.index_map) {
            loss -= pj * qj.max(LOG_FLOOR).ln();
            g[k] = (qj - pj) * scale;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Value and student-logit gradient of `L_c + λ1·L_old + λ2·L_expert`.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub old_distill: f64,
    pub expert_distill: f64,
    pub grad: Matrix,
}

pub fn combined_loss(
    student: &Matrix,
    labels: &[usize],
    old_spec: Option<&DistillSpec>,
    expert_spec: Option<&DistillSpec>,
    weights: LossWeights,
) -> Result<CombinedLoss> {
    let (ce, mut grad) = cross_entropy(student, labels)?;
    let mut total = ce;
    let mut terms = [0.0; 2];
    for (slot, spec, lambda) in [
        (0, old_spec, weights.lambda1),
        (1, expert_spec, weights.lambda2),
    ] {
        let Some(spec) = spec else { continue };
        let (l, g) = distillation_loss(student, spec)?;
        terms[slot] = l;
        total += lambda * l;
        grad.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += lambda * b);
    }
    Ok(CombinedLoss {
        total,
        cross_entropy: ce,
        old_distill: terms[0],
        expert_distill: terms[1],
        grad,
    })
}
