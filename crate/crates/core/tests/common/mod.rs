//! Helpers shared by the integration tests: random instances and
//! finite-difference gradient checks that only ever call forward passes.

#![allow(dead_code)]

use discrim_distill::losses::DistillSpec;
use discrim_distill::{Matrix, MlpClassifier};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random model with dims ≤ 8 and 0–2 hidden layers.
pub fn random_model(rng: &mut ChaCha8Rng) -> MlpClassifier {
    let depth = rng.gen_range(0..=2);
    let mut dims = vec![rng.gen_range(1..=8)];
    for _ in 0..depth {
        dims.push(rng.gen_range(2..=8));
    }
    dims.push(rng.gen_range(2..=8));
    let mut m = MlpClassifier::new(&dims, rng.gen()).unwrap();
    // non-zero biases so that ReLU kinks are not aligned with the origin
    for layer in 0..m.num_layers() {
        let nw = m.weights()[layer].rows() * m.weights()[layer].cols();
        for i in nw..m.param_count(layer) {
            *m.param_mut(layer, i) = rng.gen_range(-0.5..0.5);
        }
    }
    m
}

/// Central-difference derivative of `f` w.r.t. every parameter of `model`.
pub fn fd_param_grads<F>(model: &MlpClassifier, step: f64, mut f: F) -> Vec<Vec<f64>>
where
    F: FnMut(&MlpClassifier) -> f64,
{
    let mut out = Vec::new();
    for layer in 0..model.num_layers() {
        let mut g = Vec::with_capacity(model.param_count(layer));
        for i in 0..model.param_count(layer) {
            let mut plus = model.clone();
            *plus.param_mut(layer, i) += step;
            let mut minus = model.clone();
            *minus.param_mut(layer, i) -= step;
            g.push((f(&plus) - f(&minus)) / (2.0 * step));
        }
        out.push(g);
    }
    out
}

/// Central-difference derivative of `f` w.r.t. every entry of `x`.
pub fn fd_matrix_grad<F>(x: &Matrix, step: f64, mut f: F) -> Matrix
where
    F: FnMut(&Matrix) -> f64,
{
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(r, c, x.get(r, c) + step);
            let mut minus = x.clone();
            minus.set(r, c, x.get(r, c) - step);
            g.set(r, c, (f(&plus) - f(&minus)) / (2.0 * step));
        }
    }
    g
}

/// Relative error with an absolute floor, so tiny gradients are compared on
/// an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Whether any hidden pre-activation of `x` lies within `margin` of a ReLU kink.
pub fn near_kink(model: &MlpClassifier, x: &Matrix, margin: f64) -> bool {
    let mut a = x.clone();
    for layer in 0..model.num_layers() - 1 {
        let mut z = a.matmul(&model.weights()[layer]).unwrap();
        let b = &model.biases()[layer];
        z.map_rows_inplace(|row| row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi));
        if z.data().iter().any(|v| v.abs() < margin) {
            return true;
        }
        z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        a = z;
    }
    false
}

/// Straight-line double sum: −(1/N) Σ_i Σ_j p_ij log p̂_ij, with softmaxes
/// written out term by term.
pub fn distill_oracle(student: &Matrix, spec: &DistillSpec) -> f64 {
    let n = student.rows();
    let t = spec.temperature;
    let mut total = 0.0;
    for i in 0..n {
        let teacher = spec.teacher_logits.row(i);
        let tz: f64 = teacher.iter().map(|z| (z / t).exp()).sum();
        let sz: f64 = spec
            .index_map
            .iter()
            .map(|&k| (student.get(i, k) / t).exp())
            .sum();
        for (j, &k) in spec.index_map.iter().enumerate() {
            let p = (teacher[j] / t).exp() / tz;
            let q = (student.get(i, k) / t).exp() / sz;
            total += p * q.ln();
        }
    }
    -total / n as f64
}

/// Gradient of the double sum, derived by hand: (q − p)/(N·T) at mapped slots.
pub fn distill_grad_oracle(student: &Matrix, spec: &DistillSpec) -> Matrix {
    let n = student.rows();
    let t = spec.temperature;
    let mut g = Matrix::zeros(n, student.cols());
    for i in 0..n {
        let teacher = spec.teacher_logits.row(i);
        let tz: f64 = teacher.iter().map(|z| (z / t).exp()).sum();
        let sz: f64 = spec
            .index_map
            .iter()
            .map(|&k| (student.get(i, k) / t).exp())
            .sum();
        for (j, &k) in spec.index_map.iter().enumerate() {
            let p = (teacher[j] / t).exp() / tz;
            let q = (student.get(i, k) / t).exp() / sz;
            g.set(i, k, (q - p) / (n as f64 * t));
        }
    }
    g
}

/// Exhaustive greedy herding: every step scores all remaining candidates,
/// then picks the smallest score, lowest index first.
pub fn herding_oracle(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    let h = features[0].len();
    let mu: Vec<f64> = (0..h)
        .map(|c| features.iter().map(|f| f[c]).sum::<f64>() / n as f64)
        .collect();
    let mut picked: Vec<usize> = Vec::new();
    while picked.len() < m.min(n) {
        let k = (picked.len() + 1) as f64;
        let scores: Vec<(usize, f64)> = (0..n)
            .filter(|i| !picked.contains(i))
            .map(|i| {
                let mut s = vec![0.0; h];
                for &p in picked.iter().chain(std::iter::once(&i)) {
                    for c in 0..h {
                        s[c] += features[p][c];
                    }
                }
                let d: f64 = (0..h).map(|c| (mu[c] - s[c] / k).powi(2)).sum();
                (i, d)
            })
            .collect();
        let best = scores
            .iter()
            .fold(None::<(usize, f64)>, |acc, &(i, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((i, d)),
            })
            .unwrap();
        picked.push(best.0);
    }
    picked
}

/// Step-by-step greedy assignment: repeatedly take the globally closest
/// still-admissible (new, old) pair.
pub fn similar_oracle(
    new: &[(u32, Vec<f64>)],
    old: &[(u32, Vec<f64>)],
    m: usize,
) -> std::collections::BTreeMap<u32, Vec<u32>> {
    let mut out: std::collections::BTreeMap<u32, Vec<u32>> =
        new.iter().map(|(c, _)| (*c, Vec::new())).collect();
    let mut used: Vec<u32> = Vec::new();
    loop {
        let mut best: Option<(f64, u32, u32)> = None;
        for (nc, nv) in new {
            if out[nc].len() >= m {
                continue;
            }
            for (oc, ov) in old {
                if used.contains(oc) {
                    continue;
                }
                let d: f64 = nv.iter().zip(ov).map(|(a, b)| (a - b).powi(2)).sum();
                let better = match best {
                    None => true,
                    Some((bd, bn, bo)) => {
                        d < bd || (d == bd && (*nc < bn || (*nc == bn && *oc < bo)))
                    }
                };
                if better {
                    best = Some((d, *nc, *oc));
                }
            }
        }
        match best {
            Some((_, n, o)) => {
                out.get_mut(&n).unwrap().push(o);
                used.push(o);
            }
            None => return out,
        }
    }
}

/// One random (model, batch, teachers) gradient-check instance.
pub struct LossInstance {
    pub model: MlpClassifier,
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub old: DistillSpec,
    pub expert: DistillSpec,
    pub weights: discrim_distill::losses::LossWeights,
}

impl LossInstance {
    pub fn loss(&self, model: &MlpClassifier) -> f64 {
        let logits = model.logits(&self.x).unwrap();
        discrim_distill::losses::combined_loss(
            &logits,
            &self.labels,
            Some(&self.old),
            Some(&self.expert),
            self.weights,
        )
        .unwrap()
        .total
    }
}

/// Draws instances until one has no hidden unit within 1e-3 of a ReLU kink.
pub fn random_instance(rng: &mut ChaCha8Rng) -> LossInstance {
    use rand::seq::SliceRandom;
    loop {
        let model = random_model(rng);
        let n = rng.gen_range(1..=8);
        let x = random_matrix(n, model.input_dim(), 2.0, rng);
        if near_kink(&model, &x, 1e-3) {
            continue;
        }
        let out = model.output_dim();
        let labels = (0..n).map(|_| rng.gen_range(0..out)).collect();
        let s = rng.gen_range(1..=out);
        let old = DistillSpec::new(
            random_matrix(n, s, 3.0, rng),
            (0..s).collect(),
            rng.gen_range(1.0..4.0),
        )
        .unwrap();
        let t = rng.gen_range(1..=out);
        let mut slots: Vec<usize> = (0..out).collect();
        slots.shuffle(rng);
        slots.truncate(t);
        let expert = DistillSpec::new(
            random_matrix(n, t, 3.0, rng),
            slots,
            rng.gen_range(1.0..4.0),
        )
        .unwrap();
        let weights = discrim_distill::losses::LossWeights::new(
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.0..2.0),
        )
        .unwrap();
        return LossInstance {
            model,
            x,
            labels,
            old,
            expert,
            weights,
        };
    }
}

/// Largest relative error between backprop and central differences over
/// all parameters of one instance.
pub fn instance_max_rel_err(inst: &LossInstance) -> f64 {
    let (logits, trace) = inst.model.forward(&inst.x).unwrap();
    let c = discrim_distill::losses::combined_loss(
        &logits,
        &inst.labels,
        Some(&inst.old),
        Some(&inst.expert),
        inst.weights,
    )
    .unwrap();
    let grads = inst.model.backward(&trace, &c.grad).unwrap();
    let numeric = fd_param_grads(&inst.model, 1e-5, |m| inst.loss(m));
    let mut worst = 0.0f64;
    for (layer, num) in numeric.iter().enumerate() {
        let nw = grads.weights[layer].data().len();
        for (i, &g) in num.iter().enumerate() {
            let a = if i < nw {
                grads.weights[layer].data()[i]
            } else {
                grads.biases[layer][i - nw]
            };
            worst = worst.max(rel_err(a, g));
        }
    }
    worst
}

/// A 3-round task with 2 classes per round and a short schedule.
pub fn small_task(
    seed: u64,
) -> (
    discrim_distill::data::Dataset,
    Vec<discrim_distill::engine::RoundSpec>,
) {
    use discrim_distill::data::{generate, schedule_rounds, SchedulePolicy, SyntheticSpec};
    let spec = SyntheticSpec {
        meta_classes: 2,
        classes_per_meta: 2,
        background_classes: 2,
        dim: 5,
        intra_spread: 1.0,
        inter_spread: 4.0,
        within_std: 0.3,
        train_per_class: 30,
        test_per_class: 15,
        seed,
    };
    let ds = generate(&spec).unwrap();
    let meta = ds.meta_map().unwrap();
    let rounds = schedule_rounds(&ds.train, &meta, 2, SchedulePolicy::SplitSimilar).unwrap();
    (ds, rounds)
}

pub fn small_config(
    method: discrim_distill::engine::Method,
) -> discrim_distill::engine::MethodConfig {
    use discrim_distill::engine::MethodConfig;
    use discrim_distill::expert::ExpertPhases;
    let mut cfg = MethodConfig::new(method, 20);
    cfg.schedule.epochs = 8;
    cfg.schedule.batch_size = 16;
    cfg.expert = ExpertPhases {
        full: 5,
        balanced: 3,
    };
    cfg
}
