//! Dense ReLU classifier with analytic gradients and a growable output head.
//!
//! Layer `i` maps `a ↦ a·W_i + b_i` with `W_i` of shape `dims[i] × dims[i+1]`.
//! Every layer except the last is followed by a ReLU; the last produces logits.

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, state_err, Error, Result};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layer_dims: Vec<usize>,
    /// `activations[0]` is the input batch; `activations[i]` (i ≥ 1) is the
    /// ReLU output of layer `i-1`.
    activations: Vec<Matrix>,
    /// Pre-activation of every hidden layer.
    pre_activations: Vec<Matrix>,
    logits: Matrix,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    /// Penultimate representation (last hidden activation, or the input when
    /// the model has no hidden layer).
    pub fn features(&self) -> &Matrix {
        self.activations
            .last()
            .expect("trace always holds the input")
    }
}

/// Parameter-shaped gradient (or update) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpClassifier) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|v| *v *= k);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_err!("gradient buffers differ in shape"));
        }
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            w.data_mut()
                .iter_mut()
                .zip(o.data())
                .for_each(|(a, b)| *a += b);
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            b.iter_mut().zip(o).for_each(|(a, c)| *a += c);
        }
        Ok(())
    }

    fn same_shape(&self, other: &Gradients) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .biases
                .iter()
                .zip(&other.biases)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.data().iter().all(|&v| v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

fn uniform_matrix(rows: usize, cols: usize, scale: f64, rng: &mut rng::Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            if scale > 0.0 {
                rng.gen_range(-scale..scale)
            } else {
                0.0
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(input_err!(
            "a classifier needs at least input and output dims"
        ));
    }
    if layer_dims.contains(&0) {
        return Err(input_err!(
            "layer dims must be positive, got {layer_dims:?}"
        ));
    }
    Ok(())
}

impl MlpClassifier {
    /// Seeded initialisation: weights uniform in ±1/√fan_in, biases zero.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = rng::seeded(seed);
        let weights = layer_dims
            .windows(2)
            .map(|w| uniform_matrix(w[0], w[1], 1.0 / (w[0] as f64).sqrt(), &mut rng))
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights: layer_dims
                .windows(2)
                .map(|w| Matrix::zeros(w[0], w[1]))
                .collect(),
            biases: layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        })
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(shape_err!(
                "{} weight matrices vs {} bias vectors",
                weights.len(),
                biases.len()
            ));
        }
        let mut layer_dims = vec![weights[0].rows()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *layer_dims.last().unwrap() || b.len() != w.cols() {
                return Err(shape_err!("layer {i} does not chain with its neighbours"));
            }
            layer_dims.push(w.cols());
        }
        check_dims(&layer_dims)?;
        Ok(Self {
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Mutable access to a single parameter, addressed by layer and flat index.
    /// Weight entries come first (row-major), then the bias entries.
    pub fn param_mut(&mut self, layer: usize, index: usize) -> &mut f64 {
        let w = &mut self.weights[layer];
        let nw = w.rows() * w.cols();
        if index < nw {
            &mut w.data_mut()[index]
        } else {
            &mut self.biases[layer][index - nw]
        }
    }

    pub fn param_count(&self, layer: usize) -> usize {
        let w = &self.weights[layer];
        w.rows() * w.cols() + self.biases[layer].len()
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(shape_err!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, input: &Matrix) -> Result<Matrix> {
        let mut z = input.matmul(&self.weights[layer])?;
        let b = &self.biases[layer];
        z.map_rows_inplace(|row| row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi));
        Ok(z)
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        self.check_batch(batch)?;
        let last = self.num_layers() - 1;
        let mut activations = vec![batch.clone()];
        let mut pre_activations = Vec::with_capacity(last);
        for layer in 0..last {
            let z = self.affine(layer, activations.last().unwrap())?;
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            pre_activations.push(z);
            activations.push(a);
        }
        let logits = self.affine(last, activations.last().unwrap())?;
        let trace = ForwardTrace {
            layer_dims: self.layer_dims.clone(),
            activations,
            pre_activations,
            logits: logits.clone(),
        };
        Ok((logits, trace))
    }

    /// Logits only; skips retaining intermediate values.
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        let feats = self.features(batch)?;
        self.affine(self.num_layers() - 1, &feats)
    }

    /// Penultimate (last hidden layer) activations.
    pub fn features(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_batch(batch)?;
        let mut a = batch.clone();
        for layer in 0..self.num_layers() - 1 {
            a = self.affine(layer, &a)?;
            a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(a)
    }

    /// Exact parameter gradients given `dL/dlogits` for the traced batch.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Matrix) -> Result<Gradients> {
        if trace.layer_dims != self.layer_dims {
            return Err(state_err!(
                "trace was recorded for dims {:?}, model has {:?}",
                trace.layer_dims,
                self.layer_dims
            ));
        }
        if grad_logits.shape() != trace.logits.shape() {
            return Err(shape_err!(
                "upstream gradient {:?} does not match logits {:?}",
                grad_logits.shape(),
                trace.logits.shape()
            ));
        }
        let n_layers = self.num_layers();
        let mut gw = Vec::with_capacity(n_layers);
        let mut gb = Vec::with_capacity(n_layers);
        let mut delta = grad_logits.clone();
        for layer in (0..n_layers).rev() {
            gw.push(trace.activations[layer].t_matmul(&delta)?);
            let mut bias_grad = vec![0.0; delta.cols()];
            for row in delta.row_iter() {
                bias_grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            gb.push(bias_grad);
            if layer > 0 {
                let mut next = delta.matmul_t(&self.weights[layer])?;
                let pre = &trace.pre_activations[layer - 1];
                next.data_mut()
                    .iter_mut()
                    .zip(pre.data())
                    .for_each(|(d, &z)| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = next;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Gradients {
            weights: gw,
            biases: gb,
        })
    }

    /// Plain SGD: `p ← p − lr·g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(input_err!(
                "learning rate must be finite and non-negative, got {lr}"
            ));
        }
        let shapes_match = grads.weights.len() == self.weights.len()
            && grads
                .weights
                .iter()
                .zip(&self.weights)
                .all(|(g, w)| g.shape() == w.shape())
            && grads
                .biases
                .iter()
                .zip(&self.biases)
                .all(|(g, b)| g.len() == b.len());
        if !shapes_match {
            return Err(shape_err!("gradient shapes do not match the model"));
        }
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(p, gv)| *p -= lr * gv);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.iter_mut().zip(g).for_each(|(p, gv)| *p -= lr * gv);
        }
        Ok(())
    }

    /// Copy of this classifier with `extra_outputs` appended to the head.
    /// Existing parameters are copied unchanged; the new weight columns are
    /// uniform in ±`init_scale` and the new biases are zero.
    pub fn expand_head(&self, extra_outputs: usize, init_scale: f64, seed: u64) -> Result<Self> {
        if extra_outputs == 0 {
            return Err(input_err!("expand_head needs at least one extra output"));
        }
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(input_err!("init_scale must be finite and non-negative"));
        }
        let last = self.num_layers() - 1;
        let old_w = &self.weights[last];
        let (fan_in, old_t) = old_w.shape();
        let new_t = old_t + extra_outputs;
        let fresh = uniform_matrix(fan_in, extra_outputs, init_scale, &mut rng::seeded(seed));
        let mut w = Matrix::zeros(fan_in, new_t);
        for r in 0..fan_in {
            w.row_mut(r)[..old_t].copy_from_slice(old_w.row(r));
            w.row_mut(r)[old_t..].copy_from_slice(fresh.row(r));
        }
        let mut out = self.clone();
        out.weights[last] = w;
        out.biases[last].resize(new_t, 0.0);
        *out.layer_dims.last_mut().unwrap() = new_t;
        Ok(out)
    }

    /// Copy of the feature extractor with a freshly initialised
    /// `outputs`-way head (weights ±1/√fan_in, zero bias).
    pub fn with_fresh_head(&self, outputs: usize, seed: u64) -> Result<Self> {
        if outputs == 0 {
            return Err(input_err!("head needs at least one output"));
        }
        let last = self.num_layers() - 1;
        let fan_in = self.feature_dim();
        let mut out = self.clone();
        out.weights[last] = uniform_matrix(
            fan_in,
            outputs,
            1.0 / (fan_in as f64).sqrt(),
            &mut rng::seeded(seed),
        );
        out.biases[last] = vec![0.0; outputs];
        *out.layer_dims.last_mut().unwrap() = outputs;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Writes the parameters as a little-endian blob:
    /// `u64` layer-dim count, each dim as `u64`, then per layer the weight
    /// matrix row-major followed by the bias vector, all as `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.layer_dims.len() as u64).to_le_bytes())?;
        for &d in &self.layer_dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.data().iter().chain(b) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        }
        let n = read_u64(&mut input)? as usize;
        if !(2..=1024).contains(&n) {
            return Err(Error::Schema(format!(
                "implausible layer count {n} in checkpoint"
            )));
        }
        let dims = (0..n)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self::zeros(&dims)?;
        for layer in 0..model.num_layers() {
            for i in 0..model.param_count(layer) {
                *model.param_mut(layer, i) = f64::from_bits(read_u64(&mut input)?);
            }
        }
        Ok(model)
    }
}
