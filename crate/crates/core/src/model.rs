//! Multilayer perceptron: initialization, exact gradients, local SGD
//! training, evaluation, and checkpoint IO.
//!
//! The model consumes raw `[0, 1]` inputs and applies its own optional
//! mean/std normalization as the first pipeline stage, so trigger injection
//! (which operates on raw inputs) always precedes normalization.
//!
//! The training loss is `mean cross-entropy + (weight_decay / 2) · ‖θ‖²`
//! over all parameters including biases; gradients are exact for that loss.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, TriggerKind, TriggerSpec};
use crate::params::{seeded_shuffle, uniform_f64, LayoutEntry, ParamError, ParamVector};

/// Errors from model construction, training, evaluation, and checkpoints.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("client has no training samples")]
    EmptyClientData,
    #[error("evaluation set is empty (every sample carries the target class)")]
    EmptyEvalSet,
    #[error("input width {got} does not match model input size {expected}")]
    InputWidthMismatch { expected: usize, got: usize },
    #[error("parameter vector has {got} values but the spec needs {expected}")]
    ParamCountMismatch { expected: usize, got: usize },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    CheckpointFormat(String),
}

/// Hidden-layer activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Input normalization `(x - mean) / std`, applied inside the model pipeline
/// strictly after any trigger injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

/// Architecture description: `layer_sizes = [input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
    pub input_norm: Option<InputNorm>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::BadSpec(format!(
                "layer_sizes needs at least [input, output], got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(ModelError::BadSpec("layer sizes must be positive".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(ModelError::BadSpec(format!(
                "init_scale must be > 0, got {}",
                self.init_scale
            )));
        }
        if let Some(norm) = &self.input_norm {
            if !(norm.std > 0.0) {
                return Err(ModelError::BadSpec(format!(
                    "input_norm.std must be > 0, got {}",
                    norm.std
                )));
            }
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated layer_sizes")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: Σ (out·in + out) per layer.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// The flat layout: alternating weight matrices `[out, in]` and bias
    /// vectors `[out]`, in layer order.
    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut layout = Vec::with_capacity(2 * self.n_layers());
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            layout.push((format!("w{l}"), vec![w[1], w[0]]));
            layout.push((format!("b{l}"), vec![w[1]]));
        }
        layout
    }
}

/// Local SGD hyperparameters (heavy-ball momentum, L2 weight decay).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Borrowed per-layer views into a flat parameter vector.
struct Layers<'a> {
    w: Vec<ArrayView2<'a, f64>>,
    b: Vec<ArrayView1<'a, f64>>,
}

fn split_layers<'a>(params: &'a ParamVector, spec: &ModelSpec) -> Result<Layers<'a>, ModelError> {
    let expected = spec.param_count();
    if params.len() != expected {
        return Err(ModelError::ParamCountMismatch {
            expected,
            got: params.len(),
        });
    }
    let mut w = Vec::with_capacity(spec.n_layers());
    let mut b = Vec::with_capacity(spec.n_layers());
    let mut offset = 0usize;
    let values = params.values();
    for sizes in spec.layer_sizes.windows(2) {
        let (n_in, n_out) = (sizes[0], sizes[1]);
        let w_len = n_out * n_in;
        w.push(
            ArrayView2::from_shape((n_out, n_in), &values[offset..offset + w_len])
                .expect("shape matches slice length"),
        );
        offset += w_len;
        b.push(ArrayView1::from(&values[offset..offset + n_out]));
        offset += n_out;
    }
    Ok(Layers { w, b })
}

/// Initializes a model: weights uniform in `[-init_scale, init_scale]`
/// (drawn layer by layer in row-major order), biases zero.
pub fn init_model(spec: &ModelSpec, mut rng: ChaCha8Rng) -> Result<ParamVector, ModelError> {
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.param_count());
    for sizes in spec.layer_sizes.windows(2) {
        let (n_in, n_out) = (sizes[0], sizes[1]);
        for _ in 0..n_out * n_in {
            values.push(spec.init_scale * (2.0 * uniform_f64(&mut rng) - 1.0));
        }
        values.extend(std::iter::repeat(0.0).take(n_out));
    }
    Ok(ParamVector::new(values, spec.layout())?)
}

fn normalize_inputs(spec: &ModelSpec, x: &Array2<f64>) -> Array2<f64> {
    match &spec.input_norm {
        Some(norm) => x.mapv(|v| (v - norm.mean) / norm.std),
        None => x.clone(),
    }
}

/// Forward pass over raw `[0, 1]` inputs; returns per-layer activations
/// (`acts[0]` is the normalized input, `acts[n_layers]` the logits).
fn forward_all(
    params: &ParamVector,
    spec: &ModelSpec,
    x_raw: &Array2<f64>,
) -> Result<Vec<Array2<f64>>, ModelError> {
    if x_raw.ncols() != spec.input_size() {
        return Err(ModelError::InputWidthMismatch {
            expected: spec.input_size(),
            got: x_raw.ncols(),
        });
    }
    let layers = split_layers(params, spec)?;
    let n_layers = spec.n_layers();
    let mut acts = Vec::with_capacity(n_layers + 1);
    acts.push(normalize_inputs(spec, x_raw));
    for l in 0..n_layers {
        let mut z = acts[l].dot(&layers.w[l].t());
        z += &layers.b[l];
        if l + 1 < n_layers {
            match spec.activation {
                Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
                Activation::Tanh => z.mapv_inplace(f64::tanh),
            }
        }
        acts.push(z);
    }
    Ok(acts)
}

/// Forward pass returning logits (batch × classes). Inputs are raw
/// `[0, 1]` space; normalization happens inside.
pub fn forward(
    params: &ParamVector,
    spec: &ModelSpec,
    x_raw: &Array2<f64>,
) -> Result<Array2<f64>, ModelError> {
    Ok(forward_all(params, spec, x_raw)?.pop().expect("nonempty"))
}

/// Numerically-stable softmax rows (max-subtraction before exponentiation).
fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy of a batch (no weight-decay term).
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[labels[i]];
    }
    total / labels.len() as f64
}

struct Backprop {
    loss: f64,
    grad: ParamVector,
    /// Gradient of mean cross-entropy w.r.t. the raw inputs.
    input_grad: Option<Array2<f64>>,
}

fn backprop(
    params: &ParamVector,
    spec: &ModelSpec,
    x_raw: &Array2<f64>,
    labels: &[usize],
    weight_decay: f64,
    want_input_grad: bool,
) -> Result<Backprop, ModelError> {
    let acts = forward_all(params, spec, x_raw)?;
    let layers = split_layers(params, spec)?;
    let n_layers = spec.n_layers();
    let batch = x_raw.nrows() as f64;
    let logits = &acts[n_layers];
    let ce = cross_entropy(logits, labels);

    // d(mean CE)/d(logits) = (softmax - onehot) / batch
    let mut dz = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        dz[[i, y]] -= 1.0;
    }
    dz.mapv_inplace(|v| v / batch);

    let mut grad_values = vec![0.0; params.len()];
    // Walk the layout backwards to find each layer's value offsets.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut offset = 0usize;
    for sizes in spec.layer_sizes.windows(2) {
        offsets.push(offset);
        offset += sizes[1] * sizes[0] + sizes[1];
    }

    let mut input_grad = None;
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let dw = dz.t().dot(&acts[l]); // (out, in)
        let db = dz.sum_axis(Axis(0)); // (out,)
        let base = offsets[l];
        grad_values[base..base + n_out * n_in]
            .copy_from_slice(dw.as_standard_layout().as_slice().expect("contiguous"));
        grad_values[base + n_out * n_in..base + n_out * n_in + n_out]
            .copy_from_slice(db.as_slice().expect("contiguous"));

        if l > 0 {
            let mut da = dz.dot(&layers.w[l]); // (batch, in)
            match spec.activation {
                Activation::Relu => {
                    for (d, &a) in da.iter_mut().zip(acts[l].iter()) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::Tanh => {
                    for (d, &a) in da.iter_mut().zip(acts[l].iter()) {
                        *d *= 1.0 - a * a;
                    }
                }
            }
            dz = da;
        } else if want_input_grad {
            let mut dx = dz.dot(&layers.w[0]); // gradient w.r.t. normalized input
            if let Some(norm) = &spec.input_norm {
                dx.mapv_inplace(|v| v / norm.std);
            }
            input_grad = Some(dx);
        }
    }

    let mut loss = ce;
    if weight_decay != 0.0 {
        let sq: f64 = params.values().iter().map(|v| v * v).sum();
        loss += 0.5 * weight_decay * sq;
        for (g, &p) in grad_values.iter_mut().zip(params.values()) {
            *g += weight_decay * p;
        }
    }

    Ok(Backprop {
        loss,
        grad: ParamVector::new(grad_values, spec.layout())?,
        input_grad,
    })
}

/// Loss and exact gradient of `mean CE + (weight_decay/2)·‖θ‖²` for one
/// batch of raw inputs.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    x_raw: &Array2<f64>,
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, ParamVector), ModelError> {
    let bp = backprop(params, spec, x_raw, labels, weight_decay, false)?;
    Ok((bp.loss, bp.grad))
}

/// Gradient of mean cross-entropy w.r.t. the raw inputs (through the
/// normalization stage). Used by trigger optimization.
pub fn input_gradient(
    params: &ParamVector,
    spec: &ModelSpec,
    x_raw: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), ModelError> {
    let bp = backprop(params, spec, x_raw, labels, 0.0, true)?;
    Ok((bp.loss, bp.input_grad.expect("requested input grad")))
}

/// Callbacks that let the attack path reuse the benign training loop.
/// Every hook defaults to a no-op, which makes a hook-free malicious
/// configuration bit-identical to benign training.
pub trait TrainHooks {
    /// Mutates a raw-space batch before normalization (trigger injection).
    fn poison(&mut self, _xs: &mut Array2<f64>, _ys: &mut [usize]) -> Result<(), ModelError> {
        Ok(())
    }
    /// Adjusts the gradient given the current parameters (e.g. blends in a
    /// stealth penalty term).
    fn adjust_grad(&mut self, _theta: &ParamVector, _grad: &mut ParamVector) {}
    /// Transforms the finished update (e.g. scaling).
    fn transform_delta(&mut self, delta: ParamVector) -> ParamVector {
        delta
    }
}

/// The benign no-op hook set.
pub struct NoHooks;
impl TrainHooks for NoHooks {}

/// Result of a local training pass.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// `θ_local − θ_global`, after any hook transform.
    pub delta: ParamVector,
    /// Number of training samples the client used.
    pub n_samples: usize,
    /// Training loss of the last processed batch.
    pub final_loss: f64,
}

/// Local SGD with per-epoch seeded shuffling and heavy-ball momentum
/// (velocity reset at the start of every call). Hooks are applied in raw
/// input space before normalization.
pub fn train_with_hooks(
    global: &ParamVector,
    spec: &ModelSpec,
    tc: &TrainConfig,
    data: &Dataset,
    indices: &[usize],
    mut rng: ChaCha8Rng,
    hooks: &mut impl TrainHooks,
) -> Result<TrainOutput, ModelError> {
    spec.validate()?;
    if indices.is_empty() {
        return Err(ModelError::EmptyClientData);
    }
    if tc.batch_size == 0 {
        return Err(ModelError::BadSpec("batch_size must be >= 1".into()));
    }
    let mut theta = global.clone();
    let mut velocity = global.zeros_like();
    let mut order: Vec<usize> = indices.to_vec();
    let mut final_loss = 0.0;
    for _ in 0..tc.local_epochs {
        seeded_shuffle(&mut order, &mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let (mut xs, mut ys) = data.gather(chunk);
            hooks.poison(&mut xs, &mut ys)?;
            let (loss, mut grad) = loss_and_grad(&theta, spec, &xs, &ys, tc.weight_decay)?;
            hooks.adjust_grad(&theta, &mut grad);
            final_loss = loss;
            // v = m·v + g; θ -= lr·v
            for ((v, g), t) in velocity
                .values_mut()
                .iter_mut()
                .zip(grad.values())
                .zip(theta.values_mut())
            {
                *v = tc.momentum * *v + *g;
                *t -= tc.learning_rate * *v;
            }
        }
    }
    let delta = hooks.transform_delta(theta.sub(global)?);
    Ok(TrainOutput {
        delta,
        n_samples: indices.len(),
        final_loss,
    })
}

/// Benign local training (the hook-free path).
pub fn local_train(
    global: &ParamVector,
    spec: &ModelSpec,
    tc: &TrainConfig,
    data: &Dataset,
    indices: &[usize],
    rng: ChaCha8Rng,
) -> Result<TrainOutput, ModelError> {
    train_with_hooks(global, spec, tc, data, indices, rng, &mut NoHooks)
}

/// Predicted class per row; argmax ties resolve to the lowest class index.
pub fn predict(
    params: &ParamVector,
    spec: &ModelSpec,
    x_raw: &Array2<f64>,
) -> Result<Vec<usize>, ModelError> {
    let logits = forward(params, spec, x_raw)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect())
}

const EVAL_CHUNK: usize = 512;

/// Accuracy over a dataset (optionally restricted to `indices`).
pub fn evaluate_acc(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    indices: Option<&[usize]>,
) -> Result<f64, ModelError> {
    let all: Vec<usize>;
    let idx: &[usize] = match indices {
        Some(idx) => idx,
        None => {
            all = (0..data.n_samples()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(ModelError::EmptyEvalSet);
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (xs, ys) = data.gather(chunk);
        let preds = predict(params, spec, &xs)?;
        correct += preds.iter().zip(&ys).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Attack success rate: the fraction of triggered non-target samples the
/// model classifies as the target class.
///
/// Pattern triggers are stamped onto every evaluation sample whose original
/// label differs from the target. Edge-case triggers are evaluated directly
/// over their OOD pool (samples whose original pool label equals the target
/// are excluded).
pub fn evaluate_asr(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    indices: Option<&[usize]>,
    trigger: &TriggerSpec,
) -> Result<f64, ModelError> {
    let (source, eval_idx): (&Dataset, Vec<usize>) = match trigger.kind {
        TriggerKind::EdgeCase => {
            let pool = trigger
                .edge_pool
                .as_ref()
                .ok_or(DataError::EmptyEdgePool)?
                .as_ref();
            let idx: Vec<usize> = (0..pool.n_samples())
                .filter(|&i| pool.label(i) != trigger.target_class)
                .collect();
            (pool, idx)
        }
        _ => {
            let all: Vec<usize> = match indices {
                Some(idx) => idx.to_vec(),
                None => (0..data.n_samples()).collect(),
            };
            let idx: Vec<usize> = all
                .into_iter()
                .filter(|&i| data.label(i) != trigger.target_class)
                .collect();
            (data, idx)
        }
    };
    if eval_idx.is_empty() {
        return Err(ModelError::EmptyEvalSet);
    }
    let image_shape = source.image_shape();
    let mut hits = 0usize;
    for chunk in eval_idx.chunks(EVAL_CHUNK) {
        let mut xs = Array2::zeros((chunk.len(), source.n_features()));
        for (row, &i) in chunk.iter().enumerate() {
            let sample = source.input_row(i).to_vec();
            let triggered = match trigger.kind {
                // Pool samples are already the attack inputs.
                TriggerKind::EdgeCase => sample,
                _ => {
                    let (poisoned, _) =
                        crate::data::apply_trigger(&sample, image_shape, trigger)?;
                    poisoned
                }
            };
            for (dst, src) in xs.row_mut(row).iter_mut().zip(&triggered) {
                *dst = *src;
            }
        }
        let preds = predict(params, spec, &xs)?;
        hits += preds.iter().filter(|&&p| p == trigger.target_class).count();
    }
    Ok(hits as f64 / eval_idx.len() as f64)
}

fn layout_sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("layout")
}

/// Saves a checkpoint: `<path>` holds the little-endian f64 values, and the
/// sidecar `<path with .layout extension>` lists the layout entries as
/// `name dim0 dim1 ...` lines.
pub fn save_checkpoint(bin_path: &Path, params: &ParamVector) -> Result<(), ModelError> {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(bin_path, &bytes).map_err(|source| ModelError::Io {
        path: bin_path.display().to_string(),
        source,
    })?;
    let mut text = String::new();
    for (name, shape) in params.layout() {
        write!(text, "{name}").expect("string write");
        for d in shape {
            write!(text, " {d}").expect("string write");
        }
        text.push('\n');
    }
    let layout_path = layout_sidecar_path(bin_path);
    std::fs::write(&layout_path, text).map_err(|source| ModelError::Io {
        path: layout_path.display().to_string(),
        source,
    })
}

/// Loads a checkpoint saved by [`save_checkpoint`]. Files whose value array
/// is 4 bytes per entry are accepted as 32-bit floats and widened.
pub fn load_checkpoint(bin_path: &Path) -> Result<ParamVector, ModelError> {
    let layout_path = layout_sidecar_path(bin_path);
    let text = std::fs::read_to_string(&layout_path).map_err(|source| ModelError::Io {
        path: layout_path.display().to_string(),
        source,
    })?;
    let mut layout: Vec<LayoutEntry> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| ModelError::CheckpointFormat(format!("empty layout line {lineno}")))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>().map_err(|_| {
                    ModelError::CheckpointFormat(format!(
                        "bad dimension {p:?} on layout line {lineno}"
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        if shape.is_empty() {
            return Err(ModelError::CheckpointFormat(format!(
                "layout entry {name:?} has no dimensions"
            )));
        }
        layout.push((name, shape));
    }
    let count: usize = layout
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    let bytes = std::fs::read(bin_path).map_err(|source| ModelError::Io {
        path: bin_path.display().to_string(),
        source,
    })?;
    let values: Vec<f64> = if bytes.len() == count * 8 {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    } else if bytes.len() == count * 4 {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect()
    } else {
        return Err(ModelError::CheckpointFormat(format!(
            "value file holds {} bytes; layout expects {} f64 ({} bytes) or f32 ({} bytes)",
            bytes.len(),
            count,
            count * 8,
            count * 4
        )));
    };
    Ok(ParamVector::new(values, layout)?)
}
