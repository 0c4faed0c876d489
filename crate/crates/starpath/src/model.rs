//! Small multi-layer perceptron with hand-written backpropagation, wrapped
//! as a finite-sum problem over fixed mini-batch blocks of a dataset.
//!
//! Parameters are flattened layer by layer: for each layer, the weight
//! matrix in input-major order (`w[i * fan_out + j]`), then the biases.
//! Hidden layers apply the activation; the output layer is linear and the
//! loss interprets its outputs (logits for crossentropy, predictions for
//! MSE).

use crate::dataio::Dataset;
use crate::numcore::ParamVector;
use crate::problems::FiniteSumProblem;
use crate::rng::{mix64, Stream};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid mlp spec: {0}")]
    BadSpec(String),
    #[error("parameter vector length {got} does not match spec ({expected})")]
    ParamLen { expected: usize, got: usize },
    #[error("batch shape mismatch: {0}")]
    BadBatch(String),
    #[error("non-finite activations in layer {layer}")]
    NonFinite { layer: usize },
    #[error("batch size {batch_size} does not divide dataset size {n}")]
    NonDivisible { n: usize, batch_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    SoftmaxCrossentropy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// `[d_in, h_1, ..., h_m, C]`
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss_kind: LossKind,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::BadSpec("need at least 2 layer sizes".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(ModelError::BadSpec("zero-width layer".into()));
        }
        Ok(())
    }

    /// Total parameter count: `sum (d_l + 1) * d_{l+1}`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn d_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Batch targets: class indices for crossentropy, a dense `b x C` value
/// matrix for MSE.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub b: usize,
    pub d_in: usize,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, b: usize, d_in: usize, targets: Targets) -> Result<Self, ModelError> {
        if b == 0 || inputs.len() != b * d_in {
            return Err(ModelError::BadBatch(format!(
                "inputs length {} != b ({b}) * d_in ({d_in})",
                inputs.len()
            )));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(ModelError::BadBatch("non-finite input".into()));
        }
        match &targets {
            Targets::Classes(c) if c.len() != b => {
                return Err(ModelError::BadBatch("target count != batch size".into()))
            }
            Targets::Values(v) if v.len() % b != 0 => {
                return Err(ModelError::BadBatch("value matrix not b x C".into()))
            }
            _ => {}
        }
        Ok(Batch {
            inputs,
            b,
            d_in,
            targets,
        })
    }

    fn check_against(&self, spec: &MlpSpec) -> Result<(), ModelError> {
        if self.d_in != spec.d_in() {
            return Err(ModelError::BadBatch(format!(
                "batch d_in {} != spec d_in {}",
                self.d_in,
                spec.d_in()
            )));
        }
        let c = spec.num_outputs();
        match &self.targets {
            Targets::Classes(labels) => {
                if labels.iter().any(|&l| l >= c) {
                    return Err(ModelError::BadBatch(format!("class index out of [0, {c})")));
                }
            }
            Targets::Values(v) => {
                if v.len() != self.b * c {
                    return Err(ModelError::BadBatch("value matrix not b x C".into()));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic fan-based initialization: weights uniform in `[-s, s]`
/// with `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(spec: &MlpSpec) -> ParamVector {
    spec.validate().expect("init_params: invalid spec");
    let mut stream = Stream::keyed(&[spec.init_seed, 0x6d6c7069]); // "mlpi" tag
    let mut params = Vec::with_capacity(spec.param_count());
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(stream.next_range(-s, s));
        }
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(params)
}

fn apply_activation(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Relu => {
            for v in z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Tanh => {
            for v in z {
                *v = v.tanh();
            }
        }
    }
}

/// Derivative through the activation given the *activated* output `a`.
/// For relu the subgradient at 0 is taken as 0 (`a > 0` test).
fn activation_deriv(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Relu => {
            if a > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - a * a,
    }
}

/// Fused forward pass and (optionally) backpropagation. Returns the mean
/// batch loss and, when requested, the exact gradient with respect to the
/// flattened parameters.
fn forward_backward(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
    want_grad: bool,
) -> Result<(f64, Option<ParamVector>), ModelError> {
    spec.validate()?;
    if params.dim() != spec.param_count() {
        return Err(ModelError::ParamLen {
            expected: spec.param_count(),
            got: params.dim(),
        });
    }
    batch.check_against(spec)?;
    let p = params.as_slice();
    let sizes = &spec.layer_sizes;
    let layers = sizes.len() - 1;
    let b = batch.b;

    // layer parameter offsets
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for w in sizes.windows(2) {
        offsets.push(off);
        off += (w[0] + 1) * w[1];
    }

    // forward: acts[0] is the input, acts[l+1] the activated output of layer l
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
    acts.push(batch.inputs.clone());
    for l in 0..layers {
        let (fi, fo) = (sizes[l], sizes[l + 1]);
        let w = &p[offsets[l]..offsets[l] + fi * fo];
        let bias = &p[offsets[l] + fi * fo..offsets[l] + (fi + 1) * fo];
        let prev = &acts[l];
        let mut z = vec![0.0; b * fo];
        for s in 0..b {
            let row = &prev[s * fi..(s + 1) * fi];
            let zrow = &mut z[s * fo..(s + 1) * fo];
            zrow.copy_from_slice(bias);
            for (i, &av) in row.iter().enumerate() {
                if av != 0.0 {
                    let wrow = &w[i * fo..(i + 1) * fo];
                    for (zv, &wv) in zrow.iter_mut().zip(wrow) {
                        *zv += av * wv;
                    }
                }
            }
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { layer: l });
        }
        if l + 1 < layers {
            apply_activation(spec.activation, &mut z);
        }
        acts.push(z);
    }

    // loss and output delta (d loss / d output, already averaged over b)
    let c = spec.num_outputs();
    let out = &acts[layers];
    let mut loss = 0.0;
    let mut delta = vec![0.0; b * c];
    match (&spec.loss_kind, &batch.targets) {
        (LossKind::Mse, Targets::Values(targets)) => {
            // (1/2b) sum ||out - target||^2
            for s in 0..b {
                for j in 0..c {
                    let diff = out[s * c + j] - targets[s * c + j];
                    loss += 0.5 * diff * diff;
                    delta[s * c + j] = diff / b as f64;
                }
            }
            loss /= b as f64;
        }
        (LossKind::Mse, Targets::Classes(labels)) => {
            // one-hot targets
            for s in 0..b {
                for j in 0..c {
                    let t = if labels[s] == j { 1.0 } else { 0.0 };
                    let diff = out[s * c + j] - t;
                    loss += 0.5 * diff * diff;
                    delta[s * c + j] = diff / b as f64;
                }
            }
            loss /= b as f64;
        }
        (LossKind::SoftmaxCrossentropy, Targets::Classes(labels)) => {
            // max-subtracted softmax
            for s in 0..b {
                let logits = &out[s * c..(s + 1) * c];
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
                loss += -(logits[labels[s]] - m - sum_exp.ln());
                for j in 0..c {
                    let prob = (logits[j] - m).exp() / sum_exp;
                    let t = if labels[s] == j { 1.0 } else { 0.0 };
                    delta[s * c + j] = (prob - t) / b as f64;
                }
            }
            loss /= b as f64;
        }
        (LossKind::SoftmaxCrossentropy, Targets::Values(_)) => {
            return Err(ModelError::BadBatch(
                "crossentropy needs class-index targets".into(),
            ))
        }
    }
    if !loss.is_finite() {
        return Err(ModelError::NonFinite { layer: layers - 1 });
    }
    if !want_grad {
        return Ok((loss, None));
    }

    // backward
    let mut grad = vec![0.0; params.dim()];
    for l in (0..layers).rev() {
        let (fi, fo) = (sizes[l], sizes[l + 1]);
        let w = &p[offsets[l]..offsets[l] + fi * fo];
        let prev = &acts[l];
        let (gw, gb) = {
            let slice = &mut grad[offsets[l]..offsets[l] + (fi + 1) * fo];
            slice.split_at_mut(fi * fo)
        };
        for s in 0..b {
            let row = &prev[s * fi..(s + 1) * fi];
            let drow = &delta[s * fo..(s + 1) * fo];
            for (i, &av) in row.iter().enumerate() {
                if av != 0.0 {
                    let grow = &mut gw[i * fo..(i + 1) * fo];
                    for (gv, &dv) in grow.iter_mut().zip(drow) {
                        *gv += av * dv;
                    }
                }
            }
            for (gv, &dv) in gb.iter_mut().zip(drow) {
                *gv += dv;
            }
        }
        if l > 0 {
            let mut new_delta = vec![0.0; b * fi];
            for s in 0..b {
                let drow = &delta[s * fo..(s + 1) * fo];
                let ndrow = &mut new_delta[s * fi..(s + 1) * fi];
                for i in 0..fi {
                    let a = acts[l][s * fi + i];
                    let deriv = activation_deriv(spec.activation, a);
                    if deriv != 0.0 {
                        let wrow = &w[i * fo..(i + 1) * fo];
                        let mut sum = 0.0;
                        for (&wv, &dv) in wrow.iter().zip(drow) {
                            sum += wv * dv;
                        }
                        ndrow[i] = deriv * sum;
                    }
                }
            }
            delta = new_delta;
        }
    }
    Ok((loss, Some(ParamVector::new(grad))))
}

/// Mean loss over the batch; nonnegative.
pub fn batch_loss(spec: &MlpSpec, params: &ParamVector, batch: &Batch) -> Result<f64, ModelError> {
    forward_backward(spec, params, batch, false).map(|(loss, _)| loss)
}

/// Exact gradient of [`batch_loss`] with respect to the parameters.
pub fn batch_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<ParamVector, ModelError> {
    forward_backward(spec, params, batch, true).map(|(_, g)| g.unwrap())
}

/// An MLP over a dataset as a finite-sum problem: component `i` is the mean
/// loss on the `i`-th contiguous block of the dataset's canonical order.
/// Reshuffling downstream permutes block order per epoch, never block
/// contents; `batch_size = 1` recovers per-sample components.
#[derive(Debug)]
pub struct MlpProblem {
    spec: MlpSpec,
    batches: Vec<Batch>,
    dataset_checksum: u64,
    batch_size: usize,
}

impl MlpProblem {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }
}

pub fn as_finite_sum(
    spec: &MlpSpec,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<MlpProblem, ModelError> {
    spec.validate()?;
    if dataset.d_in != spec.d_in() {
        return Err(ModelError::BadBatch(format!(
            "dataset d_in {} != spec d_in {}",
            dataset.d_in,
            spec.d_in()
        )));
    }
    if batch_size == 0 || !dataset.n.is_multiple_of(batch_size) {
        return Err(ModelError::NonDivisible {
            n: dataset.n,
            batch_size,
        });
    }
    let c = spec.num_outputs();
    let n_batches = dataset.n / batch_size;
    let mut batches = Vec::with_capacity(n_batches);
    for block in 0..n_batches {
        let lo = block * batch_size;
        let hi = lo + batch_size;
        let inputs = dataset.inputs[lo * dataset.d_in..hi * dataset.d_in].to_vec();
        let labels = &dataset.labels[lo..hi];
        let targets = match spec.loss_kind {
            LossKind::SoftmaxCrossentropy => Targets::Classes(labels.to_vec()),
            LossKind::Mse => {
                // one-hot targets
                let mut values = vec![0.0; batch_size * c];
                for (s, &l) in labels.iter().enumerate() {
                    values[s * c + l] = 1.0;
                }
                Targets::Values(values)
            }
        };
        let batch = Batch::new(inputs, batch_size, dataset.d_in, targets)?;
        batch.check_against(spec)?;
        batches.push(batch);
    }
    Ok(MlpProblem {
        spec: spec.clone(),
        batches,
        dataset_checksum: dataset.checksum,
        batch_size,
    })
}

impl FiniteSumProblem for MlpProblem {
    fn num_components(&self) -> usize {
        self.batches.len()
    }

    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn component_value(&self, i: usize, x: &ParamVector) -> f64 {
        batch_loss(&self.spec, x, &self.batches[i]).expect("mlp forward pass failed")
    }

    fn component_grad(&self, i: usize, x: &ParamVector) -> ParamVector {
        batch_grad(&self.spec, x, &self.batches[i]).expect("mlp backward pass failed")
    }

    fn fingerprint(&self) -> u64 {
        let mut words = vec![3u64, self.batch_size as u64, self.dataset_checksum];
        words.push(match self.spec.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        words.push(match self.spec.loss_kind {
            LossKind::Mse => 0,
            LossKind::SoftmaxCrossentropy => 1,
        });
        words.extend(self.spec.layer_sizes.iter().map(|&s| s as u64));
        let mut s = 0x6d6c70u64;
        for w in words {
            s = mix64(s ^ mix64(w));
        }
        s
    }
}
