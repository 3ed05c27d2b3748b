//! Minimal dense-network engine: affine layers with relu / sigmoid /
//! identity / softmax activations, a combined classification + regression
//! loss computed in logit space, exact reverse-mode gradients with
//! trainable/frozen parameter groups, Adam, finite-difference gradient
//! checking and a bit-exact binary serialization format.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected input {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize, partial: Vec<f64> },
    #[error("non-finite parameter detected in layer {layer}")]
    NonFiniteParameter { layer: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad model file: {0}")]
    BadFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
    Softmax,
}

impl Activation {
    fn apply(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Activation::Relu => out.extend(z.iter().map(|&v| v.max(0.0))),
            Activation::Sigmoid => out.extend(z.iter().map(|&v| sigmoid(v))),
            Activation::Identity => out.extend_from_slice(z),
            Activation::Softmax => {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &v in z {
                    let e = (v - max).exp();
                    sum += e;
                    out.push(e);
                }
                for v in out.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }

    /// dL/dz from dL/da, given cached z and a.
    fn backprop(&self, z: &[f64], a: &[f64], da: &[f64], dz: &mut Vec<f64>) {
        dz.clear();
        match self {
            Activation::Relu => dz.extend(
                z.iter()
                    .zip(da)
                    .map(|(&zv, &dav)| if zv > 0.0 { dav } else { 0.0 }),
            ),
            Activation::Sigmoid => dz.extend(a.iter().zip(da).map(|(&av, &dav)| dav * av * (1.0 - av))),
            Activation::Identity => dz.extend_from_slice(da),
            Activation::Softmax => {
                let dot: f64 = a.iter().zip(da).map(|(&av, &dav)| av * dav).sum();
                dz.extend(a.iter().zip(da).map(|(&av, &dav)| av * (dav - dot)));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: row-major (out x in) weights plus biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub trainable: bool,
}

impl DenseLayer {
    /// Fan-in scaled uniform init, zero biases.
    pub fn new_seeded(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weights,
            biases: vec![0.0; out_dim],
            in_dim,
            out_dim,
            activation,
            trainable: true,
        }
    }

    fn affine(&self, x: &[f64], z: &mut Vec<f64>) {
        z.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o];
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            z.push(acc);
        }
    }

    pub fn check_finite(&self, layer: usize) -> Result<(), NnError> {
        if self.weights.iter().chain(self.biases.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NnError::NonFiniteParameter { layer })
        }
    }

    /// Raw little-endian parameter bytes, weights then biases.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.weights.len() + self.biases.len()));
        for v in self.weights.iter().chain(self.biases.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    /// Per layer: (pre-activation z, activation a).
    pub stages: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.stages.last().expect("non-empty network").1
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_weights: Vec<f64>,
    pub d_biases: Vec<f64>,
}

/// Gradients aligned with the layer stack; `None` for frozen layers.
pub type Gradients = Vec<Option<LayerGrad>>;

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Self {
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for l in &mut self.layers {
            l.trainable = trainable;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache, NnError> {
        if x.len() != self.in_dim() {
            return Err(NnError::DimMismatch {
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let mut stages = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.affine(cur, &mut z);
            let mut a = Vec::new();
            layer.activation.apply(&z, &mut a);
            stages.push((z, a));
            cur = &stages.last().unwrap().1;
        }
        Ok(ForwardCache {
            input: x.to_vec(),
            stages,
        })
    }

    /// Reverse-mode gradients for trainable layers; frozen layers propagate
    /// upstream gradients but accumulate none. Also returns dL/dx.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> (Gradients, Vec<f64>) {
        assert_eq!(cache.stages.len(), self.layers.len(), "stale cache");
        let mut grads: Gradients = vec![None; self.layers.len()];
        let mut da = grad_output.to_vec();
        let mut dz = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (z, a) = &cache.stages[idx];
            layer.activation.backprop(z, a, &da, &mut dz);
            let prev_a: &[f64] = if idx == 0 {
                &cache.input
            } else {
                &cache.stages[idx - 1].1
            };
            if layer.trainable {
                let mut dw = vec![0.0; layer.in_dim * layer.out_dim];
                for (o, &g) in dz.iter().enumerate() {
                    let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (slot, xv) in row.iter_mut().zip(prev_a) {
                        *slot += g * xv;
                    }
                }
                grads[idx] = Some(LayerGrad {
                    d_weights: dw,
                    d_biases: dz.clone(),
                });
            }
            // dL/d(prev activation) = W^T dz
            let mut dprev = vec![0.0; layer.in_dim];
            for (o, &g) in dz.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (slot, w) in dprev.iter_mut().zip(row) {
                    *slot += g * w;
                }
            }
            da = dprev;
        }
        (grads, da)
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        for (i, l) in self.layers.iter().enumerate() {
            l.check_finite(i)?;
        }
        Ok(())
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        self.layers.iter().flat_map(|l| l.param_bytes()).collect()
    }

    /// Flat views over trainable parameters, for gradient checking.
    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.trainable)
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn get_trainable_param(&self, mut idx: usize) -> f64 {
        for l in self.layers.iter().filter(|l| l.trainable) {
            if idx < l.weights.len() {
                return l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                return l.biases[idx];
            }
            idx -= l.biases.len();
        }
        panic!("trainable parameter index out of range");
    }

    pub fn set_trainable_param(&mut self, mut idx: usize, value: f64) {
        for l in self.layers.iter_mut().filter(|l| l.trainable) {
            if idx < l.weights.len() {
                l.weights[idx] = value;
                return;
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                l.biases[idx] = value;
                return;
            }
            idx -= l.biases.len();
        }
        panic!("trainable parameter index out of range");
    }

    /// Append another network's layers (for joint backbone + head training).
    pub fn concat(mut self, tail: Network) -> Network {
        self.layers.extend(tail.layers);
        self
    }

    pub fn split_off(&mut self, at_layer: usize) -> Network {
        Network {
            layers: self.layers.split_off(at_layer),
        }
    }
}

/// Network output split into the two task heads: N decision logits followed
/// by N allocation regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskOutput {
    pub class_logits: Vec<f64>,
    pub reg_values: Vec<f64>,
}

impl MultiTaskOutput {
    pub fn from_output(output: &[f64], n: usize) -> Self {
        assert_eq!(output.len(), 2 * n, "output width must be 2N");
        Self {
            class_logits: output[..n].to_vec(),
            reg_values: output[n..].to_vec(),
        }
    }
}

/// Mean per-MT binary cross-entropy (from logits) plus lambda * mean squared
/// allocation error. Returns the loss and its gradient with respect to the
/// raw 2N-dimensional network output.
pub fn combined_loss(
    output: &[f64],
    d_star: &[u8],
    r_star: &[f64],
    lambda_reg: f64,
) -> (f64, Vec<f64>) {
    let n = d_star.len();
    debug_assert_eq!(output.len(), 2 * n);
    let mut loss = 0.0;
    let mut grad = vec![0.0; 2 * n];
    for i in 0..n {
        let z = output[i];
        let y = d_star[i] as f64;
        // Stable BCE from logits: max(z,0) - z*y + ln(1 + exp(-|z|)).
        loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) / n as f64;
        grad[i] = (sigmoid(z) - y) / n as f64;
    }
    for i in 0..n {
        let diff = output[n + i] - r_star[i];
        loss += lambda_reg * diff * diff / n as f64;
        grad[n + i] = lambda_reg * 2.0 * diff / n as f64;
    }
    (loss, grad)
}

/// Bias-corrected Adam over the trainable layers of one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Option<(LayerGrad, LayerGrad)>>,
}

impl AdamState {
    pub fn new(net: &Network, lr: f64) -> Self {
        let moments = net
            .layers
            .iter()
            .map(|l| {
                l.trainable.then(|| {
                    (
                        LayerGrad {
                            d_weights: vec![0.0; l.weights.len()],
                            d_biases: vec![0.0; l.biases.len()],
                        },
                        LayerGrad {
                            d_weights: vec![0.0; l.weights.len()],
                            d_biases: vec![0.0; l.biases.len()],
                        },
                    )
                })
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            let (Some(g), Some((m, v))) = (&grads[idx], &mut self.moments[idx]) else {
                continue;
            };
            debug_assert!(layer.trainable);
            let update = |params: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..params.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            };
            update(&mut layer.weights, &g.d_weights, &mut m.d_weights, &mut v.d_weights);
            update(&mut layer.biases, &g.d_biases, &mut m.d_biases, &mut v.d_biases);
        }
    }
}

/// One training example viewed by the engine.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub x: &'a [f64],
    pub d: &'a [u8],
    pub r: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_reg: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 30,
            lambda_reg: 1.0,
            shuffle_seed: 0,
        }
    }
}

/// Mini-batch Adam training of every trainable layer. Deterministic given
/// the shuffle seed and data order. Returns the per-epoch mean training loss.
pub fn train(
    net: &mut Network,
    data: &[TrainSample<'_>],
    hyper: &TrainHyper,
) -> Result<Vec<f64>, NnError> {
    assert!(!data.is_empty(), "empty training set");
    let mut adam = AdamState::new(net, hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        // Fisher-Yates with the dedicated stream keeps runs replayable.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut acc: Gradients = net
                .layers
                .iter()
                .map(|l| {
                    l.trainable.then(|| LayerGrad {
                        d_weights: vec![0.0; l.weights.len()],
                        d_biases: vec![0.0; l.biases.len()],
                    })
                })
                .collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &data[i];
                let cache = net.forward(s.x)?;
                let (loss, grad_out) = combined_loss(cache.output(), s.d, s.r, hyper.lambda_reg);
                batch_loss += loss;
                let (grads, _) = net.backward(&cache, &grad_out);
                for (slot, g) in acc.iter_mut().zip(grads) {
                    if let (Some(slot), Some(g)) = (slot, g) {
                        for (a, b) in slot.d_weights.iter_mut().zip(&g.d_weights) {
                            *a += b;
                        }
                        for (a, b) in slot.d_biases.iter_mut().zip(&g.d_biases) {
                            *a += b;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                for v in g.d_weights.iter_mut().chain(g.d_biases.iter_mut()) {
                    *v *= scale;
                }
            }
            adam.step(net, &acc);
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(NnError::Diverged {
                epoch,
                partial: epoch_losses,
            });
        }
        net.check_finite()?;
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Mean combined loss of a network over a data slice, without training.
pub fn mean_loss(net: &Network, data: &[TrainSample<'_>], lambda_reg: f64) -> Result<f64, NnError> {
    let mut total = 0.0;
    for s in data {
        let cache = net.forward(s.x)?;
        let (loss, _) = combined_loss(cache.output(), s.d, s.r, lambda_reg);
        total += loss;
    }
    Ok(total / data.len() as f64)
}

/// Central finite differences over every trainable parameter against the
/// analytic gradient; returns the maximum relative error.
pub fn grad_check(
    net: &mut Network,
    sample: &TrainSample<'_>,
    lambda_reg: f64,
    h: f64,
) -> Result<f64, NnError> {
    let cache = net.forward(sample.x)?;
    let (_, grad_out) = combined_loss(cache.output(), sample.d, sample.r, lambda_reg);
    let (grads, _) = net.backward(&cache, &grad_out);

    // Flatten analytic gradients in the same order as the flat param view.
    let mut analytic = Vec::new();
    for (layer, g) in net.layers.iter().zip(&grads) {
        if !layer.trainable {
            continue;
        }
        let g = g.as_ref().expect("trainable layer must have a gradient");
        analytic.extend_from_slice(&g.d_weights);
        analytic.extend_from_slice(&g.d_biases);
    }

    let mut max_rel = 0.0f64;
    for (idx, &grad) in analytic.iter().enumerate() {
        let orig = net.get_trainable_param(idx);
        net.set_trainable_param(idx, orig + h);
        let (lp, _) = eval_loss(net, sample, lambda_reg)?;
        net.set_trainable_param(idx, orig - h);
        let (lm, _) = eval_loss(net, sample, lambda_reg)?;
        net.set_trainable_param(idx, orig);
        let numeric = (lp - lm) / (2.0 * h);
        let denom = grad.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((grad - numeric).abs() / denom);
    }
    Ok(max_rel)
}

fn eval_loss(net: &Network, s: &TrainSample<'_>, lambda_reg: f64) -> Result<(f64, Vec<f64>), NnError> {
    let cache = net.forward(s.x)?;
    Ok(combined_loss(cache.output(), s.d, s.r, lambda_reg))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerSpec {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    layer_specs: Vec<LayerSpec>,
}

/// Write one JSON header line followed by raw little-endian f64 parameter
/// blocks in declaration order (weights row-major, then biases, per layer).
pub fn write_network<W: Write>(net: &Network, mut w: W) -> Result<(), NnError> {
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        layer_specs: net
            .layers
            .iter()
            .map(|l| LayerSpec {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                activation: l.activation,
                trainable: l.trainable,
            })
            .collect(),
    };
    let line = serde_json::to_string(&header).map_err(|e| NnError::BadFile(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&net.param_bytes())?;
    Ok(())
}

pub fn read_network<R: Read>(mut r: R) -> Result<Network, NnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NnError::BadFile("missing header line".into()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| NnError::BadFile(e.to_string()))?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(NnError::BadFile(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut offset = nl + 1;
    let mut layers = Vec::with_capacity(header.layer_specs.len());
    for spec in header.layer_specs {
        let n_params = spec.in_dim * spec.out_dim + spec.out_dim;
        let need = n_params * 8;
        if bytes.len() < offset + need {
            return Err(NnError::BadFile("truncated parameter block".into()));
        }
        let mut vals = Vec::with_capacity(n_params);
        for chunk in bytes[offset..offset + need].chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset += need;
        let biases = vals.split_off(spec.in_dim * spec.out_dim);
        layers.push(DenseLayer {
            weights: vals,
            biases,
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
            activation: spec.activation,
            trainable: spec.trainable,
        });
    }
    if offset != bytes.len() {
        return Err(NnError::BadFile("trailing bytes after parameters".into()));
    }
    Ok(Network::new(layers))
}

pub fn save_network(net: &Network, path: &std::path::Path) -> Result<(), NnError> {
    write_network(net, std::fs::File::create(path)?)
}

pub fn load_network(path: &std::path::Path) -> Result<Network, NnError> {
    read_network(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_net(dims: &[usize], acts: &[Activation], seed: u64) -> Network {
        let mut r = rng(seed);
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(w, &a)| DenseLayer::new_seeded(w[0], w[1], a, &mut r))
            .collect();
        Network::new(layers)
    }

    #[test]
    fn forward_zero_weights_outputs_bias() {
        let mut net = random_net(&[3, 2], &[Activation::Identity], 1);
        net.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        net.layers[0].biases = vec![1.5, -0.5];
        let cache = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(cache.output(), &[1.5, -0.5]);
    }

    #[test]
    fn forward_identity_layer_is_affine() {
        let mut net = random_net(&[2, 2], &[Activation::Identity], 2);
        net.layers[0].weights = vec![1.0, 2.0, 3.0, 4.0];
        net.layers[0].biases = vec![0.5, -1.0];
        let cache = net.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(cache.output(), &[3.5, 6.0]);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut net = random_net(&[2, 2], &[Activation::Relu], 3);
        net.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        net.layers[0].biases = vec![-3.0, 0.0];
        let cache = net.forward(&[2.0, 2.0]).unwrap();
        assert_eq!(cache.output(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_dim_mismatch() {
        let net = random_net(&[3, 2], &[Activation::Identity], 1);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn loss_correct_prediction_limit() {
        // Confident correct logits and exact regression: loss ~ 0.
        let out = [30.0, 30.0, 0.25, 0.75];
        let (loss, _) = combined_loss(&out, &[1, 1], &[0.25, 0.75], 1.0);
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_at_logit_zero_is_ln2() {
        let out = [0.0, 0.5];
        let (loss, _) = combined_loss(&out, &[1], &[0.5], 1.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lambda_scales_regression_term_only() {
        let out = [0.3, 0.9];
        let (l1, _) = combined_loss(&out, &[1], &[0.5], 1.0);
        let (l2, _) = combined_loss(&out, &[1], &[0.5], 2.0);
        let (l0, _) = combined_loss(&out, &[1], &[0.5], 0.0);
        assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() < 1e-15);
    }

    #[test]
    fn bce_is_finite_for_extreme_logits() {
        for &z in &[-700.0, -100.0, 0.0, 100.0, 700.0] {
            let (loss, grad) = combined_loss(&[z, 0.0], &[1], &[0.0], 1.0);
            assert!(loss.is_finite());
            assert!(grad.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn backward_all_frozen_yields_no_grads_but_input_grad() {
        let mut net = random_net(&[2, 4, 2], &[Activation::Relu, Activation::Identity], 5);
        net.set_trainable(false);
        let cache = net.forward(&[0.3, -0.2]).unwrap();
        let (grads, dx) = net.backward(&cache, &[1.0, 1.0]);
        assert!(grads.iter().all(|g| g.is_none()));
        assert_eq!(dx.len(), 2);
        assert!(dx.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_linear_layer_mse_gradient_matches_hand_derivation() {
        // loss = (1/g) * sum (Wx + b - y)^2, dW = (2/g) (Wx+b-y) x^T.
        let mut net = random_net(&[2, 1], &[Activation::Identity], 6);
        net.layers[0].weights = vec![0.4, -0.3];
        net.layers[0].biases = vec![0.1];
        let x = [0.7, -1.2];
        let y = 0.9;
        let cache = net.forward(&x).unwrap();
        let pred = cache.output()[0];
        let grad_out = [2.0 * (pred - y)];
        let (grads, _) = net.backward(&cache, &grad_out);
        let g = grads[0].as_ref().unwrap();
        let resid = 0.4 * x[0] - 0.3 * x[1] + 0.1 - y;
        assert!((g.d_weights[0] - 2.0 * resid * x[0]).abs() < 1e-12);
        assert!((g.d_weights[1] - 2.0 * resid * x[1]).abs() < 1e-12);
        assert!((g.d_biases[0] - 2.0 * resid).abs() < 1e-12);
    }

    #[test]
    fn grad_check_all_activations() {
        let acts = [
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Identity,
            Activation::Softmax,
        ];
        let mut r = rng(77);
        for (k, &hidden_act) in acts.iter().enumerate() {
            let n = 2;
            let mut net = random_net(
                &[4, 6, 2 * n],
                &[hidden_act, Activation::Identity],
                100 + k as u64,
            );
            let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            let d = vec![1u8, 0u8];
            let rv = vec![0.6, 0.0];
            let sample = TrainSample { x: &x, d: &d, r: &rv };
            let err = grad_check(&mut net, &sample, 1.0, 1e-5).unwrap();
            assert!(err < 1e-4, "activation {hidden_act:?}: rel err {err}");
        }
    }

    #[test]
    fn grad_check_excludes_frozen_layers() {
        let mut net = random_net(&[3, 5, 4], &[Activation::Relu, Activation::Identity], 9);
        net.layers[0].trainable = false;
        let full: usize = net.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum();
        assert!(net.trainable_param_count() < full);
        let x = [0.1, 0.2, 0.3];
        let d = [1u8, 0u8];
        let rv = [0.5, 0.0];
        let sample = TrainSample { x: &x, d: &d, r: &rv };
        let err = grad_check(&mut net, &sample, 1.0, 1e-5).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut net = random_net(&[2, 2], &[Activation::Identity], 10);
        let before = net.param_bytes();
        let mut adam = AdamState::new(&net, 1e-3);
        let grads: Gradients = vec![Some(LayerGrad {
            d_weights: vec![0.0; 4],
            d_biases: vec![0.0; 2],
        })];
        adam.step(&mut net, &grads);
        assert_eq!(net.param_bytes(), before);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut net = random_net(&[1, 1], &[Activation::Identity], 11);
        let w0 = net.layers[0].weights[0];
        let mut adam = AdamState::new(&net, 1e-3);
        let grads: Gradients = vec![Some(LayerGrad {
            d_weights: vec![0.25],
            d_biases: vec![-0.5],
        })];
        adam.step(&mut net, &grads);
        // Bias-corrected first step is ~ -lr * sign(grad) up to eps.
        let moved = net.layers[0].weights[0] - w0;
        assert!((moved + 1e-3).abs() < 1e-6, "moved {moved}");
        assert!((net.layers[0].biases[0] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn frozen_layers_bit_identical_through_training() {
        let mut net = random_net(
            &[4, 8, 6, 4],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            12,
        );
        net.layers[0].trainable = false;
        net.layers[1].trainable = false;
        let frozen_bytes: Vec<u8> = net.layers[0]
            .param_bytes()
            .into_iter()
            .chain(net.layers[1].param_bytes())
            .collect();
        let mut r = rng(13);
        let data: Vec<(Vec<f64>, Vec<u8>, Vec<f64>)> = (0..64)
            .map(|_| {
                (
                    (0..4).map(|_| r.gen_range(0.0..1.0)).collect(),
                    vec![r.gen_range(0..2) as u8, r.gen_range(0..2) as u8],
                    vec![r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)],
                )
            })
            .collect();
        let samples: Vec<TrainSample> = data
            .iter()
            .map(|(x, d, rv)| TrainSample { x, d, r: rv })
            .collect();
        train(
            &mut net,
            &samples,
            &TrainHyper {
                epochs: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let after: Vec<u8> = net.layers[0]
            .param_bytes()
            .into_iter()
            .chain(net.layers[1].param_bytes())
            .collect();
        assert_eq!(frozen_bytes, after);
    }

    #[test]
    fn training_is_deterministic() {
        let build = || {
            random_net(
                &[4, 8, 4],
                &[Activation::Relu, Activation::Identity],
                21,
            )
        };
        let mut r = rng(22);
        let data: Vec<(Vec<f64>, Vec<u8>, Vec<f64>)> = (0..100)
            .map(|_| {
                (
                    (0..4).map(|_| r.gen_range(0.0..1.0)).collect(),
                    vec![r.gen_range(0..2) as u8, r.gen_range(0..2) as u8],
                    vec![r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)],
                )
            })
            .collect();
        let samples: Vec<TrainSample> = data
            .iter()
            .map(|(x, d, rv)| TrainSample { x, d, r: rv })
            .collect();
        let hyper = TrainHyper {
            epochs: 3,
            shuffle_seed: 4,
            ..Default::default()
        };
        let mut a = build();
        let mut b = build();
        let la = train(&mut a, &samples, &hyper).unwrap();
        let lb = train(&mut b, &samples, &hyper).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.param_bytes(), b.param_bytes());
    }

    #[test]
    fn serialization_round_trip_bit_exact() {
        let mut net = random_net(
            &[5, 7, 4],
            &[Activation::Sigmoid, Activation::Identity],
            31,
        );
        net.layers[0].trainable = false;
        let mut buf = Vec::new();
        write_network(&net, &mut buf).unwrap();
        let back = read_network(buf.as_slice()).unwrap();
        assert_eq!(net, back);
        assert_eq!(net.param_bytes(), back.param_bytes());
    }

    #[test]
    fn read_rejects_truncated_file() {
        let net = random_net(&[3, 2], &[Activation::Identity], 32);
        let mut buf = Vec::new();
        write_network(&net, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_network(buf.as_slice()).is_err());
    }
}
