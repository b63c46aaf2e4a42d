//! Cross-entropy training with SGD and momentum, the conv freeze mask used
//! for transfer learning, a finite-difference gradient check and metrics.

mod backprop;
mod metrics;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::NetworkSpec;
use crate::dataset::{self, DatasetError, DatasetManifest, Split};
use crate::imaging::{ImageError, Preprocess};
use crate::kernels::KernelMode;
use crate::network::{LayerOp, LayerPlan, Network, NetworkError};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

use backprop::{LayerParams, PROB_FLOOR};

pub use backprop::Real;
pub use metrics::Metrics;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("split {0} has no samples")]
    EmptySplit(Split),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{images} images but {labels} labels")]
    BatchLength { images: usize, labels: usize },
    #[error("label index {0} out of range")]
    LabelOutOfRange(usize),
    #[error("tensor name sets differ: {0}")]
    NameMismatch(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Freeze every conv tensor and train only the dense head.
    pub transfer_mode: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 8,
            epochs: 10,
            transfer_mode: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size 0".into()));
        }
        Ok(())
    }
}

/// Gradients or velocities, named like the [`WeightStore`] they pair with.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(WeightStore);

impl GradientSet {
    pub fn zeros_like(weights: &WeightStore) -> Self {
        let mut s = WeightStore::new();
        for (name, t) in weights.iter() {
            s.insert(name, Tensor::zeros(t.dims())).expect("names already unique");
        }
        Self(s)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.names()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_store(self) -> WeightStore {
        self.0
    }

    fn from_layers(layers: &[LayerPlan], grads: Vec<LayerParams<f32>>) -> Self {
        let mut s = WeightStore::new();
        for (layer, g) in layers.iter().zip(grads) {
            let mut parts = [g.main, g.bias].into_iter();
            for (name, dims, _) in layer.params() {
                let data = parts.next().expect("two tensors per parametrised layer");
                s.insert(name, Tensor::from_raw_unchecked(dims, data))
                    .expect("plan names are unique");
            }
        }
        Self(s)
    }
}

/// One labelled network input.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(probabilities: &Tensor, label: usize) -> Result<f32, TrainError> {
    let p = probabilities.data();
    if label >= p.len() {
        return Err(TrainError::LabelOutOfRange(label));
    }
    Ok(-(p[label] as f64).max(PROB_FLOOR).ln() as f32)
}

fn check_batch(net: &Network, images: &[Tensor], labels: &[usize]) -> Result<(), TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if images.len() != labels.len() {
        return Err(TrainError::BatchLength {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let n_classes = net.spec().class_labels.len();
    if net.output_dims() != [n_classes] {
        return Err(NetworkError::HeadMismatch {
            outputs: net.output_dims().iter().product(),
            labels: n_classes,
        }
        .into());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(TrainError::LabelOutOfRange(bad));
    }
    for img in images {
        if img.dims() != net.spec().input_dims.as_slice() {
            return Err(NetworkError::InputDims {
                expected: net.spec().input_dims.clone(),
                actual: img.dims().to_vec(),
            }
            .into());
        }
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its gradient for every parameter,
/// frozen or not.
pub fn backward(
    spec: &NetworkSpec,
    weights: &WeightStore,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(f32, GradientSet), TrainError> {
    let net = Network::new(spec.clone()).map_err(NetworkError::from)?;
    let (loss, grads, _) = backward_net(&net, weights, images, labels)?;
    Ok((loss, grads))
}

fn backward_net(
    net: &Network,
    weights: &WeightStore,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(f32, GradientSet, usize), TrainError> {
    check_batch(net, images, labels)?;
    net.check_weights(weights)?;
    let params = backprop::gather::<f32>(net.layers(), weights)?;
    let inputs: Vec<Vec<f32>> = images.iter().map(|t| t.data().to_vec()).collect();
    let r = backprop::batch_gradients(net.layers(), &params, &inputs, labels);
    Ok((r.mean_loss, GradientSet::from_layers(net.layers(), r.grads), r.correct))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckOptions {
    /// Parameters to compare; every parameter is checked when the network
    /// has no more than this many.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { samples: 200, seed: 0 }
    }
}

/// Analytic `f64` gradients by tensor name, handed to the tamper hook of
/// [`grad_check_with`].
pub type NamedGradients = Vec<(String, Vec<f64>)>;

/// Max relative error between analytic gradients and central differences,
/// both computed in `f64`.
pub fn grad_check(spec: &NetworkSpec, weights: &WeightStore, image: &Tensor, label: usize, epsilon: f64) -> Result<f64, TrainError> {
    grad_check_with(spec, weights, image, label, epsilon, GradCheckOptions::default(), |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradients before
/// comparison, for exercising the check itself.
pub fn grad_check_with(
    spec: &NetworkSpec,
    weights: &WeightStore,
    image: &Tensor,
    label: usize,
    epsilon: f64,
    options: GradCheckOptions,
    tamper: impl FnOnce(&mut NamedGradients),
) -> Result<f64, TrainError> {
    let net = Network::new(spec.clone()).map_err(NetworkError::from)?;
    check_batch(&net, std::slice::from_ref(image), &[label])?;
    net.check_weights(weights)?;
    let layers = net.layers();
    let params = backprop::gather::<f64>(layers, weights)?;
    let input: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let r = backprop::batch_gradients(layers, &params, std::slice::from_ref(&input), &[label]);

    // Flatten to (layer, part, name) so the hook sees tensors by name.
    let mut slots: Vec<(usize, usize)> = Vec::new();
    let mut named: NamedGradients = Vec::new();
    for (li, (layer, g)) in layers.iter().zip(r.grads).enumerate() {
        let mut parts = [g.main, g.bias].into_iter();
        for (part, (name, _, _)) in layer.params().into_iter().enumerate() {
            slots.push((li, part));
            named.push((name, parts.next().expect("two tensors per layer")));
        }
    }
    tamper(&mut named);

    let coords: Vec<(usize, usize)> = named
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, g))| (0..g.len()).map(move |i| (ti, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= options.samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rand::seq::index::sample(&mut rng, coords.len(), options.samples)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (ti, i) in chosen {
        let (li, part) = slots[ti];
        let orig = *param_mut(&mut probe, li, part, i);
        *param_mut(&mut probe, li, part, i) = orig + epsilon;
        let plus = backprop::sample_loss(layers, &probe, &input, label);
        *param_mut(&mut probe, li, part, i) = orig - epsilon;
        let minus = backprop::sample_loss(layers, &probe, &input, label);
        *param_mut(&mut probe, li, part, i) = orig;
        let fd = (plus - minus) / (2.0 * epsilon);
        let analytic = named[ti].1[i];
        let denom = analytic.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((analytic - fd).abs() / denom);
    }
    Ok(worst)
}

fn param_mut(p: &mut [LayerParams<f64>], layer: usize, part: usize, i: usize) -> &mut f64 {
    let lp = &mut p[layer];
    if part == 0 {
        &mut lp.main[i]
    } else {
        &mut lp.bias[i]
    }
}

fn same_names(a: impl Iterator<Item = String>, b: impl Iterator<Item = String>, what: &str) -> Result<(), TrainError> {
    let a: BTreeSet<String> = a.collect();
    let b: BTreeSet<String> = b.collect();
    if a != b {
        let diff: Vec<&String> = a.symmetric_difference(&b).collect();
        return Err(TrainError::NameMismatch(format!("{what}: {diff:?}")));
    }
    Ok(())
}

/// `v <- momentum * v - lr * g; w <- w + v` for every tensor outside
/// `freeze`. Frozen tensors and their velocities are left untouched.
pub fn sgd_step(
    weights: &mut WeightStore,
    grads: &GradientSet,
    velocity: &mut GradientSet,
    config: &TrainConfig,
    freeze: &BTreeSet<String>,
) -> Result<(), TrainError> {
    same_names(weights.names().map(String::from), grads.names().map(String::from), "weights vs gradients")?;
    same_names(grads.names().map(String::from), velocity.names().map(String::from), "gradients vs velocity")?;
    for (name, g) in grads.iter() {
        let w = weights.get(name).expect("checked");
        let v = velocity.get(name).expect("checked");
        if w.dims() != g.dims() || v.dims() != g.dims() {
            return Err(TrainError::NameMismatch(format!(
                "{name}: weight {:?}, gradient {:?}, velocity {:?}",
                w.dims(),
                g.dims(),
                v.dims()
            )));
        }
    }
    let (mu, lr) = (config.momentum, config.learning_rate);
    for (name, v) in velocity.iter_mut() {
        if freeze.contains(name) {
            continue;
        }
        let g = grads.get(name).expect("checked");
        let w = weights.get_mut(name).expect("checked");
        for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv - lr * gv;
            *wv += *vv;
        }
    }
    Ok(())
}

/// Names of every conv kernel and bias tensor in `net`.
pub fn conv_tensor_names(net: &Network) -> BTreeSet<String> {
    net.layers()
        .iter()
        .filter(|l| matches!(l.op, LayerOp::Conv { .. }))
        .flat_map(|l| [l.kernels_name(), l.bias_name()])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: WeightStore,
    pub history: Vec<EpochRecord>,
    /// Validation accuracy before the first update.
    pub initial_val_acc: f64,
}

/// Accuracy and confusion of `weights` on in-memory samples.
pub fn evaluate_samples(net: &Network, weights: &WeightStore, samples: &[Sample], mode: KernelMode) -> Result<Metrics, TrainError> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let p = net.forward(weights, &s.image, mode)?;
        pairs.push((s.label, p.label_index));
    }
    Ok(Metrics::from_pairs(pairs))
}

/// Epoch loop over in-memory samples. `on_epoch` sees each history record
/// as soon as it is produced.
pub fn train_samples(
    net: &Network,
    mut weights: WeightStore,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    net.check_weights(&weights)?;
    let mut freeze: BTreeSet<String> = weights.frozen_names().clone();
    if config.transfer_mode {
        freeze.extend(conv_tensor_names(net));
    }
    let initial_val_acc = evaluate_samples(net, &weights, val, KernelMode::Fast)?.accuracy;
    let mut velocity = GradientSet::zeros_like(&weights);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let order = dataset::shuffled_indices(train.len(), config.seed, epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| train[i].image.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let (loss, grads, ok) = backward_net(net, &weights, &images, &labels)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += ok;
            sgd_step(&mut weights, &grads, &mut velocity, config, &freeze)?;
        }
        let val_acc = evaluate_samples(net, &weights, val, KernelMode::Fast)?.accuracy;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    for name in &freeze {
        weights.set_frozen(name, true);
    }
    Ok(TrainOutcome {
        weights,
        history,
        initial_val_acc,
    })
}

/// Decodes and preprocesses every frame of `split` to the network input.
pub fn load_split(net: &Network, manifest: &DatasetManifest, split: Split, preprocess: &Preprocess) -> Result<Vec<Sample>, TrainError> {
    let dims = &net.spec().input_dims;
    let pre = match dims.as_slice() {
        &[h, w, 1] => Preprocess {
            target_height: h,
            target_width: w,
            ..*preprocess
        },
        _ => {
            return Err(NetworkError::InputDims {
                expected: dims.clone(),
                actual: vec![0, 0, 1],
            }
            .into())
        }
    };
    let records = manifest.split_records(split);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let img = dataset::read_pgm(&r.path)?;
        out.push(Sample {
            image: pre.apply(&img)?,
            label: r.label.index(),
        });
    }
    Ok(out)
}

pub fn train(
    spec: &NetworkSpec,
    weights: WeightStore,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let net = Network::new(spec.clone()).map_err(NetworkError::from)?;
    let pre = Preprocess::default();
    let train = load_split(&net, manifest, Split::Train, &pre)?;
    let val = load_split(&net, manifest, Split::Val, &pre)?;
    train_samples(&net, weights, &train, &val, config, on_epoch)
}

pub fn evaluate(
    spec: &NetworkSpec,
    weights: &WeightStore,
    manifest: &DatasetManifest,
    split: Split,
    mode: KernelMode,
) -> Result<Metrics, TrainError> {
    let net = Network::new(spec.clone()).map_err(NetworkError::from)?;
    let samples = load_split(&net, manifest, split, &Preprocess::default())?;
    if samples.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    evaluate_samples(&net, weights, &samples, mode)
}
