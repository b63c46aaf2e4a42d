//! Shape inference, parameter initialisation and the forward pass.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::arch::{LayerKind, NetworkSpec};
use crate::kernels::{self, ConvParams, DenseParams, KernelError, KernelMode, PoolParams};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

pub const CONV_KERNEL: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape conflict at stage {stage}: annotated {annotated:?}, computed {computed:?}")]
    Conflict {
        stage: usize,
        annotated: Vec<usize>,
        computed: Vec<usize>,
    },
    #[error("stage {stage} ({kind:?}) cannot take input of dims {dims:?}")]
    Rank {
        stage: usize,
        kind: LayerKind,
        dims: Vec<usize>,
    },
    #[error("input dims {0:?} are invalid")]
    BadInput(Vec<usize>),
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("missing weight tensor {0:?}")]
    MissingWeight(String),
    #[error("weight tensor {name:?} has dims {actual:?}, expected {expected:?}")]
    WeightDims {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input dims {actual:?} do not match network input {expected:?}")]
    InputDims {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("network produces {outputs} outputs but has {labels} class labels")]
    HeadMismatch { outputs: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    /// Same-padded stride-1 conv followed by ReLU.
    Conv { c_in: usize, c_out: usize },
    MaxPool(PoolParams),
    Flatten,
    Dense { n_in: usize, n_out: usize },
}

/// One expanded layer with its resolved shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub stage: usize,
    pub op: LayerOp,
    pub input_dims: Vec<usize>,
    pub output_dims: Vec<usize>,
}

impl LayerPlan {
    pub fn kernels_name(&self) -> String {
        format!("{}/kernels", self.name)
    }
    pub fn weights_name(&self) -> String {
        format!("{}/weights", self.name)
    }
    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    /// `(name, dims, fan_in)` for every parameter tensor of this layer.
    pub fn params(&self) -> Vec<(String, Vec<usize>, usize)> {
        match self.op {
            LayerOp::Conv { c_in, c_out } => vec![
                (
                    self.kernels_name(),
                    vec![CONV_KERNEL, CONV_KERNEL, c_in, c_out],
                    CONV_KERNEL * CONV_KERNEL * c_in,
                ),
                (self.bias_name(), vec![c_out], 0),
            ],
            LayerOp::Dense { n_in, n_out } => vec![
                (self.weights_name(), vec![n_in, n_out], n_in),
                (self.bias_name(), vec![n_out], 0),
            ],
            LayerOp::MaxPool(_) | LayerOp::Flatten => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, d, _)| d.iter().product::<usize>()).sum()
    }

    /// Multiply-accumulates for one forward pass of this layer.
    pub fn macs(&self) -> u64 {
        match self.op {
            LayerOp::Conv { c_in, c_out } => {
                let (h, w) = (self.output_dims[0] as u64, self.output_dims[1] as u64);
                h * w * (CONV_KERNEL * CONV_KERNEL) as u64 * c_in as u64 * c_out as u64
            }
            LayerOp::Dense { n_in, n_out } => n_in as u64 * n_out as u64,
            LayerOp::MaxPool(_) | LayerOp::Flatten => 0,
        }
    }
}

/// Propagates shapes stage by stage, checking each against its annotation.
/// Returns one shape per stage (after its repeats).
pub fn infer_shapes(spec: &NetworkSpec) -> Result<Vec<Vec<usize>>, ShapeError> {
    let plan = plan(spec)?;
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(spec.layers.len());
    for layer in &plan {
        if out.len() < layer.stage {
            out.push(layer.output_dims.clone());
        } else {
            out[layer.stage - 1] = layer.output_dims.clone();
        }
    }
    Ok(out)
}

/// Expands repeats into a layer list with names `<kind><block>_<layer>`.
pub fn plan(spec: &NetworkSpec) -> Result<Vec<LayerPlan>, ShapeError> {
    if spec.input_dims.is_empty() || spec.input_dims.len() > 3 || spec.input_dims.contains(&0) {
        return Err(ShapeError::BadInput(spec.input_dims.clone()));
    }
    let mut blocks = [0usize; 4];
    let mut current = spec.input_dims.clone();
    let mut layers = Vec::with_capacity(spec.expanded_len());
    for (si, stage) in spec.layers.iter().enumerate() {
        let stage_no = si + 1;
        let kind_idx = stage.kind as usize;
        blocks[kind_idx] += 1;
        let rank_err = |dims: &[usize]| ShapeError::Rank {
            stage: stage_no,
            kind: stage.kind,
            dims: dims.to_vec(),
        };
        for li in 0..stage.repeat {
            let (op, computed) = match (stage.kind, current.as_slice()) {
                (LayerKind::Conv, &[h, w, c]) => {
                    let c_out = stage.width();
                    (LayerOp::Conv { c_in: c, c_out }, vec![h, w, c_out])
                }
                (LayerKind::MaxPool, &[h, w, c]) => {
                    let p = PoolParams::default();
                    let (oh, ow) = kernels::pool_output_dims(h, w, &p).ok_or_else(|| rank_err(&current))?;
                    (LayerOp::MaxPool(p), vec![oh, ow, c])
                }
                (LayerKind::Flatten, &[h, w, c]) => (LayerOp::Flatten, vec![h * w * c]),
                (LayerKind::FullConnection, &[n]) => {
                    let n_out = stage.width();
                    (LayerOp::Dense { n_in: n, n_out }, vec![n_out])
                }
                _ => return Err(rank_err(&current)),
            };
            if computed != stage.annotated_dims {
                return Err(ShapeError::Conflict {
                    stage: stage_no,
                    annotated: stage.annotated_dims.clone(),
                    computed,
                });
            }
            layers.push(LayerPlan {
                name: format!("{}{}_{}", stage.kind.prefix(), blocks[kind_idx], li + 1),
                stage: stage_no,
                op,
                input_dims: current.clone(),
                output_dims: computed.clone(),
            });
            current = computed;
        }
    }
    Ok(layers)
}

pub fn param_count(spec: &NetworkSpec) -> Result<usize, ShapeError> {
    Ok(plan(spec)?.iter().map(LayerPlan::param_count).sum())
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases, drawn in
/// layer order from a ChaCha8 stream seeded with `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<WeightStore, ShapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for layer in plan(spec)? {
        for (name, dims, fan_in) in layer.params() {
            let n: usize = dims.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            store
                .insert(name, Tensor::from_raw_unchecked(dims, data))
                .expect("plan names are unique");
        }
    }
    Ok(store)
}

/// Zero-valued store with every parameter of `spec`.
pub fn zero_params(spec: &NetworkSpec) -> Result<WeightStore, ShapeError> {
    let mut store = WeightStore::new();
    for layer in plan(spec)? {
        for (name, dims, _) in layer.params() {
            store.insert(name, Tensor::zeros(&dims)).expect("plan names are unique");
        }
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub label: String,
    pub label_index: usize,
    pub probabilities: Vec<f32>,
    #[serde(skip)]
    pub latency: Duration,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A [`NetworkSpec`] with its layer plan resolved.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerPlan>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self, ShapeError> {
        let layers = plan(&spec)?;
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerPlan] {
        &self.layers
    }

    pub fn output_dims(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.output_dims.as_slice())
            .unwrap_or(&self.spec.input_dims)
    }

    /// Checks that `weights` holds every parameter with the right dims.
    pub fn check_weights(&self, weights: &WeightStore) -> Result<(), NetworkError> {
        for layer in &self.layers {
            for (name, dims, _) in layer.params() {
                let t = weights
                    .get(&name)
                    .ok_or_else(|| NetworkError::MissingWeight(name.clone()))?;
                if t.dims() != dims.as_slice() {
                    return Err(NetworkError::WeightDims {
                        name,
                        expected: dims,
                        actual: t.dims().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Runs a single layer, ReLU included for conv layers.
    pub fn run_layer(
        &self,
        layer: &LayerPlan,
        weights: &WeightStore,
        input: &Tensor,
        mode: KernelMode,
    ) -> Result<Tensor, NetworkError> {
        let get = |name: String| weights.get(&name).ok_or(NetworkError::MissingWeight(name));
        Ok(match layer.op {
            LayerOp::Conv { .. } => {
                let k = get(layer.kernels_name())?;
                let b = get(layer.bias_name())?;
                let mut out = kernels::conv2d(input, &ConvParams::same(k, b), mode)?;
                kernels::relu_in_place(&mut out);
                out
            }
            LayerOp::MaxPool(p) => kernels::maxpool2d(input, &p, mode)?,
            LayerOp::Flatten => kernels::flatten(input)?,
            LayerOp::Dense { .. } => {
                let w = get(layer.weights_name())?;
                let b = get(layer.bias_name())?;
                kernels::dense(input, &DenseParams { weights: w, bias: b }, mode)?
            }
        })
    }

    pub fn forward_logits(&self, weights: &WeightStore, image: &Tensor, mode: KernelMode) -> Result<Tensor, NetworkError> {
        if image.dims() != self.spec.input_dims.as_slice() {
            return Err(NetworkError::InputDims {
                expected: self.spec.input_dims.clone(),
                actual: image.dims().to_vec(),
            });
        }
        self.check_weights(weights)?;
        let mut x = image.clone();
        for layer in &self.layers {
            x = self.run_layer(layer, weights, &x, mode)?;
        }
        Ok(x)
    }

    pub fn forward(&self, weights: &WeightStore, image: &Tensor, mode: KernelMode) -> Result<Prediction, NetworkError> {
        let start = Instant::now();
        let logits = self.forward_logits(weights, image, mode)?;
        let labels = &self.spec.class_labels;
        if logits.rank() != 1 || logits.len() != labels.len() {
            return Err(NetworkError::HeadMismatch {
                outputs: logits.len(),
                labels: labels.len(),
            });
        }
        let probs = kernels::softmax(&logits)?;
        let idx = argmax(probs.data());
        Ok(Prediction {
            label: labels[idx].clone(),
            label_index: idx,
            probabilities: probs.into_data(),
            latency: start.elapsed(),
        })
    }
}

pub fn forward(
    spec: &NetworkSpec,
    weights: &WeightStore,
    image: &Tensor,
    mode: KernelMode,
) -> Result<Prediction, NetworkError> {
    Network::new(spec.clone())?.forward(weights, image, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{parse_arch, DEFAULT_ARCH};

    /// Per-layer counting written directly from the channel progression.
    fn default_param_oracle() -> usize {
        let chans = [(1, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256), (256, 512)]
            .into_iter()
            .chain(std::iter::repeat_n((512, 512), 5));
        chans.map(|(i, o)| 3 * 3 * i * o + o).sum::<usize>() + (8192 * 2 + 2)
    }

    #[test]
    fn default_arch_shapes() {
        let spec = parse_arch(DEFAULT_ARCH).unwrap();
        let shapes = infer_shapes(&spec).unwrap();
        let expected: Vec<Vec<usize>> = vec![
            vec![150, 150, 64],
            vec![75, 75, 64],
            vec![75, 75, 128],
            vec![37, 37, 128],
            vec![37, 37, 256],
            vec![18, 18, 256],
            vec![18, 18, 512],
            vec![9, 9, 512],
            vec![9, 9, 512],
            vec![4, 4, 512],
            vec![8192],
            vec![2],
        ];
        assert_eq!(shapes, expected);
    }

    #[test]
    fn input_224_conflicts_at_stage_one() {
        let spec = parse_arch(DEFAULT_ARCH).unwrap().with_input_dims(vec![224, 224, 1]);
        assert_eq!(
            infer_shapes(&spec).unwrap_err(),
            ShapeError::Conflict {
                stage: 1,
                annotated: vec![150, 150, 64],
                computed: vec![224, 224, 64],
            }
        );
    }

    #[test]
    fn flatten_only() {
        let spec = parse_arch("F(4)").unwrap().with_input_dims(vec![2, 2, 1]);
        assert_eq!(infer_shapes(&spec).unwrap(), vec![vec![4]]);
    }

    #[test]
    fn missing_flatten_is_rank_error() {
        let spec = parse_arch("C(4x4x2) - FC(2)").unwrap();
        assert!(matches!(plan(&spec), Err(ShapeError::Rank { stage: 2, .. })));
    }

    #[test]
    fn param_counts() {
        let spec = parse_arch(DEFAULT_ARCH).unwrap();
        assert_eq!(default_param_oracle(), 14_729_922);
        assert_eq!(param_count(&spec).unwrap(), 14_729_922);
        let fc = parse_arch("FC(2)").unwrap().with_input_dims(vec![8192]);
        assert_eq!(param_count(&fc).unwrap(), 16_386);
        let empty = NetworkSpec::new(vec![150, 150, 1], vec![]);
        assert_eq!(param_count(&empty).unwrap(), 0);
    }

    #[test]
    fn layer_names() {
        let spec = parse_arch(DEFAULT_ARCH).unwrap();
        let names: Vec<String> = plan(&spec).unwrap().into_iter().map(|l| l.name).collect();
        assert_eq!(&names[..4], &["conv1_1", "conv1_2", "pool1_1", "conv2_1"]);
        assert_eq!(names[16], "conv5_3");
        assert_eq!(&names[17..], &["pool5_1", "flatten1_1", "fc1_1"]);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = parse_arch("2xC(8x8x4) - MP(4x4x4) - F(64) - FC(2)").unwrap();
        let a = init_params(&spec, 11).unwrap();
        let b = init_params(&spec, 11).unwrap();
        let c = init_params(&spec, 12).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        for (name, t) in a.iter() {
            if name.ends_with("/bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_default_store_has_28_tensors() {
        let spec = parse_arch(DEFAULT_ARCH).unwrap();
        let store = init_params(&spec, 0).unwrap();
        assert_eq!(store.len(), 28);
        assert_eq!(store.scalar_count(), 14_729_922);
        assert_eq!(store.get("conv1_1/kernels").unwrap().dims(), &[3, 3, 1, 64]);
        assert_eq!(store.get("fc1_1/weights").unwrap().dims(), &[8192, 2]);
    }

    #[test]
    fn he_normal_scale() {
        let spec = parse_arch("2xC(16x16x64) - MP(8x8x64) - F(4096) - FC(2)").unwrap();
        let store = init_params(&spec, 5).unwrap();
        let k = store.get("conv1_2/kernels").unwrap().data();
        let var = k.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / k.len() as f64;
        let expected = 2.0 / (9.0 * 64.0);
        assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
    }

    #[test]
    fn zero_weights_give_uniform_covid_tie() {
        let spec = parse_arch("C(8x8x4) - MP(4x4x4) - F(64) - FC(2)").unwrap();
        let net = Network::new(spec.clone()).unwrap();
        let w = zero_params(&spec).unwrap();
        let img = Tensor::filled(&[8, 8, 1], 0.7);
        for mode in [KernelMode::Reference, KernelMode::Fast] {
            let p = net.forward(&w, &img, mode).unwrap();
            assert_eq!(p.probabilities, vec![0.5, 0.5]);
            assert_eq!(p.label, "covid");
            assert_eq!(p.label_index, 0);
        }
    }

    #[test]
    fn forward_errors() {
        let spec = parse_arch("C(8x8x4) - MP(4x4x4) - F(64) - FC(2)").unwrap();
        let net = Network::new(spec.clone()).unwrap();
        let w = init_params(&spec, 1).unwrap();
        assert!(matches!(
            net.forward(&w, &Tensor::zeros(&[8, 7, 1]), KernelMode::Fast),
            Err(NetworkError::InputDims { .. })
        ));
        let mut partial = WeightStore::new();
        for (n, t) in w.iter().filter(|(n, _)| *n != "fc1_1/bias") {
            partial.insert(n, t.clone()).unwrap();
        }
        match net.forward(&partial, &Tensor::zeros(&[8, 8, 1]), KernelMode::Fast) {
            Err(NetworkError::MissingWeight(name)) => assert_eq!(name, "fc1_1/bias"),
            other => panic!("unexpected {other:?}"),
        }
        let flat = Network::new(parse_arch("F(4)").unwrap().with_input_dims(vec![2, 2, 1])).unwrap();
        assert!(matches!(
            flat.forward(&WeightStore::new(), &Tensor::zeros(&[2, 2, 1]), KernelMode::Fast),
            Err(NetworkError::HeadMismatch { outputs: 4, labels: 2 })
        ));
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.8]), 1);
        assert_eq!(argmax(&[0.3, 0.4, 0.4]), 1);
    }
}
