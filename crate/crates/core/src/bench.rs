//! Per-layer latency and cost report for one forward pass.
//!
//! Costs are in multiply-accumulates (1 MAC = 2 FLOP): `H*W*3*3*Cin*Cout`
//! per conv layer, `N*M` per dense layer, zero for pooling and flatten.

use std::time::Instant;

use serde::Serialize;

use crate::arch::NetworkSpec;
use crate::kernels::{im2col_scratch_bytes, KernelMode};
use crate::network::{LayerOp, LayerPlan, Network, NetworkError, CONV_KERNEL};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub macs: u64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub mode: KernelMode,
    pub iterations: usize,
    pub layers: Vec<LayerRecord>,
    pub total_macs: u64,
    pub total_mean_ms: f64,
    pub total_min_ms: f64,
    pub total_max_ms: f64,
    /// Max over layers of input + output + im2col scratch bytes.
    pub peak_activation_bytes: usize,
}

fn kind_name(op: &LayerOp) -> &'static str {
    match op {
        LayerOp::Conv { .. } => "conv",
        LayerOp::MaxPool(_) => "maxpool",
        LayerOp::Flatten => "flatten",
        LayerOp::Dense { .. } => "dense",
    }
}

fn layer_bytes(layer: &LayerPlan, mode: KernelMode) -> usize {
    let f = std::mem::size_of::<f32>();
    let io = (layer.input_dims.iter().product::<usize>() + layer.output_dims.iter().product::<usize>()) * f;
    let scratch = match (layer.op, mode) {
        (LayerOp::Conv { c_in, .. }, KernelMode::Fast) => {
            im2col_scratch_bytes(layer.input_dims[0], layer.input_dims[1], c_in, CONV_KERNEL)
        }
        _ => 0,
    };
    io + scratch
}

/// Closed-form MAC total of `spec`, independent of any timing.
pub fn total_macs(spec: &NetworkSpec) -> Result<u64, NetworkError> {
    Ok(Network::new(spec.clone())?.layers().iter().map(LayerPlan::macs).sum())
}

/// Deterministic benchmark input: a smooth pattern in `[0, 1]`.
pub fn bench_input(dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|i| 0.5 + 0.5 * ((i as f32) * 0.013).sin()).collect();
    Tensor::from_raw_unchecked(dims.to_vec(), data)
}

/// Warms up with one untimed pass, then times every layer over
/// `iterations` passes with a monotonic clock.
pub fn bench_forward(
    spec: &NetworkSpec,
    weights: &WeightStore,
    iterations: usize,
    mode: KernelMode,
) -> Result<BenchReport, NetworkError> {
    let iterations = iterations.max(1);
    let net = Network::new(spec.clone())?;
    net.check_weights(weights)?;
    let input = bench_input(&spec.input_dims);
    let layers = net.layers();

    let mut x = input.clone();
    for layer in layers {
        x = net.run_layer(layer, weights, &x, mode)?;
    }

    let mut samples = vec![Vec::with_capacity(iterations); layers.len()];
    for _ in 0..iterations {
        let mut x = input.clone();
        for (li, layer) in layers.iter().enumerate() {
            let t0 = Instant::now();
            x = net.run_layer(layer, weights, &x, mode)?;
            samples[li].push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }

    let records: Vec<LayerRecord> = layers
        .iter()
        .zip(&samples)
        .map(|(layer, ms)| LayerRecord {
            name: layer.name.clone(),
            kind: kind_name(&layer.op),
            output_shape: layer.output_dims.clone(),
            macs: layer.macs(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            min_ms: ms.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: ms.iter().copied().fold(0.0, f64::max),
        })
        .collect();
    Ok(BenchReport {
        mode,
        iterations,
        total_macs: records.iter().map(|r| r.macs).sum(),
        total_mean_ms: records.iter().map(|r| r.mean_ms).sum(),
        total_min_ms: records.iter().map(|r| r.min_ms).sum(),
        total_max_ms: records.iter().map(|r| r.max_ms).sum(),
        peak_activation_bytes: layers.iter().map(|l| layer_bytes(l, mode)).max().unwrap_or(0),
        layers: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{parse_arch, DEFAULT_ARCH};
    use crate::network::init_params;

    /// Channel progression and spatial sizes written out by hand.
    fn default_macs_oracle() -> u64 {
        let convs: [(u64, u64, u64); 13] = [
            (150, 1, 64),
            (150, 64, 64),
            (75, 64, 128),
            (75, 128, 128),
            (37, 128, 256),
            (37, 256, 256),
            (37, 256, 256),
            (18, 256, 512),
            (18, 512, 512),
            (18, 512, 512),
            (9, 512, 512),
            (9, 512, 512),
            (9, 512, 512),
        ];
        convs.iter().map(|&(s, i, o)| s * s * 9 * i * o).sum::<u64>() + 8192 * 2
    }

    #[test]
    fn default_mac_total() {
        let spec = parse_arch(DEFAULT_ARCH).unwrap();
        assert_eq!(default_macs_oracle(), 6_589_587_712);
        assert_eq!(total_macs(&spec).unwrap(), default_macs_oracle());
    }

    #[test]
    fn small_report_shape() {
        let spec = parse_arch("2xC(12x12x4) - MP(6x6x4) - F(144) - FC(2)").unwrap();
        let w = init_params(&spec, 1).unwrap();
        let r = bench_forward(&spec, &w, 3, KernelMode::Fast).unwrap();
        assert_eq!(r.layers.len(), 5);
        assert_eq!(r.layers[1].macs, 12 * 12 * 9 * 4 * 4);
        assert_eq!(r.layers[2].macs, 0);
        assert_eq!(r.layers[4].macs, 144 * 2);
        assert_eq!(r.total_macs, total_macs(&spec).unwrap());
        assert!(r.layers.iter().all(|l| l.min_ms <= l.mean_ms && l.mean_ms <= l.max_ms));
        // conv1_2: in + out = 2 * 576 floats, scratch 144 * 36 floats.
        assert_eq!(r.peak_activation_bytes, (2 * 576 + 144 * 36) * 4);
        let reference = bench_forward(&spec, &w, 1, KernelMode::Reference).unwrap();
        assert_eq!(reference.peak_activation_bytes, 2 * 576 * 4);
    }

    #[test]
    fn empty_spec_report() {
        let spec = NetworkSpec::new(vec![150, 150, 1], vec![]);
        let r = bench_forward(&spec, &WeightStore::new(), 2, KernelMode::Fast).unwrap();
        assert!(r.layers.is_empty());
        assert_eq!((r.total_macs, r.total_mean_ms, r.peak_activation_bytes), (0, 0.0, 0));
    }
}
