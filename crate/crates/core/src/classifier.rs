//! Frame-in, prediction-out path shared by the CLI and the service.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::NetworkSpec;
use crate::imaging::{self, ImageError, ImageU8, Preprocess};
use crate::kernels::KernelMode;
use crate::network::{Network, NetworkError, Prediction};
use crate::weights::WeightStore;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Probabilities keyed by class name, as emitted on every JSON surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub covid: f64,
    pub healthy: f64,
}

impl ClassProbabilities {
    pub fn from_prediction(p: &Prediction) -> Self {
        Self {
            covid: p.probabilities[0] as f64,
            healthy: p.probabilities[1] as f64,
        }
    }
}

/// Network, weights and preprocessing, validated once and then read-only.
#[derive(Debug, Clone)]
pub struct Classifier {
    net: Network,
    weights: WeightStore,
    preprocess: Preprocess,
    mode: KernelMode,
}

impl Classifier {
    pub fn new(spec: NetworkSpec, weights: WeightStore, mode: KernelMode) -> Result<Self, NetworkError> {
        let net = Network::new(spec)?;
        net.check_weights(&weights)?;
        if net.output_dims() != [2] || net.spec().class_labels.len() != 2 {
            return Err(NetworkError::HeadMismatch {
                outputs: net.output_dims().iter().product(),
                labels: net.spec().class_labels.len(),
            });
        }
        let preprocess = match net.spec().input_dims.as_slice() {
            &[h, w, 1] => Preprocess::for_input(h, w),
            other => {
                return Err(NetworkError::InputDims {
                    expected: vec![other.first().copied().unwrap_or(0), other.get(1).copied().unwrap_or(0), 1],
                    actual: other.to_vec(),
                })
            }
        };
        Ok(Self {
            net,
            weights,
            preprocess,
            mode,
        })
    }

    pub fn with_preprocess(mut self, preprocess: Preprocess) -> Self {
        self.preprocess = Preprocess {
            target_width: self.preprocess.target_width,
            target_height: self.preprocess.target_height,
            ..preprocess
        };
        self
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn classify_image(&self, img: &ImageU8) -> Result<Prediction, ClassifyError> {
        let input = self.preprocess.apply(img)?;
        Ok(self.net.forward(&self.weights, &input, self.mode)?)
    }

    pub fn classify_pgm(&self, bytes: &[u8]) -> Result<Prediction, ClassifyError> {
        self.classify_image(&imaging::decode_pgm(bytes)?)
    }
}
