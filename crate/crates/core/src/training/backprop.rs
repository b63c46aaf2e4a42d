//! Reverse-mode gradients through the layer plan, generic over the float
//! width so the gradient check can run entirely in `f64`.

use num_traits::{Float, NumCast};

use crate::network::{LayerOp, LayerPlan, NetworkError, CONV_KERNEL};
use crate::weights::WeightStore;

pub(crate) const PROB_FLOOR: f64 = 1e-12;

pub trait Real: Float + std::ops::AddAssign + std::iter::Sum + Send + Sync + 'static {}
impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cast<T: Real, S: NumCast>(v: S) -> T {
    T::from(v).expect("finite numeric cast")
}

/// Parameters of one layer: kernels/weights and bias, empty for
/// pool and flatten.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerParams<T> {
    pub main: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            main: vec![T::zero(); other.main.len()],
            bias: vec![T::zero(); other.bias.len()],
        }
    }
}

pub(crate) fn gather<T: Real>(layers: &[LayerPlan], weights: &WeightStore) -> Result<Vec<LayerParams<T>>, NetworkError> {
    let fetch = |name: String| -> Result<Vec<T>, NetworkError> {
        weights
            .get(&name)
            .map(|t| t.data().iter().map(|&v| cast(v)).collect())
            .ok_or(NetworkError::MissingWeight(name))
    };
    layers
        .iter()
        .map(|l| match l.op {
            LayerOp::Conv { .. } => Ok(LayerParams {
                main: fetch(l.kernels_name())?,
                bias: fetch(l.bias_name())?,
            }),
            LayerOp::Dense { .. } => Ok(LayerParams {
                main: fetch(l.weights_name())?,
                bias: fetch(l.bias_name())?,
            }),
            _ => Ok(LayerParams {
                main: vec![],
                bias: vec![],
            }),
        })
        .collect()
}

pub(crate) enum Cache<T> {
    Conv { input: Vec<T>, pre_act: Vec<T> },
    Pool { argmax: Vec<usize>, input_len: usize },
    Flatten,
    Dense { input: Vec<T> },
}

fn conv_forward<T: Real>(x: &[T], dims: &[usize], p: &LayerParams<T>, c_out: usize) -> Vec<T> {
    let (h, w, c_in) = (dims[0], dims[1], dims[2]);
    let k = CONV_KERNEL;
    let pad = (k / 2) as isize;
    let mut z = vec![T::zero(); h * w * c_out];
    for oh in 0..h {
        for ow in 0..w {
            for o in 0..c_out {
                let mut acc = T::zero();
                for dh in 0..k {
                    let ih = oh as isize + dh as isize - pad;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for dw in 0..k {
                        let iw = ow as isize + dw as isize - pad;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let xb = (ih as usize * w + iw as usize) * c_in;
                        let kb = (dh * k + dw) * c_in;
                        for i in 0..c_in {
                            acc += x[xb + i] * p.main[(kb + i) * c_out + o];
                        }
                    }
                }
                z[(oh * w + ow) * c_out + o] = acc + p.bias[o];
            }
        }
    }
    z
}

fn conv_backward<T: Real>(
    x: &[T],
    dims: &[usize],
    p: &LayerParams<T>,
    c_out: usize,
    dz: &[T],
    grad: &mut LayerParams<T>,
    want_dx: bool,
) -> Vec<T> {
    let (h, w, c_in) = (dims[0], dims[1], dims[2]);
    let k = CONV_KERNEL;
    let pad = (k / 2) as isize;
    let mut dx = if want_dx { vec![T::zero(); x.len()] } else { vec![] };
    for oh in 0..h {
        for ow in 0..w {
            let g = &dz[(oh * w + ow) * c_out..][..c_out];
            for (gb, &gv) in grad.bias.iter_mut().zip(g) {
                *gb += gv;
            }
            for dh in 0..k {
                let ih = oh as isize + dh as isize - pad;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for dw in 0..k {
                    let iw = ow as isize + dw as isize - pad;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let xb = (ih as usize * w + iw as usize) * c_in;
                    let kb = (dh * k + dw) * c_in;
                    for i in 0..c_in {
                        let row = (kb + i) * c_out;
                        let xv = x[xb + i];
                        let mut acc = T::zero();
                        for o in 0..c_out {
                            grad.main[row + o] += xv * g[o];
                            acc += p.main[row + o] * g[o];
                        }
                        if want_dx {
                            dx[xb + i] += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pool_forward<T: Real>(x: &[T], dims: &[usize], out_dims: &[usize], window: usize, stride: usize) -> (Vec<T>, Vec<usize>) {
    let (w, c) = (dims[1], dims[2]);
    let (oh, ow) = (out_dims[0], out_dims[1]);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let mut best_i = (y * stride * w + xo * stride) * c + ch;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ((y * stride + dy) * w + xo * stride + dx) * c + ch;
                        // Strict comparison keeps the first maximum in scan order.
                        if x[i] > x[best_i] {
                            best_i = i;
                        }
                    }
                }
                out.push(x[best_i]);
                argmax.push(best_i);
            }
        }
    }
    (out, argmax)
}

/// Forward pass recording what the backward pass needs. Returns logits.
pub(crate) fn forward_cached<T: Real>(
    layers: &[LayerPlan],
    params: &[LayerParams<T>],
    input: &[T],
) -> (Vec<T>, Vec<Cache<T>>) {
    let mut x = input.to_vec();
    let mut caches = Vec::with_capacity(layers.len());
    for (layer, p) in layers.iter().zip(params) {
        match layer.op {
            LayerOp::Conv { c_out, .. } => {
                let z = conv_forward(&x, &layer.input_dims, p, c_out);
                let a = z.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                caches.push(Cache::Conv {
                    input: std::mem::replace(&mut x, a),
                    pre_act: z,
                });
            }
            LayerOp::MaxPool(pp) => {
                let (out, argmax) = pool_forward(&x, &layer.input_dims, &layer.output_dims, pp.window, pp.stride);
                caches.push(Cache::Pool {
                    argmax,
                    input_len: x.len(),
                });
                x = out;
            }
            LayerOp::Flatten => caches.push(Cache::Flatten),
            LayerOp::Dense { n_in, n_out } => {
                let mut out = vec![T::zero(); n_out];
                for (m, o) in out.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (n, &xv) in x.iter().enumerate().take(n_in) {
                        acc += xv * p.main[n * n_out + m];
                    }
                    *o = acc + p.bias[m];
                }
                caches.push(Cache::Dense {
                    input: std::mem::replace(&mut x, out),
                });
            }
        }
    }
    (x, caches)
}

/// Accumulates parameter gradients for one sample given `d loss / d logits`.
/// The input gradient of the first layer is never formed.
pub(crate) fn backward_from<T: Real>(
    layers: &[LayerPlan],
    params: &[LayerParams<T>],
    caches: &[Cache<T>],
    dlogits: Vec<T>,
    grads: &mut [LayerParams<T>],
) {
    let mut dy = dlogits;
    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let p = &params[li];
        let want_dx = li > 0;
        dy = match (&layer.op, &caches[li]) {
            (LayerOp::Dense { n_in, n_out }, Cache::Dense { input }) => {
                let g = &mut grads[li];
                let mut dx = vec![T::zero(); *n_in];
                for n in 0..*n_in {
                    let row = n * n_out;
                    let mut acc = T::zero();
                    for m in 0..*n_out {
                        g.main[row + m] += input[n] * dy[m];
                        acc += p.main[row + m] * dy[m];
                    }
                    dx[n] = acc;
                }
                for (b, &d) in g.bias.iter_mut().zip(&dy) {
                    *b += d;
                }
                dx
            }
            (LayerOp::Flatten, Cache::Flatten) => dy,
            (LayerOp::MaxPool(_), Cache::Pool { argmax, input_len }) => {
                let mut dx = vec![T::zero(); *input_len];
                for (&i, &d) in argmax.iter().zip(&dy) {
                    dx[i] += d;
                }
                dx
            }
            (LayerOp::Conv { c_out, .. }, Cache::Conv { input, pre_act }) => {
                let dz: Vec<T> = dy
                    .iter()
                    .zip(pre_act)
                    .map(|(&d, &z)| if z > T::zero() { d } else { T::zero() })
                    .collect();
                conv_backward(input, &layer.input_dims, p, *c_out, &dz, &mut grads[li], want_dx)
            }
            _ => unreachable!("cache kind follows layer kind"),
        };
    }
}

pub(crate) fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn nll<T: Real>(probs: &[T], label: usize) -> T {
    -probs[label].max(cast(PROB_FLOOR)).ln()
}

/// Loss of one sample and whether its argmax prediction was right.
pub(crate) fn sample_loss<T: Real>(layers: &[LayerPlan], params: &[LayerParams<T>], input: &[T], label: usize) -> T {
    let (logits, _) = forward_cached(layers, params, input);
    nll(&softmax(&logits), label)
}

pub(crate) struct BatchResult<T> {
    pub mean_loss: T,
    pub correct: usize,
    pub grads: Vec<LayerParams<T>>,
}

/// Mean cross-entropy over a batch and its gradient.
pub(crate) fn batch_gradients<T: Real>(
    layers: &[LayerPlan],
    params: &[LayerParams<T>],
    inputs: &[Vec<T>],
    labels: &[usize],
) -> BatchResult<T> {
    let mut grads: Vec<LayerParams<T>> = params.iter().map(LayerParams::zeros_like).collect();
    let scale = T::one() / cast(inputs.len());
    let mut total = T::zero();
    let mut correct = 0;
    for (x, &y) in inputs.iter().zip(labels) {
        let (logits, caches) = forward_cached(layers, params, x);
        let probs = softmax(&logits);
        total += nll(&probs, y);
        let pred = (1..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        if pred == y {
            correct += 1;
        }
        let dlogits = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| (if k == y { p - T::one() } else { p }) * scale)
            .collect();
        backward_from(layers, params, &caches, dlogits, &mut grads);
    }
    BatchResult {
        mean_loss: total * scale,
        correct,
        grads,
    }
}
