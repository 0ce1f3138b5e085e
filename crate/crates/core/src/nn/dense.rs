//! Fully connected stacks with explicit forward/backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::xavier_bound;

/// One dense layer, `out = act(W x + b)` with `W` stored row-major
/// `out_dim x in_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub relu: bool,
}

impl DenseLayer {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.b.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *out_v += acc;
        }
        out
    }
}

/// Dense stack; hidden layers apply ReLU, the last layer is linear.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward_cached`].
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

/// Gradients in the same shapes as the layers.
pub struct MlpGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Mlp {
    /// Xavier-uniform initialized stack over the given dimension chain,
    /// e.g. `[32, 32, 1]` builds two layers.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let (in_dim, out_dim) = (d[0], d[1]);
                let bound = xavier_bound(in_dim, out_dim);
                DenseLayer {
                    in_dim,
                    out_dim,
                    w: (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
                    b: vec![0.0; out_dim],
                    relu: i + 2 < dims.len(),
                }
            })
            .collect();
        Self { layers }
    }

    /// All-zero stack (useful as a fixed point: it maps everything to 0).
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| DenseLayer {
                in_dim: d[0],
                out_dim: d[1],
                w: vec![0.0; d[0] * d[1]],
                b: vec![0.0; d[1]],
                relu: i + 2 < dims.len(),
            })
            .collect();
        Self { layers }
    }

    /// Zeroes one layer's weights and biases (e.g. the last layer, so the
    /// stack starts as the zero map on top of useful hidden features).
    pub fn zero_layer(&mut self, idx: usize) {
        let layer = &mut self.layers[idx];
        layer.w.iter_mut().for_each(|v| *v = 0.0);
        layer.b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut pre = layer.affine(&cur);
            if layer.relu {
                for v in &mut pre {
                    *v = v.max(0.0);
                }
            }
            cur = pre;
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            inputs.push(cur.clone());
            let pre = layer.affine(&cur);
            preacts.push(pre.clone());
            cur = pre;
            if layer.relu {
                for v in &mut cur {
                    *v = v.max(0.0);
                }
            }
        }
        (cur, MlpCache { inputs, preacts })
    }

    /// Backpropagates `dout` (gradient at the stack output), returning
    /// parameter gradients and the gradient at the input.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64]) -> (MlpGrads, Vec<f64>) {
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
            .collect();
        let mut delta = dout.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                for (d, pre) in delta.iter_mut().zip(&cache.preacts[l]) {
                    if *pre <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &cache.inputs[l];
            let (dw, db) = &mut grads[l];
            for o in 0..layer.out_dim {
                db[o] += delta[o];
                let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (rv, xv) in row.iter_mut().zip(x) {
                    *rv += delta[o] * xv;
                }
            }
            let mut dx = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (dv, wv) in dx.iter_mut().zip(row) {
                    *dv += delta[o] * wv;
                }
            }
            delta = dx;
        }
        (MlpGrads { layers: grads }, delta)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Smallest |pre-activation| across ReLU layers of a cached pass.
    /// Finite-difference checks reject samples where this is tiny, since the
    /// kink makes one-sided derivatives disagree there.
    pub fn relu_margin(&self, cache: &MlpCache) -> f64 {
        let mut margin = f64::INFINITY;
        for (layer, pre) in self.layers.iter().zip(&cache.preacts) {
            if layer.relu {
                for v in pre {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    /// Flattens parameters layer by layer, weights then biases.
    pub fn params_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for l in &mut self.layers {
            let (nw, nb) = (l.w.len(), l.b.len());
            l.w.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            l.b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    /// Flattens gradients in the same order as [`Mlp::params_vec`].
    pub fn grads_vec(&self, grads: &MlpGrads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (dw, db) in &grads.layers {
            out.extend_from_slice(dw);
            out.extend_from_slice(db);
        }
        out
    }
}
