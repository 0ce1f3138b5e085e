//! 3x3 convolutional stacks over planar feature maps.
//!
//! Spatial size is preserved by one pixel of reflected padding per layer.
//! The inner loops are written as fused nine-tap row passes; they carry the
//! bulk of training time, so keep them allocation-free and branch-free.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::xavier_bound;
use crate::filters::reflect_index;

/// One 3x3 convolution, weights stored `[out_ch][in_ch][3][3]` row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub relu: bool,
}

/// 3x3 convolutional stack; hidden layers apply ReLU, the last is linear.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvNet {
    pub layers: Vec<ConvLayer>,
}

/// Per-layer inputs and pre-activations from [`ConvNet::forward_cached`].
pub struct ConvCache {
    h: usize,
    w: usize,
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

/// Gradients in the same shapes as the layers.
pub struct ConvGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ConvNet {
    /// Xavier-uniform stack over a channel chain, e.g. `[3, 16, 16, 3]`.
    pub fn new(channels: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(channels.len() >= 2);
        let layers = channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                let (in_ch, out_ch) = (c[0], c[1]);
                let bound = xavier_bound(in_ch * 9, out_ch * 9);
                ConvLayer {
                    in_ch,
                    out_ch,
                    w: (0..in_ch * out_ch * 9).map(|_| rng.gen_range(-bound..bound)).collect(),
                    b: vec![0.0; out_ch],
                    relu: i + 2 < channels.len(),
                }
            })
            .collect();
        Self { layers }
    }

    /// Zeroes one layer's weights and biases (zeroing the last layer makes
    /// the whole stack output zero regardless of earlier layers).
    pub fn zero_layer(&mut self, idx: usize) {
        let l = &mut self.layers[idx];
        l.w.iter_mut().for_each(|v| *v = 0.0);
        l.b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn in_ch(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.layers[self.layers.len() - 1].out_ch
    }

    /// Runs the stack over `in_ch` planes of `h * w` samples.
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut pre = conv3_forward(layer, &cur, h, w);
            if layer.relu {
                for v in &mut pre {
                    *v = v.max(0.0);
                }
            }
            cur = pre;
        }
        cur
    }

    pub fn forward_cached(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, ConvCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let pre = conv3_forward(layer, &cur, h, w);
            inputs.push(std::mem::replace(&mut cur, pre.clone()));
            preacts.push(pre);
            if layer.relu {
                for v in &mut cur {
                    *v = v.max(0.0);
                }
            }
        }
        (cur, ConvCache { h, w, inputs, preacts })
    }

    /// Backpropagates `dout` (gradient at the stack output), returning
    /// parameter gradients and the gradient at the input planes.
    pub fn backward(&self, cache: &ConvCache, dout: &[f64]) -> (ConvGrads, Vec<f64>) {
        let (h, w) = (cache.h, cache.w);
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
            let (dw, db) = &mut grads[l];
            let padded = pad1_reflect(&cache.inputs[l], layer.in_ch, h, w);
            conv3_weight_grads(layer, &padded, &delta, h, w, dw, db);
            delta = conv3_input_grads(layer, &delta, h, w);
        }
        (ConvGrads { layers: grads }, delta)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Smallest |pre-activation| across ReLU layers of a cached pass; see
    /// [`crate::nn::Mlp::relu_margin`].
    pub fn relu_margin(&self, cache: &ConvCache) -> f64 {
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

    /// Flattens gradients in the same order as [`ConvNet::params_vec`].
    pub fn grads_vec(&self, grads: &ConvGrads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (dw, db) in &grads.layers {
            out.extend_from_slice(dw);
            out.extend_from_slice(db);
        }
        out
    }
}

/// Reflect-pads each plane by one pixel; output planes are `(h+2) x (w+2)`.
fn pad1_reflect(planes: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; ch * ph * pw];
    for c in 0..ch {
        let src = &planes[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for py in 0..ph {
            let sy = reflect_index(py as isize - 1, h);
            let srow = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            drow[0] = srow[0];
            drow[1..=w].copy_from_slice(srow);
            drow[pw - 1] = srow[w - 1];
        }
    }
    out
}

fn conv3_forward(layer: &ConvLayer, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    debug_assert_eq!(input.len(), layer.in_ch * h * w);
    let (ph, pw) = (h + 2, w + 2);
    let padded = pad1_reflect(input, layer.in_ch, h, w);
    let mut out = vec![0.0; layer.out_ch * h * w];
    for o in 0..layer.out_ch {
        let ob = &mut out[o * h * w..(o + 1) * h * w];
        ob.fill(layer.b[o]);
        for i in 0..layer.in_ch {
            let pc = &padded[i * ph * pw..(i + 1) * ph * pw];
            let k = &layer.w[(o * layer.in_ch + i) * 9..(o * layer.in_ch + i + 1) * 9];
            fused_tap9(pc, pw, k, ob, h, w);
        }
    }
    out
}

/// `ob[y][x] += sum_{dy,dx} k[dy][dx] * pc[y+dy][x+dx]` over a padded plane.
#[inline]
fn fused_tap9(pc: &[f64], pw: usize, k: &[f64], ob: &mut [f64], h: usize, w: usize) {
    let (k00, k01, k02, k10, k11, k12, k20, k21, k22) =
        (k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]);
    for y in 0..h {
        let r0 = &pc[y * pw..y * pw + pw];
        let r1 = &pc[(y + 1) * pw..(y + 1) * pw + pw];
        let r2 = &pc[(y + 2) * pw..(y + 2) * pw + pw];
        let orow = &mut ob[y * w..(y + 1) * w];
        for x in 0..w {
            orow[x] += k00 * r0[x] + k01 * r0[x + 1] + k02 * r0[x + 2]
                + k10 * r1[x] + k11 * r1[x + 1] + k12 * r1[x + 2]
                + k20 * r2[x] + k21 * r2[x + 1] + k22 * r2[x + 2];
        }
    }
}

fn conv3_weight_grads(
    layer: &ConvLayer,
    padded_in: &[f64],
    delta: &[f64],
    h: usize,
    w: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (ph, pw) = (h + 2, w + 2);
    debug_assert_eq!(padded_in.len(), layer.in_ch * ph * pw);
    for o in 0..layer.out_ch {
        let up = &delta[o * h * w..(o + 1) * h * w];
        db[o] += up.iter().sum::<f64>();
        for i in 0..layer.in_ch {
            let pc = &padded_in[i * ph * pw..(i + 1) * ph * pw];
            let mut acc = [0.0; 9];
            for y in 0..h {
                let urow = &up[y * w..(y + 1) * w];
                let r0 = &pc[y * pw..y * pw + pw];
                let r1 = &pc[(y + 1) * pw..(y + 1) * pw + pw];
                let r2 = &pc[(y + 2) * pw..(y + 2) * pw + pw];
                for x in 0..w {
                    let u = urow[x];
                    acc[0] += u * r0[x];
                    acc[1] += u * r0[x + 1];
                    acc[2] += u * r0[x + 2];
                    acc[3] += u * r1[x];
                    acc[4] += u * r1[x + 1];
                    acc[5] += u * r1[x + 2];
                    acc[6] += u * r2[x];
                    acc[7] += u * r2[x + 1];
                    acc[8] += u * r2[x + 2];
                }
            }
            let dk = &mut dw[(o * layer.in_ch + i) * 9..(o * layer.in_ch + i + 1) * 9];
            for (dkv, a) in dk.iter_mut().zip(&acc) {
                *dkv += a;
            }
        }
    }
}

/// Gradient with respect to the layer input: a full correlation of `delta`
/// with the flipped kernels, followed by folding the padded ring back through
/// the reflection map.
fn conv3_input_grads(layer: &ConvLayer, delta: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let (zh, zw) = (h + 4, w + 4);
    // Zero-pad the upstream gradient by two on each side.
    let mut zp = vec![0.0; layer.out_ch * zh * zw];
    for o in 0..layer.out_ch {
        for y in 0..h {
            let src = &delta[o * h * w + y * w..o * h * w + (y + 1) * w];
            let dst = &mut zp[o * zh * zw + (y + 2) * zw + 2..o * zh * zw + (y + 2) * zw + 2 + w];
            dst.copy_from_slice(src);
        }
    }
    let mut dpad = vec![0.0; layer.in_ch * ph * pw];
    let mut flipped = [0.0; 9];
    for i in 0..layer.in_ch {
        let dp = &mut dpad[i * ph * pw..(i + 1) * ph * pw];
        for o in 0..layer.out_ch {
            let k = &layer.w[(o * layer.in_ch + i) * 9..(o * layer.in_ch + i + 1) * 9];
            for t in 0..9 {
                flipped[t] = k[8 - t];
            }
            fused_tap9(&zp[o * zh * zw..(o + 1) * zh * zw], zw, &flipped, dp, ph, pw);
        }
    }
    // Fold the padded gradient back into the unpadded plane.
    let mut dx = vec![0.0; layer.in_ch * h * w];
    for i in 0..layer.in_ch {
        let dp = &dpad[i * ph * pw..(i + 1) * ph * pw];
        let dst = &mut dx[i * h * w..(i + 1) * h * w];
        for py in 0..ph {
            let sy = reflect_index(py as isize - 1, h);
            for px in 0..pw {
                let sx = reflect_index(px as isize - 1, w);
                dst[sy * w + sx] += dp[py * pw + px];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_kernel_passes_planes_through() {
        let mut net = ConvNet::new(&[1, 1], &mut ChaCha8Rng::seed_from_u64(0));
        net.layers[0].w = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        net.layers[0].b = vec![0.0];
        let input: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        assert_eq!(net.forward(&input, 8, 8), input);
    }

    #[test]
    fn zeroed_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = ConvNet::new(&[3, 8, 3], &mut rng);
        net.zero_layer(1);
        let input: Vec<f64> = (0..3 * 64).map(|i| (i % 17) as f64 / 17.0).collect();
        assert_eq!(net.forward(&input, 8, 8), vec![0.0; 3 * 64]);
    }

    #[test]
    fn constant_input_blur_kernel_stays_constant() {
        let mut net = ConvNet::new(&[1, 1], &mut ChaCha8Rng::seed_from_u64(0));
        net.layers[0].w = vec![1.0 / 9.0; 9];
        net.layers[0].b = vec![0.0];
        let out = net.forward(&vec![0.63; 100], 10, 10);
        for v in out {
            assert!((v - 0.63).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip_preserves_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = ConvNet::new(&[2, 4, 2], &mut rng);
        let mut copy = ConvNet::new(&[2, 4, 2], &mut ChaCha8Rng::seed_from_u64(10));
        copy.set_params(&net.params_vec());
        let input: Vec<f64> = (0..2 * 81).map(|i| ((i * 31) % 97) as f64 / 97.0).collect();
        assert_eq!(net.forward(&input, 9, 9), copy.forward(&input, 9, 9));
    }

    #[test]
    fn cached_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ConvNet::new(&[3, 6, 3], &mut rng);
        let input: Vec<f64> = (0..3 * 144).map(|i| ((i * 7) % 50) as f64 / 50.0).collect();
        let plain = net.forward(&input, 12, 12);
        let (cached, _) = net.forward_cached(&input, 12, 12);
        assert_eq!(plain, cached);
    }
}
