//! Degradation and granularity routing over the cluster tree.
//!
//! Routing happens in two stages. An estimation head refines the raw
//! degradation descriptor `e` into `u = e + mlp(e)` and predicts a positive
//! scalar `e_gran = softplus(mlp(e)) + 1e-6`, trained as the variance of its
//! own estimate (see [`loss_dg`]) so it grows when the descriptor is hard to
//! pin down. The degradation gate then scores the finest-level clusters from
//! `u`, and the granularity gate picks a tree level from `e_gran` alone:
//! confident estimates can afford a fine, specialized expert, uncertain ones
//! retreat to a coarser, more general one.
//!
//! Both gates use noisy gating during training: `softmax(Wx + z *
//! softplus(Nx))` with standard-normal `z`, reduced to `softmax(Wx)` at
//! evaluation. Gate weights start at zero, so routing begins uniform with
//! exploration noise of `softplus(0)`.
//!
//! The training loss combines four terms: L1 of the gate-weighted mixture of
//! chain experts against the clean target, cross-entropy of the degradation
//! gate against the true finest cluster, the variance-scaled estimation loss
//! (weight 0.1), and a load-balance penalty (weight 0.01) on the batch's
//! per-level gate mass. Experts stay frozen throughout, and every step
//! re-jitters the input descriptors so the heads train against estimation
//! error instead of memorizing the recorded descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterError, GranularityTree};
use crate::experts::{ExpertError, ExpertRegistry};
use crate::image::{Image, ImageError};
use crate::nn::{l1_loss, sigmoid, softmax, softplus, AdamState, Mlp, MlpCache, NnError};
use crate::seeds::derive_seed2;

/// Hidden layer widths of the estimation heads.
pub const HEAD_HIDDEN: [usize; 3] = [64, 64, 48];
/// Additive floor keeping `e_gran` strictly positive.
pub const GRAN_FLOOR: f64 = 1e-6;

const TAG_ROUTER_INIT: u64 = 0x5EED_0009;
const TAG_ROUTER_BATCH: u64 = 0x5EED_000A;
const TAG_ROUTER_NOISE: u64 = 0x5EED_000B;
const TAG_ROUTER_JITTER: u64 = 0x5EED_000F;

#[derive(Debug, thiserror::Error)]
pub enum RouterError {
    #[error("descriptor length {got}, expected {want}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("tree has {finest} finest nodes over {depth} levels; router expects {n_finest} over {n_levels}")]
    TreeShapeMismatch { finest: usize, depth: usize, n_finest: usize, n_levels: usize },
    #[error("mask length {got}, expected {want}")]
    MaskLength { want: usize, got: usize },
    #[error("instruction mask allows no clusters")]
    EmptyMask,
    #[error("finest label {0} out of range")]
    BadLabel(usize),
    #[error("no training samples")]
    NoSamples,
    #[error("noise shape does not match the batch")]
    NoiseShape,
    #[error("share matrix is ragged, empty, or kind index out of range")]
    BadShares,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Gate behavior: deterministic at evaluation, perturbed by explicit
/// standard-normal draws during training (explicit so training and gradient
/// checks can freeze the same noise).
pub enum GateMode<'a> {
    Eval,
    Train { noise: &'a [f64] },
}

/// The trainable routing stack: two estimation heads and two noisy gates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterBundle {
    pub head_u: Mlp,
    pub head_g: Mlp,
    pub gate_d_w: Mlp,
    pub gate_d_n: Mlp,
    pub gate_g_w: Mlp,
    pub gate_g_n: Mlp,
}

impl RouterBundle {
    /// Fresh bundle: estimation heads with zeroed final layers (so `u = e`
    /// and `e_gran = softplus(0) + 1e-6` initially) and all-zero gates
    /// (uniform routing).
    pub fn new(dr_dim: usize, n_finest: usize, n_levels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, TAG_ROUTER_INIT, 0));
        let mut u_dims = vec![dr_dim];
        u_dims.extend_from_slice(&HEAD_HIDDEN);
        u_dims.push(dr_dim);
        let mut g_dims = vec![dr_dim];
        g_dims.extend_from_slice(&HEAD_HIDDEN);
        g_dims.push(1);
        let mut head_u = Mlp::new(&u_dims, &mut rng);
        head_u.zero_layer(u_dims.len() - 2);
        let mut head_g = Mlp::new(&g_dims, &mut rng);
        head_g.zero_layer(g_dims.len() - 2);
        RouterBundle {
            head_u,
            head_g,
            gate_d_w: Mlp::zeros(&[dr_dim, n_finest]),
            gate_d_n: Mlp::zeros(&[dr_dim, n_finest]),
            gate_g_w: Mlp::zeros(&[1, n_levels]),
            gate_g_n: Mlp::zeros(&[1, n_levels]),
        }
    }

    pub fn dr_dim(&self) -> usize {
        self.head_u.in_dim()
    }

    pub fn n_finest(&self) -> usize {
        self.gate_d_w.out_dim()
    }

    pub fn n_levels(&self) -> usize {
        self.gate_g_w.out_dim()
    }

    /// Refined estimate and its predicted spread: `(u, e_gran)`.
    pub fn estimate(&self, e: &[f64]) -> Result<(Vec<f64>, f64), RouterError> {
        if e.len() != self.dr_dim() {
            return Err(RouterError::DimensionMismatch { want: self.dr_dim(), got: e.len() });
        }
        let residual = self.head_u.forward(e);
        let u = e.iter().zip(&residual).map(|(a, b)| a + b).collect();
        let graw = self.head_g.forward(e)[0];
        Ok((u, softplus(graw) + GRAN_FLOOR))
    }

    /// Finest-cluster probabilities from the refined estimate.
    pub fn gate_d(&self, u: &[f64], mode: &GateMode) -> Vec<f64> {
        gate_probs(&self.gate_d_w, &self.gate_d_n, u, mode)
    }

    /// Level probabilities from the granularity scalar.
    pub fn gate_g(&self, e_gran: f64, mode: &GateMode) -> Vec<f64> {
        gate_probs(&self.gate_g_w, &self.gate_g_n, &[e_gran], mode)
    }

    /// Full evaluation-mode routing decision. `mask`, when given, restricts
    /// the finest clusters the degradation gate may pick (probabilities are
    /// renormalized over the allowed set).
    pub fn route(
        &self,
        tree: &GranularityTree,
        e: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<RouteDecision, RouterError> {
        let depth = tree.depth();
        let finest = tree.level_sizes[depth - 1];
        if finest != self.n_finest() || depth != self.n_levels() {
            return Err(RouterError::TreeShapeMismatch {
                finest,
                depth,
                n_finest: self.n_finest(),
                n_levels: self.n_levels(),
            });
        }
        let (u, e_gran) = self.estimate(e)?;
        let mut gate_d = self.gate_d(&u, &GateMode::Eval);
        if let Some(mask) = mask {
            if mask.len() != gate_d.len() {
                return Err(RouterError::MaskLength { want: gate_d.len(), got: mask.len() });
            }
            if !mask.iter().any(|m| *m) {
                return Err(RouterError::EmptyMask);
            }
            for (p, allowed) in gate_d.iter_mut().zip(mask) {
                if !allowed {
                    *p = 0.0;
                }
            }
            let total: f64 = gate_d.iter().sum();
            for p in &mut gate_d {
                *p /= total;
            }
        }
        let finest_index = argmax_tie_lowest(&gate_d);
        let finest_node = tree.level_offset(depth - 1) + finest_index;
        let chain = tree.ancestors(finest_node)?;
        let gate_g = self.gate_g(e_gran, &GateMode::Eval);
        let level = argmax_tie_lowest(&gate_g);
        let node = chain[level];
        Ok(RouteDecision { u, e_gran, gate_d, gate_g, finest_index, finest_node, chain, level, node })
    }

    /// Flat parameters: heads first, then gates, each layer weights-then-bias.
    pub fn params_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in self.parts() {
            out.extend(m.params_vec());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parts().iter().map(|m| m.param_count()).sum()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let counts: Vec<usize> = self.parts().iter().map(|m| m.param_count()).collect();
        let mut at = 0;
        for (m, count) in self.parts_mut().into_iter().zip(counts) {
            m.set_params(&flat[at..at + count]);
            at += count;
        }
    }

    fn parts(&self) -> [&Mlp; 6] {
        [&self.head_u, &self.head_g, &self.gate_d_w, &self.gate_d_n, &self.gate_g_w, &self.gate_g_n]
    }

    fn parts_mut(&mut self) -> [&mut Mlp; 6] {
        [
            &mut self.head_u,
            &mut self.head_g,
            &mut self.gate_d_w,
            &mut self.gate_d_n,
            &mut self.gate_g_w,
            &mut self.gate_g_n,
        ]
    }
}

/// Everything the eval pipeline needs from one routing pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteDecision {
    pub u: Vec<f64>,
    pub e_gran: f64,
    /// Post-mask, renormalized finest-cluster probabilities.
    pub gate_d: Vec<f64>,
    pub gate_g: Vec<f64>,
    /// 0-based index within the finest level.
    pub finest_index: usize,
    pub finest_node: usize,
    /// Node ids from the root down to the chosen finest node.
    pub chain: Vec<usize>,
    pub level: usize,
    /// The selected expert's node: `chain[level]`.
    pub node: usize,
}

fn gate_probs(w: &Mlp, n: &Mlp, x: &[f64], mode: &GateMode) -> Vec<f64> {
    let base = w.forward(x);
    match mode {
        GateMode::Eval => softmax(&base),
        GateMode::Train { noise } => {
            debug_assert_eq!(noise.len(), base.len());
            let spread = n.forward(x);
            let logits: Vec<f64> = base
                .iter()
                .zip(spread.iter().zip(*noise))
                .map(|(b, (s, z))| b + z * softplus(*s))
                .collect();
            softmax(&logits)
        }
    }
}

/// Lowest index wins ties, so uniform distributions route coarse-first and
/// results never depend on float ordering quirks.
pub fn argmax_tie_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Variance-scaled estimation loss
/// `||u - e||^2 / (2 g) + ln(g) / 2` with its gradients `(du, dg)`. Minimized
/// over `g` alone it sits at `g = ||u - e||^2`, so the granularity scalar
/// learns to track the squared estimation error.
pub fn loss_dg(u: &[f64], e: &[f64], g: f64) -> (f64, Vec<f64>, f64) {
    debug_assert_eq!(u.len(), e.len());
    let se: f64 = u.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
    let loss = se / (2.0 * g) + 0.5 * g.ln();
    let du = u.iter().zip(e).map(|(a, b)| (a - b) / g).collect();
    let dg = -se / (2.0 * g * g) + 1.0 / (2.0 * g);
    (loss, du, dg)
}

/// Load-balance penalty: the population coefficient of variation of the
/// per-level gate mass accumulated over a batch. Zero iff levels share the
/// mass equally; the gradient at the all-equal point is defined as zero.
pub fn loss_load(sums: &[f64]) -> (f64, Vec<f64>) {
    let n = sums.len() as f64;
    let mu = sums.iter().sum::<f64>() / n;
    let var = sums.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.max(0.0).sqrt();
    if sigma == 0.0 || mu <= 0.0 {
        return (0.0, vec![0.0; sums.len()]);
    }
    let cv = sigma / mu;
    let grads = sums
        .iter()
        .map(|s| (s - mu) / (n * sigma * mu) - sigma / (n * mu * mu))
        .collect();
    (cv, grads)
}

/// Gradient through `p = softmax(logits)` given `dL/dp`.
fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

/// Allowed finest clusters for an instructed task. A cluster qualifies when
/// every requested kind appears in at least half its members
/// (`shares[cluster][kind] >= 0.5`). If no cluster qualifies, the one with
/// the highest mean share over the requested kinds is allowed alone.
pub fn instruction_mask(shares: &[Vec<f64>], kinds: &[usize]) -> Result<Vec<bool>, RouterError> {
    if shares.is_empty() || kinds.is_empty() {
        return Err(RouterError::BadShares);
    }
    let width = shares[0].len();
    if shares.iter().any(|row| row.len() != width) || kinds.iter().any(|k| *k >= width) {
        return Err(RouterError::BadShares);
    }
    let mut mask: Vec<bool> = shares
        .iter()
        .map(|row| kinds.iter().all(|k| row[*k] >= 0.5))
        .collect();
    if !mask.iter().any(|m| *m) {
        let scores: Vec<f64> = shares
            .iter()
            .map(|row| kinds.iter().map(|k| row[*k]).sum::<f64>() / kinds.len() as f64)
            .collect();
        mask[argmax_tie_lowest(&scores)] = true;
    }
    Ok(mask)
}

/// One supervised routing example.
#[derive(Debug, Clone)]
pub struct RouterSample {
    /// Standardized degradation descriptor of the degraded image.
    pub descriptor: Vec<f64>,
    /// True finest cluster, as a 0-based index within the finest level.
    pub finest_label: usize,
    pub degraded: Image,
    pub clean: Image,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Fixed Adam learning rate.
    pub lr: f64,
    /// Cross-entropy weight.
    pub w_ce: f64,
    /// Estimation-loss weight.
    pub w_dg: f64,
    /// Load-balance weight.
    pub w_load: f64,
    /// Scale of the fresh Gaussian jitter added to each descriptor every
    /// training step, as a fraction of the corpus' within-cluster RMS spread
    /// around the finest centers. See [`train_routers`].
    pub dr_noise_frac: f64,
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        RouterTrainConfig {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            w_ce: 1.0,
            w_dg: 0.1,
            w_load: 0.01,
            dr_noise_frac: 0.5,
            seed: 0,
        }
    }
}

/// Unweighted values of the four loss terms plus their weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mix_l1: f64,
    pub ce: f64,
    pub dg: f64,
    pub load: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterTrainReport {
    pub loss_curve: Vec<LossParts>,
    /// Eval-mode fraction of training samples routed to their true finest
    /// cluster after training.
    pub train_accuracy: f64,
}

/// Per-sample standard-normal draws for both gates.
pub struct BatchNoise {
    pub gate_d: Vec<Vec<f64>>,
    pub gate_g: Vec<Vec<f64>>,
}

/// Draws one batch worth of gate noise.
pub fn draw_batch_noise(
    n_finest: usize,
    n_levels: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> BatchNoise {
    let mut draw = |len: usize| -> Vec<Vec<f64>> {
        (0..batch)
            .map(|_| (0..len).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    };
    BatchNoise { gate_d: draw(n_finest), gate_g: draw(n_levels) }
}

fn empty_grads(m: &Mlp) -> Vec<(Vec<f64>, Vec<f64>)> {
    m.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect()
}

fn add_grads(acc: &mut [(Vec<f64>, Vec<f64>)], fresh: &crate::nn::MlpGrads) {
    for ((aw, ab), (fw, fb)) in acc.iter_mut().zip(&fresh.layers) {
        for (a, f) in aw.iter_mut().zip(fw) {
            *a += f;
        }
        for (a, f) in ab.iter_mut().zip(fb) {
            *a += f;
        }
    }
}

fn flatten_grads(acc: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in acc {
        out.extend_from_slice(w);
        out.extend_from_slice(b);
    }
    out
}

struct GateGCtx {
    cache_g: MlpCache,
    cache_gw: MlpCache,
    cache_gn: MlpCache,
    graw: f64,
    nraw_g: Vec<f64>,
    z_g: Vec<f64>,
    p_g: Vec<f64>,
    dp_mix: Vec<f64>,
    dg_est: f64,
}

/// Computes the batch loss and the gradient of its weighted total with
/// respect to the bundle's flat parameters. Noise is passed in explicitly so
/// the same computation serves training and finite-difference verification.
pub fn batch_loss_grads(
    bundle: &RouterBundle,
    tree: &GranularityTree,
    registry: &ExpertRegistry,
    samples: &[&RouterSample],
    noise: &BatchNoise,
    cfg: &RouterTrainConfig,
) -> Result<(LossParts, Vec<f64>), RouterError> {
    if samples.is_empty() {
        return Err(RouterError::NoSamples);
    }
    if noise.gate_d.len() != samples.len() || noise.gate_g.len() != samples.len() {
        return Err(RouterError::NoiseShape);
    }
    let depth = tree.depth();
    let n_finest = bundle.n_finest();
    if tree.level_sizes[depth - 1] != n_finest || depth != bundle.n_levels() {
        return Err(RouterError::TreeShapeMismatch {
            finest: tree.level_sizes[depth - 1],
            depth,
            n_finest,
            n_levels: bundle.n_levels(),
        });
    }
    let nb = samples.len() as f64;
    let finest_offset = tree.level_offset(depth - 1);

    let mut acc_head_u = empty_grads(&bundle.head_u);
    let mut acc_head_g = empty_grads(&bundle.head_g);
    let mut acc_gdw = empty_grads(&bundle.gate_d_w);
    let mut acc_gdn = empty_grads(&bundle.gate_d_n);
    let mut acc_ggw = empty_grads(&bundle.gate_g_w);
    let mut acc_ggn = empty_grads(&bundle.gate_g_n);

    let mut parts = LossParts { total: 0.0, mix_l1: 0.0, ce: 0.0, dg: 0.0, load: 0.0 };
    let mut level_sums = vec![0.0; depth];
    let mut ctxs: Vec<GateGCtx> = Vec::with_capacity(samples.len());

    for (si, sample) in samples.iter().enumerate() {
        let e = &sample.descriptor;
        if e.len() != bundle.dr_dim() {
            return Err(RouterError::DimensionMismatch { want: bundle.dr_dim(), got: e.len() });
        }
        if sample.finest_label >= n_finest {
            return Err(RouterError::BadLabel(sample.finest_label));
        }
        if noise.gate_d[si].len() != n_finest || noise.gate_g[si].len() != depth {
            return Err(RouterError::NoiseShape);
        }

        let (res_u, cache_u) = bundle.head_u.forward_cached(e);
        let u: Vec<f64> = e.iter().zip(&res_u).map(|(a, b)| a + b).collect();
        let (graw_v, cache_g) = bundle.head_g.forward_cached(e);
        let graw = graw_v[0];
        let g = softplus(graw) + GRAN_FLOOR;

        let (l_dg, du_est, dg_est) = loss_dg(&u, e, g);
        parts.dg += l_dg / nb;

        // Degradation gate: noisy cross-entropy against the true cluster.
        let (base_d, cache_dw) = bundle.gate_d_w.forward_cached(&u);
        let (nraw_d, cache_dn) = bundle.gate_d_n.forward_cached(&u);
        let z_d = &noise.gate_d[si];
        let logits_d: Vec<f64> = base_d
            .iter()
            .zip(nraw_d.iter().zip(z_d))
            .map(|(b, (s, z))| b + z * softplus(*s))
            .collect();
        let p_d = softmax(&logits_d);
        parts.ce += -p_d[sample.finest_label].ln() / nb;

        let mut dlogits_d = p_d;
        dlogits_d[sample.finest_label] -= 1.0;
        for v in &mut dlogits_d {
            *v *= cfg.w_ce / nb;
        }
        let (g_dw, du_base) = bundle.gate_d_w.backward(&cache_dw, &dlogits_d);
        add_grads(&mut acc_gdw, &g_dw);
        let dn_out: Vec<f64> = dlogits_d
            .iter()
            .zip(z_d.iter().zip(&nraw_d))
            .map(|(dl, (z, s))| dl * z * sigmoid(*s))
            .collect();
        let (g_dn, du_noise) = bundle.gate_d_n.backward(&cache_dn, &dn_out);
        add_grads(&mut acc_gdn, &g_dn);

        let du_total: Vec<f64> = du_est
            .iter()
            .zip(du_base.iter().zip(&du_noise))
            .map(|(est, (a, b))| est * cfg.w_dg / nb + a + b)
            .collect();
        let (g_hu, _) = bundle.head_u.backward(&cache_u, &du_total);
        add_grads(&mut acc_head_u, &g_hu);

        // Granularity gate: noisy probabilities feed the chain mixture.
        let (base_g, cache_gw) = bundle.gate_g_w.forward_cached(&[g]);
        let (nraw_g, cache_gn) = bundle.gate_g_n.forward_cached(&[g]);
        let z_g = noise.gate_g[si].clone();
        let logits_g: Vec<f64> = base_g
            .iter()
            .zip(nraw_g.iter().zip(&z_g))
            .map(|(b, (s, z))| b + z * softplus(*s))
            .collect();
        let p_g = softmax(&logits_g);
        for (acc, p) in level_sums.iter_mut().zip(&p_g) {
            *acc += p;
        }

        // Soft mixture over the true label's expert chain, experts frozen.
        let chain = tree.ancestors(finest_offset + sample.finest_label)?;
        let outs: Vec<Vec<f64>> = chain
            .iter()
            .map(|id| {
                registry.expert_for(*id).map(|x| x.restore(&sample.degraded).planar().to_vec())
            })
            .collect::<Result<_, _>>()?;
        let px = outs[0].len();
        let mut mix = vec![0.0; px];
        for (p, out) in p_g.iter().zip(&outs) {
            for (m, o) in mix.iter_mut().zip(out) {
                *m += p * o;
            }
        }
        let (l_mix, dmix) = l1_loss(&mix, sample.clean.planar());
        parts.mix_l1 += l_mix / nb;
        let dp_mix: Vec<f64> = outs
            .iter()
            .map(|out| dmix.iter().zip(out).map(|(d, o)| d * o).sum::<f64>() / nb)
            .collect();

        ctxs.push(GateGCtx { cache_g, cache_gw, cache_gn, graw, nraw_g, z_g, p_g, dp_mix, dg_est });
    }

    // The load term couples samples through the batch-level sums, so the
    // granularity-side backward pass runs after they are known.
    let (l_load, dsums) = loss_load(&level_sums);
    parts.load = l_load;

    for ctx in &ctxs {
        let dp_total: Vec<f64> = ctx
            .dp_mix
            .iter()
            .zip(&dsums)
            .map(|(mix, load)| mix + load * cfg.w_load)
            .collect();
        let dlogits_g = softmax_backward(&ctx.p_g, &dp_total);
        let (g_gw, dx_base) = bundle.gate_g_w.backward(&ctx.cache_gw, &dlogits_g);
        add_grads(&mut acc_ggw, &g_gw);
        let dn_out: Vec<f64> = dlogits_g
            .iter()
            .zip(ctx.z_g.iter().zip(&ctx.nraw_g))
            .map(|(dl, (z, s))| dl * z * sigmoid(*s))
            .collect();
        let (g_gn, dx_noise) = bundle.gate_g_n.backward(&ctx.cache_gn, &dn_out);
        add_grads(&mut acc_ggn, &g_gn);

        let dg_total = ctx.dg_est * cfg.w_dg / nb + dx_base[0] + dx_noise[0];
        let dgraw = dg_total * sigmoid(ctx.graw);
        let (g_hg, _) = bundle.head_g.backward(&ctx.cache_g, &[dgraw]);
        add_grads(&mut acc_head_g, &g_hg);
    }

    parts.total =
        parts.mix_l1 + cfg.w_ce * parts.ce + cfg.w_dg * parts.dg + cfg.w_load * parts.load;

    let mut flat = Vec::with_capacity(bundle.param_count());
    flat.extend(flatten_grads(&acc_head_u));
    flat.extend(flatten_grads(&acc_head_g));
    flat.extend(flatten_grads(&acc_gdw));
    flat.extend(flatten_grads(&acc_gdn));
    flat.extend(flatten_grads(&acc_ggw));
    flat.extend(flatten_grads(&acc_ggn));
    Ok((parts, flat))
}

/// Trains both routers with Adam at a fixed learning rate; experts and the
/// tree stay frozen. Deterministic per config.
/// Root-mean-square per-coordinate spread of the descriptors around their
/// own finest-cluster centers: the natural unit of estimation error.
fn within_cluster_rms(tree: &GranularityTree, samples: &[RouterSample]) -> f64 {
    let offset = tree.level_offset(tree.depth() - 1);
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in samples {
        if let Ok(node) = tree.node(offset + sample.finest_label) {
            for (d, c) in sample.descriptor.iter().zip(&node.center) {
                total += (d - c) * (d - c);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        (total / count as f64).sqrt()
    }
}

pub fn train_routers(
    bundle: &mut RouterBundle,
    tree: &GranularityTree,
    registry: &ExpertRegistry,
    samples: &[RouterSample],
    cfg: &RouterTrainConfig,
) -> Result<RouterTrainReport, RouterError> {
    if samples.is_empty() {
        return Err(RouterError::NoSamples);
    }
    let mut params = bundle.params_vec();
    let mut adam = AdamState::new(params.len());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed2(cfg.seed, TAG_ROUTER_BATCH, 0));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed2(cfg.seed, TAG_ROUTER_NOISE, 0));
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(derive_seed2(cfg.seed, TAG_ROUTER_JITTER, 0));
    // Each step sees descriptors perturbed by fresh Gaussian jitter. The
    // recorded descriptor of an image is only one draw of an estimate a
    // deployed router would recompute, so the heads must not be allowed to
    // fit it exactly: without jitter the estimation loss drives e_gran to
    // its floor for every sample and the granularity gate goes blind.
    let jitter = cfg.dr_noise_frac * within_cluster_rms(tree, samples);
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<RouterSample> = (0..cfg.batch)
            .map(|_| {
                let i = rand::Rng::gen_range(&mut batch_rng, 0..samples.len());
                let mut sample = samples[i].clone();
                for v in &mut sample.descriptor {
                    let z: f64 = StandardNormal.sample(&mut jitter_rng);
                    *v += jitter * z;
                }
                sample
            })
            .collect();
        let refs: Vec<&RouterSample> = batch.iter().collect();
        let noise =
            draw_batch_noise(bundle.n_finest(), bundle.n_levels(), cfg.batch, &mut noise_rng);
        let (parts, grads) = batch_loss_grads(bundle, tree, registry, &refs, &noise, cfg)?;
        adam.step(&mut params, &grads, cfg.lr);
        bundle.set_params(&params);
        loss_curve.push(parts);
    }
    let mut correct = 0usize;
    for sample in samples {
        let decision = bundle.route(tree, &sample.descriptor, None)?;
        if decision.finest_index == sample.finest_label {
            correct += 1;
        }
    }
    Ok(RouterTrainReport { loss_curve, train_accuracy: correct as f64 / samples.len() as f64 })
}
