//! Per-cluster restoration experts and their trained registry.
//!
//! An expert is a small residual network: `restore(x) = clip(x + net(x))`
//! with a 3-16-16-3 channel plan and a zero-initialized final layer, so a
//! freshly created expert is exactly the identity. Training minimizes the
//! mean absolute error of the *unclipped* residual output against the clean
//! target (clipping only applies at inference, where its zero gradient can
//! do no harm), drawing seeded batches with replacement and keeping the
//! parameters that scored best on a held-out validation split.
//!
//! One expert is fitted per tree node, level by level: roots start from the
//! identity, every finer expert starts from its parent's trained weights and
//! fine-tunes on its own cluster. A child earns a private expert only when
//! fine-tuning beats the inherited weights on held-out patches by
//! [`SPECIALIZE_MARGIN`]; otherwise it aliases the parent, so nodes whose
//! members gain nothing from specialization share one expert instead of
//! differing by fit noise. Nodes with fewer members than [`MIN_MEMBERS`]
//! alias their parent without training at all.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterError, TreeBuild};
use crate::image::Image;
use crate::nn::{cosine_lr, load_weights, save_weights, AdamState, ConvNet, NnError};
use crate::seeds::derive_seed2;

/// Channel plan of every expert network.
pub const EXPERT_CHANNELS: [usize; 4] = [3, 16, 16, 3];
/// Nodes with fewer training members than this alias their parent's expert.
pub const MIN_MEMBERS: usize = 8;
/// Relative held-out improvement a fine-tuned child must show over its
/// parent's weights to keep a private expert; below it the child aliases the
/// parent. Checkpoint selection over a small validation split inflates
/// apparent gains, so a few percent of the parent's residual is demanded as
/// real evidence.
pub const SPECIALIZE_MARGIN: f64 = 0.05;

const TAG_SPLIT: u64 = 0x5EED_0005;
const TAG_BATCH: u64 = 0x5EED_0006;
const TAG_INIT: u64 = 0x5EED_0007;
const TAG_EXPERT: u64 = 0x5EED_0008;

#[derive(Debug, thiserror::Error)]
pub enum ExpertError {
    #[error("expert training needs at least 2 image pairs, got {0}")]
    TooFewPairs(usize),
    #[error("pair {0}: degraded and clean image dimensions differ")]
    PairSizeMismatch(usize),
    #[error("no expert or alias for node {0}")]
    MissingExpert(usize),
    #[error("registry json: {0}")]
    BadRegistryJson(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Residual restorer: `clip(x + net(x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertModel {
    pub net: ConvNet,
}

impl ExpertModel {
    /// A fresh expert is the identity map: the final layer starts at zero.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, TAG_INIT, 0));
        let mut net = ConvNet::new(&EXPERT_CHANNELS, &mut rng);
        net.zero_layer(EXPERT_CHANNELS.len() - 2);
        ExpertModel { net }
    }

    /// Restores an image; output is clipped to the unit range.
    pub fn restore(&self, img: &Image) -> Image {
        let (h, w) = (img.height(), img.width());
        let residual = self.net.forward(img.planar(), h, w);
        let data = img.planar().iter().zip(&residual).map(|(x, r)| x + r).collect();
        Image::from_planar(h, w, data).expect("restore preserves dimensions")
    }
}

/// Hyperparameters for one expert fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Optimizer steps (each on one mini-batch).
    pub steps: usize,
    /// Images per mini-batch, drawn with replacement from the train split.
    pub batch: usize,
    /// Peak learning rate; decays to zero on a cosine schedule.
    pub lr: f64,
    /// Validation cadence in steps.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { steps: 2000, batch: 8, lr: 3e-4, eval_every: 50, seed: 0 }
    }
}

/// Where one fit ended up.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// `(step, validation L1)` at each evaluation point.
    pub val_curve: Vec<(usize, f64)>,
    pub best_val: f64,
    pub best_step: usize,
    pub train_count: usize,
    pub val_count: usize,
}

fn mean_l1_residual(model: &ExpertModel, pairs: &[&(Image, Image)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|(deg, clean)| {
            let out = model.net.forward(deg.planar(), deg.height(), deg.width());
            out.iter()
                .zip(deg.planar())
                .zip(clean.planar())
                .map(|((r, x), t)| (x + r - t).abs())
                .sum::<f64>()
                / out.len() as f64
        })
        .sum();
    total / pairs.len() as f64
}

/// Fits one expert on `(degraded, clean)` pairs, starting from `init` when
/// given (an inherited parent network) and from the identity otherwise. A
/// seeded tenth of the pairs (at least one) is held out; the returned model
/// carries the best-validation parameters, which may be the unchanged
/// initial weights.
pub fn fit_expert(
    pairs: &[(Image, Image)],
    cfg: &FitConfig,
    init: Option<&ConvNet>,
) -> Result<(ExpertModel, FitReport), ExpertError> {
    if pairs.len() < 2 {
        return Err(ExpertError::TooFewPairs(pairs.len()));
    }
    for (i, (deg, clean)) in pairs.iter().enumerate() {
        if deg.height() != clean.height() || deg.width() != clean.width() {
            return Err(ExpertError::PairSizeMismatch(i));
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed2(cfg.seed, TAG_SPLIT, 0));
    for i in (1..order.len()).rev() {
        order.swap(i, split_rng.gen_range(0..=i));
    }
    let val_count = (pairs.len() / 10).max(1);
    let (train_idx, val_idx) = order.split_at(pairs.len() - val_count);
    let train: Vec<&(Image, Image)> = train_idx.iter().map(|i| &pairs[*i]).collect();
    let val: Vec<&(Image, Image)> = val_idx.iter().map(|i| &pairs[*i]).collect();

    let mut model = match init {
        Some(net) => ExpertModel { net: net.clone() },
        None => ExpertModel::new(cfg.seed),
    };
    let mut params = model.net.params_vec();
    let mut adam = AdamState::new(params.len());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed2(cfg.seed, TAG_BATCH, 0));

    let mut best_params = params.clone();
    let mut best_val = mean_l1_residual(&model, &val);
    let mut best_step = 0usize;
    let mut val_curve = vec![(0usize, best_val)];

    for step in 0..cfg.steps {
        let mut grad_sum = vec![0.0; params.len()];
        for _ in 0..cfg.batch {
            let (deg, clean) = train[batch_rng.gen_range(0..train.len())];
            let (h, w) = (deg.height(), deg.width());
            let (out, cache) = model.net.forward_cached(deg.planar(), h, w);
            let n = out.len() as f64;
            let dout: Vec<f64> = out
                .iter()
                .zip(deg.planar())
                .zip(clean.planar())
                .map(|((r, x), t)| {
                    let d = x + r - t;
                    if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect();
            let (grads, _) = model.net.backward(&cache, &dout);
            for (s, g) in grad_sum.iter_mut().zip(model.net.grads_vec(&grads)) {
                *s += g;
            }
        }
        for g in &mut grad_sum {
            *g /= cfg.batch as f64;
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        adam.step(&mut params, &grad_sum, lr);
        model.net.set_params(&params);

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let v = mean_l1_residual(&model, &val);
            val_curve.push((step + 1, v));
            if v < best_val {
                best_val = v;
                best_step = step + 1;
                best_params.copy_from_slice(&params);
            }
        }
    }
    model.net.set_params(&best_params);
    let report = FitReport {
        val_curve,
        best_val,
        best_step,
        train_count: train.len(),
        val_count: val.len(),
    };
    Ok((model, report))
}

/// Trained experts keyed by tree node id, plus parent aliases for nodes too
/// small to train.
#[derive(Debug, Clone, Default)]
pub struct ExpertRegistry {
    pub experts: BTreeMap<usize, ExpertModel>,
    pub alias: BTreeMap<usize, usize>,
    /// Checksum of the tree the experts were fitted against, so stale
    /// registries are detectable.
    pub tree_checksum: String,
}

impl ExpertRegistry {
    /// Resolves a node to the id that actually holds its expert, following
    /// aliases. Two nodes compare equal as experts iff they resolve to the
    /// same id.
    pub fn resolve_id(&self, node_id: usize) -> Result<usize, ExpertError> {
        let mut id = node_id;
        for _ in 0..=self.alias.len() {
            if self.experts.contains_key(&id) {
                return Ok(id);
            }
            match self.alias.get(&id) {
                Some(next) => id = *next,
                None => break,
            }
        }
        Err(ExpertError::MissingExpert(node_id))
    }

    /// Resolves a node to its effective expert, following aliases.
    pub fn expert_for(&self, node_id: usize) -> Result<&ExpertModel, ExpertError> {
        let id = self.resolve_id(node_id)?;
        Ok(&self.experts[&id])
    }
}

/// Per-node outcome of registry training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeFitSummary {
    pub node_id: usize,
    pub level: usize,
    pub members: usize,
    /// Present when the node aliased an ancestor instead of training.
    pub aliased_to: Option<usize>,
    pub best_val: Option<f64>,
}

/// Trains one expert per tree node on that node's member pairs, coarsest
/// level first so every child can start from its parent's trained weights.
/// A warm-started child keeps its own expert only when fine-tuning improved
/// its held-out residual by [`SPECIALIZE_MARGIN`]; otherwise it aliases the
/// parent. Nodes with fewer than [`MIN_MEMBERS`] members alias their parent
/// without training; an under-populated node on the coarsest level (possible
/// only when that level has several nodes) borrows the largest coarsest
/// node's expert instead. Fits within a level run in parallel; results are
/// deterministic because each node's seed derives from its id.
pub fn train_registry(
    build: &TreeBuild,
    pairs: &[(Image, Image)],
    cfg: &FitConfig,
) -> Result<(ExpertRegistry, Vec<NodeFitSummary>), ExpertError> {
    let tree = &build.tree;
    let biggest_root = tree
        .nodes
        .iter()
        .filter(|n| n.level == 0)
        .max_by(|a, b| a.member_count.cmp(&b.member_count).then(b.id.cmp(&a.id)))
        .map(|n| n.id)
        .unwrap_or(0);

    let mut registry = ExpertRegistry {
        experts: BTreeMap::new(),
        alias: BTreeMap::new(),
        tree_checksum: tree.checksum(),
    };
    let mut reports: BTreeMap<usize, FitReport> = BTreeMap::new();

    for level in 0..tree.depth() {
        let mut plan: Vec<(usize, Vec<usize>, Option<ConvNet>)> = Vec::new();
        for node in tree.nodes.iter().filter(|n| n.level == level) {
            let members: Vec<usize> = (0..pairs.len())
                .filter(|i| build.assignments[node.level][*i] == node.id)
                .collect();
            if members.len() < MIN_MEMBERS && node.level > 0 {
                let parent = node.parent.expect("non-root node has a parent");
                registry.alias.insert(node.id, registry.resolve_id(parent)?);
            } else if members.len() < MIN_MEMBERS && node.id != biggest_root {
                registry.alias.insert(node.id, biggest_root);
            } else {
                let init = match node.parent {
                    Some(parent) => Some(registry.expert_for(parent)?.net.clone()),
                    None => None,
                };
                plan.push((node.id, members, init));
            }
        }
        let fitted: Vec<(usize, bool, Result<(ExpertModel, FitReport), ExpertError>)> = plan
            .par_iter()
            .map(|(node_id, members, init)| {
                let node_pairs: Vec<(Image, Image)> =
                    members.iter().map(|i| pairs[*i].clone()).collect();
                let node_cfg = FitConfig {
                    seed: derive_seed2(cfg.seed, TAG_EXPERT, *node_id as u64),
                    ..cfg.clone()
                };
                (*node_id, init.is_some(), fit_expert(&node_pairs, &node_cfg, init.as_ref()))
            })
            .collect();
        for (node_id, warm_started, result) in fitted {
            let (model, report) = result?;
            let inherited_val = report.val_curve[0].1;
            let specialized = !warm_started
                || (report.best_step > 0
                    && report.best_val < inherited_val * (1.0 - SPECIALIZE_MARGIN));
            if specialized {
                registry.experts.insert(node_id, model);
            } else {
                let parent = tree.node(node_id)?.parent.expect("warm start implies a parent");
                registry.alias.insert(node_id, registry.resolve_id(parent)?);
            }
            reports.insert(node_id, report);
        }
    }
    let summaries = tree
        .nodes
        .iter()
        .map(|node| NodeFitSummary {
            node_id: node.id,
            level: node.level,
            members: (0..pairs.len())
                .filter(|i| build.assignments[node.level][*i] == node.id)
                .count(),
            aliased_to: registry.alias.get(&node.id).copied(),
            best_val: reports.get(&node.id).map(|r| r.best_val),
        })
        .collect();
    Ok((registry, summaries))
}

/// Node ids are stored as JSON object keys, which must be strings.
#[derive(Serialize, Deserialize)]
struct RegistryIndex {
    experts: BTreeMap<String, String>,
    alias: BTreeMap<String, usize>,
    tree_checksum: String,
}

fn parse_node_id(key: &str) -> Result<usize, ExpertError> {
    key.parse()
        .map_err(|_| ExpertError::BadRegistryJson(format!("node id {key:?} is not an integer")))
}

/// Writes `registry.json` plus one weight file per expert into `dir`.
pub fn save_registry(dir: &Path, registry: &ExpertRegistry) -> Result<(), ExpertError> {
    std::fs::create_dir_all(dir)?;
    let mut index = RegistryIndex {
        experts: BTreeMap::new(),
        alias: registry.alias.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        tree_checksum: registry.tree_checksum.clone(),
    };
    for (id, model) in &registry.experts {
        let file = format!("expert_{id}.json");
        save_weights(model, &dir.join(&file))?;
        index.experts.insert(id.to_string(), file);
    }
    save_weights(&index, &dir.join("registry.json"))?;
    Ok(())
}

/// Loads a registry previously written by [`save_registry`].
pub fn load_registry(dir: &Path) -> Result<ExpertRegistry, ExpertError> {
    let index: RegistryIndex = load_weights(&dir.join("registry.json"))?;
    let mut experts = BTreeMap::new();
    for (id, file) in &index.experts {
        experts.insert(parse_node_id(id)?, load_weights(&dir.join(file))?);
    }
    let mut alias = BTreeMap::new();
    for (id, target) in &index.alias {
        alias.insert(parse_node_id(id)?, *target);
    }
    Ok(ExpertRegistry { experts, alias, tree_checksum: index.tree_checksum })
}
