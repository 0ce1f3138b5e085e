//! The build command: descriptor extraction, standardization, tree
//! construction, expert fitting, router training, and the per-cluster
//! kind-share table, each guarded by a stage fingerprint.

use super::corpus::{load_manifest, manifest_checksum, ManifestRow};
use super::{
    fingerprint, plan_stage, read_text, write_text, PipelineError, RunConfig, Split, StagePlan,
    StageState,
};
use crate::cluster::{GranularityTree, TreeBuild};
use crate::degrade::{kind_index, DegradationSpec, ALL_KINDS};
use crate::experts::{
    load_registry, save_registry, train_registry, ExpertRegistry, FitConfig, NodeFitSummary,
};
use crate::features::{extract_dr, fit_standardizer, Standardizer, DR_DIM};
use crate::image::{load_png, Image};
use crate::router::{train_routers, RouterBundle, RouterSample, RouterTrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Whether a guarded stage ran or was skipped as already done.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

impl std::fmt::Display for StageStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageStatus::Ran => "ran",
            StageStatus::Skipped => "skipped",
        })
    }
}

/// What `build` did, stage by stage in execution order.
#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub stages: Vec<(&'static str, StageStatus)>,
}

/// Versioned on-disk form of the trained routers.
#[derive(Serialize, Deserialize)]
struct RouterFile {
    schema: u32,
    tree_checksum: String,
    bundle: RouterBundle,
}

/// Versioned on-disk form of the cluster kind-share table.
#[derive(Serialize, Deserialize)]
struct MasksFile {
    schema: u32,
    /// Column order of `shares`.
    kinds: Vec<String>,
    /// `shares[finest_index][kind]` = fraction of that cluster's training
    /// members whose degradation includes the kind.
    shares: Vec<Vec<f64>>,
}

/// Training summary persisted for inspection.
#[derive(Serialize, Deserialize)]
struct BuildReport {
    expert_fits: Vec<NodeFitSummary>,
    router_train_accuracy: f64,
    /// Eval-mode finest-routing accuracy on the held-out validation split.
    router_val_accuracy: f64,
    final_losses: Option<FinalLosses>,
}

#[derive(Serialize, Deserialize)]
struct FinalLosses {
    total: f64,
    mix_l1: f64,
    ce: f64,
    dg: f64,
    load: f64,
}

fn drs_path(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir.join("drs.csv")
}

fn standardizer_path(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir.join("standardizer.json")
}

fn tree_path(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir.join("tree.json")
}

fn assignment_path(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir.join("assignment.csv")
}

fn experts_dir(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir.join("experts")
}

fn router_path(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir.join("router.json")
}

fn masks_path(cfg: &RunConfig) -> PathBuf {
    cfg.models_dir.join("masks.json")
}

/// Reads one image pair of a manifest row.
fn load_pair(cfg: &RunConfig, row: &ManifestRow) -> Result<(Image, Image), PipelineError> {
    let degraded = load_png(&cfg.corpus_dir.join(&row.degraded))?;
    let clean = load_png(&cfg.corpus_dir.join(&row.clean))?;
    Ok((degraded, clean))
}

fn write_drs_csv(path: &Path, rows: &[ManifestRow], drs: &[Vec<f64>]) -> Result<(), PipelineError> {
    let mut text = String::from("split,dist,index,path");
    for i in 0..DR_DIM {
        text.push_str(&format!(",c{i:02}"));
    }
    for (row, dr) in rows.iter().zip(drs) {
        text.push('\n');
        text.push_str(&format!("{},{},{},{}", row.split, row.dist, row.index, row.degraded));
        for v in dr {
            // Shortest round-trip float formatting, so downstream stages can
            // reload exactly what was computed.
            text.push_str(&format!(",{v}"));
        }
    }
    text.push('\n');
    write_text(path, &text)
}

fn read_drs_csv(path: &Path, rows: &[ManifestRow]) -> Result<Vec<Vec<f64>>, PipelineError> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    lines.next(); // header, trusted via the stage fingerprint
    let mut out = Vec::with_capacity(rows.len());
    for (row, line) in rows.iter().zip(&mut lines) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + DR_DIM || fields[3] != row.degraded {
            return Err(PipelineError::StaleStage {
                stage: "extract".into(),
                detail: format!("descriptor table does not match the manifest at {}", row.degraded),
            });
        }
        let dr: Result<Vec<f64>, _> = fields[4..].iter().map(|f| f.parse::<f64>()).collect();
        out.push(dr.map_err(|_| PipelineError::StaleStage {
            stage: "extract".into(),
            detail: "unparsable descriptor value".into(),
        })?);
    }
    if out.len() != rows.len() {
        return Err(PipelineError::StaleStage {
            stage: "extract".into(),
            detail: "descriptor table is shorter than the manifest".into(),
        });
    }
    Ok(out)
}

fn write_assignment_csv(path: &Path, finest: &[usize]) -> Result<(), PipelineError> {
    let mut text = String::from("index,finest_node");
    for (i, node) in finest.iter().enumerate() {
        text.push_str(&format!("\n{i},{node}"));
    }
    text.push('\n');
    write_text(path, &text)
}

fn read_assignment_csv(path: &Path, expect: usize) -> Result<Vec<usize>, PipelineError> {
    let text = read_text(path)?;
    let stale = |detail: &str| PipelineError::StaleStage {
        stage: "tree".into(),
        detail: detail.to_string(),
    };
    let mut out = Vec::with_capacity(expect);
    for line in text.lines().skip(1) {
        let (_, node) = line.split_once(',').ok_or_else(|| stale("bad assignment row"))?;
        out.push(node.parse().map_err(|_| stale("bad assignment node id"))?);
    }
    if out.len() != expect {
        return Err(stale("assignment length does not match the train split"));
    }
    Ok(out)
}

/// Reconstructs the per-level assignment table from finest node ids.
fn assignments_from_finest(
    tree: &GranularityTree,
    finest: &[usize],
) -> Result<Vec<Vec<usize>>, PipelineError> {
    let depth = tree.depth();
    let mut per_level = vec![vec![0usize; finest.len()]; depth];
    for (i, node) in finest.iter().enumerate() {
        let chain = tree.ancestors(*node)?;
        for (level, id) in chain.iter().enumerate() {
            per_level[level][i] = *id;
        }
    }
    Ok(per_level)
}

/// Per-finest-cluster fraction of members containing each degradation kind.
fn kind_shares(
    tree: &GranularityTree,
    finest: &[usize],
    specs: &[DegradationSpec],
) -> Vec<Vec<f64>> {
    let range = tree.level_ids(tree.depth() - 1);
    let offset = range.start;
    let n_finest = range.len();
    let mut counts = vec![vec![0usize; ALL_KINDS.len()]; n_finest];
    let mut totals = vec![0usize; n_finest];
    for (node, spec) in finest.iter().zip(specs) {
        let idx = node - offset;
        totals[idx] += 1;
        for kind in spec.kinds() {
            counts[idx][kind_index(kind)] += 1;
        }
    }
    counts
        .iter()
        .zip(&totals)
        .map(|(row, total)| {
            row.iter().map(|c| if *total == 0 { 0.0 } else { *c as f64 / *total as f64 }).collect()
        })
        .collect()
}

/// Runs every build stage in order, skipping finished work and refusing
/// stale artifacts. Persists `stage_state.json` after each stage so an
/// interrupted build resumes where it stopped.
pub fn cmd_build(cfg: &RunConfig) -> Result<BuildOutcome, PipelineError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.corpus_dir)?;
    let corpus_ck = manifest_checksum(&cfg.corpus_dir)?;
    let state_path = cfg.models_dir.join("stage_state.json");
    let mut state = StageState::load(&state_path)?;
    let mut stages: Vec<(&'static str, StageStatus)> = Vec::new();

    let train_rows: Vec<&ManifestRow> =
        manifest.iter().filter(|r| r.split == Split::Train).collect();
    let val_rows: Vec<&ManifestRow> = manifest.iter().filter(|r| r.split == Split::Val).collect();
    if train_rows.is_empty() {
        return Err(PipelineError::BadManifest("manifest has no train rows".into()));
    }

    // Stage: extract descriptors for every corpus item.
    let fp_extract = fingerprint(&["extract", &corpus_ck, &DR_DIM.to_string()]);
    let drs: Vec<Vec<f64>> = match plan_stage(&state, "extract", &fp_extract, drs_path(cfg).exists())?
    {
        StagePlan::Skip => {
            stages.push(("extract", StageStatus::Skipped));
            read_drs_csv(&drs_path(cfg), &manifest)?
        }
        StagePlan::Run => {
            let drs: Vec<Vec<f64>> = manifest
                .par_iter()
                .map(|row| {
                    let img = load_png(&cfg.corpus_dir.join(&row.degraded))?;
                    Ok(extract_dr(&img))
                })
                .collect::<Result<_, PipelineError>>()?;
            write_drs_csv(&drs_path(cfg), &manifest, &drs)?;
            state.stages.insert("extract".into(), fp_extract.clone());
            state.save(&state_path)?;
            stages.push(("extract", StageStatus::Ran));
            drs
        }
    };

    let train_drs: Vec<Vec<f64>> = manifest
        .iter()
        .zip(&drs)
        .filter(|(row, _)| row.split == Split::Train)
        .map(|(_, dr)| dr.clone())
        .collect();

    // Stage: fit the corpus standardizer on the train split.
    let fp_std = fingerprint(&["standardize", &fp_extract]);
    let standardizer = match plan_stage(&state, "standardize", &fp_std, standardizer_path(cfg).exists())? {
        StagePlan::Skip => {
            stages.push(("standardize", StageStatus::Skipped));
            let text = read_text(&standardizer_path(cfg))?;
            serde_json::from_str::<Standardizer>(&text).map_err(|e| PipelineError::BadJson {
                path: standardizer_path(cfg),
                detail: e.to_string(),
            })?
        }
        StagePlan::Run => {
            let standardizer = fit_standardizer(&train_drs)?;
            write_text(
                &standardizer_path(cfg),
                &serde_json::to_string_pretty(&standardizer).expect("standardizer serializes"),
            )?;
            state.stages.insert("standardize".into(), fp_std.clone());
            state.save(&state_path)?;
            stages.push(("standardize", StageStatus::Ran));
            standardizer
        }
    };

    let std_train: Vec<Vec<f64>> = train_drs
        .iter()
        .map(|dr| standardizer.apply(dr))
        .collect::<Result<_, _>>()?;

    // Stage: hierarchical clustering of the train descriptors.
    let levels_json = serde_json::to_string(&cfg.level_counts).expect("levels serialize");
    let fp_tree = fingerprint(&["tree", &fp_std, &levels_json, &cfg.seed.to_string()]);
    let tree_done = tree_path(cfg).exists() && assignment_path(cfg).exists();
    let (tree, finest_assign) = match plan_stage(&state, "tree", &fp_tree, tree_done)? {
        StagePlan::Skip => {
            stages.push(("tree", StageStatus::Skipped));
            let tree = GranularityTree::from_json(&read_text(&tree_path(cfg))?)?;
            let finest = read_assignment_csv(&assignment_path(cfg), std_train.len())?;
            (tree, finest)
        }
        StagePlan::Run => {
            let build = crate::cluster::build_tree(&std_train, &cfg.level_counts, cfg.seed)?;
            let finest = build.assignments.last().expect("tree has at least one level").clone();
            write_text(&tree_path(cfg), &build.tree.to_json())?;
            write_assignment_csv(&assignment_path(cfg), &finest)?;
            state.stages.insert("tree".into(), fp_tree.clone());
            state.save(&state_path)?;
            stages.push(("tree", StageStatus::Ran));
            (build.tree, finest)
        }
    };

    // Stage: fit one expert per tree node.
    let expert_json = serde_json::to_string(&cfg.expert).expect("section serializes");
    let fp_experts =
        fingerprint(&["experts", &fp_tree, &expert_json, &cfg.seed.to_string()]);
    let registry_done = experts_dir(cfg).join("registry.json").exists();
    let mut expert_fits: Option<Vec<NodeFitSummary>> = None;
    let registry = match plan_stage(&state, "experts", &fp_experts, registry_done)? {
        StagePlan::Skip => {
            stages.push(("experts", StageStatus::Skipped));
            let registry = load_registry(&experts_dir(cfg))?;
            if registry.tree_checksum != tree.checksum() {
                return Err(PipelineError::StaleStage {
                    stage: "experts".into(),
                    detail: "registry was fitted against a different tree".into(),
                });
            }
            registry
        }
        StagePlan::Run => {
            let pairs: Vec<(Image, Image)> = train_rows
                .par_iter()
                .map(|row| load_pair(cfg, row))
                .collect::<Result<_, _>>()?;
            let build = TreeBuild {
                tree: tree.clone(),
                assignments: assignments_from_finest(&tree, &finest_assign)?,
            };
            let fit_cfg = FitConfig {
                steps: cfg.expert.steps,
                batch: cfg.expert.batch,
                lr: cfg.expert.lr,
                eval_every: cfg.expert.eval_every,
                seed: cfg.seed,
            };
            let (registry, summaries) = train_registry(&build, &pairs, &fit_cfg)?;
            save_registry(&experts_dir(cfg), &registry)?;
            expert_fits = Some(summaries);
            state.stages.insert("experts".into(), fp_experts.clone());
            state.save(&state_path)?;
            stages.push(("experts", StageStatus::Ran));
            registry
        }
    };

    // Stage: train the degradation and granularity routers.
    let router_json = serde_json::to_string(&cfg.router).expect("section serializes");
    let fp_routers =
        fingerprint(&["routers", &fp_experts, &router_json, &cfg.seed.to_string()]);
    let bundle = match plan_stage(&state, "routers", &fp_routers, router_path(cfg).exists())? {
        StagePlan::Skip => {
            stages.push(("routers", StageStatus::Skipped));
            let file: RouterFile = serde_json::from_str(&read_text(&router_path(cfg))?)
                .map_err(|e| PipelineError::BadJson {
                    path: router_path(cfg),
                    detail: e.to_string(),
                })?;
            if file.tree_checksum != tree.checksum() {
                return Err(PipelineError::StaleStage {
                    stage: "routers".into(),
                    detail: "routers were trained against a different tree".into(),
                });
            }
            file.bundle
        }
        StagePlan::Run => {
            let finest_offset = tree.level_offset(tree.depth() - 1);
            let samples: Vec<RouterSample> = train_rows
                .par_iter()
                .zip(&std_train)
                .zip(&finest_assign)
                .map(|((row, descriptor), node)| {
                    let (degraded, clean) = load_pair(cfg, row)?;
                    Ok(RouterSample {
                        descriptor: descriptor.clone(),
                        finest_label: node - finest_offset,
                        degraded,
                        clean,
                    })
                })
                .collect::<Result<_, PipelineError>>()?;
            let n_finest = *cfg.level_counts.last().expect("validated non-empty");
            let mut bundle =
                RouterBundle::new(DR_DIM, n_finest, cfg.level_counts.len(), cfg.seed);
            let train_cfg = RouterTrainConfig {
                steps: cfg.router.steps,
                batch: cfg.router.batch,
                lr: cfg.router.lr,
                w_ce: 1.0,
                w_dg: cfg.router.alpha,
                w_load: cfg.router.beta,
                dr_noise_frac: cfg.router.dr_noise_frac,
                seed: cfg.seed,
            };
            let report = train_routers(&mut bundle, &tree, &registry, &samples, &train_cfg)?;
            write_text(
                &router_path(cfg),
                &serde_json::to_string(&RouterFile {
                    schema: 1,
                    tree_checksum: tree.checksum(),
                    bundle: bundle.clone(),
                })
                .expect("router serializes"),
            )?;

            // Validation accuracy against nearest-centroid ground truth.
            let val_drs: Vec<Vec<f64>> = manifest
                .iter()
                .zip(&drs)
                .filter(|(row, _)| row.split == Split::Val)
                .map(|(_, dr)| dr.clone())
                .collect();
            let mut val_hits = 0usize;
            for dr in &val_drs {
                let e = standardizer.apply(dr)?;
                let decision = bundle.route(&tree, &e, None)?;
                if decision.finest_node == tree.assign_finest(&e) {
                    val_hits += 1;
                }
            }
            let val_accuracy = if val_rows.is_empty() {
                0.0
            } else {
                val_hits as f64 / val_rows.len() as f64
            };
            let final_losses = report.loss_curve.last().map(|p| FinalLosses {
                total: p.total,
                mix_l1: p.mix_l1,
                ce: p.ce,
                dg: p.dg,
                load: p.load,
            });
            write_text(
                &cfg.models_dir.join("build_report.json"),
                &serde_json::to_string_pretty(&BuildReport {
                    expert_fits: expert_fits.take().unwrap_or_default(),
                    router_train_accuracy: report.train_accuracy,
                    router_val_accuracy: val_accuracy,
                    final_losses,
                })
                .expect("report serializes"),
            )?;
            state.stages.insert("routers".into(), fp_routers.clone());
            state.save(&state_path)?;
            stages.push(("routers", StageStatus::Ran));
            bundle
        }
    };
    let _ = &bundle;

    // Stage: per-cluster kind shares for instruction masks.
    let fp_masks = fingerprint(&["masks", &fp_tree, &corpus_ck]);
    match plan_stage(&state, "masks", &fp_masks, masks_path(cfg).exists())? {
        StagePlan::Skip => stages.push(("masks", StageStatus::Skipped)),
        StagePlan::Run => {
            let specs: Vec<DegradationSpec> = train_rows
                .iter()
                .map(|row| {
                    DegradationSpec::from_json(&read_text(&cfg.corpus_dir.join(&row.spec))?)
                        .map_err(PipelineError::from)
                })
                .collect::<Result<_, _>>()?;
            let shares = kind_shares(&tree, &finest_assign, &specs);
            let file = MasksFile {
                schema: 1,
                kinds: ALL_KINDS.iter().map(|k| k.name().to_string()).collect(),
                shares,
            };
            write_text(
                &masks_path(cfg),
                &serde_json::to_string_pretty(&file).expect("masks serialize"),
            )?;
            state.stages.insert("masks".into(), fp_masks.clone());
            state.save(&state_path)?;
            stages.push(("masks", StageStatus::Ran));
        }
    }

    Ok(BuildOutcome { stages })
}

/// Everything the restore/eval/stats commands need, loaded and cross-checked.
pub struct BuiltModels {
    pub standardizer: Standardizer,
    pub tree: GranularityTree,
    pub registry: ExpertRegistry,
    pub bundle: RouterBundle,
    /// Column order of `shares`.
    pub kinds: Vec<String>,
    pub shares: Vec<Vec<f64>>,
}

/// Loads the build artifacts, failing with `MissingStage` when the build has
/// not run and `StaleStage` when artifacts disagree about the tree.
pub fn load_models(cfg: &RunConfig) -> Result<BuiltModels, PipelineError> {
    let missing = |path: &Path| PipelineError::MissingStage {
        stage: "build".into(),
        hint: format!("no artifact at {}", path.display()),
    };
    for path in
        [standardizer_path(cfg), tree_path(cfg), router_path(cfg), masks_path(cfg)]
    {
        if !path.exists() {
            return Err(missing(&path));
        }
    }
    if !experts_dir(cfg).join("registry.json").exists() {
        return Err(missing(&experts_dir(cfg).join("registry.json")));
    }

    let standardizer: Standardizer = serde_json::from_str(&read_text(&standardizer_path(cfg))?)
        .map_err(|e| PipelineError::BadJson {
            path: standardizer_path(cfg),
            detail: e.to_string(),
        })?;
    let tree = GranularityTree::from_json(&read_text(&tree_path(cfg))?)?;
    let registry = load_registry(&experts_dir(cfg))?;
    let router_file: RouterFile = serde_json::from_str(&read_text(&router_path(cfg))?)
        .map_err(|e| PipelineError::BadJson { path: router_path(cfg), detail: e.to_string() })?;
    let masks_file: MasksFile = serde_json::from_str(&read_text(&masks_path(cfg))?)
        .map_err(|e| PipelineError::BadJson { path: masks_path(cfg), detail: e.to_string() })?;

    let checksum = tree.checksum();
    if registry.tree_checksum != checksum {
        return Err(PipelineError::StaleStage {
            stage: "experts".into(),
            detail: "registry was fitted against a different tree".into(),
        });
    }
    if router_file.tree_checksum != checksum {
        return Err(PipelineError::StaleStage {
            stage: "routers".into(),
            detail: "routers were trained against a different tree".into(),
        });
    }
    let n_finest = tree.level_ids(tree.depth() - 1).len();
    if masks_file.shares.len() != n_finest {
        return Err(PipelineError::StaleStage {
            stage: "masks".into(),
            detail: "share table size does not match the tree".into(),
        });
    }
    Ok(BuiltModels {
        standardizer,
        tree,
        registry,
        bundle: router_file.bundle,
        kinds: masks_file.kinds,
        shares: masks_file.shares,
    })
}

#[cfg(test)]
mod tests {
    use super::super::cmd_synth;
    use super::*;

    fn tiny_config(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.corpus_dir = root.join("corpus");
        cfg.models_dir = root.join("models");
        cfg.reports_dir = root.join("reports");
        cfg.corpus.clean_size = 40;
        cfg.corpus.patch = 32;
        cfg.corpus.train_cleans = 6;
        cfg.corpus.val_cleans = 1;
        cfg.corpus.test_cleans = 2;
        cfg.corpus.crops_per_clean = 4;
        cfg.level_counts = vec![1, 2];
        cfg.expert.steps = 6;
        cfg.expert.eval_every = 3;
        cfg.router.steps = 4;
        cfg
    }

    #[test]
    fn build_runs_then_skips_then_detects_corpus_edits() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        cmd_synth(&cfg).unwrap();
        let first = cmd_build(&cfg).unwrap();
        assert!(first.stages.iter().all(|(_, s)| *s == StageStatus::Ran));
        let models = load_models(&cfg).unwrap();
        assert_eq!(models.tree.level_sizes, vec![1, 2]);
        assert_eq!(models.shares.len(), 2);
        assert_eq!(models.kinds.len(), ALL_KINDS.len());

        let second = cmd_build(&cfg).unwrap();
        assert!(second.stages.iter().all(|(_, s)| *s == StageStatus::Skipped));

        // Any manifest edit must surface as a stale first stage.
        let manifest_path = cfg.corpus_dir.join("manifest.csv");
        let mut text = std::fs::read_to_string(&manifest_path).unwrap();
        text.push('\n');
        std::fs::write(&manifest_path, text).unwrap();
        match cmd_build(&cfg) {
            Err(PipelineError::StaleStage { stage, .. }) => assert_eq!(stage, "extract"),
            other => panic!("expected stale extract, got {other:?}"),
        }
    }

    #[test]
    fn build_requires_a_synthesized_corpus() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        assert!(matches!(cmd_build(&cfg), Err(PipelineError::MissingStage { .. })));
    }

    #[test]
    fn kind_share_table_reflects_member_specs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        cmd_synth(&cfg).unwrap();
        cmd_build(&cfg).unwrap();
        let models = load_models(&cfg).unwrap();
        // Every share is a valid fraction and every cluster has some kind.
        for row in &models.shares {
            assert_eq!(row.len(), ALL_KINDS.len());
            assert!(row.iter().all(|s| (0.0..=1.0).contains(s)));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
    }
}
