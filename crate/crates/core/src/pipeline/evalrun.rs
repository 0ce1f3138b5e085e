//! Restoration, the evaluation table, and the expert-usage statistics report.

use super::build::{load_models, BuiltModels};
use super::corpus::{load_manifest, ManifestRow};
use super::{read_text, write_text, PipelineError, RunConfig, Split};
use crate::degrade::{
    kind_index, recipe_by_name, DegradationKind, DegradationSpec, DistMode, NAMED_RECIPES,
};
use crate::image::{load_png, psnr, save_png, ssim};
use crate::features::extract_dr;
use crate::router::{instruction_mask, RouteDecision};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// The five evaluation methods, in table order.
const METHODS: [&str; 5] =
    ["level0-only", "finest-only", "multi-granularity-auto", "instruction", "best-of-chain-oracle"];

/// How restoration selects its expert.
#[derive(Debug, Clone, PartialEq)]
pub enum RestoreMode {
    /// Full two-stage routing.
    Auto,
    /// Routing restricted to clusters matching the declared kinds.
    Instruction(Vec<DegradationKind>),
}

/// Parses `auto` or `instruction:<task>`, where the task is a degradation
/// kind (`rain`) or a named recipe (`H-N-R`).
pub fn parse_mode(text: &str) -> Result<RestoreMode, PipelineError> {
    if text == "auto" {
        return Ok(RestoreMode::Auto);
    }
    let Some(task) = text.strip_prefix("instruction:") else {
        return Err(PipelineError::BadConfig(format!(
            "mode must be auto or instruction:<task>, got {text:?}"
        )));
    };
    if let Ok(kinds) = recipe_by_name(task) {
        return Ok(RestoreMode::Instruction(kinds.to_vec()));
    }
    if let Ok(kind) = task.parse::<DegradationKind>() {
        return Ok(RestoreMode::Instruction(vec![kind]));
    }
    let mut known: Vec<String> =
        crate::degrade::ALL_KINDS.iter().map(|k| k.name().to_string()).collect();
    known.extend(NAMED_RECIPES.iter().map(|(n, _)| n.to_string()));
    Err(PipelineError::UnknownTask { given: task.to_string(), known: known.join(", ") })
}

fn mask_for(models: &BuiltModels, kinds: &[DegradationKind]) -> Result<Vec<bool>, PipelineError> {
    let idxs: Vec<usize> = kinds.iter().map(|k| kind_index(*k)).collect();
    Ok(instruction_mask(&models.shares, &idxs)?)
}

/// What one `restore` invocation produced for one input image.
#[derive(Debug, Serialize)]
struct RestoreTrace {
    input: String,
    mode: String,
    decision: RouteDecision,
    /// Registry id of the expert that actually ran (after aliasing).
    resolved_expert: usize,
}

/// Files written by `restore`.
#[derive(Debug, Clone)]
pub struct RestoreOutcome {
    pub restored: Vec<PathBuf>,
}

/// Restores each input through the routed expert, saving a PNG and a JSON
/// routing trace per image under the reports directory.
pub fn cmd_restore(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    mode: &RestoreMode,
) -> Result<RestoreOutcome, PipelineError> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(PipelineError::BadConfig("restore needs at least one input image".into()));
    }
    let models = load_models(cfg)?;
    let mask = match mode {
        RestoreMode::Auto => None,
        RestoreMode::Instruction(kinds) => Some(mask_for(&models, kinds)?),
    };
    let mode_text = match mode {
        RestoreMode::Auto => "auto".to_string(),
        RestoreMode::Instruction(kinds) => format!(
            "instruction:{}",
            kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
        ),
    };
    let out_dir = cfg.reports_dir.join("restored");
    let restored = inputs
        .par_iter()
        .map(|input| {
            let img = load_png(input)?;
            let e = models.standardizer.apply(&extract_dr(&img))?;
            let decision = models.bundle.route(&models.tree, &e, mask.as_deref())?;
            let expert_id = models.registry.resolve_id(decision.node)?;
            let out = models.registry.expert_for(decision.node)?.restore(&img);
            let stem = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let png_path = out_dir.join(format!("{stem}.restored.png"));
            if let Some(parent) = png_path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| PipelineError::Io { path: parent.to_path_buf(), source: e })?;
            }
            save_png(&out, &png_path)?;
            let trace = RestoreTrace {
                input: input.display().to_string(),
                mode: mode_text.clone(),
                decision,
                resolved_expert: expert_id,
            };
            write_text(
                &out_dir.join(format!("{stem}.trace.json")),
                &serde_json::to_string_pretty(&trace).expect("trace serializes"),
            )?;
            Ok(png_path)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(RestoreOutcome { restored })
}

/// Per-item routing and quality record, the unit of the eval traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemTrace {
    pub index: usize,
    pub recipe: String,
    pub dist: String,
    /// Nearest-centroid finest node of the item's descriptor.
    pub true_finest: usize,
    /// Auto-routed finest node.
    pub finest_node: usize,
    /// Auto-routed level along the chain.
    pub level: usize,
    /// Auto-selected node (`chain[level]`).
    pub node: usize,
    /// Registry id actually applied in auto mode (after aliasing).
    pub practical_expert: usize,
    /// Registry id of the best-PSNR expert along the auto chain.
    pub oracle_expert: usize,
    /// Level of that best expert (ties go coarse).
    pub oracle_level: usize,
    pub e_gran: f64,
    pub psnr_degraded: f64,
    /// PSNR per auto-chain level, coarse to fine.
    pub chain_psnr: Vec<f64>,
    pub psnr: BTreeMap<String, f64>,
    pub ssim: BTreeMap<String, f64>,
}

/// One averaged table row of `metrics.csv`.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub recipe: String,
    pub dist: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// What `eval` produced.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub csv_path: PathBuf,
    pub evaluated: Vec<String>,
    pub items: usize,
    /// The `recipe == "average"` rows, for quick access.
    pub averages: Vec<MetricRow>,
}

fn traces_path(cfg: &RunConfig, dist: DistMode) -> PathBuf {
    cfg.reports_dir.join(format!("traces_{dist}.json"))
}

fn eval_item(
    cfg: &RunConfig,
    models: &BuiltModels,
    row: &ManifestRow,
) -> Result<ItemTrace, PipelineError> {
    let degraded = load_png(&cfg.corpus_dir.join(&row.degraded))?;
    let clean = load_png(&cfg.corpus_dir.join(&row.clean))?;
    let e = models.standardizer.apply(&extract_dr(&degraded))?;

    let auto = models.bundle.route(&models.tree, &e, None)?;
    // Instruction mode declares the degradations actually present in the
    // item, not its recipe: under gated synthesis a recipe stage may have
    // been skipped, and a user describes what they see in the image.
    let spec_path = cfg.corpus_dir.join(&row.spec);
    let spec: DegradationSpec = serde_json::from_str(&read_text(&spec_path)?).map_err(|e| {
        PipelineError::BadJson { path: spec_path.clone(), detail: e.to_string() }
    })?;
    let mask = mask_for(models, &spec.kinds())?;
    let instructed = models.bundle.route(&models.tree, &e, Some(&mask))?;

    // Restore once per distinct expert among the candidates.
    let mut quality: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut measure = |node: usize| -> Result<(f64, f64), PipelineError> {
        let id = models.registry.resolve_id(node)?;
        if let Some(q) = quality.get(&id) {
            return Ok(*q);
        }
        let out = models.registry.expert_for(node)?.restore(&degraded);
        let q = (psnr(&out, &clean)?, ssim(&out, &clean)?);
        quality.insert(id, q);
        Ok(q)
    };

    let chain_q: Vec<(f64, f64)> =
        auto.chain.iter().map(|n| measure(*n)).collect::<Result<_, _>>()?;
    let q_auto = chain_q[auto.level];
    let q_level0 = chain_q[0];
    let q_finest = *chain_q.last().expect("chain is never empty");
    let q_instr = measure(instructed.node)?;
    let mut q_oracle = q_instr;
    for (p, s) in chain_q.iter().chain(
        instructed.chain.iter().map(|n| measure(*n)).collect::<Result<Vec<_>, _>>()?.iter(),
    ) {
        if *p > q_oracle.0 {
            q_oracle = (*p, *s);
        }
    }

    let mut oracle_level = 0usize;
    for (l, (p, _)) in chain_q.iter().enumerate() {
        if *p > chain_q[oracle_level].0 {
            oracle_level = l;
        }
    }

    let mut psnr_by = BTreeMap::new();
    let mut ssim_by = BTreeMap::new();
    for (method, (p, s)) in METHODS
        .iter()
        .zip([q_level0, q_finest, q_auto, q_instr, q_oracle])
    {
        psnr_by.insert(method.to_string(), p);
        ssim_by.insert(method.to_string(), s);
    }

    Ok(ItemTrace {
        index: row.index,
        recipe: row.recipe.clone(),
        dist: row.dist.to_string(),
        true_finest: models.tree.assign_finest(&e),
        finest_node: auto.finest_node,
        level: auto.level,
        node: auto.node,
        practical_expert: models.registry.resolve_id(auto.node)?,
        oracle_expert: models.registry.resolve_id(auto.chain[oracle_level])?,
        oracle_level,
        e_gran: auto.e_gran,
        psnr_degraded: psnr(&degraded, &clean)?,
        chain_psnr: chain_q.iter().map(|(p, _)| *p).collect(),
        psnr: psnr_by,
        ssim: ssim_by,
    })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn table_rows(traces: &[ItemTrace]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let dist = match traces.first() {
        Some(t) => t.dist.clone(),
        None => return rows,
    };
    let mut recipes: Vec<String> = NAMED_RECIPES
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| traces.iter().any(|t| &t.recipe == n))
        .collect();
    recipes.push("average".to_string());
    for recipe in recipes {
        for method in METHODS {
            let select: Vec<&ItemTrace> = traces
                .iter()
                .filter(|t| recipe == "average" || t.recipe == recipe)
                .collect();
            let psnrs: Vec<f64> = select.iter().map(|t| t.psnr[method]).collect();
            let ssims: Vec<f64> = select.iter().map(|t| t.ssim[method]).collect();
            rows.push(MetricRow {
                recipe: recipe.clone(),
                dist: dist.clone(),
                method: method.to_string(),
                psnr: mean(&psnrs),
                ssim: mean(&ssims),
            });
        }
    }
    rows
}

fn load_traces(path: &Path) -> Result<Vec<ItemTrace>, PipelineError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| PipelineError::BadJson { path: path.to_path_buf(), detail: e.to_string() })
}

/// Evaluates the test split(s): routes every item, scores all five methods,
/// writes per-dist trace files, and regenerates `metrics.csv` from every
/// trace file present.
pub fn cmd_eval(cfg: &RunConfig, dist: Option<DistMode>) -> Result<EvalOutcome, PipelineError> {
    cfg.validate()?;
    let models = load_models(cfg)?;
    let manifest = load_manifest(&cfg.corpus_dir)?;
    let dists = match dist {
        Some(d) => vec![d],
        None => vec![DistMode::InDist, DistMode::OutDist],
    };

    let mut evaluated = Vec::new();
    let mut items = 0usize;
    for d in &dists {
        let split = match d {
            DistMode::InDist => Split::TestIn,
            DistMode::OutDist => Split::TestOut,
        };
        let rows: Vec<&ManifestRow> =
            manifest.iter().filter(|r| r.split == split).collect();
        if rows.is_empty() {
            return Err(PipelineError::MissingStage {
                stage: "synth".into(),
                hint: format!("manifest holds no {split} items"),
            });
        }
        let traces: Vec<ItemTrace> = rows
            .par_iter()
            .map(|row| eval_item(cfg, &models, row))
            .collect::<Result<_, _>>()?;
        items += traces.len();
        write_text(
            &traces_path(cfg, *d),
            &serde_json::to_string_pretty(&traces).expect("traces serialize"),
        )?;
        evaluated.push(d.to_string());
    }

    // Rebuild the metrics table from every dist evaluated so far.
    let mut all_rows: Vec<MetricRow> = Vec::new();
    for d in [DistMode::InDist, DistMode::OutDist] {
        let path = traces_path(cfg, d);
        if path.exists() {
            all_rows.extend(table_rows(&load_traces(&path)?));
        }
    }
    let mut text = String::from("recipe,dist,method,psnr,ssim");
    for row in &all_rows {
        text.push_str(&format!(
            "\n{},{},{},{:.6},{:.6}",
            row.recipe, row.dist, row.method, row.psnr, row.ssim
        ));
    }
    text.push('\n');
    let csv_path = cfg.reports_dir.join("metrics.csv");
    write_text(&csv_path, &text)?;

    let averages = all_rows.into_iter().filter(|r| r.recipe == "average").collect();
    Ok(EvalOutcome { csv_path, evaluated, items, averages })
}

/// Per-dist usage summary derived from the eval traces.
#[derive(Debug, Clone, Serialize)]
pub struct UsageSummary {
    pub dist: String,
    /// Practical share of decisions per level, percent.
    pub practical_pct: Vec<f64>,
    /// Best-PSNR ("expected") share per level, percent.
    pub expected_pct: Vec<f64>,
    /// Share of items whose applied expert equals the chain oracle's, percent.
    pub agreement_pct: f64,
    /// Share of items whose routed finest node is the nearest-centroid one,
    /// percent.
    pub finest_accuracy_pct: f64,
    pub mean_e_gran: f64,
    /// Practical share routed to the two coarsest levels, percent.
    pub coarse_pct: f64,
}

/// What `stats` produced.
#[derive(Debug, Clone)]
pub struct StatsOutcome {
    pub csv_path: PathBuf,
    pub summaries: Vec<UsageSummary>,
}

fn summarize(traces: &[ItemTrace]) -> UsageSummary {
    let depth = traces.iter().map(|t| t.chain_psnr.len()).max().unwrap_or(1);
    let n = traces.len() as f64;
    let mut practical = vec![0.0; depth];
    let mut expected = vec![0.0; depth];
    let mut agree = 0.0;
    let mut finest_ok = 0.0;
    for t in traces {
        practical[t.level] += 1.0;
        expected[t.oracle_level] += 1.0;
        if t.practical_expert == t.oracle_expert {
            agree += 1.0;
        }
        if t.finest_node == t.true_finest {
            finest_ok += 1.0;
        }
    }
    let to_pct = |v: Vec<f64>| v.into_iter().map(|c| 100.0 * c / n).collect::<Vec<f64>>();
    let practical_pct = to_pct(practical);
    let coarse_pct = practical_pct.iter().take(2).sum();
    UsageSummary {
        dist: traces.first().map(|t| t.dist.clone()).unwrap_or_default(),
        practical_pct,
        expected_pct: to_pct(expected),
        agreement_pct: 100.0 * agree / n,
        finest_accuracy_pct: 100.0 * finest_ok / n,
        mean_e_gran: mean(&traces.iter().map(|t| t.e_gran).collect::<Vec<f64>>()),
        coarse_pct,
    }
}

/// Aggregates the eval traces into per-dist level-usage percentages,
/// practical-vs-oracle agreement, and granularity statistics.
pub fn cmd_stats(cfg: &RunConfig) -> Result<StatsOutcome, PipelineError> {
    cfg.validate()?;
    let mut summaries = Vec::new();
    for d in [DistMode::InDist, DistMode::OutDist] {
        let path = traces_path(cfg, d);
        if !path.exists() {
            continue;
        }
        let traces = load_traces(&path)?;
        if !traces.is_empty() {
            summaries.push(summarize(&traces));
        }
    }
    if summaries.is_empty() {
        return Err(PipelineError::NoTraces(cfg.reports_dir.clone()));
    }

    let mut text = String::from("dist,metric,value");
    for s in &summaries {
        for (l, v) in s.practical_pct.iter().enumerate() {
            text.push_str(&format!("\n{},practical_level_{l}_pct,{v:.6}", s.dist));
        }
        for (l, v) in s.expected_pct.iter().enumerate() {
            text.push_str(&format!("\n{},expected_level_{l}_pct,{v:.6}", s.dist));
        }
        text.push_str(&format!("\n{},agreement_pct,{:.6}", s.dist, s.agreement_pct));
        text.push_str(&format!("\n{},finest_accuracy_pct,{:.6}", s.dist, s.finest_accuracy_pct));
        text.push_str(&format!("\n{},mean_e_gran,{:.6}", s.dist, s.mean_e_gran));
        text.push_str(&format!("\n{},coarse_practical_pct,{:.6}", s.dist, s.coarse_pct));
    }
    text.push('\n');
    let csv_path = cfg.reports_dir.join("stats.csv");
    write_text(&csv_path, &text)?;
    Ok(StatsOutcome { csv_path, summaries })
}
