//! Ablation sweeps: rebuild the models under level-count variants on the
//! same corpus and tabulate auto-mode quality for comparison.

use super::evalrun::cmd_eval;
use super::{cmd_build, write_text, PipelineError, RunConfig};
use std::path::PathBuf;

/// Which axis the sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Finest-cluster counts {1, 2, 4, 8} under a single root.
    Fineness,
    /// Level sets {1}, {8}, {1,4,8}.
    Granularity,
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepKind::Fineness => "fineness",
            SweepKind::Granularity => "granularity",
        })
    }
}

impl std::str::FromStr for SweepKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fineness" => Ok(SweepKind::Fineness),
            "granularity" => Ok(SweepKind::Granularity),
            other => Err(PipelineError::BadConfig(format!(
                "unknown sweep {other:?}; expected fineness or granularity"
            ))),
        }
    }
}

fn variants(kind: SweepKind) -> Vec<Vec<usize>> {
    match kind {
        SweepKind::Fineness => vec![vec![1], vec![1, 2], vec![1, 4], vec![1, 8]],
        SweepKind::Granularity => vec![vec![1], vec![8], vec![1, 4, 8]],
    }
}

fn variant_label(levels: &[usize]) -> String {
    let joined: Vec<String> = levels.iter().map(|l| l.to_string()).collect();
    format!("levels_{}", joined.join("_"))
}

/// One comparison row: auto-mode average quality for a variant and dist.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub variant: String,
    /// The variant's level counts, coarse to fine.
    pub levels: Vec<usize>,
    pub dist: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// What `sweep` produced.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub csv_path: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// Rebuilds and evaluates each variant in its own models/reports subtree
/// (the corpus is shared) and writes `sweep_<kind>.csv`.
pub fn cmd_sweep(cfg: &RunConfig, kind: SweepKind) -> Result<SweepOutcome, PipelineError> {
    cfg.validate()?;
    let mut rows: Vec<SweepRow> = Vec::new();
    for levels in variants(kind) {
        let label = variant_label(&levels);
        let mut sub = cfg.clone();
        sub.level_counts = levels.clone();
        sub.models_dir = cfg.models_dir.join(format!("sweep_{kind}")).join(&label);
        sub.reports_dir = cfg.reports_dir.join(format!("sweep_{kind}")).join(&label);
        cmd_build(&sub)?;
        let eval = cmd_eval(&sub, None)?;
        for avg in &eval.averages {
            if avg.method == "multi-granularity-auto" {
                rows.push(SweepRow {
                    variant: label.clone(),
                    levels: levels.clone(),
                    dist: avg.dist.clone(),
                    psnr: avg.psnr,
                    ssim: avg.ssim,
                });
            }
        }
    }

    let mut text = String::from("sweep,variant,dist,method,psnr,ssim");
    for row in &rows {
        text.push_str(&format!(
            "\n{kind},{},{},multi-granularity-auto,{:.6},{:.6}",
            row.variant, row.dist, row.psnr, row.ssim
        ));
    }
    text.push('\n');
    let csv_path = cfg.reports_dir.join(format!("sweep_{kind}.csv"));
    write_text(&csv_path, &text)?;
    Ok(SweepOutcome { csv_path, rows })
}

#[cfg(test)]
mod tests {
    use super::super::cmd_synth;
    use super::*;
    use std::path::Path;

    fn tiny_config(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 31;
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
        cfg.expert.steps = 4;
        cfg.expert.eval_every = 2;
        cfg.router.steps = 3;
        cfg
    }

    #[test]
    fn granularity_sweep_builds_each_variant_and_tabulates() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        cmd_synth(&cfg).unwrap();
        let out = cmd_sweep(&cfg, SweepKind::Granularity).unwrap();
        // 3 variants x 2 dists.
        assert_eq!(out.rows.len(), 6);
        assert!(out.csv_path.exists());
        for levels in [vec![1], vec![8], vec![1, 4, 8]] {
            let label = variant_label(&levels);
            assert!(cfg
                .models_dir
                .join("sweep_granularity")
                .join(&label)
                .join("tree.json")
                .exists());
            assert_eq!(out.rows.iter().filter(|r| r.levels == levels).count(), 2);
        }
        let text = std::fs::read_to_string(&out.csv_path).unwrap();
        assert!(text.starts_with("sweep,variant,dist,method,psnr,ssim\n"));
        assert!(text.contains("granularity,levels_1_4_8,out,multi-granularity-auto,"));
    }

    #[test]
    fn sweep_names_parse() {
        assert_eq!("fineness".parse::<SweepKind>().unwrap(), SweepKind::Fineness);
        assert_eq!("granularity".parse::<SweepKind>().unwrap(), SweepKind::Granularity);
        assert!("depth".parse::<SweepKind>().is_err());
    }
}
