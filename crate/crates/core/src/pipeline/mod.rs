//! End-to-end orchestration: corpus synthesis, model building, restoration,
//! evaluation tables, usage statistics, and ablation sweeps.
//!
//! Every command is a pure function of its [`RunConfig`] and the files it
//! reads. Build stages are checksummed so a rerun either skips finished work
//! or refuses to mix artifacts from different corpus generations.

mod build;
mod corpus;
mod evalrun;
mod sweep;

pub use build::{cmd_build, load_models, BuildOutcome, BuiltModels, StageStatus};
pub use corpus::{cmd_synth, load_manifest, manifest_checksum, ManifestRow, SynthOutcome};
pub use evalrun::{
    cmd_eval, cmd_restore, cmd_stats, parse_mode, EvalOutcome, ItemTrace, RestoreMode,
    RestoreOutcome, StatsOutcome,
};
pub use sweep::{cmd_sweep, SweepKind, SweepOutcome};

use crate::cluster::ClusterError;
use crate::degrade::DegradeError;
use crate::experts::ExpertError;
use crate::features::FeatureError;
use crate::image::ImageError;
use crate::nn::NnError;
use crate::router::RouterError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Anything a pipeline command can fail with. CLI layers print these as
/// single-line machine-readable errors.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad json in {path}: {detail}")]
    BadJson { path: PathBuf, detail: String },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("no clean images found in {0}")]
    MissingCleans(PathBuf),
    #[error("stage {stage} has not run yet: {hint}")]
    MissingStage { stage: String, hint: String },
    #[error("stage {stage} is stale: {detail}")]
    StaleStage { stage: String, detail: String },
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("unknown task {given:?}; known tasks: {known}")]
    UnknownTask { given: String, known: String },
    #[error("no eval traces found in {0}; run eval first")]
    NoTraces(PathBuf),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Corpus synthesis settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Side of each generated clean image.
    pub clean_size: usize,
    /// Side of each training/evaluation patch.
    pub patch: usize,
    /// Clean images reserved for the train split.
    pub train_cleans: usize,
    /// Clean images reserved for the validation split.
    pub val_cleans: usize,
    /// Clean images reserved for the test splits (shared by both dist modes).
    pub test_cleans: usize,
    /// Patches cropped from each clean image.
    pub crops_per_clean: usize,
    /// Whether the sampled train/val mixtures may include the compression
    /// stage. Named test recipes never include it either way.
    pub include_jpeg: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            clean_size: 128,
            patch: 64,
            train_cleans: 100,
            val_cleans: 10,
            test_cleans: 25,
            crops_per_clean: 4,
            include_jpeg: false,
        }
    }
}

/// Expert training settings (per tree node).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: usize,
}

impl Default for ExpertSection {
    fn default() -> Self {
        ExpertSection { steps: 2000, batch: 8, lr: 3e-4, eval_every: 50 }
    }
}

/// Router training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the estimation-uncertainty loss.
    pub alpha: f64,
    /// Weight of the level load-balance loss.
    pub beta: f64,
    /// Descriptor jitter during training, as a fraction of the corpus'
    /// within-cluster RMS spread. Models the crop-to-crop variability of
    /// estimated descriptors so the uncertainty head learns a usable scale.
    pub dr_noise_frac: f64,
}

impl Default for RouterSection {
    fn default() -> Self {
        RouterSection { steps: 2000, batch: 8, lr: 1e-3, alpha: 0.1, beta: 0.01, dr_noise_frac: 0.5 }
    }
}

/// Full run configuration. Every field has a default, so a config file may
/// override any subset; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Where the synthesized corpus lives.
    pub corpus_dir: PathBuf,
    /// Where build artifacts (standardizer, tree, experts, routers) live.
    pub models_dir: PathBuf,
    /// Where evaluation tables, traces, and restored images live.
    pub reports_dir: PathBuf,
    /// Cluster counts per granularity level, coarse to fine.
    pub level_counts: Vec<usize>,
    pub corpus: CorpusSection,
    pub expert: ExpertSection,
    pub router: RouterSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            corpus_dir: PathBuf::from("run/corpus"),
            models_dir: PathBuf::from("run/models"),
            reports_dir: PathBuf::from("run/reports"),
            level_counts: vec![1, 4, 8],
            corpus: CorpusSection::default(),
            expert: ExpertSection::default(),
            router: RouterSection::default(),
        }
    }
}

impl RunConfig {
    /// Validates the cheap structural invariants every command relies on.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.level_counts.is_empty() {
            return Err(PipelineError::BadConfig("level_counts must not be empty".into()));
        }
        if self.level_counts.iter().any(|c| *c == 0) {
            return Err(PipelineError::BadConfig("level_counts entries must be positive".into()));
        }
        if self.level_counts.windows(2).any(|w| w[0] > w[1]) {
            return Err(PipelineError::BadConfig(
                "level_counts must be non-decreasing coarse to fine".into(),
            ));
        }
        if self.corpus.patch < 8 {
            return Err(PipelineError::BadConfig("patch must be at least 8".into()));
        }
        if self.corpus.patch > self.corpus.clean_size {
            return Err(PipelineError::BadConfig("patch must fit inside clean_size".into()));
        }
        if self.corpus.train_cleans == 0
            || self.corpus.test_cleans == 0
            || self.corpus.crops_per_clean == 0
        {
            return Err(PipelineError::BadConfig(
                "train_cleans, test_cleans, and crops_per_clean must be positive".into(),
            ));
        }
        if self.expert.steps == 0 || self.expert.batch == 0 || self.expert.lr <= 0.0 {
            return Err(PipelineError::BadConfig("expert section must be positive".into()));
        }
        if self.router.steps == 0
            || self.router.batch == 0
            || self.router.lr <= 0.0
            || self.router.alpha < 0.0
            || self.router.beta < 0.0
            || self.router.dr_noise_frac < 0.0
        {
            return Err(PipelineError::BadConfig(
                "router steps/batch/lr must be positive and alpha/beta/dr_noise_frac non-negative"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Pretty JSON with every field resolved — what `--print-config` shows.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file and validates it.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = read_text(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::BadJson { path: path.to_path_buf(), detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits a corpus item can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestIn,
    TestOut,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIn => "test_in",
            Split::TestOut => "test_out",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test_in" => Ok(Split::TestIn),
            "test_out" => Ok(Split::TestOut),
            other => Err(PipelineError::BadManifest(format!("unknown split {other:?}"))),
        }
    }
}

/// Completed-stage fingerprints, persisted as `stage_state.json` next to the
/// artifacts they describe.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageState {
    pub stages: BTreeMap<String, String>,
}

impl StageState {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Ok(StageState::default());
        }
        let text = read_text(path)?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::BadJson { path: path.to_path_buf(), detail: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_text(path, &serde_json::to_string_pretty(self).expect("state serializes"))
    }
}

/// How a guarded stage should proceed, given what is already on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagePlan {
    /// Artifacts exist and match the wanted fingerprint.
    Skip,
    /// Nothing usable on disk; run the stage.
    Run,
}

/// Decides whether a stage can be skipped, must run, or is stale.
///
/// A stage is stale when disk state disagrees with the wanted fingerprint:
/// either the recorded fingerprint differs (inputs changed under finished
/// work) or artifacts exist without a record (unknown provenance). Both get
/// an error naming the stage instead of silently mixing generations.
pub fn plan_stage(
    state: &StageState,
    stage: &str,
    want_fp: &str,
    artifacts_present: bool,
) -> Result<StagePlan, PipelineError> {
    match state.stages.get(stage) {
        Some(have) if have == want_fp => {
            if artifacts_present {
                Ok(StagePlan::Skip)
            } else {
                // Recorded as done but files are gone; rebuilding from the
                // same inputs reproduces them exactly.
                Ok(StagePlan::Run)
            }
        }
        Some(_) => Err(PipelineError::StaleStage {
            stage: stage.to_string(),
            detail: "inputs changed since this stage ran; delete the models directory or restore \
                     the original corpus/config"
                .into(),
        }),
        None if artifacts_present => Err(PipelineError::StaleStage {
            stage: stage.to_string(),
            detail: "artifacts exist but no completion record does; delete the models directory"
                .into(),
        }),
        None => Ok(StagePlan::Run),
    }
}

/// SHA-256 hex over newline-joined parts; the build's stage fingerprint.
pub fn fingerprint(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub(crate) fn read_text(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| PipelineError::Io { path: parent.to_path_buf(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_json_pretty();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.level_counts, cfg.level_counts);
        assert_eq!(back.expert.steps, cfg.expert.steps);
    }

    #[test]
    fn partial_config_fills_defaults_and_unknown_keys_fail() {
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.level_counts, vec![1, 4, 8]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 5}"#).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = RunConfig::default();
        cfg.level_counts = vec![4, 1];
        assert!(matches!(cfg.validate(), Err(PipelineError::BadConfig(_))));
        cfg.level_counts = vec![];
        assert!(cfg.validate().is_err());
        cfg.level_counts = vec![1, 4];
        cfg.corpus.patch = 512;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_planning_skips_reruns_and_flags_staleness() {
        let mut state = StageState::default();
        assert_eq!(plan_stage(&state, "tree", "abc", false).unwrap(), StagePlan::Run);
        state.stages.insert("tree".into(), "abc".into());
        assert_eq!(plan_stage(&state, "tree", "abc", true).unwrap(), StagePlan::Skip);
        assert_eq!(plan_stage(&state, "tree", "abc", false).unwrap(), StagePlan::Run);
        assert!(matches!(
            plan_stage(&state, "tree", "other", true),
            Err(PipelineError::StaleStage { .. })
        ));
        let empty = StageState::default();
        assert!(matches!(
            plan_stage(&empty, "tree", "abc", true),
            Err(PipelineError::StaleStage { .. })
        ));
    }

    #[test]
    fn fingerprints_separate_parts() {
        // Moving a boundary must change the hash, so parts are delimited.
        assert_ne!(fingerprint(&["ab", "c"]), fingerprint(&["a", "bc"]));
        assert_eq!(fingerprint(&["x", "y"]), fingerprint(&["x", "y"]));
    }
}
