//! Corpus synthesis: procedural clean images, seeded patch crops, and the
//! degraded train/val/test splits with their JSON spec sidecars.

use super::{
    fingerprint, read_text, write_text, PipelineError, RunConfig, Split,
};
use crate::degrade::{
    make_named_mixture, recipe_by_name, synthesize_with, DistMode, NAMED_RECIPES,
};
use crate::image::{load_png, save_png, Image};
use crate::procgen::make_clean_image;
use crate::seeds::derive_seed2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// Domain tags for the corpus seed streams.
const TAG_CLEAN: u64 = 0x5EED_000C;
const TAG_CROP: u64 = 0x5EED_000D;
const TAG_ITEM: u64 = 0x5EED_000E;

/// Seed-index bases keeping the splits' streams disjoint however the counts
/// change. Test crops share one base so in- and out-dist items are paired on
/// identical patches; their spec seeds differ by split base.
const BASE_TRAIN: u64 = 0;
const BASE_VAL: u64 = 100_000;
const BASE_TEST: u64 = 200_000;
const BASE_TEST_OUT: u64 = 300_000;

/// One corpus item as recorded in `manifest.csv`. Paths are relative to the
/// corpus directory, forward slashes.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub split: Split,
    pub dist: DistMode,
    pub index: usize,
    /// Named recipe for test items, `mixed` for sampled train/val mixtures.
    pub recipe: String,
    pub clean: String,
    pub degraded: String,
    pub spec: String,
    pub spec_seed: u64,
}

const MANIFEST_HEADER: &str = "split,dist,index,recipe,clean,degraded,spec,spec_seed";

impl ManifestRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.split,
            self.dist,
            self.index,
            self.recipe,
            self.clean,
            self.degraded,
            self.spec,
            self.spec_seed
        )
    }

    fn from_csv(line: &str) -> Result<Self, PipelineError> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(PipelineError::BadManifest(format!(
                "expected 8 fields, got {} in {line:?}",
                fields.len()
            )));
        }
        Ok(ManifestRow {
            split: fields[0].parse()?,
            dist: fields[1]
                .parse()
                .map_err(|_| PipelineError::BadManifest(format!("bad dist {:?}", fields[1])))?,
            index: fields[2]
                .parse()
                .map_err(|_| PipelineError::BadManifest(format!("bad index {:?}", fields[2])))?,
            recipe: fields[3].to_string(),
            clean: fields[4].to_string(),
            degraded: fields[5].to_string(),
            spec: fields[6].to_string(),
            spec_seed: fields[7]
                .parse()
                .map_err(|_| PipelineError::BadManifest(format!("bad seed {:?}", fields[7])))?,
        })
    }
}

/// What `synth` did.
#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub items: usize,
    /// True when a previous run with the same fingerprint was found intact.
    pub skipped: bool,
    pub manifest_path: PathBuf,
    pub corpus_checksum: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SynthState {
    fingerprint: String,
}

fn synth_fingerprint(cfg: &RunConfig) -> String {
    let corpus_json = serde_json::to_string(&cfg.corpus).expect("section serializes");
    fingerprint(&["synth", &cfg.seed.to_string(), &corpus_json])
}

/// Checksum of the manifest file — the identity of a synthesized corpus.
pub fn manifest_checksum(corpus_dir: &Path) -> Result<String, PipelineError> {
    let text = read_text(&corpus_dir.join("manifest.csv"))?;
    Ok(fingerprint(&[&text]))
}

/// Reads and parses `manifest.csv`.
pub fn load_manifest(corpus_dir: &Path) -> Result<Vec<ManifestRow>, PipelineError> {
    let path = corpus_dir.join("manifest.csv");
    if !path.exists() {
        return Err(PipelineError::MissingStage {
            stage: "synth".into(),
            hint: format!("no manifest at {}", path.display()),
        });
    }
    let text = read_text(&path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(PipelineError::BadManifest(format!(
                "bad header {other:?}; expected {MANIFEST_HEADER:?}"
            )))
        }
    }
    lines.filter(|l| !l.trim().is_empty()).map(ManifestRow::from_csv).collect()
}

/// Ensures the clean-image directory exists and returns its files in name
/// order. An absent or empty directory is populated with seeded procedural
/// images; a present one must hold at least `needed` PNGs.
fn ensure_cleans(cfg: &RunConfig, needed: usize) -> Result<Vec<PathBuf>, PipelineError> {
    let dir = cfg.corpus_dir.join("clean");
    let existing: Vec<PathBuf> = if dir.exists() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| PipelineError::Io { path: dir.clone(), source: e })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        files
    } else {
        Vec::new()
    };
    if !existing.is_empty() {
        if existing.len() < needed {
            return Err(PipelineError::MissingCleans(dir));
        }
        return Ok(existing);
    }
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::Io { path: dir.clone(), source: e })?;
    let paths: Vec<PathBuf> =
        (0..needed).map(|i| dir.join(format!("clean_{i:03}.png"))).collect();
    paths.par_iter().enumerate().try_for_each(|(i, path)| {
        let img = make_clean_image(
            cfg.corpus.clean_size,
            cfg.corpus.clean_size,
            derive_seed2(cfg.seed, TAG_CLEAN, i as u64),
        );
        save_png(&img, path).map_err(PipelineError::from)
    })?;
    Ok(paths)
}

/// One item to synthesize: which clean, which crop stream, which degradation.
struct ItemPlan {
    split: Split,
    dist: DistMode,
    index: usize,
    clean_idx: usize,
    crop_seed_idx: u64,
    spec_seed: u64,
    /// Some(name) replays a named recipe; None samples a gated mixture.
    recipe: Option<&'static str>,
}

fn plan_items(cfg: &RunConfig) -> Vec<ItemPlan> {
    let c = &cfg.corpus;
    let mut plans = Vec::new();
    let per = c.crops_per_clean;
    for i in 0..c.train_cleans * per {
        plans.push(ItemPlan {
            split: Split::Train,
            dist: DistMode::InDist,
            index: i,
            clean_idx: i / per,
            crop_seed_idx: BASE_TRAIN + i as u64,
            spec_seed: derive_seed2(cfg.seed, TAG_ITEM, BASE_TRAIN + i as u64),
            recipe: None,
        });
    }
    for i in 0..c.val_cleans * per {
        plans.push(ItemPlan {
            split: Split::Val,
            dist: DistMode::InDist,
            index: i,
            clean_idx: c.train_cleans + i / per,
            crop_seed_idx: BASE_VAL + i as u64,
            spec_seed: derive_seed2(cfg.seed, TAG_ITEM, BASE_VAL + i as u64),
            recipe: None,
        });
    }
    for (split, dist, base) in [
        (Split::TestIn, DistMode::InDist, BASE_TEST),
        (Split::TestOut, DistMode::OutDist, BASE_TEST_OUT),
    ] {
        for i in 0..c.test_cleans * per {
            plans.push(ItemPlan {
                split,
                dist,
                index: i,
                clean_idx: c.train_cleans + c.val_cleans + i / per,
                // Shared stream: in- and out-dist test items use identical
                // crops and differ only in degradation parameters.
                crop_seed_idx: BASE_TEST + i as u64,
                spec_seed: derive_seed2(cfg.seed, TAG_ITEM, base + i as u64),
                recipe: Some(NAMED_RECIPES[i % NAMED_RECIPES.len()].0),
            });
        }
    }
    plans
}

fn synth_item(
    cfg: &RunConfig,
    plan: &ItemPlan,
    cleans: &[Image],
) -> Result<ManifestRow, PipelineError> {
    let source = &cleans[plan.clean_idx];
    let patch = cfg.corpus.patch;
    let mut crop_rng =
        ChaCha8Rng::seed_from_u64(derive_seed2(cfg.seed, TAG_CROP, plan.crop_seed_idx));
    let oy = crop_rng.gen_range(0..=source.height() - patch);
    let ox = crop_rng.gen_range(0..=source.width() - patch);
    let clean = source.crop(ox, oy, patch, patch)?;

    let (degraded, spec) = match plan.recipe {
        Some(name) => {
            make_named_mixture(&clean, recipe_by_name(name)?, plan.dist, plan.spec_seed)?
        }
        None => synthesize_with(&clean, plan.dist, plan.spec_seed, cfg.corpus.include_jpeg)?,
    };

    let dir = plan.split.dir_name();
    let stem = format!("item_{:04}", plan.index);
    let rel_clean = format!("{dir}/{stem}.clean.png");
    let rel_deg = format!("{dir}/{stem}.deg.png");
    let rel_spec = format!("{dir}/{stem}.spec.json");
    save_png(&clean, &cfg.corpus_dir.join(&rel_clean))?;
    save_png(&degraded, &cfg.corpus_dir.join(&rel_deg))?;
    write_text(&cfg.corpus_dir.join(&rel_spec), &spec.to_json())?;

    Ok(ManifestRow {
        split: plan.split,
        dist: plan.dist,
        index: plan.index,
        recipe: plan.recipe.unwrap_or("mixed").to_string(),
        clean: rel_clean,
        degraded: rel_deg,
        spec: rel_spec,
        spec_seed: plan.spec_seed,
    })
}

/// Synthesizes the full corpus: clean PNGs, degraded PNGs, spec sidecars, and
/// `manifest.csv`. A completed corpus with the same fingerprint is left
/// untouched; a changed configuration regenerates everything.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutcome, PipelineError> {
    cfg.validate()?;
    let fp = synth_fingerprint(cfg);
    let state_path = cfg.corpus_dir.join("synth_state.json");
    let manifest_path = cfg.corpus_dir.join("manifest.csv");
    if state_path.exists() && manifest_path.exists() {
        let state: SynthState = serde_json::from_str(&read_text(&state_path)?).map_err(|e| {
            PipelineError::BadJson { path: state_path.clone(), detail: e.to_string() }
        })?;
        if state.fingerprint == fp {
            let rows = load_manifest(&cfg.corpus_dir)?;
            return Ok(SynthOutcome {
                items: rows.len(),
                skipped: true,
                manifest_path,
                corpus_checksum: manifest_checksum(&cfg.corpus_dir)?,
            });
        }
    }

    // Regenerating: clear the split directories so stale items from an
    // earlier, larger configuration cannot linger.
    for split in [Split::Train, Split::Val, Split::TestIn, Split::TestOut] {
        let dir = cfg.corpus_dir.join(split.dir_name());
        if dir.exists() {
            std::fs::remove_dir_all(&dir)
                .map_err(|e| PipelineError::Io { path: dir.clone(), source: e })?;
        }
    }

    let c = &cfg.corpus;
    let needed_cleans = c.train_cleans + c.val_cleans + c.test_cleans;
    let clean_paths = ensure_cleans(cfg, needed_cleans)?;
    // Degradations run on the PNG-quantized pixels, so replaying a spec
    // against the stored clean file reproduces the stored degraded file
    // byte for byte.
    let cleans: Vec<Image> = clean_paths[..needed_cleans]
        .par_iter()
        .map(|p| load_png(p).map_err(PipelineError::from))
        .collect::<Result<_, _>>()?;
    for img in &cleans {
        if img.height() < c.patch || img.width() < c.patch {
            return Err(PipelineError::BadConfig(format!(
                "clean images must be at least {0}x{0} (patch size)",
                c.patch
            )));
        }
    }

    let plans = plan_items(cfg);
    let rows: Vec<ManifestRow> = plans
        .par_iter()
        .map(|plan| synth_item(cfg, plan, &cleans))
        .collect::<Result<_, _>>()?;

    let mut text = String::from(MANIFEST_HEADER);
    for row in &rows {
        text.push('\n');
        text.push_str(&row.to_csv());
    }
    text.push('\n');
    write_text(&manifest_path, &text)?;
    write_text(
        &state_path,
        &serde_json::to_string_pretty(&SynthState { fingerprint: fp }).expect("state serializes"),
    )?;
    Ok(SynthOutcome {
        items: rows.len(),
        skipped: false,
        manifest_path,
        corpus_checksum: manifest_checksum(&cfg.corpus_dir)?,
    })
}
