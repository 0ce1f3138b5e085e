//! Gated synthesis of mixed degradations, and exact replay from specs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::*;
use super::{ranges, AppliedStage, DegradationKind, DegradationSpec, DegradeError, DistMode, GATED_PIPELINE, NAMED_RECIPES};
use crate::image::Image;
use crate::procgen::{make_depth_field, make_snow_mask};
use crate::seeds::derive_seed2;

/// Seed-derivation tags; fixed constants so specs replay across versions.
const TAG_SPEC: u64 = 0x5EED_0001;
const TAG_STAGE: u64 = 0x5EED_0002;

fn stage_tag(kind: DegradationKind) -> u64 {
    match kind {
        DegradationKind::Lowlight => 1,
        DegradationKind::Blur => 2,
        DegradationKind::Noise => 3,
        DegradationKind::Rain => 4,
        DegradationKind::Snow => 5,
        DegradationKind::Haze => 6,
        DegradationKind::Jpeg => 7,
    }
}

fn sample_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

/// Samples one stage's parameters for the given severity band.
fn sample_stage(kind: DegradationKind, mode: DistMode, rng: &mut ChaCha8Rng) -> AppliedStage {
    match kind {
        DegradationKind::Lowlight => AppliedStage::Lowlight {
            gamma: sample_uniform(rng, ranges::lowlight_gamma(mode)),
        },
        DegradationKind::Blur => {
            let (klo, khi) = ranges::BLUR_KSIZE;
            let ksize = klo + 2 * rng.gen_range(0..=(khi - klo) / 2);
            let isotropic = rng.gen_bool(0.5);
            let sigma_x = sample_uniform(rng, ranges::blur_sigma(mode));
            let (sigma_y, angle_deg) = if isotropic {
                (sigma_x, 0.0)
            } else {
                (sample_uniform(rng, ranges::blur_sigma(mode)), rng.gen_range(0.0..180.0))
            };
            AppliedStage::Blur { sigma_x, sigma_y, angle_deg, ksize }
        }
        DegradationKind::Noise => AppliedStage::Noise {
            sigma: sample_uniform(rng, ranges::noise_sigma255(mode)) / 255.0,
        },
        DegradationKind::Rain => {
            let (clo, chi) = ranges::rain_count(mode);
            AppliedStage::Rain {
                count: rng.gen_range(clo..chi),
                direction_deg: rng.gen_range(ranges::RAIN_DIRECTION.0..=ranges::RAIN_DIRECTION.1),
                length: rng.gen_range(ranges::RAIN_LENGTH.0..=ranges::RAIN_LENGTH.1),
                width: ranges::RAIN_WIDTHS[rng.gen_range(0..ranges::RAIN_WIDTHS.len())],
            }
        }
        DegradationKind::Snow => AppliedStage::Snow {
            coverage: sample_uniform(rng, ranges::snow_coverage(mode)),
        },
        DegradationKind::Haze => AppliedStage::Haze {
            airlight: rng.gen_range(ranges::HAZE_AIRLIGHT.0..=ranges::HAZE_AIRLIGHT.1),
            beta_s: sample_uniform(rng, ranges::haze_beta(mode)),
        },
        DegradationKind::Jpeg => {
            let (qlo, qhi) = ranges::jpeg_quality(mode);
            AppliedStage::Jpeg { quality: rng.gen_range(qlo..qhi) }
        }
    }
}

/// Draws a gated mixed-degradation spec: each pipeline stage opens with
/// probability one half, gates are redrawn while all stages are closed, and
/// parameters are sampled for the open stages in pipeline order.
pub fn sample_spec(mode: DistMode, seed: u64, include_jpeg: bool) -> DegradationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, TAG_SPEC, 0));
    let stage_count = GATED_PIPELINE.len() + usize::from(include_jpeg);
    let mut gates = vec![false; stage_count];
    loop {
        for g in &mut gates {
            *g = rng.gen_bool(0.5);
        }
        if gates.iter().any(|g| *g) {
            break;
        }
    }
    let mut applied = Vec::new();
    for (i, kind) in GATED_PIPELINE.iter().enumerate() {
        if gates[i] {
            applied.push(sample_stage(*kind, mode, &mut rng));
        }
    }
    if include_jpeg && gates[GATED_PIPELINE.len()] {
        applied.push(sample_stage(DegradationKind::Jpeg, mode, &mut rng));
    }
    DegradationSpec { seed, dist_mode: mode, applied }
}

/// Replays a recorded spec on a clean image; bit-identical to the original
/// synthesis because each stage derives its own randomness from the spec
/// seed and stage kind.
pub fn apply_spec(clean: &Image, spec: &DegradationSpec) -> Result<Image, DegradeError> {
    let mut img = clean.clone();
    for stage in &spec.applied {
        let stage_seed = derive_seed2(spec.seed, TAG_STAGE, stage_tag(stage.kind()));
        let (h, w) = (img.height(), img.width());
        img = match stage {
            AppliedStage::Lowlight { gamma } => apply_lowlight(&img, *gamma)?,
            AppliedStage::Blur { sigma_x, sigma_y, angle_deg, ksize } => {
                apply_blur(&img, &gaussian_kernel(*ksize, *sigma_x, *sigma_y, *angle_deg)?)?
            }
            AppliedStage::Noise { sigma } => apply_noise(&img, *sigma, stage_seed)?,
            AppliedStage::Rain { count, direction_deg, length, width } => {
                apply_rain(&img, *count, *direction_deg, *length, *width, stage_seed)?
            }
            AppliedStage::Snow { coverage } => {
                apply_snow(&img, &make_snow_mask(h, w, *coverage, stage_seed))?
            }
            AppliedStage::Haze { airlight, beta_s } => {
                apply_haze(&img, *airlight, *beta_s, &make_depth_field(h, w, stage_seed))?
            }
            AppliedStage::Jpeg { quality } => apply_jpeg(&img, *quality)?,
        };
    }
    Ok(img)
}

/// Samples a gated degradation mixture and applies it.
pub fn synthesize(clean: &Image, mode: DistMode, seed: u64) -> Result<(Image, DegradationSpec), DegradeError> {
    synthesize_with(clean, mode, seed, false)
}

/// [`synthesize`] with the optional trailing compression stage enabled.
pub fn synthesize_with(
    clean: &Image,
    mode: DistMode,
    seed: u64,
    include_jpeg: bool,
) -> Result<(Image, DegradationSpec), DegradeError> {
    let spec = sample_spec(mode, seed, include_jpeg);
    let img = apply_spec(clean, &spec)?;
    Ok((img, spec))
}

/// Applies exactly one of the seven named recipes: the listed kinds, in
/// pipeline order, with freshly sampled parameters.
pub fn make_named_mixture(
    clean: &Image,
    recipe: &[DegradationKind],
    mode: DistMode,
    seed: u64,
) -> Result<(Image, DegradationSpec), DegradeError> {
    if recipe.is_empty() {
        return Err(DegradeError::EmptyRecipe);
    }
    let mut sorted: Vec<_> = recipe.to_vec();
    sorted.sort();
    sorted.dedup();
    let known = NAMED_RECIPES.iter().any(|(_, kinds)| {
        let mut theirs: Vec<_> = kinds.to_vec();
        theirs.sort();
        theirs == sorted
    });
    if !known {
        let names: Vec<_> = recipe.iter().map(|k| k.token()).collect();
        return Err(DegradeError::UnknownRecipe(names.join("-")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, TAG_SPEC, 1));
    let mut applied = Vec::new();
    for kind in GATED_PIPELINE {
        if sorted.contains(&kind) {
            applied.push(sample_stage(kind, mode, &mut rng));
        }
    }
    let spec = DegradationSpec { seed, dist_mode: mode, applied };
    let img = apply_spec(clean, &spec)?;
    Ok((img, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procgen::make_clean_image;

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let clean = make_clean_image(48, 48, 1);
        let (img_a, spec_a) = synthesize(&clean, DistMode::InDist, 42).unwrap();
        let (img_b, spec_b) = synthesize(&clean, DistMode::InDist, 42).unwrap();
        assert_eq!(spec_a, spec_b);
        assert_eq!(img_a, img_b);
        let (img_c, spec_c) = synthesize(&clean, DistMode::InDist, 43).unwrap();
        assert!(spec_c != spec_a || img_c != img_a);
    }

    #[test]
    fn replay_reproduces_synthesis_bit_exactly() {
        let clean = make_clean_image(48, 48, 2);
        for seed in 0..24 {
            let (img, spec) = synthesize(&clean, DistMode::OutDist, seed).unwrap();
            let replay = apply_spec(&clean, &spec).unwrap();
            assert_eq!(replay, img, "seed {seed}");
        }
    }

    #[test]
    fn replay_survives_json_round_trip() {
        let clean = make_clean_image(48, 48, 3);
        let (img, spec) = synthesize(&clean, DistMode::InDist, 7).unwrap();
        let spec_back = DegradationSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(apply_spec(&clean, &spec_back).unwrap(), img);
    }

    #[test]
    fn at_least_one_stage_always_applies() {
        for seed in 0..500 {
            let spec = sample_spec(DistMode::InDist, seed, false);
            assert!(!spec.applied.is_empty(), "seed {seed} applied nothing");
        }
    }

    #[test]
    fn stages_follow_pipeline_order() {
        for seed in 0..100 {
            let spec = sample_spec(DistMode::InDist, seed, true);
            let order = |k: DegradationKind| match k {
                DegradationKind::Jpeg => GATED_PIPELINE.len(),
                other => GATED_PIPELINE.iter().position(|g| *g == other).unwrap(),
            };
            let positions: Vec<_> = spec.kinds().iter().map(|k| order(*k)).collect();
            for pair in positions.windows(2) {
                assert!(pair[0] < pair[1]);
            }
        }
    }

    #[test]
    fn out_dist_draws_avoid_in_dist_ranges() {
        for seed in 0..300 {
            let spec = sample_spec(DistMode::OutDist, seed, true);
            for stage in &spec.applied {
                match stage {
                    AppliedStage::Blur { sigma_x, sigma_y, .. } => {
                        let (lo, hi) = ranges::blur_sigma(DistMode::InDist);
                        for s in [sigma_x, sigma_y] {
                            assert!(!(*s >= lo && *s < hi), "blur sigma {s} in in-dist band");
                        }
                    }
                    AppliedStage::Noise { sigma } => {
                        let (lo, hi) = ranges::noise_sigma255(DistMode::InDist);
                        let s255 = sigma * 255.0;
                        assert!(!(s255 >= lo && s255 < hi));
                    }
                    AppliedStage::Rain { count, .. } => {
                        let (lo, hi) = ranges::rain_count(DistMode::InDist);
                        assert!(!(*count >= lo && *count < hi));
                    }
                    AppliedStage::Lowlight { gamma } => {
                        let (lo, hi) = ranges::lowlight_gamma(DistMode::InDist);
                        assert!(!(*gamma >= lo && *gamma < hi));
                    }
                    AppliedStage::Haze { beta_s, .. } => {
                        let (lo, hi) = ranges::haze_beta(DistMode::InDist);
                        assert!(!(*beta_s >= lo && *beta_s < hi));
                    }
                    AppliedStage::Snow { coverage } => {
                        let (lo, hi) = ranges::snow_coverage(DistMode::InDist);
                        assert!(!(*coverage >= lo && *coverage < hi));
                    }
                    AppliedStage::Jpeg { quality } => {
                        let (lo, hi) = ranges::jpeg_quality(DistMode::InDist);
                        assert!(!(*quality >= lo && *quality < hi));
                    }
                }
            }
        }
    }

    #[test]
    fn named_mixture_contains_exactly_listed_kinds() {
        let clean = make_clean_image(48, 48, 4);
        let recipe = super::super::recipe_by_name("H-R").unwrap();
        let (_, spec) = make_named_mixture(&clean, recipe, DistMode::InDist, 11).unwrap();
        let mut kinds = spec.kinds();
        kinds.sort();
        let mut expected = vec![DegradationKind::Rain, DegradationKind::Haze];
        expected.sort();
        assert_eq!(kinds, expected);
    }

    #[test]
    fn named_mixture_rejects_unknown_and_empty() {
        let clean = make_clean_image(48, 48, 5);
        assert!(matches!(
            make_named_mixture(&clean, &[], DistMode::InDist, 0),
            Err(DegradeError::EmptyRecipe)
        ));
        assert!(matches!(
            make_named_mixture(&clean, &[DegradationKind::Jpeg], DistMode::InDist, 0),
            Err(DegradeError::UnknownRecipe(_))
        ));
    }

    #[test]
    fn all_seven_recipes_synthesize() {
        let clean = make_clean_image(48, 48, 6);
        for (name, kinds) in NAMED_RECIPES {
            let (img, spec) = make_named_mixture(&clean, kinds, DistMode::InDist, 3).unwrap();
            assert_eq!(spec.applied.len(), kinds.len(), "recipe {name}");
            assert_ne!(img, clean, "recipe {name} was a no-op");
        }
    }
}
