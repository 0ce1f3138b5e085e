//! Parameterized image degradations with recorded, replayable specs.
//!
//! Seven degradation kinds are supported. A synthesis pass walks them in a
//! fixed pipeline order, opens each stage with probability one half, samples
//! stage parameters from per-kind ranges, and records everything in a
//! [`DegradationSpec`]. Replaying a spec on the same clean image reproduces
//! the degraded image bit for bit: stage-internal randomness (noise fields,
//! rain seeds, snow masks, depth maps) is derived from the spec seed and the
//! stage kind, never from a shared stream.
//!
//! Parameter ranges come in two disjoint severity bands: `in` (training
//! distribution) and `out` (held-out heavier severities).

mod ops;
mod synth;

pub use ops::{
    apply_blur, apply_haze, apply_jpeg, apply_lowlight, apply_noise, apply_rain, apply_snow,
    gaussian_kernel, line_kernel, Kernel,
};
pub use synth::{apply_spec, make_named_mixture, sample_spec, synthesize, synthesize_with};

use serde::{Deserialize, Serialize};

use crate::image::ImageError;

/// Degradation families, listed in pipeline order (`Jpeg`, when enabled,
/// runs last).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Lowlight,
    Blur,
    Noise,
    Rain,
    Snow,
    Haze,
    Jpeg,
}

/// The gated stages of the mixed-degradation pipeline, in application order.
pub const GATED_PIPELINE: [DegradationKind; 6] = [
    DegradationKind::Lowlight,
    DegradationKind::Blur,
    DegradationKind::Noise,
    DegradationKind::Rain,
    DegradationKind::Snow,
    DegradationKind::Haze,
];

/// Every degradation kind, in declaration order. Fixed so per-kind statistics
/// (for example cluster share matrices) agree across runs and artifacts.
pub const ALL_KINDS: [DegradationKind; 7] = [
    DegradationKind::Lowlight,
    DegradationKind::Blur,
    DegradationKind::Noise,
    DegradationKind::Rain,
    DegradationKind::Snow,
    DegradationKind::Haze,
    DegradationKind::Jpeg,
];

/// Position of `kind` within [`ALL_KINDS`].
pub fn kind_index(kind: DegradationKind) -> usize {
    ALL_KINDS.iter().position(|k| *k == kind).expect("ALL_KINDS is exhaustive")
}

impl DegradationKind {
    /// Short token used in recipe names.
    pub fn token(self) -> &'static str {
        match self {
            Self::Lowlight => "LL",
            Self::Blur => "B",
            Self::Noise => "N",
            Self::Rain => "R",
            Self::Snow => "S",
            Self::Haze => "H",
            Self::Jpeg => "J",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lowlight => "lowlight",
            Self::Blur => "blur",
            Self::Noise => "noise",
            Self::Rain => "rain",
            Self::Snow => "snow",
            Self::Haze => "haze",
            Self::Jpeg => "jpeg",
        }
    }
}

impl std::fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DegradationKind {
    type Err = DegradeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lowlight" => Ok(Self::Lowlight),
            "blur" => Ok(Self::Blur),
            "noise" => Ok(Self::Noise),
            "rain" => Ok(Self::Rain),
            "snow" => Ok(Self::Snow),
            "haze" => Ok(Self::Haze),
            "jpeg" => Ok(Self::Jpeg),
            other => Err(DegradeError::UnknownKind(other.to_string())),
        }
    }
}

/// Severity band a spec was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistMode {
    #[serde(rename = "in")]
    InDist,
    #[serde(rename = "out")]
    OutDist,
}

impl std::fmt::Display for DistMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InDist => "in",
            Self::OutDist => "out",
        })
    }
}

impl std::str::FromStr for DistMode {
    type Err = DegradeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in" => Ok(Self::InDist),
            "out" => Ok(Self::OutDist),
            other => Err(DegradeError::UnknownDistMode(other.to_string())),
        }
    }
}

/// One applied stage with its sampled parameters. Serialized as
/// `{"kind": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum AppliedStage {
    Lowlight { gamma: f64 },
    Blur { sigma_x: f64, sigma_y: f64, angle_deg: f64, ksize: usize },
    Noise { sigma: f64 },
    Rain { count: u32, direction_deg: f64, length: usize, width: usize },
    Snow { coverage: f64 },
    Haze { airlight: f64, beta_s: f64 },
    Jpeg { quality: u32 },
}

impl AppliedStage {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Self::Lowlight { .. } => DegradationKind::Lowlight,
            Self::Blur { .. } => DegradationKind::Blur,
            Self::Noise { .. } => DegradationKind::Noise,
            Self::Rain { .. } => DegradationKind::Rain,
            Self::Snow { .. } => DegradationKind::Snow,
            Self::Haze { .. } => DegradationKind::Haze,
            Self::Jpeg { .. } => DegradationKind::Jpeg,
        }
    }
}

/// Full record of one synthesis pass: enough to replay it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub seed: u64,
    pub dist_mode: DistMode,
    pub applied: Vec<AppliedStage>,
}

impl DegradationSpec {
    pub fn kinds(&self) -> Vec<DegradationKind> {
        self.applied.iter().map(AppliedStage::kind).collect()
    }

    pub fn contains(&self, kind: DegradationKind) -> bool {
        self.applied.iter().any(|s| s.kind() == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, DegradeError> {
        serde_json::from_str(text).map_err(|e| DegradeError::BadSpecJson(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DegradeError {
    #[error("kernel size {0} is even; blur kernels must be odd")]
    EvenKernel(usize),
    #[error("kernel weights sum to {0:.9}, expected 1")]
    UnnormalizedKernel(f64),
    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    ParamOutOfRange { name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("rain width {0} must be one of 3, 5, 7, 9, 11")]
    BadRainWidth(usize),
    #[error("{what} has {got} samples but the image needs {need}")]
    FieldSizeMismatch { what: &'static str, need: usize, got: usize },
    #[error("mask value {0} outside [0, 1]")]
    MaskOutOfRange(f64),
    #[error("unknown degradation kind {0:?}")]
    UnknownKind(String),
    #[error("unknown dist mode {0:?}; expected \"in\" or \"out\"")]
    UnknownDistMode(String),
    #[error("unknown recipe {0:?}")]
    UnknownRecipe(String),
    #[error("recipe lists no degradation kinds")]
    EmptyRecipe,
    #[error("degradation spec json: {0}")]
    BadSpecJson(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// The seven named evaluation mixtures, each stored in pipeline order.
pub const NAMED_RECIPES: [(&str, &[DegradationKind]); 7] = {
    use DegradationKind::*;
    [
        ("H-R", &[Rain, Haze]),
        ("H-N", &[Noise, Haze]),
        ("H-N-R", &[Noise, Rain, Haze]),
        ("LL-H-N-R", &[Lowlight, Noise, Rain, Haze]),
        ("LL-H-N-S", &[Lowlight, Noise, Snow, Haze]),
        ("LL-H-N-B-R", &[Lowlight, Blur, Noise, Rain, Haze]),
        ("LL-H-N-B-S", &[Lowlight, Blur, Noise, Snow, Haze]),
    ]
};

/// Looks up one of the seven named recipes.
pub fn recipe_by_name(name: &str) -> Result<&'static [DegradationKind], DegradeError> {
    NAMED_RECIPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, kinds)| *kinds)
        .ok_or_else(|| DegradeError::UnknownRecipe(name.to_string()))
}

/// Name of the named recipe matching `kinds` as a set, if any.
pub fn recipe_name(kinds: &[DegradationKind]) -> Option<&'static str> {
    let mut sorted: Vec<_> = kinds.to_vec();
    sorted.sort();
    sorted.dedup();
    NAMED_RECIPES
        .iter()
        .find(|(_, k)| {
            let mut theirs: Vec<_> = k.to_vec();
            theirs.sort();
            theirs == sorted
        })
        .map(|(n, _)| *n)
}

/// Per-kind sampling ranges for both severity bands. Half-open upper bounds
/// on the `in` band keep the bands disjoint where they share an endpoint.
pub mod ranges {
    use super::DistMode;

    /// Gaussian blur sigma, per axis.
    pub fn blur_sigma(mode: DistMode) -> (f64, f64) {
        match mode {
            DistMode::InDist => (1.0, 3.0),
            DistMode::OutDist => (3.0, 4.0),
        }
    }

    /// Blur kernel size: odd values in this inclusive range.
    pub const BLUR_KSIZE: (usize, usize) = (7, 23);

    /// Gaussian noise sigma on the 0..255 scale (divide by 255 to apply).
    pub fn noise_sigma255(mode: DistMode) -> (f64, f64) {
        match mode {
            DistMode::InDist => (15.0, 35.0),
            DistMode::OutDist => (35.0, 50.0),
        }
    }

    /// Rain streak count (integer range, upper bound exclusive).
    pub fn rain_count(mode: DistMode) -> (u32, u32) {
        match mode {
            DistMode::InDist => (50, 100),
            DistMode::OutDist => (100, 151),
        }
    }

    /// Rain streak direction in degrees from horizontal.
    pub const RAIN_DIRECTION: (f64, f64) = (-45.0, 45.0);
    /// Rain streak length in pixels (integer, inclusive).
    pub const RAIN_LENGTH: (usize, usize) = (20, 40);
    /// Allowed rain streak widths.
    pub const RAIN_WIDTHS: [usize; 5] = [3, 5, 7, 9, 11];

    /// Snow mask coverage fraction.
    pub fn snow_coverage(mode: DistMode) -> (f64, f64) {
        match mode {
            DistMode::InDist => (0.05, 0.25),
            DistMode::OutDist => (0.25, 0.40),
        }
    }

    /// Haze scattering coefficient.
    pub fn haze_beta(mode: DistMode) -> (f64, f64) {
        match mode {
            DistMode::InDist => (0.5, 1.5),
            DistMode::OutDist => (1.5, 2.0),
        }
    }

    /// Haze global airlight.
    pub const HAZE_AIRLIGHT: (f64, f64) = (0.8, 1.0);

    /// Low-light gamma.
    pub fn lowlight_gamma(mode: DistMode) -> (f64, f64) {
        match mode {
            DistMode::InDist => (1.0, 2.0),
            DistMode::OutDist => (2.0, 2.5),
        }
    }

    /// JPEG quality (integer range, upper bound exclusive); lower quality is
    /// the heavier severity.
    pub fn jpeg_quality(mode: DistMode) -> (u32, u32) {
        match mode {
            DistMode::InDist => (25, 51),
            DistMode::OutDist => (10, 25),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_lookup_round_trips() {
        for (name, kinds) in NAMED_RECIPES {
            assert_eq!(recipe_by_name(name).unwrap(), kinds);
            assert_eq!(recipe_name(kinds), Some(name));
        }
        assert!(matches!(recipe_by_name("H-X"), Err(DegradeError::UnknownRecipe(_))));
        assert_eq!(recipe_name(&[DegradationKind::Jpeg]), None);
    }

    #[test]
    fn recipes_are_stored_in_pipeline_order() {
        for (_, kinds) in NAMED_RECIPES {
            let order = |k: &DegradationKind| GATED_PIPELINE.iter().position(|g| g == k).unwrap();
            for pair in kinds.windows(2) {
                assert!(order(&pair[0]) < order(&pair[1]));
            }
        }
    }

    #[test]
    fn spec_json_round_trip_is_lossless() {
        let spec = DegradationSpec {
            seed: 0xDEADBEEF,
            dist_mode: DistMode::OutDist,
            applied: vec![
                AppliedStage::Blur {
                    sigma_x: 3.3333333333333335,
                    sigma_y: 3.1,
                    angle_deg: 17.123456789012345,
                    ksize: 17,
                },
                AppliedStage::Noise { sigma: 0.1503921568627451 },
                AppliedStage::Haze { airlight: 0.987654321, beta_s: 1.75 },
            ],
        };
        let back = DegradationSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn spec_json_has_expected_shape() {
        let spec = DegradationSpec {
            seed: 5,
            dist_mode: DistMode::InDist,
            applied: vec![AppliedStage::Lowlight { gamma: 1.5 }],
        };
        let value: serde_json::Value = serde_json::from_str(&spec.to_json()).unwrap();
        assert_eq!(value["dist_mode"], "in");
        assert_eq!(value["applied"][0]["kind"], "lowlight");
        assert_eq!(value["applied"][0]["params"]["gamma"], 1.5);
    }

    #[test]
    fn kind_strings_round_trip() {
        for kind in [
            DegradationKind::Lowlight,
            DegradationKind::Blur,
            DegradationKind::Noise,
            DegradationKind::Rain,
            DegradationKind::Snow,
            DegradationKind::Haze,
            DegradationKind::Jpeg,
        ] {
            assert_eq!(kind.name().parse::<DegradationKind>().unwrap(), kind);
        }
        assert!("sleet".parse::<DegradationKind>().is_err());
    }
}
