//! Minimal f64 neural-network kernels with hand-derived gradients.
//!
//! Exactly two architectures exist: fully connected stacks ([`Mlp`]) for the
//! routing heads and gates, and 3x3 convolutional stacks ([`ConvNet`]) for
//! the restoration experts. Both expose explicit `forward_cached`/`backward`
//! pairs whose gradients are validated against central finite differences,
//! plus flat parameter views for the shared [`AdamState`] optimizer.

mod conv;
mod dense;
mod func;
pub mod gradcheck;
mod optim;

pub use conv::{ConvCache, ConvGrads, ConvLayer, ConvNet};
pub use dense::{DenseLayer, Mlp, MlpCache, MlpGrads};
pub use func::{l1_loss, sigmoid, softmax, softplus};
pub use optim::{cosine_lr, AdamState};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

/// Current weight-file schema version.
pub const WEIGHT_SCHEMA: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("weight file schema {found} is not the supported {WEIGHT_SCHEMA}")]
    Schema { found: u32 },
    #[error("weight file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("weight file json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct WeightFile<T> {
    schema: u32,
    #[serde(flatten)]
    payload: T,
}

/// Serializes a network (or any weight payload) as versioned JSON.
pub fn save_weights<T: Serialize>(payload: &T, path: &std::path::Path) -> Result<(), NnError> {
    let file = WeightFile { schema: WEIGHT_SCHEMA, payload };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Loads a versioned JSON weight payload, rejecting unknown schemas.
pub fn load_weights<T: DeserializeOwned>(path: &std::path::Path) -> Result<T, NnError> {
    let text = std::fs::read_to_string(path)?;
    let file: WeightFile<T> = serde_json::from_str(&text)?;
    if file.schema != WEIGHT_SCHEMA {
        return Err(NnError::Schema { found: file.schema });
    }
    Ok(file.payload)
}

/// Xavier-uniform bound for a layer with the given fan-in/out.
pub(crate) fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
