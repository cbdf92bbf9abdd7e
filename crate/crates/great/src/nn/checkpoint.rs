//! Model checkpoints: JSON files holding the architecture, the seed, and
//! every parameter at full double precision.
//!
//! Values are written with a shortest-round-trip float encoding, so a
//! save/load cycle reproduces parameters bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ModelSpec, Param, ParamSet};
use crate::error::{Error, Result};
use crate::fsutil;

const FORMAT: &str = "great-checkpoint";
const VERSION: u32 = 1;

/// On-disk checkpoint contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub seed: u64,
    pub spec: ModelSpec,
    params: Vec<Param>,
}

impl Checkpoint {
    pub fn params(self) -> ParamSet {
        ParamSet::from_params(self.params)
    }
}

/// Serializes spec + parameters to `path` atomically.
///
/// Parameters must be finite; JSON has no representation for NaN.
pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &ParamSet, seed: u64) -> Result<()> {
    spec.validate()?;
    for p in params.params() {
        if let Some(bad) = p.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "cannot checkpoint non-finite value {bad} in parameter {:?}",
                p.name
            )));
        }
    }
    let ck = Checkpoint {
        format: FORMAT.to_string(),
        version: VERSION,
        seed,
        spec: spec.clone(),
        params: params.params().to_vec(),
    };
    let json = serde_json::to_string(&ck)
        .map_err(|e| Error::Numeric(format!("checkpoint serialization failed: {e}")))?;
    fsutil::write_atomic(path, json.as_bytes())
}

/// Loads and validates a checkpoint.
///
/// Rejects unknown formats and versions, truncated or malformed JSON, and
/// parameter lists whose names or shapes disagree with the stored spec.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fsutil::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let parse_err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg,
    };
    if ck.format != FORMAT {
        return Err(parse_err(format!(
            "unknown format {:?}, expected {FORMAT:?}",
            ck.format
        )));
    }
    if ck.version != VERSION {
        return Err(parse_err(format!(
            "unsupported version {}, expected {VERSION}",
            ck.version
        )));
    }
    ck.spec.validate().map_err(|e| parse_err(e.to_string()))?;
    let expected = init_params(&ck.spec, 0)?;
    if ck.params.len() != expected.params().len() {
        return Err(parse_err(format!(
            "spec implies {} parameters, file has {}",
            expected.params().len(),
            ck.params.len()
        )));
    }
    for (got, want) in ck.params.iter().zip(expected.params()) {
        if got.name != want.name || got.shape != want.shape || got.trainable != want.trainable {
            return Err(parse_err(format!(
                "parameter {:?} (shape {:?}) does not match spec entry {:?} (shape {:?})",
                got.name, got.shape, want.name, want.shape
            )));
        }
        if got.values.len() != want.values.len() {
            return Err(parse_err(format!(
                "parameter {:?} has {} values, shape implies {}",
                got.name,
                got.values.len(),
                want.values.len()
            )));
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn spec() -> ModelSpec {
        ModelSpec::mlp(&[2, 8, 3]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let spec = spec();
        let params = init_params(&spec, 42).unwrap();
        save_checkpoint(&path, &spec, &params, 42).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.spec, spec);
        let restored = loaded.params();
        for (a, b) in params.params().iter().zip(restored.params()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let spec = spec();
        let params = init_params(&spec, 1).unwrap();
        save_checkpoint(&path, &spec, &params, 1).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let spec = spec();
        let params = init_params(&spec, 1).unwrap();
        save_checkpoint(&path, &spec, &params, 1).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":2");
        std::fs::write(&path, text).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported version 2"), "{err}");
    }

    #[test]
    fn nan_params_refuse_to_save() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec();
        let mut params = init_params(&spec, 1).unwrap();
        params.get_mut("layer0.weight").unwrap().values[0] = f64::NAN;
        let err = save_checkpoint(&dir.path().join("m.json"), &spec, &params, 1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn mismatched_param_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let spec = spec();
        let params = init_params(&spec, 1).unwrap();
        save_checkpoint(&path, &spec, &params, 1).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("layer0.weight", "layer0.wrong");
        std::fs::write(&path, text).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
