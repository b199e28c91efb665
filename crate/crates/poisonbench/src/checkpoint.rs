//! Self-describing model checkpoints.
//!
//! A checkpoint is a single JSON file holding the architecture, metadata
//! (seed lineage and attack provenance), and the raw parameter bytes encoded
//! base64 little-endian, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelHandle, ModelMeta, ParamSet};

const FORMAT: &str = "poisonbench-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    arch: Architecture,
    meta: ModelMeta,
    trainable_mask: Option<Vec<bool>>,
    params_b64: String,
}

pub fn save_checkpoint(model: &ModelHandle, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(model.params.data.len() * 8);
    for v in &model.params.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        arch: model.arch.clone(),
        meta: model.meta.clone(),
        trainable_mask: model.trainable_mask.clone(),
        params_b64: BASE64.encode(bytes),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelHandle> {
    let raw = fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&raw)?;
    if file.format != FORMAT {
        return Err(Error::InvalidArg(format!("unknown checkpoint format '{}'", file.format)));
    }
    let bytes = BASE64
        .decode(file.params_b64.as_bytes())
        .map_err(|e| Error::InvalidArg(format!("corrupt parameter encoding: {e}")))?;
    let layout = file.arch.layout();
    if bytes.len() != layout.total * 8 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameter bytes", layout.total * 8),
            got: format!("{}", bytes.len()),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ModelHandle {
        arch: file.arch,
        params: ParamSet { layout, data },
        trainable_mask: file.trainable_mask,
        meta: file.meta,
    })
}

/// Load a checkpoint and require a specific architecture id.
pub fn load_checkpoint_expecting(path: &Path, expected: &Architecture) -> Result<ModelHandle> {
    let model = load_checkpoint(path)?;
    if model.arch != *expected {
        return Err(Error::ArchMismatch {
            expected: expected.id.clone(),
            found: model.arch.id.clone(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackKind, AttackSpec};
    use crate::image::Image;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact_and_predictions_match() {
        let dir = std::env::temp_dir().join(format!("pb-ckpt-{}", std::process::id()));
        let path = dir.join("model.json");
        let mut model = ModelHandle::init(Architecture::tiny(3, 8, 4).unwrap(), 11);
        model.meta.attack = Some(AttackSpec::new(AttackKind::Badnets, 2, 50, 9));
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.data, model.params.data);
        assert_eq!(loaded.meta.attack, model.meta.attack);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let img = Image::from_fn(3, 8, 8, |_, _, _| rng.gen());
            assert_eq!(model.predict(&img).unwrap(), loaded.predict(&img).unwrap());
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn wrong_architecture_errors() {
        let dir = std::env::temp_dir().join(format!("pb-ckpt-arch-{}", std::process::id()));
        let path = dir.join("model.json");
        let model = ModelHandle::init(Architecture::tiny(3, 8, 4).unwrap(), 0);
        save_checkpoint(&model, &path).unwrap();
        let other = Architecture::tiny(3, 16, 10).unwrap();
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(Error::ArchMismatch { .. })
        ));
        fs::remove_dir_all(dir).ok();
    }
}
