//! Checkpoint directories: `params/` (one array file per parameter) plus
//! `checkpoint.json` describing how the parameters were produced.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// `teacher`, `student`, `decoder` or `prefix`.
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    /// Stages that contributed to these parameters, in order.
    pub stages: Vec<String>,
    pub param_checksum: String,
    /// Architecture settings needed to rebuild the module.
    pub arch: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    store.save(&dir.join("params"))?;
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, kind: &str) -> Result<(ParamStore, CheckpointMeta)> {
    let meta_path = dir.join("checkpoint.json");
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if meta.kind != kind {
        return Err(Error::Format {
            path: meta_path,
            msg: format!("expected a {kind} checkpoint, found {}", meta.kind),
        });
    }
    let store = ParamStore::load(&dir.join("params"))?;
    let found = store.checksum()?;
    if found != meta.param_checksum {
        return Err(Error::Integrity {
            path: dir.join("params"),
            expected: meta.param_checksum,
            found,
        });
    }
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::seed::substream;
    use candle_core::DType;

    #[test]
    fn roundtrip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(DType::F32);
        store.get_or_init("w", &[3], Init::Normal(1.0), &mut substream(0, "x")).unwrap();
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            kind: "teacher".into(),
            config_hash: "abc".into(),
            seed: 1,
            steps: 10,
            stages: vec!["s1".into()],
            param_checksum: store.checksum().unwrap(),
            arch: serde_json::json!({"d": 32}),
        };
        save_checkpoint(dir.path(), &store, &meta).unwrap();
        let (back, m) = load_checkpoint(dir.path(), "teacher").unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.checksum().unwrap(), meta.param_checksum);
        assert!(load_checkpoint(dir.path(), "student").is_err());
    }
}
