//! Run artifacts: the run manifest (schedule, marginals, condition schema,
//! config echo), the parameter checkpoint with schema-hash validation, and
//! atomic file writes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell::SearchSpaceSpec;
use crate::conditioning::ConditionSchema;
use crate::denoiser::{DenoiserConfig, DenoiserDims, ParamSet};
use crate::error::CoreError;
use crate::noise::{DiffusionSchedule, Marginals};
use crate::training::TrainConfig;

pub const ARTIFACT_SCHEMA_VERSION: &str = "1";

/// Everything a later sampling or evaluation run needs to know about a
/// training run, minus the parameters themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    #[serde(rename = "mX")]
    pub m_x: Vec<f64>,
    #[serde(rename = "mE")]
    pub m_e: Vec<f64>,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub s: f64,
    /// (node count, probability) pairs; degenerate for fixed-size spaces.
    pub node_count_dist: Vec<(usize, f64)>,
    pub condition_schema: ConditionSchema,
    pub schema_hash: String,
    pub space: SearchSpaceSpec,
    pub train_config: TrainConfig,
    pub denoiser_config: DenoiserConfig,
    pub seed: u64,
    pub final_loss: f64,
}

impl RunManifest {
    pub fn marginals(&self) -> Marginals {
        Marginals {
            m_x: self.m_x.clone(),
            m_e: self.m_e.clone(),
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, CoreError> {
        crate::noise::build_schedule(self.t_max, self.s)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        atomic_write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: String,
    pub denoiser_config: DenoiserConfig,
    pub dims: DenoiserDims,
    /// Digest of the calibrated condition schema the model was trained
    /// against; loading refuses a mismatched manifest.
    pub schema_hash: String,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(
        dcfg: &DenoiserConfig,
        dims: &DenoiserDims,
        schema: &ConditionSchema,
        params: ParamSet,
    ) -> Self {
        Checkpoint {
            schema_version: ARTIFACT_SCHEMA_VERSION.to_string(),
            denoiser_config: *dcfg,
            dims: dims.clone(),
            schema_hash: schema.hash(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        atomic_write(path, serde_json::to_string(self)?.as_bytes())
    }

    /// Load and validate against the schema hash recorded in the manifest.
    pub fn load(path: &Path, expected_schema_hash: &str) -> Result<Self, CoreError> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.schema_hash != expected_schema_hash {
            return Err(CoreError::SchemaHashMismatch {
                expected: expected_schema_hash.to_string(),
                got: ckpt.schema_hash,
            });
        }
        Ok(ckpt)
    }
}

/// Write-temp-then-rename so readers never observe a half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "artifact".into());
    let tmp = dir.join(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{ConditionEntry, ConditionVector, Direction};
    use crate::denoiser::{forward, init_params};
    use crate::noise::NoisyGraph;
    use crate::spaces::desk_space;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> ConditionSchema {
        ConditionSchema {
            conditions: vec![ConditionEntry {
                name: "acc".into(),
                d: 2,
                direction: Direction::HigherIsBetter,
                thresholds: vec![60.0],
            }],
        }
    }

    fn setup() -> (DenoiserConfig, DenoiserDims, ParamSet) {
        let dcfg = DenoiserConfig::tiny();
        let dims = DenoiserDims {
            n_nodes: 4,
            n_ops: 4,
            n_edge_cats: 2,
            cond_card: vec![2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params(&dcfg, &dims, &mut rng);
        (dcfg, dims, params)
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_outputs() {
        let (dcfg, dims, params) = setup();
        let schema = schema();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let ckpt = Checkpoint::new(&dcfg, &dims, &schema, params.clone());
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path, &schema.hash()).unwrap();
        assert_eq!(loaded.params, params);
        let noisy = NoisyGraph {
            x: vec![0, 2, 3, 1],
            e: vec![
                vec![0, 1, 0, 0],
                vec![0, 0, 1, 0],
                vec![0, 0, 0, 1],
                vec![0, 0, 0, 0],
            ],
        };
        let cond = ConditionVector {
            classes: vec![Some(0)],
        };
        let a = forward(&params, &dcfg, &dims, &noisy, 3, 8, &cond);
        let b = forward(&loaded.params, &loaded.denoiser_config, &loaded.dims, &noisy, 3, 8, &cond);
        assert_eq!(a.p_x.data, b.p_x.data);
        assert_eq!(a.p_e.data, b.p_e.data);
    }

    #[test]
    fn checkpoint_rejects_schema_hash_mismatch() {
        let (dcfg, dims, params) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        Checkpoint::new(&dcfg, &dims, &schema(), params)
            .save(&path)
            .unwrap();
        let mut other = schema();
        other.conditions[0].thresholds[0] = 61.0;
        assert!(matches!(
            Checkpoint::load(&path, &other.hash()),
            Err(CoreError::SchemaHashMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_bytes_deterministic() {
        let (dcfg, dims, params) = setup();
        let a = serde_json::to_vec(&Checkpoint::new(&dcfg, &dims, &schema(), params.clone())).unwrap();
        let b = serde_json::to_vec(&Checkpoint::new(&dcfg, &dims, &schema(), params)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_roundtrip_and_key_names() {
        let manifest = RunManifest {
            schema_version: ARTIFACT_SCHEMA_VERSION.into(),
            m_x: vec![0.25, 0.25, 0.3, 0.2],
            m_e: vec![0.5, 0.5],
            t_max: 8,
            s: 0.008,
            node_count_dist: vec![(4, 1.0)],
            condition_schema: schema(),
            schema_hash: schema().hash(),
            space: desk_space(2, 2),
            train_config: TrainConfig::default(),
            denoiser_config: DenoiserConfig::tiny(),
            seed: 1,
            final_loss: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["\"mX\"", "\"mE\"", "\"T\"", "\"s\""] {
            assert!(text.contains(key), "missing {key}");
        }
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(loaded.marginals().m_x, manifest.m_x);
        assert_eq!(loaded.schedule().unwrap().t_max, 8);
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
            .filter(|n| n.ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");
    }
}
