//! Versioned JSON checkpoints: shapes, flat value arrays, optional optimizer
//! state and free-form metadata. f64 values round-trip bit-exactly through
//! serde_json's shortest-representation formatting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::MomentState;
use super::param::{Param, ParamSet};
use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: BTreeMap<String, TensorData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<BTreeMap<String, MomentState>>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> Self {
        let mut map = BTreeMap::new();
        for p in params {
            map.insert(
                p.name.clone(),
                TensorData {
                    shape: p.shape.clone(),
                    values: p.data.clone(),
                },
            );
        }
        Self {
            version: CHECKPOINT_VERSION,
            params: map,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn with_optimizer(mut self, state: BTreeMap<String, MomentState>) -> Self {
        self.optimizer = Some(state);
        self
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, NnError> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| NnError::Checkpoint(format!("missing or invalid meta key '{key}'")))
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let json = serde_json::to_string(self)
            .map_err(|e| NnError::Checkpoint(format!("serialize: {e}")))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| NnError::Checkpoint(format!("mkdir: {e}")))?;
        }
        fs::write(path, json).map_err(|e| NnError::Checkpoint(format!("write: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text =
            fs::read_to_string(path).map_err(|e| NnError::Checkpoint(format!("read: {e}")))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| NnError::Checkpoint(format!("parse: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Write checkpointed values back into matching parameters. Every
    /// parameter must be present with an identical shape.
    pub fn restore_into<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Param>,
    ) -> Result<(), NnError> {
        for p in params {
            let td = self.params.get(&p.name).ok_or_else(|| {
                NnError::Checkpoint(format!("parameter '{}' missing from checkpoint", p.name))
            })?;
            if td.shape != p.shape {
                return Err(NnError::Checkpoint(format!(
                    "parameter '{}' shape {:?} != checkpoint {:?}",
                    p.name, p.shape, td.shape
                )));
            }
            p.data = td.values.clone();
        }
        Ok(())
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, td) in &self.params {
            set.insert(Param::from_values(
                name.clone(),
                td.values.clone(),
                td.shape.clone(),
            ));
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let p = Param::from_values(
            "w",
            vec![0.1, -1.0 / 3.0, 1e-300, std::f64::consts::PI],
            vec![4],
        );
        let ck = Checkpoint::from_params([&p]).with_meta("width", 4);
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let got = &loaded.params["w"].values;
        for (a, b) in p.data.iter().zip(got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded.meta_parse::<usize>("width").unwrap(), 4);
    }

    #[test]
    fn restore_checks_shapes() {
        let p = Param::from_values("w", vec![1.0, 2.0], vec![2]);
        let ck = Checkpoint::from_params([&p]);
        let mut other = Param::from_values("w", vec![0.0; 3], vec![3]);
        assert!(ck.restore_into([&mut other]).is_err());
    }
}
