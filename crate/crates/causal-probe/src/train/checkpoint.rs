//! Checkpoints in the shared named-tensor container: trainable tensors,
//! optimizer moments, the dual state, the step counter, and a content hash of
//! the frozen encoder (referenced, not duplicated).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::objective::DualState;
use crate::tensor_store::{read_tensors, write_tensors};
use crate::train::optim::AdamW;

const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub dual: DualState,
    /// Hex digest of the frozen encoder tensors this run trained against.
    pub encoder_digest: String,
    pub trainable: ParamSet,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
    pub adam_t: u64,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(vec![1], v)
}

fn get_scalar(map: &BTreeMap<String, ArrayD<f64>>, name: &str) -> Result<f64> {
    let t = map
        .get(name)
        .ok_or_else(|| Error::Contract(format!("checkpoint missing tensor {name}")))?;
    if t.len() != 1 {
        return Err(Error::Contract(format!("checkpoint tensor {name} is not a scalar")));
    }
    Ok(*t.iter().next().unwrap())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (name, value) in self.trainable.iter() {
            tensors.insert(format!("param.{name}"), value.clone());
        }
        for (name, value) in &self.m {
            tensors.insert(format!("optim.m.{name}"), value.clone());
        }
        for (name, value) in &self.v {
            tensors.insert(format!("optim.v.{name}"), value.clone());
        }

        tensors.insert("state.version".into(), scalar(CHECKPOINT_VERSION as f64));
        tensors.insert("state.step".into(), scalar(self.step as f64));
        tensors.insert("state.adam_t".into(), scalar(self.adam_t as f64));
        tensors.insert("state.lambda".into(), scalar(self.dual.lambda));
        tensors.insert("state.rho".into(), scalar(self.dual.rho));
        let (h_last, h_set) = if self.dual.h_last.is_finite() {
            (self.dual.h_last, 1.0)
        } else {
            (0.0, 0.0)
        };
        tensors.insert("state.h_last".into(), scalar(h_last));
        tensors.insert("state.h_last_set".into(), scalar(h_set));
        tensors.insert("state.period".into(), scalar(self.dual.period as f64));
        tensors.insert("state.eta".into(), scalar(self.dual.eta));
        tensors.insert("state.gamma".into(), scalar(self.dual.gamma));
        tensors.insert("state.rho_max".into(), scalar(self.dual.rho_max));

        if self.encoder_digest.len() != 64 || !self.encoder_digest.is_ascii() {
            return Err(Error::Contract(
                "encoder digest must be a 64-character hex string".into(),
            ));
        }
        let digest_bytes: Vec<f64> = self
            .encoder_digest
            .as_bytes()
            .iter()
            .map(|&b| b as f64)
            .collect();
        tensors.insert(
            "state.encoder_digest".into(),
            ArrayD::from_shape_vec(vec![64], digest_bytes).unwrap(),
        );

        write_tensors(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = read_tensors(path)?;

        let version = get_scalar(&tensors, "state.version")?;
        if version != CHECKPOINT_VERSION as f64 {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version as u16,
            });
        }

        let mut trainable = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, value) in &tensors {
            if let Some(s) = name.strip_prefix("param.") {
                trainable.insert(s.to_string(), value.clone());
            } else if let Some(s) = name.strip_prefix("optim.m.") {
                m.insert(s.to_string(), value.clone());
            } else if let Some(s) = name.strip_prefix("optim.v.") {
                v.insert(s.to_string(), value.clone());
            }
        }
        if trainable.is_empty() {
            return Err(Error::Contract("checkpoint holds no trainable tensors".into()));
        }
        if m.len() != trainable.len() || v.len() != trainable.len() {
            return Err(Error::Contract(
                "checkpoint optimizer moments do not match its parameters".into(),
            ));
        }

        let h_set = get_scalar(&tensors, "state.h_last_set")? != 0.0;
        let dual = DualState {
            lambda: get_scalar(&tensors, "state.lambda")?,
            rho: get_scalar(&tensors, "state.rho")?,
            h_last: if h_set {
                get_scalar(&tensors, "state.h_last")?
            } else {
                f64::INFINITY
            },
            period: get_scalar(&tensors, "state.period")? as u32,
            eta: get_scalar(&tensors, "state.eta")?,
            gamma: get_scalar(&tensors, "state.gamma")?,
            rho_max: get_scalar(&tensors, "state.rho_max")?,
        };
        dual.validate()?;

        let digest_tensor = tensors
            .get("state.encoder_digest")
            .ok_or_else(|| Error::Contract("checkpoint missing encoder digest".into()))?;
        let digest_bytes: Vec<u8> = digest_tensor.iter().map(|&v| v as u8).collect();
        let encoder_digest = String::from_utf8(digest_bytes)
            .map_err(|_| Error::Contract("encoder digest is not valid text".into()))?;

        Ok(Self {
            step: get_scalar(&tensors, "state.step")? as u64,
            dual,
            encoder_digest,
            trainable: ParamSet::from_map(trainable),
            m,
            v,
            adam_t: get_scalar(&tensors, "state.adam_t")? as u64,
        })
    }

    /// Reassemble the optimizer this checkpoint froze.
    pub fn optimizer(&self, weight_decay: f64, clip: f64) -> AdamW {
        AdamW {
            m: self.m.clone(),
            v: self.v.clone(),
            t: self.adam_t,
            weight_decay,
            clip,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let trainable = ParamSet::from_map(
            [
                ("decoder.bank".to_string(), ArrayD::from_elem(vec![4, 6], 0.25)),
                ("head.parent.w".to_string(), ArrayD::from_elem(vec![6, 3], -1.5)),
            ]
            .into(),
        );
        let zeros =
            |shape: &[usize]| -> ArrayD<f64> { ArrayD::from_elem(shape.to_vec(), 0.125) };
        Checkpoint {
            step: 42,
            dual: DualState {
                lambda: 0.75,
                rho: 0.4,
                h_last: f64::INFINITY,
                ..DualState::default()
            },
            encoder_digest: "ab".repeat(32),
            trainable,
            m: [
                ("decoder.bank".to_string(), zeros(&[4, 6])),
                ("head.parent.w".to_string(), zeros(&[6, 3])),
            ]
            .into(),
            v: [
                ("decoder.bank".to_string(), zeros(&[4, 6])),
                ("head.parent.w".to_string(), zeros(&[6, 3])),
            ]
            .into(),
            adam_t: 42,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step_42.cpts");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert!(back.dual.h_last.is_infinite(), "unset h_last survives");
    }

    #[test]
    fn finite_h_last_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cpts");
        let mut ck = sample_checkpoint();
        ck.dual.h_last = 0.037;
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().dual.h_last, 0.037);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cpts");
        sample_checkpoint().save(&path).unwrap();
        let mut tensors = read_tensors(&path).unwrap();
        tensors.insert("state.version".into(), scalar(99.0));
        write_tensors(&path, &tensors).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::VersionMismatch { expected: 1, found: 99 })
        ));
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cpts");
        sample_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_moments_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cpts");
        sample_checkpoint().save(&path).unwrap();
        let mut tensors = read_tensors(&path).unwrap();
        tensors.remove("optim.m.decoder.bank");
        write_tensors(&path, &tensors).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Contract(_))));
    }
}
