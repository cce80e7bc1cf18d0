//! Named parameter storage with deterministic ordering, initialization, and
//! archive round-tripping.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_store;

/// How a named tensor should be filled at initialization time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// normal(0, 0.02) — projections and token banks.
    Normal,
    /// Zeros — biases and normalization shifts.
    Zeros,
    /// Ones — normalization gains.
    Ones,
}

/// Shape-and-init declaration for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: InitKind) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// An ordered map of named tensors. Iteration order is the sorted name order,
/// which keeps initialization, optimizer state, and serialization stable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    /// Fill tensors according to `specs`, drawing normals from `rng` in spec
    /// order.
    pub fn init(specs: &[ParamSpec], rng: &mut ChaCha12Rng) -> Self {
        let mut map = BTreeMap::new();
        for spec in specs {
            let tensor = match spec.init {
                InitKind::Normal => ArrayD::from_shape_fn(spec.shape.clone(), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    0.02 * z
                }),
                InitKind::Zeros => ArrayD::zeros(spec.shape.clone()),
                InitKind::Ones => ArrayD::ones(spec.shape.clone()),
            };
            let prev = map.insert(spec.name.clone(), tensor);
            assert!(prev.is_none(), "duplicate parameter name {}", spec.name);
        }
        Self { map }
    }

    pub fn from_map(map: BTreeMap<String, ArrayD<f64>>) -> Self {
        Self { map }
    }

    pub fn into_map(self) -> BTreeMap<String, ArrayD<f64>> {
        self.map
    }

    pub fn as_map(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.map
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn insert(&mut self, name: String, tensor: ArrayD<f64>) {
        self.map.insert(name, tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Verify the set holds exactly the tensors `specs` declares, with
    /// matching shapes. Reports the first mismatch descriptively.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.map.get(&spec.name) {
                None => {
                    return Err(Error::Config(format!(
                        "missing parameter {} (expected shape {:?})",
                        spec.name, spec.shape
                    )))
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::ShapeMismatch {
                        name: spec.name.clone(),
                        expected: spec.shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if self.map.len() != specs.len() {
            let expected: std::collections::BTreeSet<&str> =
                specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&str> = self
                .map
                .keys()
                .map(|k| k.as_str())
                .filter(|k| !expected.contains(k))
                .collect();
            return Err(Error::Config(format!("unexpected parameters: {extra:?}")));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes, and raw bits; detects any parameter drift.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.map {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for dim in tensor.shape() {
                hasher.update((*dim as u64).to_le_bytes());
            }
            for v in tensor.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor_store::write_tensors(path, &self.map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            map: tensor_store::read_tensors(path)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("a.w", &[3, 4], InitKind::Normal),
            ParamSpec::new("a.b", &[4], InitKind::Zeros),
            ParamSpec::new("a.ln.g", &[4], InitKind::Ones),
        ]
    }

    #[test]
    fn init_is_deterministic_and_typed() {
        let a = ParamSet::init(&specs(), &mut rng_for(5, "init", 0));
        let b = ParamSet::init(&specs(), &mut rng_for(5, "init", 0));
        assert_eq!(a.digest(), b.digest());
        assert!(a.get("a.b").iter().all(|&v| v == 0.0));
        assert!(a.get("a.ln.g").iter().all(|&v| v == 1.0));
        assert!(a.get("a.w").iter().any(|&v| v != 0.0));
        let c = ParamSet::init(&specs(), &mut rng_for(6, "init", 0));
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn check_against_reports_shape_mismatch() {
        let mut set = ParamSet::init(&specs(), &mut rng_for(5, "init", 0));
        set.insert("a.w".into(), ArrayD::zeros(vec![2, 2]));
        match set.check_against(&specs()) {
            Err(Error::ShapeMismatch {
                name,
                expected,
                found,
            }) => {
                assert_eq!(name, "a.w");
                assert_eq!(expected, vec![3, 4]);
                assert_eq!(found, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn check_against_rejects_missing_and_extra() {
        let mut set = ParamSet::init(&specs(), &mut rng_for(5, "init", 0));
        set.insert("rogue".into(), ArrayD::zeros(vec![1]));
        assert!(matches!(set.check_against(&specs()), Err(Error::Config(_))));
        let partial = ParamSet::from_map(
            set.as_map()
                .iter()
                .filter(|(k, _)| k.as_str() != "a.w")
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        );
        assert!(matches!(
            partial.check_against(&specs()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn save_load_round_trip_preserves_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.cpts");
        let set = ParamSet::init(&specs(), &mut rng_for(7, "init", 0));
        set.save(&path).unwrap();
        let back = ParamSet::load(&path).unwrap();
        assert_eq!(set.digest(), back.digest());
    }
}
