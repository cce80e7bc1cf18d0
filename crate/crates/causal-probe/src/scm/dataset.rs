//! Ancestral sampling with single-variable hard interventions, per-feature
//! standardization, and the `SCMD` binary dataset container.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::scm::graph::{sample_graph_config_from, Dag, GraphFamily};
use crate::scm::mechanism::{sample_scm_from, MechanismKind, NoiseFamily, Scm};
use crate::scm::sample_dag;
use crate::seeds::rng_for;

/// Which slice of the generative distribution to draw from. The default
/// covers everything; restricted profiles (e.g. linear-Gaussian Erdős–Rényi
/// only) are used for controlled training runs and ablations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataProfile {
    pub families: Vec<GraphFamily>,
    pub mechanisms: Vec<MechanismKind>,
    pub noises: Vec<NoiseFamily>,
}

impl DataProfile {
    pub fn full() -> Self {
        Self {
            families: GraphFamily::ALL.to_vec(),
            mechanisms: MechanismKind::ALL.to_vec(),
            noises: NoiseFamily::ALL.to_vec(),
        }
    }

    /// Erdős–Rényi graphs, linear mechanisms, homoscedastic Gaussian noise.
    pub fn linear_gaussian_er() -> Self {
        Self {
            families: vec![GraphFamily::ErdosRenyi],
            mechanisms: vec![MechanismKind::Linear],
            noises: vec![NoiseFamily::Gaussian],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() || self.mechanisms.is_empty() || self.noises.is_empty() {
            return Err(Error::Config(
                "data profile must list at least one family, mechanism, and noise".into(),
            ));
        }
        Ok(())
    }
}

impl Default for DataProfile {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub family: GraphFamily,
    pub mechanism: MechanismKind,
    pub n_obs: usize,
    pub n_int: usize,
}

/// A standardized table of samples together with its intervention mask.
/// Observational rows come first, then interventional rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n×f standardized values, clamped to [-10, 10].
    pub values: Array2<f64>,
    /// n×f mask of {0,1}; at most one nonzero per row.
    pub intervention_mask: Array2<u8>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn f(&self) -> usize {
        self.values.ncols()
    }

    /// Check the row-level mask invariants and shape consistency.
    pub fn validate(&self) -> Result<()> {
        if self.intervention_mask.dim() != self.values.dim() {
            return Err(Error::Contract("mask and values shapes differ".into()));
        }
        if self.n() != self.meta.n_obs + self.meta.n_int {
            return Err(Error::Contract("meta row counts do not sum to n".into()));
        }
        for (r, row) in self.intervention_mask.rows().into_iter().enumerate() {
            let nz = row.iter().filter(|&&v| v != 0).count();
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Contract(format!("mask row {r} has entries > 1")));
            }
            if nz > 1 {
                return Err(Error::Contract(format!(
                    "mask row {r} intervenes on {nz} variables"
                )));
            }
            if r < self.meta.n_obs && nz != 0 {
                return Err(Error::Contract(format!(
                    "observational row {r} has a nonzero mask"
                )));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset values".into()));
        }
        Ok(())
    }
}

/// Raw (unstandardized) ancestral sampling. Returns the value matrix, the
/// intervention mask, and the fixed target subset used for this dataset.
pub fn ancestral_sample_raw(
    scm: &Scm,
    n_obs: usize,
    n_int: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(Array2<f64>, Array2<u8>, Vec<usize>)> {
    let f = scm.dag.f();
    if n_obs + n_int == 0 {
        return Err(Error::Contract("need at least one row".into()));
    }
    if n_int > 0 && f < 2 {
        return Err(Error::Contract("interventions require f >= 2".into()));
    }

    // Fixed per-dataset target subset: ⌈f/2⌉ distinct nodes.
    let k = f.div_ceil(2);
    let mut nodes: Vec<usize> = (0..f).collect();
    nodes.shuffle(rng);
    let targets: Vec<usize> = nodes[..k].to_vec();

    let n = n_obs + n_int;
    let mut values = Array2::<f64>::zeros((n, f));
    let mut mask = Array2::<u8>::zeros((n, f));

    let mut parent_buf = Vec::with_capacity(f);
    for r in 0..n {
        let intervened = if r < n_obs {
            None
        } else {
            let target = targets[rng.gen_range(0..targets.len())];
            let magnitude = rng.gen_range(1.0..5.0);
            let value = if rng.gen::<bool>() { magnitude } else { -magnitude };
            mask[(r, target)] = 1;
            Some((target, value))
        };
        for &j in &scm.topo_order {
            if let Some((target, value)) = intervened {
                if j == target {
                    values[(r, j)] = value;
                    continue;
                }
            }
            parent_buf.clear();
            for p in scm.dag.parents(j) {
                parent_buf.push(values[(r, p)]);
            }
            let noise = scm.noises[j].draw(&parent_buf, rng);
            values[(r, j)] = scm.mechanisms[j].eval_unchecked(&parent_buf) + noise;
        }
    }
    Ok((values, mask, targets))
}

/// Draw a standardized dataset: nodes sampled in topological order, then each
/// feature z-scored by the observational rows' mean and population standard
/// deviation (all rows when there are no observational rows), with the
/// standard deviation floored at 1e-6 and the result clamped to [-10, 10].
pub fn ancestral_sample(
    scm: &Scm,
    family: GraphFamily,
    n_obs: usize,
    n_int: usize,
    seed: u64,
    rng: &mut ChaCha12Rng,
) -> Result<Dataset> {
    let (mut values, mask, _targets) = ancestral_sample_raw(scm, n_obs, n_int, rng)?;
    let stat_rows = if n_obs > 0 { n_obs } else { values.nrows() };
    let f = values.ncols();
    for j in 0..f {
        let mut mean = 0.0;
        for r in 0..stat_rows {
            mean += values[(r, j)];
        }
        mean /= stat_rows as f64;
        let mut var = 0.0;
        for r in 0..stat_rows {
            let d = values[(r, j)] - mean;
            var += d * d;
        }
        var /= stat_rows as f64;
        let std = var.sqrt().max(1e-6);
        for r in 0..values.nrows() {
            values[(r, j)] = ((values[(r, j)] - mean) / std).clamp(-10.0, 10.0);
        }
    }
    let dataset = Dataset {
        values,
        intervention_mask: mask,
        meta: DatasetMeta {
            seed,
            family,
            mechanism: scm.mechanism_kind(),
            n_obs,
            n_int,
        },
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Full pipeline from a single seed: graph config → DAG → SCM → dataset.
/// Bit-identical output for identical inputs.
pub fn generate_dataset(
    seed: u64,
    f: usize,
    n_obs: usize,
    n_int: usize,
) -> Result<(Dataset, Dag, Scm)> {
    generate_dataset_profiled(seed, f, n_obs, n_int, &DataProfile::full())
}

/// [`generate_dataset`] restricted to a [`DataProfile`].
pub fn generate_dataset_profiled(
    seed: u64,
    f: usize,
    n_obs: usize,
    n_int: usize,
    profile: &DataProfile,
) -> Result<(Dataset, Dag, Scm)> {
    profile.validate()?;
    let mut rng = rng_for(seed, "scm", 0);
    let config = sample_graph_config_from(&profile.families, &mut rng);
    let dag = sample_dag(&config, f, &mut rng)?;
    let scm = sample_scm_from(&dag, &profile.mechanisms, &profile.noises, &mut rng);
    let dataset = ancestral_sample(&scm, config.family(), n_obs, n_int, seed, &mut rng)?;
    Ok((dataset, dag, scm))
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"SCMD";
const VERSION: u16 = 1;

fn pack_bits(row: impl Iterator<Item = bool>, f: usize) -> Vec<u8> {
    let mut bytes = vec![0u8; f.div_ceil(8)];
    for (j, bit) in row.enumerate() {
        if bit {
            bytes[j / 8] |= 1 << (j % 8);
        }
    }
    bytes
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.offset,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, have {}",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Serialize a dataset and its ground-truth DAG into the `SCMD` container.
pub fn serialize_dataset(dataset: &Dataset, dag: &Dag) -> Result<Vec<u8>> {
    dataset.validate()?;
    if dag.f() != dataset.f() {
        return Err(Error::Contract(format!(
            "dag has {} nodes but dataset has {} features",
            dag.f(),
            dataset.f()
        )));
    }
    let f = dataset.f();
    let n = dataset.n();
    let mut out = Vec::with_capacity(4 + 2 + 12 + 2 + 8 + n * f * 8 + (n + f) * f.div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.meta.n_obs as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.meta.n_int as u32).to_le_bytes());
    out.push(dataset.meta.family.id());
    out.push(dataset.meta.mechanism.id());
    out.extend_from_slice(&dataset.meta.seed.to_le_bytes());
    for v in dataset.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for row in dataset.intervention_mask.rows() {
        out.extend_from_slice(&pack_bits(row.iter().map(|&b| b != 0), f));
    }
    for i in 0..f {
        out.extend_from_slice(&pack_bits((0..f).map(|j| dag.edge(i, j)), f));
    }
    Ok(out)
}

/// Parse an `SCMD` container back into a dataset and its DAG. Fails with a
/// parse error carrying the byte offset on any malformed input.
pub fn deserialize_dataset(bytes: &[u8]) -> Result<(Dataset, Dag)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let f = r.u32("f")? as usize;
    let n_obs = r.u32("n_obs")? as usize;
    let n_int = r.u32("n_int")? as usize;
    let family_offset = r.offset;
    let family_id = r.u8("family id")?;
    let family = GraphFamily::from_id(family_id).ok_or_else(|| Error::Parse {
        offset: family_offset,
        message: format!("unknown graph family id {family_id}"),
    })?;
    let mech_offset = r.offset;
    let mech_id = r.u8("mechanism id")?;
    let mechanism = MechanismKind::from_id(mech_id).ok_or_else(|| Error::Parse {
        offset: mech_offset,
        message: format!("unknown mechanism id {mech_id}"),
    })?;
    let seed = r.u64("seed")?;
    let n = n_obs + n_int;

    let raw = r.take(n * f * 8, "values")?;
    let mut values = Array2::<f64>::zeros((n, f));
    for (k, v) in values.iter_mut().enumerate() {
        *v = f64::from_le_bytes(raw[k * 8..k * 8 + 8].try_into().unwrap());
    }

    let row_bytes = f.div_ceil(8);
    let mut mask = Array2::<u8>::zeros((n, f));
    for i in 0..n {
        let packed = r.take(row_bytes, "intervention mask")?;
        for j in 0..f {
            mask[(i, j)] = (packed[j / 8] >> (j % 8)) & 1;
        }
    }
    let mut adj = vec![0u8; f * f];
    for i in 0..f {
        let packed = r.take(row_bytes, "adjacency")?;
        for j in 0..f {
            adj[i * f + j] = (packed[j / 8] >> (j % 8)) & 1;
        }
    }
    if r.offset != bytes.len() {
        return Err(Error::Parse {
            offset: r.offset,
            message: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    let dag = Dag::new(f, adj)?;
    let dataset = Dataset {
        values,
        intervention_mask: mask,
        meta: DatasetMeta {
            seed,
            family,
            mechanism,
            n_obs,
            n_int,
        },
    };
    dataset.validate()?;
    Ok((dataset, dag))
}

/// Human-readable JSON export for debugging.
pub fn dataset_to_json(dataset: &Dataset, dag: &Dag) -> serde_json::Value {
    let values: Vec<Vec<f64>> = dataset
        .values
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let mask: Vec<Vec<u8>> = dataset
        .intervention_mask
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let adjacency: Vec<Vec<u8>> = (0..dag.f())
        .map(|i| (0..dag.f()).map(|j| dag.edge(i, j) as u8).collect())
        .collect();
    serde_json::json!({
        "meta": {
            "seed": dataset.meta.seed,
            "family": dataset.meta.family.name(),
            "mechanism": dataset.meta.mechanism.name(),
            "n_obs": dataset.meta.n_obs,
            "n_int": dataset.meta.n_int,
        },
        "values": values,
        "intervention_mask": mask,
        "adjacency": adjacency,
    })
}
