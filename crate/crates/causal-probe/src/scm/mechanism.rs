//! Structural equations: linear and random-Fourier-feature mechanisms with
//! Gaussian, Laplace, or Cauchy additive noise.
//!
//! Each node follows `x_j ← f_j(x_pa(j)) + s_j(x_pa(j)) · ε_j` with a standard
//! noise draw `ε_j`. Gaussian noise uses a constant per-node scale σ; Laplace
//! and Cauchy use a heteroscedastic scale `h(x) = softplus(g_rff(x))` built
//! from an RFF function of the parent values.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scm::graph::Dag;

/// Number of random Fourier features per mechanism.
pub const RFF_FEATURES: usize = 100;

/// Uniform over `[a, b] ∪ [-b, -a]`: magnitude uniform, sign fair.
fn unif_pm(a: f64, b: f64, rng: &mut ChaCha12Rng) -> f64 {
    let magnitude = rng.gen_range(a..b);
    if rng.gen::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum MechanismKind {
    Linear,
    Rff,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 2] = [MechanismKind::Linear, MechanismKind::Rff];

    pub fn id(self) -> u8 {
        match self {
            MechanismKind::Linear => 0,
            MechanismKind::Rff => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(MechanismKind::Linear),
            1 => Some(MechanismKind::Rff),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Linear => "linear",
            MechanismKind::Rff => "rff",
        }
    }
}

/// The deterministic part of one node's structural equation.
#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    Rff {
        /// M×arity frequency matrix.
        omega: Array2<f64>,
        phases: Vec<f64>,
        amplitudes: Vec<f64>,
        length_scale: f64,
        output_scale: f64,
        bias: f64,
    },
}

impl Mechanism {
    pub fn kind(&self) -> MechanismKind {
        match self {
            Mechanism::Linear { .. } => MechanismKind::Linear,
            Mechanism::Rff { .. } => MechanismKind::Rff,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Mechanism::Linear { weights, .. } => weights.len(),
            Mechanism::Rff { omega, .. } => omega.ncols(),
        }
    }

    pub(crate) fn eval_unchecked(&self, parent_values: &[f64]) -> f64 {
        debug_assert_eq!(parent_values.len(), self.arity());
        match self {
            Mechanism::Linear { weights, bias } => {
                weights
                    .iter()
                    .zip(parent_values)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + bias
            }
            Mechanism::Rff {
                omega,
                phases,
                amplitudes,
                length_scale,
                output_scale,
                bias,
            } => {
                let m = phases.len();
                let mut total = 0.0;
                for k in 0..m {
                    let dot: f64 = omega
                        .row(k)
                        .iter()
                        .zip(parent_values)
                        .map(|(o, x)| o * x)
                        .sum();
                    total += amplitudes[k] * (dot / length_scale + phases[k]).cos();
                }
                output_scale * (2.0 / m as f64).sqrt() * total + bias
            }
        }
    }
}

/// Evaluate the deterministic part `f_j` at the given parent values.
pub fn eval_mechanism(mech: &Mechanism, parent_values: &[f64]) -> Result<f64> {
    if parent_values.len() != mech.arity() {
        return Err(Error::Contract(format!(
            "mechanism arity {} but got {} parent values",
            mech.arity(),
            parent_values.len()
        )));
    }
    Ok(mech.eval_unchecked(parent_values))
}

/// Heteroscedastic noise scale `h(x) = softplus(g_rff(x))`, strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroScale {
    g: Mechanism,
}

impl HeteroScale {
    pub fn arity(&self) -> usize {
        self.g.arity()
    }

    pub fn scale(&self, parent_values: &[f64]) -> f64 {
        let g = self.g.eval_unchecked(parent_values);
        let softplus = if g > 30.0 {
            g
        } else if g < -30.0 {
            g.exp()
        } else {
            g.exp().ln_1p()
        };
        softplus.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
    Cauchy,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 3] = [
        NoiseFamily::Gaussian,
        NoiseFamily::Laplace,
        NoiseFamily::Cauchy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Laplace => "laplace",
            NoiseFamily::Cauchy => "cauchy",
        }
    }
}

/// One node's noise model.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Gaussian { sigma: f64 },
    Laplace { scale_fn: HeteroScale },
    Cauchy { scale_fn: HeteroScale },
}

impl NoiseSpec {
    pub fn family(&self) -> NoiseFamily {
        match self {
            NoiseSpec::Gaussian { .. } => NoiseFamily::Gaussian,
            NoiseSpec::Laplace { .. } => NoiseFamily::Laplace,
            NoiseSpec::Cauchy { .. } => NoiseFamily::Cauchy,
        }
    }

    /// Draw `s(x_pa) · ε` with a standard noise variable ε.
    pub fn draw(&self, parent_values: &[f64], rng: &mut ChaCha12Rng) -> f64 {
        match self {
            NoiseSpec::Gaussian { sigma } => {
                let eps: f64 = StandardNormal.sample(rng);
                sigma * eps
            }
            NoiseSpec::Laplace { scale_fn } => {
                // Inverse-CDF standard Laplace: u ~ U(-1/2, 1/2),
                // ε = -sign(u)·ln(1 - 2|u|).
                let u: f64 = rng.gen::<f64>() - 0.5;
                let eps = -u.signum() * (1.0 - 2.0 * u.abs()).ln();
                scale_fn.scale(parent_values) * eps
            }
            NoiseSpec::Cauchy { scale_fn } => {
                let u: f64 = rng.gen::<f64>();
                let eps = (std::f64::consts::PI * (u - 0.5)).tan();
                scale_fn.scale(parent_values) * eps
            }
        }
    }
}

/// A complete structural causal model.
#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    pub dag: Dag,
    pub mechanisms: Vec<Mechanism>,
    pub noises: Vec<NoiseSpec>,
    pub topo_order: Vec<usize>,
}

impl Scm {
    pub fn mechanism_kind(&self) -> MechanismKind {
        self.mechanisms[0].kind()
    }

    pub fn noise_family(&self) -> NoiseFamily {
        self.noises[0].family()
    }

    /// Validate the cross-field invariants: one mechanism kind, arities that
    /// match parent counts, and a topological order consistent with the DAG.
    pub fn validate(&self) -> Result<()> {
        let f = self.dag.f();
        if self.mechanisms.len() != f || self.noises.len() != f {
            return Err(Error::Contract(
                "Scm needs one mechanism and one noise spec per node".into(),
            ));
        }
        let kind = self.mechanism_kind();
        for (j, mech) in self.mechanisms.iter().enumerate() {
            if mech.kind() != kind {
                return Err(Error::Contract(
                    "Scm mechanisms must all share one kind".into(),
                ));
            }
            let parents = self.dag.parents(j).len();
            if mech.arity() != parents {
                return Err(Error::Contract(format!(
                    "node {j}: mechanism arity {} != parent count {parents}",
                    mech.arity()
                )));
            }
        }
        if !self.dag.is_topological_order(&self.topo_order) {
            return Err(Error::Contract("Scm topo_order is not topological".into()));
        }
        Ok(())
    }
}

fn sample_rff(arity: usize, rng: &mut ChaCha12Rng) -> Mechanism {
    let m = RFF_FEATURES;
    let omega = Array2::from_shape_fn((m, arity), |_| StandardNormal.sample(rng));
    let phases = (0..m)
        .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    let amplitudes = (0..m).map(|_| StandardNormal.sample(rng)).collect();
    Mechanism::Rff {
        omega,
        phases,
        amplitudes,
        length_scale: rng.gen_range(5.0..12.0),
        output_scale: rng.gen_range(8.0..22.0),
        bias: rng.gen_range(-3.0..3.0),
    }
}

/// Attach mechanisms and noise to a DAG. The mechanism kind is drawn once for
/// the whole model (probability 1/2 each), as is the noise family; per-node
/// parameters come from the documented distributions.
pub fn sample_scm(dag: &Dag, rng: &mut ChaCha12Rng) -> Scm {
    sample_scm_from(dag, &MechanismKind::ALL, &NoiseFamily::ALL, rng)
}

/// [`sample_scm`] restricted to the listed mechanism kinds and noise
/// families, each drawn uniformly. The caller guarantees both are non-empty.
pub fn sample_scm_from(
    dag: &Dag,
    kinds: &[MechanismKind],
    noise_families: &[NoiseFamily],
    rng: &mut ChaCha12Rng,
) -> Scm {
    let f = dag.f();
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let noise_family = noise_families[rng.gen_range(0..noise_families.len())];

    let mut mechanisms = Vec::with_capacity(f);
    for j in 0..f {
        let arity = dag.parents(j).len();
        let mech = match kind {
            MechanismKind::Linear => Mechanism::Linear {
                weights: (0..arity).map(|_| unif_pm(0.25, 4.0, rng)).collect(),
                bias: rng.gen_range(-3.0..3.0),
            },
            MechanismKind::Rff => sample_rff(arity, rng),
        };
        mechanisms.push(mech);
    }

    let mut noises = Vec::with_capacity(f);
    for j in 0..f {
        let arity = dag.parents(j).len();
        let spec = match noise_family {
            NoiseFamily::Gaussian => NoiseSpec::Gaussian {
                sigma: rng.gen_range(0.2..2.0),
            },
            NoiseFamily::Laplace => NoiseSpec::Laplace {
                scale_fn: HeteroScale {
                    g: sample_rff(arity, rng),
                },
            },
            NoiseFamily::Cauchy => NoiseSpec::Cauchy {
                scale_fn: HeteroScale {
                    g: sample_rff(arity, rng),
                },
            },
        };
        noises.push(spec);
    }

    let scm = Scm {
        dag: dag.clone(),
        mechanisms,
        noises,
        topo_order: dag.topological_order(),
    };
    debug_assert!(scm.validate().is_ok());
    scm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::graph::{sample_dag, sample_graph_config, GraphFamilyConfig};
    use crate::seeds::rng_for;

    fn rng(seed: u64) -> ChaCha12Rng {
        rng_for(seed, "test/mechanism", 0)
    }

    #[test]
    fn linear_mechanism_is_direct_arithmetic() {
        let mech = Mechanism::Linear {
            weights: vec![2.0],
            bias: 1.0,
        };
        assert_eq!(eval_mechanism(&mech, &[3.0]).unwrap(), 7.0);
    }

    #[test]
    fn root_linear_mechanism_returns_bias() {
        let mech = Mechanism::Linear {
            weights: vec![],
            bias: -1.5,
        };
        assert_eq!(eval_mechanism(&mech, &[]).unwrap(), -1.5);
    }

    #[test]
    fn rff_with_zero_amplitudes_returns_bias() {
        let mut r = rng(1);
        let Mechanism::Rff {
            omega,
            phases,
            length_scale,
            output_scale,
            ..
        } = sample_rff(2, &mut r)
        else {
            unreachable!()
        };
        let mech = Mechanism::Rff {
            omega,
            phases: phases.clone(),
            amplitudes: vec![0.0; phases.len()],
            length_scale,
            output_scale,
            bias: 0.75,
        };
        for trial in 0..10 {
            let x = [trial as f64, -(trial as f64)];
            assert_eq!(eval_mechanism(&mech, &x).unwrap(), 0.75);
        }
    }

    #[test]
    fn arity_mismatch_is_a_contract_error() {
        let mech = Mechanism::Linear {
            weights: vec![1.0, 2.0],
            bias: 0.0,
        };
        assert!(eval_mechanism(&mech, &[1.0]).is_err());
    }

    #[test]
    fn sampled_parameters_respect_table_ranges() {
        let mut r = rng(2);
        let config = GraphFamilyConfig::ErdosRenyi { edges_per_node: 2 };
        let mut saw_linear = false;
        let mut saw_rff = false;
        for _ in 0..600 {
            let dag = sample_dag(&config, 6, &mut r).unwrap();
            let scm = sample_scm(&dag, &mut r);
            scm.validate().unwrap();
            for mech in &scm.mechanisms {
                match mech {
                    Mechanism::Linear { weights, bias } => {
                        saw_linear = true;
                        assert!((-3.0..3.0).contains(bias));
                        for w in weights {
                            assert!((0.25..=4.0).contains(&w.abs()), "weight {w} out of range");
                        }
                    }
                    Mechanism::Rff {
                        length_scale,
                        output_scale,
                        bias,
                        ..
                    } => {
                        saw_rff = true;
                        assert!((5.0..12.0).contains(length_scale));
                        assert!((8.0..22.0).contains(output_scale));
                        assert!((-3.0..3.0).contains(bias));
                    }
                }
            }
            for noise in &scm.noises {
                if let NoiseSpec::Gaussian { sigma } = noise {
                    assert!((0.2..2.0).contains(sigma));
                }
            }
        }
        assert!(saw_linear && saw_rff);
    }

    #[test]
    fn heteroscedastic_scale_is_strictly_positive() {
        let mut r = rng(3);
        let scale_fn = HeteroScale {
            g: sample_rff(3, &mut r),
        };
        for _ in 0..10_000 {
            let x = [
                r.gen::<f64>() * 20.0 - 10.0,
                r.gen::<f64>() * 20.0 - 10.0,
                r.gen::<f64>() * 20.0 - 10.0,
            ];
            assert!(scale_fn.scale(&x) > 0.0);
        }
    }

    #[test]
    fn mechanism_kind_is_shared_across_nodes() {
        let mut r = rng(4);
        for _ in 0..50 {
            let config = sample_graph_config(&mut r);
            let dag = sample_dag(&config, 7, &mut r).unwrap();
            let scm = sample_scm(&dag, &mut r);
            let kind = scm.mechanism_kind();
            assert!(scm.mechanisms.iter().all(|m| m.kind() == kind));
        }
    }
}
