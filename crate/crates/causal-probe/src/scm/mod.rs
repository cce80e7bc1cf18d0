//! Synthetic structural causal models: random DAGs from six graph families,
//! linear and random-Fourier-feature mechanisms with additive (optionally
//! heteroscedastic) noise, ancestral sampling with single-variable hard
//! interventions, and a self-describing binary dataset format.
//!
//! Everything here is a pure function of `(seed, config)`: two calls with the
//! same inputs produce bit-identical outputs, which is what makes training
//! batches and evaluation suites reproducible and resumable.

mod dataset;
mod graph;
mod mechanism;

pub use dataset::{
    ancestral_sample, ancestral_sample_raw, dataset_to_json, deserialize_dataset,
    generate_dataset, generate_dataset_profiled, serialize_dataset, DataProfile, Dataset,
    DatasetMeta,
};
pub use graph::{
    sample_dag, sample_graph_config, sample_graph_config_from, Dag, GraphFamily,
    GraphFamilyConfig,
};
pub use mechanism::{
    eval_mechanism, sample_scm, sample_scm_from, HeteroScale, Mechanism, MechanismKind,
    NoiseFamily, NoiseSpec, Scm,
};
