//! Three-phase time-domain simulation, noise, phasor extraction and dataset
//! assembly.

pub mod circuit;
pub mod dataset;
pub mod noise;
pub mod phasor;
pub mod scenario;
pub mod trajectory;

pub use circuit::{build_circuit_ode, simulate_trajectory, CircuitModel, Integration, SourceSpec, SteadyState};
pub use dataset::{
    assemble_dataset, generate_dataset, generate_dataset_with, generate_pair, normalize_dataset, DatasetManifest,
    FrameConfig, GraphDataset, GraphSample, ScalerParams, SimConfig, TrajectoryPair,
};
pub use noise::add_noise;
pub use phasor::{extract_phasor, Phasor, PhasorFrame};
pub use scenario::{make_scenario, LoadAdmittance, Scenario, ScenarioConfig};
pub use trajectory::Trajectory;
