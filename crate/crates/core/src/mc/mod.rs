//! Monte Carlo oracle: random streams, Gaussian sample sets, SDE simulation,
//! conditional-moment regression and convergence-order fits.

pub mod regression;
pub mod rng;
pub mod sampling;
pub mod sde;
pub mod stats;

pub use regression::{
    conditional_moments_kr, kernel_weights, kr_bandwidth, likelihood_weights, weighted_moments, ConditionalEstimate,
    ControlVariate, Weighted, MIN_ESS,
};
pub use sampling::{gaussian_vectors, NoiseStream, SamplingScheme};
pub use sde::{
    first_variation, sample_initial, sample_observation, simulate_ensemble, simulate_sde, simulate_sde_recording,
    Ensemble, EnsembleSetup, FirstVariation, PathSample, SimulationConfig, DEFAULT_SDE_STEPS, PATH_LOG,
};
pub use stats::{batch_ranges, order_fit, order_fit_weighted, BatchMeans, BatchSum, OrderFit, VectorMoments};
