//! Ground-truth anomaly simulator: a Gaussian-decoder VAE over mixed data,
//! feature inflation, and synthesis of anomalies with importance labels.

pub mod fixtures;
pub mod inflate;
pub mod marginal;
pub mod nn;
pub mod synth;
pub mod vae;

pub use inflate::{Inflation, InflationParams, InflationPolicy, Marginals, Mode};
pub use synth::{synthesize, SimBundle, SynthAnomaly, SynthConfig, SynthError};
pub use vae::{compute_threshold, GenModel, Sample, TrainConfig, TrainError};
