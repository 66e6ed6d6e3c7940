//! Anomaly detection with half-space chains, per-point feature importances,
//! rule mining, and the analytics behind an analyst workflow.

pub mod cms;
pub mod dataio;
pub mod explain;
pub mod hashing;
pub mod insight;
pub mod metrics;
pub mod rules;
pub mod xstream;

pub use dataio::{DatasetTable, Feature, FeatureKind, FeatureSchema, Label, Point, Value};
pub use explain::{explain, ImportanceVector};
pub use xstream::{ChainEnsemble, CounterKind, DetectorParams, Projection, ScoreReport};
