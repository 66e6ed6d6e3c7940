//! Anomaly synthesis with ground-truth importances.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use alarm_core::dataio::{DataError, DatasetTable, FeatureSchema, Label, Point};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::inflate::{inflate_feature, InflateError, Inflation, InflationPolicy};
use crate::vae::{compute_threshold, GenModel, Sample};

/// Default threshold scale.
pub const EPSILON: f64 = 0.5;
/// Consecutive rejections allowed per requested anomaly.
pub const STALL_FACTOR: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("threshold needs at least one normal sample")]
    NoNormals,
    #[error("acceptance stalled: {rejected} consecutive candidates rejected ({accepted} of {wanted} accepted, rejection rate {rate:.4}); check epsilon")]
    Stall {
        rejected: usize,
        accepted: usize,
        wanted: usize,
        rate: f64,
    },
    #[error(transparent)]
    Inflate(#[from] InflateError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Normal points to sample.
    pub m: usize,
    /// Anomalies to accept.
    pub k: usize,
    pub epsilon: f64,
    pub policy: InflationPolicy,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            m: 1000,
            k: 100,
            epsilon: EPSILON,
            policy: InflationPolicy::default(),
            seed: 0,
        }
    }
}

/// One accepted anomaly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthAnomaly {
    pub point: Point,
    pub encoded: Vec<f64>,
    pub z: Vec<f64>,
    pub inflated: Vec<Inflation>,
    /// Ground-truth importance per original feature.
    pub importance: Vec<f64>,
    /// `log p(candidate | z)`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBundle {
    pub schema: FeatureSchema,
    pub normals: Vec<Point>,
    pub normal_latents: Vec<Vec<f64>>,
    pub anomalies: Vec<SynthAnomaly>,
    pub threshold: f64,
    pub epsilon: f64,
    pub seed: u64,
}

/// Entry of the importances file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub row: usize,
    pub weights: BTreeMap<String, f64>,
}

pub fn synthesize(model: &GenModel, config: &SynthConfig) -> Result<SimBundle, SynthError> {
    config.policy.params.validate()?;
    let normals = model.sample_normals(config.m, config.seed);
    let threshold =
        compute_threshold(model, &normals, config.epsilon).ok_or(SynthError::NoNormals)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut anomalies = Vec::with_capacity(config.k);
    let mut rejected = 0usize;
    let mut total_rejected = 0usize;
    while anomalies.len() < config.k {
        if rejected >= STALL_FACTOR * config.k {
            let tried = total_rejected + anomalies.len();
            return Err(SynthError::Stall {
                rejected,
                accepted: anomalies.len(),
                wanted: config.k,
                rate: total_rejected as f64 / tried as f64,
            });
        }
        let Sample { encoded: x, z } = model.sample(&mut rng);
        let base = model.log_px_given_z(&x, &z);
        let inflated = config.policy.choose(&model.marginals, &mut rng);
        let mut candidate = x.clone();
        let mut importance = vec![0.0; model.marginals.len()];
        for &inf in &inflated {
            let mut single = x.clone();
            inflate_feature(
                &mut single,
                inf,
                &model.encoder,
                &model.marginals,
                &config.policy.params,
                &mut rng,
            )?;
            let block = model.encoder.block(inf.feature);
            candidate[block.clone()].copy_from_slice(&single[block]);
            importance[inf.feature] = (base - model.log_px_given_z(&single, &z)).max(0.0);
        }
        let score = model.log_px_given_z(&candidate, &z);
        if score < threshold {
            anomalies.push(SynthAnomaly {
                point: model.decode_point(&candidate),
                encoded: candidate,
                z,
                inflated,
                importance,
                score,
            });
            rejected = 0;
        } else {
            rejected += 1;
            total_rejected += 1;
        }
    }
    log::info!(
        "synthesized {} anomalies after {} rejections (tau {threshold:.4})",
        anomalies.len(),
        total_rejected
    );
    let (normals, normal_latents) = normals
        .into_iter()
        .map(|s| (model.decode_point(&s.encoded), s.z))
        .unzip();
    Ok(SimBundle {
        schema: model.encoder.schema().clone(),
        normals,
        normal_latents,
        anomalies,
        threshold,
        epsilon: config.epsilon,
        seed: config.seed,
    })
}

impl SimBundle {
    /// Normals followed by anomalies, labelled.
    pub fn table(&self) -> Result<DatasetTable, DataError> {
        let rows = self
            .normals
            .iter()
            .cloned()
            .chain(self.anomalies.iter().map(|a| a.point.clone()))
            .collect();
        let labels = std::iter::repeat_n(Label::Inlier, self.normals.len())
            .chain(std::iter::repeat_n(Label::Anomaly, self.anomalies.len()))
            .collect();
        DatasetTable::new(self.schema.clone(), rows, Some(labels))
    }

    /// Table row of anomaly `a`.
    pub fn anomaly_row(&self, a: usize) -> usize {
        self.normals.len() + a
    }

    pub fn importances(&self) -> Vec<Vec<f64>> {
        self.anomalies
            .iter()
            .map(|a| a.importance.clone())
            .collect()
    }

    pub fn importance_records(&self) -> Vec<ImportanceRecord> {
        self.anomalies
            .iter()
            .enumerate()
            .map(|(a, an)| ImportanceRecord {
                row: self.anomaly_row(a),
                weights: self
                    .schema
                    .names()
                    .map(str::to_owned)
                    .zip(an.importance.iter().copied())
                    .collect(),
            })
            .collect()
    }

    /// Write the CSV, its schema sidecar, and the importances file.
    pub fn save(&self, csv: &Path, schema: &Path, importances: &Path) -> Result<(), SynthError> {
        self.table()?.save(csv, schema)?;
        fs::write(
            importances,
            serde_json::to_string_pretty(&self.importance_records())?,
        )?;
        Ok(())
    }
}

/// Read an importances file back into per-row weight vectors ordered by `schema`.
pub fn load_importances(
    path: &Path,
    schema: &FeatureSchema,
) -> Result<Vec<(usize, Vec<f64>)>, SynthError> {
    let records: Vec<ImportanceRecord> = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(records
        .into_iter()
        .map(|r| {
            let w = schema
                .names()
                .map(|n| r.weights.get(n).copied().unwrap_or(0.0))
                .collect();
            (r.row, w)
        })
        .collect())
}
