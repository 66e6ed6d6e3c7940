//! Feature inflation on encoded points.

use alarm_core::dataio::{DataError, DatasetTable, OneHotEncoder};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::marginal::{Frequencies, Gmm, Marginal, MAX_COMPONENTS};

/// Draws allowed before a local inflation gives up.
pub const LOCAL_ATTEMPTS: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum InflateError {
    #[error("feature {0} has fewer than two observed values and cannot be inflated")]
    SingleValue(String),
    #[error("local inflation of feature {feature} found no value outside the ±2σ bands in {attempts} draws")]
    LocalStall { feature: String, attempts: usize },
    #[error("mode {mode:?} does not apply to feature {feature}")]
    ModeMismatch { feature: String, mode: Mode },
    #[error("invalid inflation parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Local,
    Global,
    Categorical,
}

/// One inflated feature of one anomaly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inflation {
    pub feature: usize,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflationParams {
    /// Variance multiplier for local inflation.
    pub alpha: f64,
    /// Range multiplier for global inflation.
    pub beta: f64,
}

impl Default for InflationParams {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            beta: 1.2,
        }
    }
}

impl InflationParams {
    pub fn validate(&self) -> Result<(), InflateError> {
        if !(self.alpha > 1.0 && self.beta > 1.0) {
            return Err(InflateError::BadParams(format!(
                "alpha {} and beta {} must both exceed 1",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Marginal models of every feature, in the encoder's normalised units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub features: Vec<Marginal>,
}

impl Marginals {
    pub fn fit(encoder: &OneHotEncoder, data: &DatasetTable) -> Result<Self, DataError> {
        let schema = encoder.schema();
        let encoded: Vec<Vec<f64>> = data
            .rows()
            .iter()
            .map(|p| encoder.encode(p))
            .collect::<Result<_, _>>()?;
        let features = (0..schema.len())
            .map(|j| {
                let block = encoder.block(j);
                let f = schema.feature(j);
                if f.is_real() {
                    let col: Vec<f64> = encoded.iter().map(|x| x[block.start]).collect();
                    let min = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    Marginal::Real {
                        gmm: Gmm::fit_bic(&col, MAX_COMPONENTS),
                        min,
                        max,
                    }
                } else {
                    let counts = f
                        .values
                        .iter()
                        .zip(block)
                        .map(|(v, c)| (v.clone(), encoded.iter().filter(|x| x[c] == 1.0).count()))
                        .collect();
                    Marginal::Categorical(Frequencies { counts })
                }
            })
            .collect();
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Whether feature `j` admits any inflation.
    pub fn inflatable(&self, j: usize) -> bool {
        match &self.features[j] {
            Marginal::Real { .. } => true,
            Marginal::Categorical(f) => f.rarest().is_some(),
        }
    }
}

/// `[lo, hi]` widened symmetrically so its length scales by `beta`.
pub fn extended_range(min: f64, max: f64, beta: f64) -> (f64, f64) {
    let pad = 0.5 * (beta - 1.0) * (max - min);
    (min - pad, max + pad)
}

/// Draw from the mixture with every variance scaled by `alpha` until the value
/// falls outside all `±2σ` bands of the original components.
pub fn local_draw<R: Rng>(gmm: &Gmm, alpha: f64, rng: &mut R) -> Option<f64> {
    let weights: Vec<(usize, f64)> = gmm
        .components
        .iter()
        .map(|c| c.weight)
        .enumerate()
        .collect();
    for _ in 0..LOCAL_ATTEMPTS {
        let (k, _) = *weights
            .choose_weighted(rng, |(_, w)| *w)
            .expect("mixture has positive weights");
        let c = &gmm.components[k];
        let x = Normal::new(c.mean, (alpha * c.var).sqrt())
            .expect("finite positive sd")
            .sample(rng);
        if !gmm.within_bands(x, 2.0) {
            return Some(x);
        }
    }
    None
}

/// Write an inflated value of feature `inf.feature` into the encoded point `x`.
pub fn inflate_feature<R: Rng>(
    x: &mut [f64],
    inf: Inflation,
    encoder: &OneHotEncoder,
    marginals: &Marginals,
    params: &InflationParams,
    rng: &mut R,
) -> Result<(), InflateError> {
    let j = inf.feature;
    let name = || encoder.schema().feature(j).name.clone();
    let block = encoder.block(j);
    match (&marginals.features[j], inf.mode) {
        (Marginal::Real { gmm, .. }, Mode::Local) => {
            x[block.start] =
                local_draw(gmm, params.alpha, rng).ok_or_else(|| InflateError::LocalStall {
                    feature: name(),
                    attempts: LOCAL_ATTEMPTS,
                })?;
        }
        (Marginal::Real { min, max, .. }, Mode::Global) => {
            let (lo, hi) = extended_range(*min, *max, params.beta);
            x[block.start] = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
        }
        (Marginal::Categorical(freq), Mode::Categorical) => {
            let rare = freq
                .rarest()
                .ok_or_else(|| InflateError::SingleValue(name()))?;
            let at = freq
                .counts
                .iter()
                .position(|(v, _)| v == rare)
                .expect("rarest comes from the table");
            for c in block.clone() {
                x[c] = 0.0;
            }
            x[block.start + at] = 1.0;
        }
        (_, mode) => {
            return Err(InflateError::ModeMismatch {
                feature: name(),
                mode,
            })
        }
    }
    Ok(())
}

/// How features are chosen for inflation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflationPolicy {
    /// Fraction of all features inflated per anomaly.
    pub fraction: f64,
    /// Probability that an inflated real feature uses local rather than global inflation.
    pub local_probability: f64,
    pub params: InflationParams,
}

impl Default for InflationPolicy {
    fn default() -> Self {
        Self {
            fraction: 1.0 / 3.0,
            local_probability: 0.5,
            params: InflationParams::default(),
        }
    }
}

impl InflationPolicy {
    /// Features inflated per anomaly: `round(fraction · d)`, at least one when
    /// the fraction is positive, capped by the number of inflatable features.
    pub fn count(&self, d: usize, inflatable: usize) -> usize {
        if self.fraction <= 0.0 {
            return 0;
        }
        ((self.fraction * d as f64).round() as usize)
            .max(1)
            .min(inflatable)
    }

    /// Random inflation set for one anomaly, sorted by feature index.
    pub fn choose<R: Rng>(&self, marginals: &Marginals, rng: &mut R) -> Vec<Inflation> {
        let eligible: Vec<usize> = (0..marginals.len())
            .filter(|&j| marginals.inflatable(j))
            .collect();
        let n = self.count(marginals.len(), eligible.len());
        let mut chosen: Vec<usize> = eligible.choose_multiple(rng, n).copied().collect();
        chosen.sort_unstable();
        chosen
            .into_iter()
            .map(|j| {
                let mode = match marginals.features[j] {
                    Marginal::Categorical(_) => Mode::Categorical,
                    Marginal::Real { .. } if rng.random_bool(self.local_probability) => Mode::Local,
                    Marginal::Real { .. } => Mode::Global,
                };
                Inflation { feature: j, mode }
            })
            .collect()
    }
}
