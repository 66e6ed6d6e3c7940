//! Variational auto-encoder over one-hot/min-max encoded mixed data with a
//! Gaussian decoder that outputs a mean and a variance per coordinate.

use std::f64::consts::PI;

use alarm_core::dataio::{DataError, DatasetTable, OneHotEncoder, Point};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::inflate::Marginals;
use crate::nn::{Adam, Mlp};

/// Lower bound on decoder variances.
pub const VAR_FLOOR: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no training data")]
    Empty,
    #[error("training data contains anomaly labels")]
    LabelledAnomalies,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (last finite loss {last_loss})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        last_loss: f64,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            hidden: vec![64, 32],
            latent: 8,
            epochs: 300,
            batch: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            hidden: vec![500, 200, 30],
            latent: 15,
            epochs: 1500,
            batch: 256,
            learning_rate: 5e-4,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `Σ_d log N(x_d; mean_d, var_d)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((2.0 * PI * v).ln() + (x - m).powi(2) / v))
        .sum()
}

/// Encoder/decoder pair. The encoder maps `D → 2·latent` (mean, log-variance
/// of q(z|x)); the decoder maps `latent → 2·D` (mean, pre-variance of p(x|z)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent: usize,
}

/// Loss and flat gradient (encoder parameters first, then decoder).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl Vae {
    pub fn new<R: Rng>(dim: usize, hidden: &[usize], latent: usize, rng: &mut R) -> Self {
        let mut enc = vec![dim];
        enc.extend_from_slice(hidden);
        enc.push(2 * latent);
        let mut dec = vec![latent];
        dec.extend(hidden.iter().rev());
        dec.push(2 * dim);
        Self {
            encoder: Mlp::new(&enc, rng),
            decoder: Mlp::new(&dec, rng),
            latent,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.inputs()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut p = self.encoder.flat();
        p.extend(self.decoder.flat());
        p
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.encoder.param_count();
        self.encoder.set_flat(&flat[..n]);
        self.decoder.set_flat(&flat[n..]);
    }

    /// Decoder mean and variance for each latent row.
    pub fn decode(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let out = self.decoder.forward(z);
        let d = self.dim();
        let mean = out.columns(0, d).into_owned();
        let var = out.columns(d, d).map(|v| VAR_FLOOR + softplus(v));
        (mean, var)
    }

    pub fn log_px_given_z(&self, x: &[f64], z: &[f64]) -> f64 {
        let (mean, var) = self.decode(&DMatrix::from_row_slice(1, z.len(), z));
        gaussian_log_density(x, mean.as_slice(), var.as_slice())
    }

    /// Negative ELBO averaged over the rows of `x`, with the reparameterization
    /// noise `eps` (rows × latent) held fixed, and its gradient.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, eps: &DMatrix<f64>) -> LossGrad {
        let (b, d, l) = (x.nrows(), self.dim(), self.latent);
        let scale = 1.0 / b as f64;

        let enc_tape = self.encoder.forward_tape(x.clone());
        let enc_out = enc_tape.output();
        let mu_z = enc_out.columns(0, l);
        let lv_z = enc_out.columns(l, l);
        let sd_z = lv_z.map(|v| (0.5 * v).exp());
        let z = mu_z + sd_z.component_mul(eps);

        let dec_tape = self.decoder.forward_tape(z);
        let dec_out = dec_tape.output();
        let mu_x = dec_out.columns(0, d);
        let pre_var = dec_out.columns(d, d);

        let mut loss = 0.0;
        let mut d_dec = DMatrix::zeros(b, 2 * d);
        for i in 0..b {
            for j in 0..d {
                let var = VAR_FLOOR + softplus(pre_var[(i, j)]);
                let r = x[(i, j)] - mu_x[(i, j)];
                loss += 0.5 * ((2.0 * PI * var).ln() + r * r / var);
                d_dec[(i, j)] = -r / var * scale;
                let d_var = 0.5 * (1.0 / var - r * r / (var * var));
                d_dec[(i, d + j)] = d_var * sigmoid(pre_var[(i, j)]) * scale;
            }
            for k in 0..l {
                let (m, lv) = (mu_z[(i, k)], lv_z[(i, k)]);
                loss += 0.5 * (lv.exp() + m * m - 1.0 - lv);
            }
        }
        let (g_dec, d_z) = self.decoder.backward(&dec_tape, d_dec);

        let mut d_enc = DMatrix::zeros(b, 2 * l);
        for i in 0..b {
            for k in 0..l {
                let (m, lv) = (mu_z[(i, k)], lv_z[(i, k)]);
                d_enc[(i, k)] = d_z[(i, k)] + m * scale;
                d_enc[(i, l + k)] =
                    d_z[(i, k)] * eps[(i, k)] * 0.5 * sd_z[(i, k)] + 0.5 * (lv.exp() - 1.0) * scale;
            }
        }
        let (g_enc, _) = self.encoder.backward(&enc_tape, d_enc);
        let mut grad = g_enc.flat();
        grad.extend(g_dec.flat());
        LossGrad {
            loss: loss * scale,
            grad,
        }
    }
}

/// A trained model together with the encoding of its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenModel {
    pub vae: Vae,
    pub encoder: OneHotEncoder,
    /// Marginals of the training data, used for inflation.
    pub marginals: Marginals,
    /// Mean loss per epoch.
    pub history: Vec<f64>,
}

/// One synthetic point with the latent that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub encoded: Vec<f64>,
    pub z: Vec<f64>,
}

impl GenModel {
    pub fn train(normals: &DatasetTable, config: &TrainConfig) -> Result<Self, TrainError> {
        if normals.is_empty() {
            return Err(TrainError::Empty);
        }
        if normals
            .labels()
            .is_some_and(|ls| ls.iter().any(|l| l.is_anomaly()))
        {
            return Err(TrainError::LabelledAnomalies);
        }
        let encoder = OneHotEncoder::fit(normals)?;
        let rows: Vec<Vec<f64>> = normals
            .rows()
            .iter()
            .map(|p| encoder.encode(p))
            .collect::<Result<_, _>>()?;
        let d = encoder.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut vae = Vae::new(d, &config.hidden, config.latent, &mut rng);
        let mut params = vae.flat();
        let mut opt = Adam::new(params.len(), config.learning_rate);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut history = Vec::with_capacity(config.epochs);
        let mut last_loss = f64::NAN;
        let batch = config.batch.max(1);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (bi, chunk) in order.chunks(batch).enumerate() {
                let x = DMatrix::from_fn(chunk.len(), d, |i, j| rows[chunk[i]][j]);
                let eps = DMatrix::from_fn(chunk.len(), config.latent, |_, _| {
                    rng.sample(StandardNormal)
                });
                let lg = vae.loss_and_grad(&x, &eps);
                if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: bi,
                        last_loss,
                    });
                }
                last_loss = lg.loss;
                total += lg.loss * chunk.len() as f64;
                opt.step(&mut params, &lg.grad);
                vae.set_flat(&params);
            }
            let mean = total / rows.len() as f64;
            log::debug!("epoch {epoch}: loss {mean:.4}");
            history.push(mean);
        }
        let marginals = Marginals::fit(&encoder, normals)?;
        Ok(Self {
            vae,
            encoder,
            marginals,
            history,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn log_px_given_z(&self, encoded: &[f64], z: &[f64]) -> f64 {
        self.vae.log_px_given_z(encoded, z)
    }

    /// Raw-unit point of an encoded vector.
    pub fn decode_point(&self, encoded: &[f64]) -> Point {
        self.encoder.decode(encoded)
    }

    /// Draw one point: `z ~ N(0, I)`, reals from the decoder Gaussian,
    /// categoricals set to the block's largest decoder mean.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Sample {
        let z: Vec<f64> = (0..self.vae.latent)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let (mean, var) = self.vae.decode(&DMatrix::from_row_slice(1, z.len(), &z));
        let schema = self.encoder.schema();
        let mut encoded = vec![0.0; self.dim()];
        for j in 0..schema.len() {
            let block = self.encoder.block(j);
            if schema.feature(j).is_real() {
                let c = block.start;
                let noise: f64 = rng.sample(StandardNormal);
                encoded[c] = mean[c] + var[c].sqrt() * noise;
            } else {
                let best = block
                    .clone()
                    .max_by(|&a, &b| mean[a].total_cmp(&mean[b]).then(b.cmp(&a)))
                    .expect("categorical block is nonempty");
                encoded[best] = 1.0;
            }
        }
        Sample { encoded, z }
    }

    pub fn sample_normals(&self, m: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| self.sample(&mut rng)).collect()
    }

    /// Mean decoder log-likelihood of `points` at their posterior means.
    pub fn reconstruction_log_likelihood(&self, points: &[Point]) -> Result<f64, DataError> {
        let l = self.vae.latent;
        let mut total = 0.0;
        for p in points {
            let x = self.encoder.encode(p)?;
            let out = self
                .vae
                .encoder
                .forward(&DMatrix::from_row_slice(1, x.len(), &x));
            let mu: Vec<f64> = (0..l).map(|k| out[(0, k)]).collect();
            total += self.log_px_given_z(&x, &mu);
        }
        Ok(total / points.len().max(1) as f64)
    }
}

/// `τ = ε · min_i log p(x_i | z_i)`.
pub fn compute_threshold(model: &GenModel, normals: &[Sample], epsilon: f64) -> Option<f64> {
    normals
        .iter()
        .map(|s| model.log_px_given_z(&s.encoded, &s.z))
        .min_by(f64::total_cmp)
        .map(|m| epsilon * m)
}
