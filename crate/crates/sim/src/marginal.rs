//! Per-feature marginal models used by inflation: one-dimensional Gaussian
//! mixtures chosen by BIC for reals, frequency tables for categoricals.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Largest component count tried by the BIC search.
pub const MAX_COMPONENTS: usize = 5;
const EM_ITERATIONS: usize = 300;
const EM_TOL: f64 = 1e-10;
const MIN_VAR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

impl Component {
    pub fn sd(&self) -> f64 {
        self.var.sqrt()
    }

    fn log_pdf(&self, x: f64) -> f64 {
        -0.5 * ((2.0 * PI * self.var).ln() + (x - self.mean).powi(2) / self.var)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub components: Vec<Component>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Gmm {
    pub fn log_likelihood(&self, data: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.components.len()];
        data.iter()
            .map(|&x| {
                for (b, c) in buf.iter_mut().zip(&self.components) {
                    *b = c.weight.ln() + c.log_pdf(x);
                }
                log_sum_exp(&buf)
            })
            .sum()
    }

    /// Free parameters: `3G − 1`.
    pub fn bic(&self, data: &[f64]) -> f64 {
        let params = (3 * self.components.len() - 1) as f64;
        params * (data.len() as f64).ln() - 2.0 * self.log_likelihood(data)
    }

    /// EM with means initialised at evenly spaced quantiles.
    pub fn fit_em(data: &[f64], g: usize) -> Self {
        assert!(!data.is_empty() && g >= 1);
        let n = data.len();
        let mut sorted = data.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = data.iter().sum::<f64>() / n as f64;
        let var = (data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).max(MIN_VAR);
        let mut comps: Vec<Component> = (0..g)
            .map(|i| {
                let q = (i as f64 + 0.5) / g as f64;
                Component {
                    weight: 1.0 / g as f64,
                    mean: sorted[((q * n as f64) as usize).min(n - 1)],
                    var,
                }
            })
            .collect();
        let mut resp = vec![0.0; n * g];
        let mut last = f64::NEG_INFINITY;
        for _ in 0..EM_ITERATIONS {
            let mut ll = 0.0;
            let mut buf = vec![0.0; g];
            for (i, &x) in data.iter().enumerate() {
                for (b, c) in buf.iter_mut().zip(&comps) {
                    *b = c.weight.ln() + c.log_pdf(x);
                }
                let lse = log_sum_exp(&buf);
                ll += lse;
                for k in 0..g {
                    resp[i * g + k] = (buf[k] - lse).exp();
                }
            }
            for (k, c) in comps.iter_mut().enumerate() {
                let nk: f64 = (0..n).map(|i| resp[i * g + k]).sum();
                if nk <= f64::EPSILON * n as f64 {
                    c.weight = f64::MIN_POSITIVE;
                    continue;
                }
                let mk = (0..n).map(|i| resp[i * g + k] * data[i]).sum::<f64>() / nk;
                let vk = (0..n)
                    .map(|i| resp[i * g + k] * (data[i] - mk).powi(2))
                    .sum::<f64>()
                    / nk;
                *c = Component {
                    weight: nk / n as f64,
                    mean: mk,
                    var: vk.max(MIN_VAR),
                };
            }
            if (ll - last).abs() <= EM_TOL * ll.abs().max(1.0) {
                break;
            }
            last = ll;
        }
        comps.retain(|c| c.weight > f64::MIN_POSITIVE);
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= total;
        }
        Self { components: comps }
    }

    /// Lowest-BIC mixture over `G = 1..=max_g`; ties go to the smaller `G`.
    pub fn fit_bic(data: &[f64], max_g: usize) -> Self {
        let mut best: Option<(f64, Self)> = None;
        for g in 1..=max_g.min(data.len()).max(1) {
            let m = Self::fit_em(data, g);
            let b = m.bic(data);
            if best.as_ref().is_none_or(|(bb, _)| b < *bb) {
                best = Some((b, m));
            }
        }
        best.expect("at least one fit").1
    }

    /// Whether `x` lies within `k` standard deviations of any component mean.
    pub fn within_bands(&self, x: f64, k: f64) -> bool {
        self.components
            .iter()
            .any(|c| (x - c.mean).abs() <= k * c.sd())
    }
}

/// Observed category counts in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frequencies {
    pub counts: Vec<(String, usize)>,
}

impl Frequencies {
    /// Least-frequent value among those observed at least once; ties go to the
    /// earlier declared value. `None` when fewer than two values were observed.
    pub fn rarest(&self) -> Option<&str> {
        let observed: Vec<&(String, usize)> = self.counts.iter().filter(|(_, c)| *c > 0).collect();
        if observed.len() < 2 {
            return None;
        }
        observed
            .into_iter()
            .min_by_key(|(_, c)| *c)
            .map(|(v, _)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marginal {
    /// Mixture fitted in normalised units, plus the observed normalised range.
    Real {
        gmm: Gmm,
        min: f64,
        max: f64,
    },
    Categorical(Frequencies),
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    #[test]
    fn single_gaussian_matches_moments() {
        let data = [1.0, 2.0, 3.0, 4.0];
        let g = Gmm::fit_em(&data, 1);
        assert_eq!(g.components.len(), 1);
        assert!((g.components[0].mean - 2.5).abs() < 1e-12);
        assert!((g.components[0].var - 1.25).abs() < 1e-12);
    }

    #[test]
    fn bic_finds_two_separated_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Normal::new(-5.0, 0.5).unwrap();
        let b = Normal::new(5.0, 0.5).unwrap();
        let data: Vec<f64> = (0..400)
            .map(|i| {
                if i % 2 == 0 {
                    a.sample(&mut rng)
                } else {
                    b.sample(&mut rng)
                }
            })
            .collect();
        let g = Gmm::fit_bic(&data, MAX_COMPONENTS);
        assert_eq!(g.components.len(), 2);
        let mut means: Vec<f64> = g.components.iter().map(|c| c.mean).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 5.0).abs() < 0.2 && (means[1] - 5.0).abs() < 0.2);
    }

    #[test]
    fn rarest_category() {
        let f = Frequencies {
            counts: vec![
                ("A".into(), 90),
                ("B".into(), 9),
                ("C".into(), 1),
                ("D".into(), 0),
            ],
        };
        assert_eq!(f.rarest(), Some("C"));
        let tie = Frequencies {
            counts: vec![("A".into(), 5), ("B".into(), 2), ("C".into(), 2)],
        };
        assert_eq!(tie.rarest(), Some("B"));
        let single = Frequencies {
            counts: vec![("A".into(), 5), ("B".into(), 0)],
        };
        assert_eq!(single.rarest(), None);
    }
}
