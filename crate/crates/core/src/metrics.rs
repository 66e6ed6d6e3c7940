//! Ranking metrics: NDCG of an importance ranking against ground-truth
//! relevance, and AUROC of detector scores.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("both classes must be present")]
    SingleClass,
}

/// Feature order by descending weight, ties kept in feature order.
pub fn ranking(weights: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx
}

fn dcg(order: &[usize], relevance: &[f64]) -> f64 {
    order
        .iter()
        .enumerate()
        .map(|(i, &j)| relevance[j] / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG with a log2 discount. Relevance is the truth weight of each feature.
/// An all-zero truth scores 1.
pub fn ndcg(predicted: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    ndcg_of_order(&ranking(predicted), truth, predicted.len())
}

/// NDCG of an explicit feature order.
pub fn ndcg_of_order(order: &[usize], truth: &[f64], n: usize) -> Result<f64, MetricError> {
    if n != truth.len() {
        return Err(MetricError::Length(n, truth.len()));
    }
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let ideal = dcg(&ranking(truth), truth);
    if ideal == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(order, truth) / ideal)
}

/// Mean NDCG of `resamples` uniformly random feature orders.
pub fn random_ndcg(truth: &[f64], resamples: usize, seed: u64) -> Result<f64, MetricError> {
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..truth.len()).collect();
    let mut total = 0.0;
    for _ in 0..resamples {
        order.shuffle(&mut rng);
        total += ndcg_of_order(&order, truth, truth.len())?;
    }
    Ok(total / resamples.max(1) as f64)
}

/// Mann–Whitney AUROC for ranking anomalies first, where a LOWER score
/// means more anomalous. Ties count one half.
pub fn auroc(scores: &[f64], is_anomaly: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != is_anomaly.len() {
        return Err(MetricError::Length(scores.len(), is_anomaly.len()));
    }
    let pos = is_anomaly.iter().filter(|&&a| a).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    // Ascending by anomalousness, i.e. descending score.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| is_anomaly[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
