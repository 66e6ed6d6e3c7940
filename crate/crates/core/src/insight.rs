//! Analyst-facing analytics: clustering and a 2-D embedding of anomalies in
//! importance space, and budgeted feature-pair selection for scatter plots.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DataError, DatasetTable, FeatureSchema, Point};
use crate::explain::ImportanceVector;
use crate::xstream::{ChainEnsemble, CounterKind, DetectorError, DetectorParams, Projection};

const EIGEN_TOLERANCE: f64 = 1e-10;
const EIGEN_MAX_ITERATIONS: usize = 10_000;

pub const LOOKOUT_CHAINS: usize = 20;
pub const LOOKOUT_DEPTH: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum InsightError {
    #[error("cluster count {k} out of range 1..={n}")]
    ClusterCount { k: usize, n: usize },
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("importance vectors have different lengths")]
    Ragged,
    #[error("eigen-decomposition did not converge")]
    Eigen,
    #[error("need at least 2 real features, got {0}")]
    TooFewRealFeatures(usize),
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("no inliers to fit against")]
    NoInliers,
    #[error("{0} scores for {1} importance vectors")]
    Length(usize, usize),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = InsightError> = std::result::Result<T, E>;

fn l1_normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().map(|x| x.abs()).sum();
    if s > 0.0 {
        w.iter().map(|x| x / s).collect()
    } else {
        w.to_vec()
    }
}

fn normalized_matrix(importances: &[ImportanceVector]) -> Result<Vec<Vec<f64>>> {
    let d = importances.first().map_or(0, |v| v.len());
    if importances.iter().any(|v| v.len() != d) {
        return Err(InsightError::Ragged);
    }
    Ok(importances
        .iter()
        .map(|v| l1_normalized(v.weights()))
        .collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Average-linkage agglomerative clustering under Euclidean distance on
/// L1-normalized importances, cut at `k` clusters. Labels are canonical:
/// cluster 0 holds the smallest input index, cluster 1 the smallest index
/// not in cluster 0, and so on.
pub fn cluster_anomalies(importances: &[ImportanceVector], k: usize) -> Result<Vec<usize>> {
    let n = importances.len();
    if k == 0 || k > n {
        return Err(InsightError::ClusterCount { k, n });
    }
    let x = normalized_matrix(importances)?;
    let points: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    Ok(average_linkage(&x, points, k))
}

fn average_linkage(x: &[Vec<f64>], mut clusters: Vec<Vec<usize>>, k: usize) -> Vec<usize> {
    let n = x.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclid(&x[i], &x[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut alive: Vec<bool> = vec![true; n];
    let mut live = n;
    while live > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if alive[j] && best.is_none_or(|(d, _, _)| dist[i][j] < d) {
                    best = Some((dist[i][j], i, j));
                }
            }
        }
        let (_, a, b) = best.expect("at least two live clusters");
        let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
        for c in 0..n {
            if alive[c] && c != a && c != b {
                let d = (na * dist[a][c] + nb * dist[b][c]) / (na + nb);
                dist[a][c] = d;
                dist[c][a] = d;
            }
        }
        let moved = std::mem::take(&mut clusters[b]);
        clusters[a].extend(moved);
        alive[b] = false;
        live -= 1;
    }
    let mut groups: Vec<&Vec<usize>> = clusters.iter().filter(|c| !c.is_empty()).collect();
    groups.sort_by_key(|c| c.iter().min().copied());
    let mut labels = vec![0; n];
    for (id, g) in groups.iter().enumerate() {
        for &i in g.iter() {
            labels[i] = id;
        }
    }
    labels
}

/// Classical MDS of points given as rows.
pub fn classical_mds(x: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = x.len();
    if n < 2 {
        return Err(InsightError::TooFewPoints { need: 2, got: n });
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| {
        x[i].iter()
            .zip(&x[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    });
    let row_means: Vec<f64> = (0..n).map(|i| d2.row(i).mean()).collect();
    let grand = d2.mean();
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + grand)
    });
    let eig = SymmetricEigen::try_new(b, EIGEN_TOLERANCE, EIGEN_MAX_ITERATIONS)
        .ok_or(InsightError::Eigen)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut coords = vec![[0.0; 2]; n];
    for (axis, &e) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[e];
        if lambda <= 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(e);
        let lead = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("n >= 2");
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * lambda.sqrt();
        for i in 0..n {
            coords[i][axis] = v[i] * scale;
        }
    }
    Ok(coords)
}

/// 2-D classical MDS of L1-normalized importance vectors.
pub fn mds_embed(importances: &[ImportanceVector]) -> Result<Vec<[f64; 2]>> {
    classical_mds(&normalized_matrix(importances)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryEntry {
    /// Row of the anomaly in the scored dataset.
    pub row: usize,
    pub x: f64,
    pub y: f64,
    pub cluster: usize,
    pub score: f64,
    pub importances: ImportanceVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryLayout {
    pub clusters: usize,
    pub entries: Vec<SummaryEntry>,
}

impl SummaryLayout {
    /// Rows assigned to cluster `id`.
    pub fn members(&self, id: usize) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.cluster == id)
            .map(|e| e.row)
            .collect()
    }
}

/// Cluster and embed a set of explained anomalies. A single anomaly sits at
/// the origin.
pub fn summarize(
    rows: &[usize],
    scores: &[f64],
    importances: &[ImportanceVector],
    k: usize,
) -> Result<SummaryLayout> {
    if rows.len() != importances.len() || scores.len() != importances.len() {
        return Err(InsightError::Length(scores.len(), importances.len()));
    }
    let labels = cluster_anomalies(importances, k)?;
    let coords = if importances.len() == 1 {
        vec![[0.0, 0.0]]
    } else {
        mds_embed(importances)?
    };
    let entries = (0..rows.len())
        .map(|i| SummaryEntry {
            row: rows[i],
            x: coords[i][0],
            y: coords[i][1],
            cluster: labels[i],
            score: scores[i],
            importances: importances[i].clone(),
        })
        .collect();
    Ok(SummaryLayout {
        clusters: k,
        entries,
    })
}

/// Per-anomaly incrimination for each real-feature pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub pairs: Vec<(usize, usize)>,
    /// `scores[p][a]` is the incrimination of anomaly `a` under pair `p`.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPair {
    pub features: (String, String),
    pub gain: f64,
    pub incrimination: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookoutSelection {
    pub budget: usize,
    pub pairs: Vec<SelectedPair>,
    /// Sum over anomalies of the best incrimination among selected pairs.
    pub objective: f64,
}

/// Fit a small no-projection detector on the inliers of every real-feature
/// pair and score the anomalies. Incrimination is `1 / (1 + score)`.
pub fn pair_incrimination(
    anomalies: &[Point],
    inliers: &[Point],
    schema: &FeatureSchema,
    seed: u64,
) -> Result<PairScores> {
    let real = schema.real_indices();
    if real.len() < 2 {
        return Err(InsightError::TooFewRealFeatures(real.len()));
    }
    if inliers.is_empty() {
        return Err(InsightError::NoInliers);
    }
    let inlier_table = DatasetTable::new(schema.clone(), inliers.to_vec(), None)?;
    let anomaly_table = DatasetTable::new(schema.clone(), anomalies.to_vec(), None)?;
    let mut pairs = Vec::new();
    for (i, &a) in real.iter().enumerate() {
        for &b in &real[i + 1..] {
            pairs.push((a, b));
        }
    }
    let params = DetectorParams {
        chains: LOOKOUT_CHAINS,
        depth: LOOKOUT_DEPTH,
        projection: Projection::None,
        counter: CounterKind::Exact,
        seed,
    };
    let scores = pairs
        .par_iter()
        .map(|&(a, b)| -> Result<Vec<f64>> {
            let fit = inlier_table.project_features(&[a, b])?;
            let model = ChainEnsemble::fit(&fit, params)?;
            let test = anomaly_table.project_features(&[a, b])?;
            Ok(model
                .score_batch(&test)?
                .iter()
                .map(|r| 1.0 / (1.0 + r.final_score))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairScores { pairs, scores })
}

/// `f(S) = Σ_a max_{p ∈ S} scores[p][a]`, zero for the empty set.
pub fn lookout_objective(scores: &[Vec<f64>], selected: &[usize]) -> f64 {
    let anomalies = scores.first().map_or(0, Vec::len);
    (0..anomalies)
        .map(|a| selected.iter().map(|&p| scores[p][a]).fold(0.0, f64::max))
        .sum()
}

/// Greedy maximization of the objective under a cardinality budget. Ties go
/// to the earlier pair. Returns indices and marginal gains.
pub fn greedy_select(scores: &[Vec<f64>], budget: usize) -> Vec<(usize, f64)> {
    let anomalies = scores.first().map_or(0, Vec::len);
    let mut best = vec![0.0; anomalies];
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..budget.min(scores.len()) {
        let mut pick: Option<(usize, f64)> = None;
        for (p, row) in scores.iter().enumerate() {
            if taken[p] {
                continue;
            }
            let gain: f64 = row.iter().zip(&best).map(|(s, b)| (s - b).max(0.0)).sum();
            if pick.is_none_or(|(_, g)| gain > g) {
                pick = Some((p, gain));
            }
        }
        let (p, gain) = pick.expect("an untaken pair remains");
        taken[p] = true;
        for (b, s) in best.iter_mut().zip(&scores[p]) {
            *b = b.max(*s);
        }
        out.push((p, gain));
    }
    out
}

/// Choose up to `budget` feature pairs whose scatter plots best incriminate
/// the anomalies.
pub fn lookout_select(
    anomalies: &[Point],
    inliers: &[Point],
    schema: &FeatureSchema,
    budget: usize,
    seed: u64,
) -> Result<LookoutSelection> {
    if budget == 0 {
        return Err(InsightError::ZeroBudget);
    }
    let all = pair_incrimination(anomalies, inliers, schema, seed)?;
    let chosen = greedy_select(&all.scores, budget);
    let indices: Vec<usize> = chosen.iter().map(|&(p, _)| p).collect();
    let objective = lookout_objective(&all.scores, &indices);
    let pairs = chosen
        .into_iter()
        .map(|(p, gain)| {
            let (a, b) = all.pairs[p];
            SelectedPair {
                features: (
                    schema.feature(a).name.clone(),
                    schema.feature(b).name.clone(),
                ),
                gain,
                incrimination: all.scores[p].clone(),
            }
        })
        .collect();
    Ok(LookoutSelection {
        budget,
        pairs,
        objective,
    })
}
