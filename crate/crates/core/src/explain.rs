//! Per-point feature importances read off a fitted chain ensemble.
//!
//! A chain "uses" a dimension for a point when the dimension is one of its
//! halving dimensions at or above the point's scoring level. The raw weight
//! of a dimension is the mean chain score over the chains that use it; low
//! means the using chains found the point rare, so the reported importance is
//! `1 / (1 + raw)`. With hashed projection, importances of sketch dimensions
//! are diffused back to original features by a random walk with restart on
//! the point's projected/original bipartite graph.

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::dataio::{FeatureSchema, Point, Value};
use crate::hashing::{category_key, HashFamily};
use crate::xstream::{ChainEnsemble, DetectorError, ScoreReport};

/// Restart probability used by [`explain`].
pub const RESTART_PROBABILITY: f64 = 0.15;
pub const RWR_TOLERANCE: f64 = 1e-9;
pub const RWR_MAX_ITERATIONS: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("projected importances are all zero")]
    ZeroImportances,
    #[error("attribution graph has no edges")]
    EmptyGraph,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// For each sketch dimension, the indices of chains that use it.
pub fn chain_usage(report: &ScoreReport, ensemble: &ChainEnsemble) -> Vec<Vec<usize>> {
    let mut usage = vec![Vec::new(); ensemble.dims()];
    for (m, (chain, score)) in ensemble.chains().iter().zip(&report.per_chain).enumerate() {
        let mut seen = vec![false; ensemble.dims()];
        for &f in &chain.features()[..score.level] {
            if !seen[f] {
                seen[f] = true;
                usage[f].push(m);
            }
        }
    }
    usage
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedImportances {
    /// Mean score of the using chains; `None` for unused dimensions.
    pub raw: Vec<Option<f64>>,
    /// `1 / (1 + raw)` for used dimensions, 0 otherwise.
    pub weights: Vec<f64>,
    /// Number of chains using each dimension.
    pub usage: Vec<usize>,
}

impl ProjectedImportances {
    pub fn from_report(report: &ScoreReport, ensemble: &ChainEnsemble) -> Self {
        let usage = chain_usage(report, ensemble);
        let raw: Vec<Option<f64>> = usage
            .iter()
            .map(|chains| {
                (!chains.is_empty()).then(|| {
                    chains
                        .iter()
                        .map(|&m| report.per_chain[m].score)
                        .sum::<f64>()
                        / chains.len() as f64
                })
            })
            .collect();
        Self {
            weights: raw
                .iter()
                .map(|r| r.map_or(0.0, |w| 1.0 / (1.0 + w)))
                .collect(),
            usage: usage.iter().map(Vec::len).collect(),
            raw,
        }
    }

    /// True when no chain used any dimension.
    pub fn is_degenerate(&self) -> bool {
        self.usage.iter().all(|&u| u == 0)
    }

    /// L1-normalized weights; all-zero maps to uniform.
    pub fn fly_back(&self) -> Vec<f64> {
        normalize_l1_or_uniform(&self.weights)
    }
}

pub fn projected_importances(
    point: &Point,
    ensemble: &ChainEnsemble,
) -> Result<ProjectedImportances, ExplainError> {
    let report = ensemble.score(point)?;
    Ok(ProjectedImportances::from_report(&report, ensemble))
}

fn normalize_l1_or_uniform(xs: &[f64]) -> Vec<f64> {
    let total: f64 = xs.iter().sum();
    if total > 0.0 {
        xs.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / xs.len() as f64; xs.len()]
    }
}

/// Binary adjacency between `K` projected and `|F|` original features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionGraph {
    projected: usize,
    original: usize,
    /// Row-major `projected × original`.
    edges: Vec<bool>,
}

impl AttributionGraph {
    pub fn from_edges(projected: usize, original: usize, edges: Vec<bool>) -> Self {
        assert_eq!(edges.len(), projected * original);
        Self {
            projected,
            original,
            edges,
        }
    }

    pub fn projected(&self) -> usize {
        self.projected
    }

    pub fn original(&self) -> usize {
        self.original
    }

    pub fn has_edge(&self, k: usize, f: usize) -> bool {
        self.edges[k * self.original + f]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    pub fn density(&self) -> f64 {
        self.edge_count() as f64 / self.edges.len().max(1) as f64
    }
}

/// Edge `(k, F)` iff `h_k(F) ≠ 0` for real `F`, or `h_k(F ⊕ x[F]) ≠ 0` for categorical `F`.
pub fn build_attribution_graph(
    point: &Point,
    hashes: &HashFamily,
    schema: &FeatureSchema,
) -> AttributionGraph {
    let keys: Vec<String> = schema
        .features()
        .iter()
        .zip(point.values())
        .map(|(f, v)| match v {
            Value::Real(_) => f.name.clone(),
            Value::Cat(c) => category_key(&f.name, c),
        })
        .collect();
    let k_dims = hashes.dims();
    let mut edges = Vec::with_capacity(k_dims * keys.len());
    for k in 0..k_dims {
        edges.extend(keys.iter().map(|key| hashes.sign(k, key) != 0));
    }
    AttributionGraph::from_edges(k_dims, keys.len(), edges)
}

/// Result of a random walk with restart.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub weights: Vec<f64>,
    pub iterations: usize,
    /// L1 change of the original-side vector at each iteration.
    pub residuals: Vec<f64>,
}

/// Diffuse fly-back weights `w_p` on the projected side to the original side:
///
/// ```text
/// π_p ← (1-α)·Â π_o + α·w_p
/// π_o ← (1-α)·Âᵀ π_p,  then renormalized to sum 1
/// ```
///
/// where `Â` averages over a projected node's neighbours and `Âᵀ` over an
/// original node's neighbours. `w_p` is renormalized over projected nodes
/// that have at least one edge (uniform if none of them carries weight).
/// Starts from uniform `π_o`; stops when the L1 change drops below `tol` or
/// after `max_iter` iterations.
pub fn random_walk_with_restart(
    graph: &AttributionGraph,
    fly_back: &[f64],
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Attribution, ExplainError> {
    let (kp, fo) = (graph.projected, graph.original);
    if fly_back.len() != kp {
        return Err(ExplainError::Dimension(format!(
            "{} fly-back weights for {kp} projected features",
            fly_back.len()
        )));
    }
    if graph.edge_count() == 0 {
        return Err(ExplainError::EmptyGraph);
    }
    if fly_back.iter().sum::<f64>() <= 0.0 {
        return Err(ExplainError::ZeroImportances);
    }
    let neighbours_p: Vec<Vec<usize>> = (0..kp)
        .map(|k| (0..fo).filter(|&f| graph.has_edge(k, f)).collect())
        .collect();
    // Restart mass on a projected node without edges could never reach the
    // original side; spread the fly-back over connected nodes only.
    let reachable: Vec<f64> = fly_back
        .iter()
        .zip(&neighbours_p)
        .map(|(&x, n)| if n.is_empty() { 0.0 } else { x })
        .collect();
    let total: f64 = reachable.iter().sum();
    let connected_p = neighbours_p.iter().filter(|n| !n.is_empty()).count();
    let w: Vec<f64> = if total > 0.0 {
        reachable.iter().map(|x| x / total).collect()
    } else {
        neighbours_p
            .iter()
            .map(|n| {
                if n.is_empty() {
                    0.0
                } else {
                    1.0 / connected_p as f64
                }
            })
            .collect()
    };
    let neighbours_o: Vec<Vec<usize>> = (0..fo)
        .map(|f| (0..kp).filter(|&k| graph.has_edge(k, f)).collect())
        .collect();
    let connected = neighbours_o.iter().filter(|n| !n.is_empty()).count();

    let mut pi_o: Vec<f64> = neighbours_o
        .iter()
        .map(|n| {
            if n.is_empty() {
                0.0
            } else {
                1.0 / connected as f64
            }
        })
        .collect();
    let mut pi_p = vec![0.0; kp];
    let mut residuals = Vec::new();
    for _ in 0..max_iter {
        for k in 0..kp {
            let spread = mean_over(&neighbours_p[k], &pi_o);
            pi_p[k] = (1.0 - alpha) * spread + alpha * w[k];
        }
        let mut next: Vec<f64> = neighbours_o
            .iter()
            .map(|n| (1.0 - alpha) * mean_over(n, &pi_p))
            .collect();
        let s: f64 = next.iter().sum();
        if s > 0.0 {
            next.iter_mut().for_each(|x| *x /= s);
        }
        let change: f64 = next.iter().zip(&pi_o).map(|(a, b)| (a - b).abs()).sum();
        pi_o = next;
        residuals.push(change);
        if change < tol {
            break;
        }
    }
    Ok(Attribution {
        weights: pi_o,
        iterations: residuals.len(),
        residuals,
    })
}

fn mean_over(indices: &[usize], xs: &[f64]) -> f64 {
    if indices.is_empty() {
        0.0
    } else {
        indices.iter().map(|&i| xs[i]).sum::<f64>() / indices.len() as f64
    }
}

/// [`random_walk_with_restart`] with the default tolerance and iteration cap.
pub fn attribute(
    graph: &AttributionGraph,
    importances: &ProjectedImportances,
    alpha: f64,
    schema: &FeatureSchema,
) -> Result<ImportanceVector, ExplainError> {
    if schema.len() != graph.original {
        return Err(ExplainError::Dimension(format!(
            "graph has {} original features, schema has {}",
            graph.original,
            schema.len()
        )));
    }
    if importances.weights.iter().all(|&w| w == 0.0) {
        return Err(ExplainError::ZeroImportances);
    }
    let run = random_walk_with_restart(
        graph,
        &importances.fly_back(),
        alpha,
        RWR_TOLERANCE,
        RWR_MAX_ITERATIONS,
    )?;
    Ok(ImportanceVector::for_schema(schema, run.weights))
}

/// Nonnegative per-feature weights, aligned with the schema. Sums to 1
/// unless every weight is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    names: Vec<String>,
    weights: Vec<f64>,
}

impl ImportanceVector {
    /// Normalizes `weights` to sum 1 when any mass exists.
    pub fn new(names: Vec<String>, weights: Vec<f64>) -> Self {
        assert_eq!(names.len(), weights.len());
        let total: f64 = weights.iter().sum();
        let weights = if total > 0.0 {
            weights.iter().map(|w| w / total).collect()
        } else {
            weights
        };
        Self { names, weights }
    }

    pub fn for_schema(schema: &FeatureSchema, weights: Vec<f64>) -> Self {
        Self::new(schema.names().map(str::to_string).collect(), weights)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    /// `(name, weight)` pairs by descending weight; ties keep schema order.
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .map(|i| (self.names[i].as_str(), self.weights[i]))
            .collect()
    }
}

/// JSON object `{"feature": weight, ...}` with keys in descending weight order.
impl Serialize for ImportanceVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let ranked = self.ranked();
        let mut map = serializer.serialize_map(Some(ranked.len()))?;
        for (name, w) in ranked {
            map.serialize_entry(name, &w)?;
        }
        map.end()
    }
}

/// Importance vector of a point under a fitted ensemble.
pub fn explain(point: &Point, ensemble: &ChainEnsemble) -> Result<ImportanceVector, ExplainError> {
    let report = ensemble.score(point)?;
    explain_scored(point, &report, ensemble)
}

/// [`explain`] reusing an existing score report for `point`.
pub fn explain_scored(
    point: &Point,
    report: &ScoreReport,
    ensemble: &ChainEnsemble,
) -> Result<ImportanceVector, ExplainError> {
    let schema = ensemble.schema();
    let imp = ProjectedImportances::from_report(report, ensemble);
    if imp.is_degenerate() {
        log::warn!("no chain used any dimension; importances are all zero");
        return Ok(ImportanceVector::for_schema(
            schema,
            vec![0.0; schema.len()],
        ));
    }
    if ensemble.is_projected() {
        let graph = build_attribution_graph(point, ensemble.hashes(), schema);
        let run = random_walk_with_restart(
            &graph,
            &imp.fly_back(),
            RESTART_PROBABILITY,
            RWR_TOLERANCE,
            RWR_MAX_ITERATIONS,
        )?;
        Ok(ImportanceVector::for_schema(schema, run.weights))
    } else {
        let encoder = ensemble.encoder();
        let weights = (0..schema.len())
            .map(|j| encoder.block(j).map(|c| imp.weights[c]).sum())
            .collect();
        Ok(ImportanceVector::for_schema(schema, weights))
    }
}

/// Score-difference comparator: mean score of chains not using a dimension
/// minus mean score of chains using it. Kept only for comparison benches.
pub fn score_difference_importances(report: &ScoreReport, ensemble: &ChainEnsemble) -> Vec<f64> {
    let usage = chain_usage(report, ensemble);
    let m = report.per_chain.len();
    usage
        .iter()
        .map(|using| {
            let mut used = vec![false; m];
            using.iter().for_each(|&i| used[i] = true);
            let (mut su, mut nu, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
            for (i, c) in report.per_chain.iter().enumerate() {
                if used[i] {
                    su += c.score;
                    nu += 1;
                } else {
                    sn += c.score;
                    nn += 1;
                }
            }
            if nu == 0 || nn == 0 {
                0.0
            } else {
                sn / nn as f64 - su / nu as f64
            }
        })
        .collect()
}
