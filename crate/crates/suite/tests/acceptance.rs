//! Acceptance criteria 1–11. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

#[path = "../../service/tests/common/mod.rs"]
mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use alarm_core::cms::CountMinSketch;
use alarm_core::explain::{
    explain_scored, random_walk_with_restart, AttributionGraph, RESTART_PROBABILITY,
    RWR_MAX_ITERATIONS, RWR_TOLERANCE,
};
use alarm_core::insight::{lookout_select, summarize};
use alarm_core::metrics::{auroc, ndcg, random_ndcg};
use alarm_core::rules::{mine_candidates, score_rule, MiningConfig, Predicate, Rule, RuleRecord};
use alarm_core::DetectorParams;
use alarm_core::{
    ChainEnsemble, CounterKind, DatasetTable, Feature, FeatureSchema, ImportanceVector, Point,
    Projection, ScoreReport, Value,
};
use alarm_sim::nn::Mlp;
use alarm_sim::vae::Vae;
use alarm_sim::{fixtures, synthesize, GenModel, SimBundle, SynthConfig, TrainConfig};
use axum::http::StatusCode;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};

type Outcome = Result<String, String>;

/// Number, name, runtime budget in seconds, check.
type Criterion = (u8, &'static str, Option<u64>, fn() -> Outcome);

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

// ---------------------------------------------------------------------------
// 1. Bin ids

/// `floor(s[f]·2^(o-1)/Δ[f])` for every dimension used `o ≥ 1` times up to
/// each level; unused dimensions stay 0.
fn closed_form_path(features: &[usize], sketch: &[f64], delta: &[f64]) -> Vec<Vec<i64>> {
    (1..=features.len())
        .map(|l| {
            (0..sketch.len())
                .map(|d| {
                    let o = features[..l].iter().filter(|&&f| f == d).count();
                    if o == 0 {
                        0
                    } else {
                        (sketch[d] * 2f64.powi(o as i32 - 1) / delta[d]).floor() as i64
                    }
                })
                .collect()
        })
        .collect()
}

fn bin_ids() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut instances = 0;
    for e in 0..10u64 {
        let projection = if e % 2 == 0 {
            Projection::Hashed {
                dims: 2 + e as usize,
            }
        } else {
            Projection::None
        };
        let params = DetectorParams {
            chains: 100,
            depth: 15 + e as usize,
            projection,
            counter: CounterKind::Exact,
            seed: e,
        };
        let ensemble =
            ChainEnsemble::fit(&fixtures::mixed(120, e), params).map_err(|err| err.to_string())?;
        let delta = ensemble.delta();
        for chain in ensemble.chains() {
            let sketch: Vec<f64> = delta
                .iter()
                .map(|d| d * rng.random_range(-8.0..8.0))
                .collect();
            let got = chain.bin_id_path(&sketch, delta);
            let want = closed_form_path(chain.features(), &sketch, delta);
            ensure(got == want, || {
                format!("ensemble {e}: incremental {got:?} vs closed form {want:?}")
            })?;
            instances += 1;
        }
    }
    ensure(instances == 1000, || format!("{instances} instances"))?;
    Ok(format!("{instances} instances, exact"))
}

// ---------------------------------------------------------------------------
// 2. Scoring

fn recount_oracle(
    table: &DatasetTable,
    probes: &DatasetTable,
    params: DetectorParams,
) -> Result<usize, String> {
    let ensemble = ChainEnsemble::fit(table, params).map_err(|e| e.to_string())?;
    let delta = ensemble.delta();
    let sketch = |p: &Point| ensemble.sketch(p).map_err(|e| e.to_string());
    let fit: Vec<Vec<f64>> = table.rows().iter().map(sketch).collect::<Result<_, _>>()?;
    let paths: Vec<Vec<Vec<Vec<i64>>>> = ensemble
        .chains()
        .iter()
        .map(|c| {
            fit.iter()
                .map(|s| closed_form_path(c.features(), s, delta))
                .collect()
        })
        .collect();
    let mut checked = 0;
    for p in table.rows().iter().chain(probes.rows()) {
        let s = sketch(p)?;
        let report = ensemble.score(p).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for (c, chain) in ensemble.chains().iter().enumerate() {
            let query = closed_form_path(chain.features(), &s, delta);
            // Smallest level wins ties.
            let (mut best, mut level) = (f64::INFINITY, 1);
            for (l, bin) in query.iter().enumerate() {
                let count = paths[c].iter().filter(|path| &path[l] == bin).count();
                let v = count as f64 * 2f64.powi(l as i32 + 1);
                if v < best {
                    (best, level) = (v, l + 1);
                }
            }
            let got = report.per_chain[c];
            ensure(got.score == best && got.level == level, || {
                format!(
                    "chain {c}: score {} level {} vs recount {best} level {level}",
                    got.score, got.level
                )
            })?;
            total += best;
        }
        let mean = total / ensemble.chains().len() as f64;
        ensure((report.final_score - mean).abs() <= 1e-12, || {
            format!("final {} vs chain mean {mean}", report.final_score)
        })?;
        checked += 1;
    }
    Ok(checked)
}

fn scoring() -> Outcome {
    let hashed = DetectorParams {
        chains: 50,
        depth: 15,
        projection: Projection::Hashed { dims: 8 },
        counter: CounterKind::Exact,
        seed: 21,
    };
    let plain = DetectorParams {
        chains: 50,
        depth: 12,
        projection: Projection::None,
        counter: CounterKind::Exact,
        seed: 22,
    };
    let a = recount_oracle(&fixtures::mixed(200, 11), &fixtures::mixed(40, 31), hashed)?;
    let b = recount_oracle(&fixtures::mixed(150, 12), &fixtures::mixed(40, 32), plain)?;
    Ok(format!("{} points on two fixtures, exact per chain", a + b))
}

// ---------------------------------------------------------------------------
// 3. Count-min sketch

fn count_min() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut queries, mut over) = (0u64, 0u64);
    for trial in 0..10_000u64 {
        let mut cms = CountMinSketch::new(3, 50, trial);
        let mut exact: HashMap<u64, u64> = HashMap::new();
        let distinct = rng.random_range(1..=500);
        let keys: Vec<u64> = (0..distinct).map(|_| rng.random()).collect();
        for &k in &keys {
            cms.insert(k);
            *exact.entry(k).or_default() += 1;
        }
        let absent: u64 = rng.random();
        for k in exact.keys().copied().chain(std::iter::once(absent)) {
            let truth = exact.get(&k).copied().unwrap_or(0);
            let got = cms.count(k);
            ensure(got >= truth, || {
                format!("trial {trial}: key {k} counted {got} < {truth}")
            })?;
            if truth > 0 {
                over += got - truth;
                queries += 1;
            }
        }
    }
    let mean = over as f64 / queries as f64;
    ensure(mean <= 2.0, || {
        format!("never under; mean overestimate {mean:.3} > 2 over {queries} queries (r=3, c=50, 1..=500 keys)")
    })?;
    Ok(format!("never under; mean overestimate {mean:.3}"))
}

// ---------------------------------------------------------------------------
// 4–6, 8. Desk bundles

const DESK_SEEDS: [u64; 3] = [1, 2, 3];

struct Desk {
    model: GenModel,
    bundle: SimBundle,
    table: DatasetTable,
    labels: Vec<bool>,
}

fn desks() -> &'static [Desk] {
    static DESKS: OnceLock<Vec<Desk>> = OnceLock::new();
    DESKS.get_or_init(|| {
        DESK_SEEDS
            .iter()
            .map(|&seed| {
                let model = GenModel::train(
                    &fixtures::mixed(2000, seed),
                    &TrainConfig::desk().with_seed(seed),
                )
                .unwrap();
                let bundle = synthesize(
                    &model,
                    &SynthConfig {
                        seed,
                        ..Default::default()
                    },
                )
                .unwrap();
                let table = bundle.table().unwrap();
                let labels = table
                    .labels()
                    .unwrap()
                    .iter()
                    .map(|l| l.is_anomaly())
                    .collect();
                Desk {
                    model,
                    bundle,
                    table,
                    labels,
                }
            })
            .collect()
    })
}

struct Quality {
    auroc: f64,
    ndcg: f64,
    random: f64,
}

fn quality(desk: &Desk, seed: u64, projection: Projection) -> Quality {
    let params = DetectorParams {
        projection,
        seed,
        ..Default::default()
    };
    let ensemble = ChainEnsemble::fit(&desk.table, params).unwrap();
    let reports = ensemble.score_batch(&desk.table).unwrap();
    let scores: Vec<f64> = reports.iter().map(|r| r.final_score).collect();
    let (mut nd, mut rnd) = (0.0, 0.0);
    for (a, anomaly) in desk.bundle.anomalies.iter().enumerate() {
        let r = desk.bundle.anomaly_row(a);
        let iv = explain_scored(&desk.table.rows()[r], &reports[r], &ensemble).unwrap();
        nd += ndcg(iv.weights(), &anomaly.importance).unwrap();
        rnd += random_ndcg(&anomaly.importance, 100, seed).unwrap();
    }
    let k = desk.bundle.anomalies.len() as f64;
    Quality {
        auroc: auroc(&scores, &desk.labels).unwrap(),
        ndcg: nd / k,
        random: rnd / k,
    }
}

fn unprojected() -> &'static [Quality] {
    static Q: OnceLock<Vec<Quality>> = OnceLock::new();
    Q.get_or_init(|| {
        desks()
            .iter()
            .zip(DESK_SEEDS)
            .map(|(d, s)| quality(d, s, Projection::None))
            .collect()
    })
}

fn projected() -> &'static [Quality] {
    static Q: OnceLock<Vec<Quality>> = OnceLock::new();
    Q.get_or_init(|| {
        desks()
            .iter()
            .zip(DESK_SEEDS)
            .map(|(d, s)| quality(d, s, Projection::Hashed { dims: 20 }))
            .collect()
    })
}

fn detection() -> Outcome {
    for desk in desks() {
        ensure(
            desk.bundle.normals.len() == 1000 && desk.bundle.anomalies.len() == 100,
            || "bundle size".into(),
        )?;
    }
    let aucs: Vec<f64> = unprojected().iter().map(|q| q.auroc).collect();
    let line = format!("AUROC {aucs:.3?}");
    ensure(aucs.iter().all(|&a| a >= 0.90), || line.clone())?;
    Ok(line)
}

fn explanation() -> Outcome {
    let q = unprojected();
    let line = format!(
        "NDCG {:.3?} vs random {:.3?}",
        q.iter().map(|q| q.ndcg).collect::<Vec<_>>(),
        q.iter().map(|q| q.random).collect::<Vec<_>>()
    );
    ensure(
        q.iter()
            .all(|q| q.ndcg >= 0.65 && q.ndcg >= q.random + 0.15),
        || line.clone(),
    )?;
    Ok(line)
}

fn projection_ordering() -> Outcome {
    let (a, b) = (unprojected(), projected());
    let line = format!(
        "no projection {:.3?} vs K=20 {:.3?}",
        a.iter().map(|q| q.ndcg).collect::<Vec<_>>(),
        b.iter().map(|q| q.ndcg).collect::<Vec<_>>()
    );
    ensure(a.iter().zip(b).all(|(a, b)| a.ndcg > b.ndcg), || {
        line.clone()
    })?;
    Ok(line)
}

// ---------------------------------------------------------------------------
// 7. Random walk with restart

/// Dense power iteration of the same walk, run to machine precision.
fn dense_rwr(kp: usize, fo: usize, edges: &[bool], fly_back: &[f64], alpha: f64) -> Vec<f64> {
    let edge = |k: usize, f: usize| edges[k * fo + f];
    let deg_p: Vec<usize> = (0..kp)
        .map(|k| (0..fo).filter(|&f| edge(k, f)).count())
        .collect();
    let deg_o: Vec<usize> = (0..fo)
        .map(|f| (0..kp).filter(|&k| edge(k, f)).count())
        .collect();
    let a: Vec<Vec<f64>> = (0..kp)
        .map(|k| {
            (0..fo)
                .map(|f| {
                    if edge(k, f) {
                        1.0 / deg_p[k] as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let at: Vec<Vec<f64>> = (0..fo)
        .map(|f| {
            (0..kp)
                .map(|k| {
                    if edge(k, f) {
                        1.0 / deg_o[f] as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let masked: Vec<f64> = (0..kp)
        .map(|k| if deg_p[k] > 0 { fly_back[k] } else { 0.0 })
        .collect();
    let total: f64 = masked.iter().sum();
    let connected_p = deg_p.iter().filter(|&&d| d > 0).count() as f64;
    let w: Vec<f64> = (0..kp)
        .map(|k| match (total > 0.0, deg_p[k] > 0) {
            (true, _) => masked[k] / total,
            (false, true) => 1.0 / connected_p,
            (false, false) => 0.0,
        })
        .collect();
    let connected_o = deg_o.iter().filter(|&&d| d > 0).count() as f64;
    let mut pi_o: Vec<f64> = deg_o
        .iter()
        .map(|&d| if d > 0 { 1.0 / connected_o } else { 0.0 })
        .collect();
    for _ in 0..100_000 {
        let pi_p: Vec<f64> = (0..kp)
            .map(|k| (1.0 - alpha) * (0..fo).map(|f| a[k][f] * pi_o[f]).sum::<f64>() + alpha * w[k])
            .collect();
        let mut next: Vec<f64> = (0..fo)
            .map(|f| (1.0 - alpha) * (0..kp).map(|k| at[f][k] * pi_p[k]).sum::<f64>())
            .collect();
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        let change: f64 = next.iter().zip(&pi_o).map(|(x, y)| (x - y).abs()).sum();
        pi_o = next;
        if change < 1e-15 {
            break;
        }
    }
    pi_o
}

fn rwr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut most_iters) = (0.0f64, 0);
    for g in 0..50 {
        let (kp, fo) = (rng.random_range(1..=30), rng.random_range(1..=30));
        let density = rng.random_range(0.05..0.6);
        let mut edges: Vec<bool> = (0..kp * fo).map(|_| rng.random_bool(density)).collect();
        let forced = rng.random_range(0..kp * fo);
        edges[forced] = true;
        let mut fly_back: Vec<f64> = (0..kp)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        fly_back[rng.random_range(0..kp)] += 0.5;
        let graph = AttributionGraph::from_edges(kp, fo, edges.clone());
        let run = random_walk_with_restart(
            &graph,
            &fly_back,
            RESTART_PROBABILITY,
            RWR_TOLERANCE,
            RWR_MAX_ITERATIONS,
        )
        .map_err(|e| e.to_string())?;
        ensure(
            *run.residuals.last().unwrap() < RWR_TOLERANCE && run.iterations <= 500,
            || {
                format!(
                    "graph {g}: no convergence after {} iterations",
                    run.iterations
                )
            },
        )?;
        let sum: f64 = run.weights.iter().sum();
        ensure(
            run.weights.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() < 1e-12,
            || format!("graph {g}: weights {:?}", run.weights),
        )?;
        let oracle = dense_rwr(kp, fo, &edges, &fly_back, RESTART_PROBABILITY);
        let diff = run
            .weights
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(diff <= 1e-8, || {
            format!("graph {g} ({kp}x{fo}): max deviation {diff:e}")
        })?;
        worst = worst.max(diff);
        most_iters = most_iters.max(run.iterations);
    }
    Ok(format!(
        "50 graphs, max deviation {worst:.1e}, at most {most_iters} iterations"
    ))
}

// ---------------------------------------------------------------------------
// 8. Simulator

fn simulator() -> Outcome {
    let mut anomalies = 0;
    for desk in desks() {
        let b = &desk.bundle;
        for (i, a) in b.anomalies.iter().enumerate() {
            let s = desk.model.log_px_given_z(&a.encoded, &a.z);
            ensure(s < b.threshold, || {
                format!("anomaly {i}: score {s} not below {}", b.threshold)
            })?;
            for (j, &e) in a.importance.iter().enumerate() {
                let inflated = a.inflated.iter().any(|inf| inf.feature == j);
                ensure(e >= 0.0 && (inflated || e == 0.0), || {
                    format!("anomaly {i}: e[{j}] = {e}")
                })?;
            }
            anomalies += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vae = Vae {
        encoder: Mlp::new(&[2, 2], &mut rng),
        decoder: Mlp::new(&[1, 4], &mut rng),
        latent: 1,
    };
    let x = DMatrix::from_row_slice(3, 2, &[0.2, -0.1, 0.7, 0.4, -0.4, 0.9]);
    let eps = DMatrix::from_row_slice(3, 1, &[0.5, -1.2, 0.3]);
    let analytic = vae.loss_and_grad(&x, &eps).grad;
    let base = vae.flat();
    let mut probe = vae.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let h = 1e-5;
        let mut p = base.clone();
        p[i] += h;
        probe.set_flat(&p);
        let up = probe.loss_and_grad(&x, &eps).loss;
        p[i] -= 2.0 * h;
        probe.set_flat(&p);
        let down = probe.loss_and_grad(&x, &eps).loss;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
        ensure(rel <= 1e-4, || {
            format!("parameter {i}: numeric {numeric} analytic {}", analytic[i])
        })?;
        worst = worst.max(rel);
    }
    Ok(format!(
        "{anomalies} anomalies below threshold, gradient relative error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 9. Rules

const KS: [&str; 4] = ["UVER", "POJISTNE", "SIPO", "SLUZBY"];

fn rule_schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        Feature::real("amount"),
        Feature::real("balance"),
        Feature::categorical("k_symbol", KS),
    ])
    .unwrap()
}

fn random_point(rng: &mut ChaCha8Rng) -> Point {
    Point::new(vec![
        Value::Real(rng.random_range(0.0..100.0)),
        Value::Real(rng.random_range(-50.0..50.0)),
        Value::Cat(KS[rng.random_range(0..4)].into()),
    ])
}

fn random_bounds(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> (Option<f64>, Option<f64>) {
    let (a, b) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let (a, b) = (a.min(b), a.max(b));
    match rng.random_range(0..4) {
        0 => (None, Some(b)),
        1 => (Some(a), None),
        2 => (None, None),
        _ => (Some(a), Some(b)),
    }
}

fn random_rule(rng: &mut ChaCha8Rng) -> Rule {
    let mut preds = Vec::new();
    if rng.random_bool(0.7) {
        let (lo, hi) = random_bounds(rng, 0.0, 100.0);
        preds.push(Predicate::interval("amount", lo, hi));
    }
    if rng.random_bool(0.5) {
        let (lo, hi) = random_bounds(rng, -50.0, 50.0);
        preds.push(Predicate::interval("balance", lo, hi));
    }
    if preds.is_empty() || rng.random_bool(0.5) {
        preds.push(Predicate::equals("k_symbol", KS[rng.random_range(0..4)]));
    }
    Rule::new(preds).unwrap()
}

fn brute_force_holds(rule: &Rule, point: &Point) -> bool {
    let mut all = true;
    for p in &rule.predicates {
        let v = match p.feature() {
            "amount" => point.get(0),
            "balance" => point.get(1),
            _ => point.get(2),
        };
        let ok = match (p, v) {
            (Predicate::Interval { lo, hi, .. }, Value::Real(x)) => {
                lo.map(|lo| *x >= lo).unwrap_or(true) && hi.map(|hi| *x <= hi).unwrap_or(true)
            }
            (Predicate::Equals { value, .. }, Value::Cat(c)) => value == c,
            _ => false,
        };
        all = all && ok;
    }
    all
}

fn rules() -> Outcome {
    let s = rule_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for r in 0..200 {
        let anomalies: Vec<Point> = (0..rng.random_range(1..40))
            .map(|_| random_point(&mut rng))
            .collect();
        let inliers: Vec<Point> = (0..rng.random_range(0..200))
            .map(|_| random_point(&mut rng))
            .collect();
        let rule = random_rule(&mut rng);
        let got = score_rule(&rule, &anomalies, &inliers, &s).map_err(|e| e.to_string())?;
        let mut matched = 0;
        for a in &anomalies {
            if brute_force_holds(&rule, a) {
                matched += 1;
            }
        }
        let mut passing = 0;
        for i in &inliers {
            if brute_force_holds(&rule, i) {
                passing += 1;
            }
        }
        let coverage = matched as f64 / anomalies.len() as f64;
        let purity = if inliers.is_empty() {
            1.0
        } else {
            1.0 - passing as f64 / inliers.len() as f64
        };
        ensure(got.coverage == coverage && got.purity == purity, || {
            format!(
                "rule {r}: C/P {}/{} vs oracle {coverage}/{purity}",
                got.coverage, got.purity
            )
        })?;
    }

    let anomalies: Vec<Point> = (0..50).map(|_| random_point(&mut rng)).collect();
    let mut inliers: Vec<Point> = (0..500).map(|_| random_point(&mut rng)).collect();
    inliers.extend(anomalies.iter().cloned());
    let none = mine_candidates(
        &anomalies,
        &inliers,
        &s,
        &MiningConfig::with_thresholds(1.0, 1.0),
    )
    .map_err(|e| e.to_string())?;
    ensure(none.is_empty(), || {
        format!("{} rules at C=P=1 on overlapping classes", none.len())
    })?;

    let two = FeatureSchema::new(vec![Feature::real("A"), Feature::real("B")]).unwrap();
    let anomalies: Vec<Point> = (0..60)
        .map(|_| Point::reals(&[rng.random_range(0.8..0.9), rng.random_range(0.0..1.0)]))
        .collect();
    let inliers: Vec<Point> = (0..600)
        .map(|_| Point::reals(&[rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]))
        .collect();
    let found = mine_candidates(
        &anomalies,
        &inliers,
        &two,
        &MiningConfig::with_thresholds(0.9, 0.85),
    )
    .map_err(|e| e.to_string())?;
    let best = found.first().ok_or("no rule on the separable fixture")?;
    ensure(
        best.score.coverage >= 0.9 && best.score.purity >= 0.85,
        || format!("{:?}", best.score),
    )?;
    Ok(format!(
        "200 rules exact, overlapping empty, separable C={:.3} P={:.3}",
        best.score.coverage, best.score.purity
    ))
}

// ---------------------------------------------------------------------------
// 10. Metrics

fn direct_ndcg(order: &[usize], truth: &[f64]) -> f64 {
    let dcg = |o: &[usize]| {
        o.iter()
            .enumerate()
            .map(|(i, &j)| truth[j] / ((i + 2) as f64).log2())
            .sum::<f64>()
    };
    let mut ideal: Vec<usize> = (0..truth.len()).collect();
    ideal.sort_by(|&a, &b| truth[b].total_cmp(&truth[a]));
    dcg(order) / dcg(&ideal)
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let truth: Vec<f64> = (0..rng.random_range(1..12))
            .map(|_| rng.random_range(0.0..5.0))
            .collect();
        let got = ndcg(&truth, &truth).map_err(|e| e.to_string())?;
        ensure(got == 1.0, || format!("ideal ordering gives {got}"))?;
    }
    let truth = [3.0, 2.0, 0.0];
    let worked = ndcg(&[0.0, 1.0, 2.0], &truth).map_err(|e| e.to_string())?;
    let oracle = direct_ndcg(&[2, 1, 0], &truth);
    ensure(
        (worked - oracle).abs() < 1e-12 && (worked - 0.648).abs() <= 1e-3,
        || format!("worked example {worked} vs direct sum {oracle}"),
    )?;

    for case in 0..100 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8))).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for a in (0..n).filter(|&i| labels[i]) {
            for b in (0..n).filter(|&i| !labels[i]) {
                pairs += 1.0;
                wins += if scores[a] < scores[b] {
                    1.0
                } else if scores[a] == scores[b] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure((got - wins / pairs).abs() <= 1e-12, || {
            format!("case {case}: {got} vs pairwise {}", wins / pairs)
        })?;
    }
    let tied = auroc(
        &[4.0; 10],
        &[
            true, false, true, false, false, false, true, false, false, false,
        ],
    )
    .map_err(|e| e.to_string())?;
    ensure(tied == 0.5, || format!("all-tied AUROC {tied}"))?;
    Ok(format!(
        "ideal 1.0, worked example {worked:.4}, AUROC pairwise exact, tied 0.5"
    ))
}

// ---------------------------------------------------------------------------
// 11. Service

fn service_params() -> DetectorParams {
    DetectorParams {
        chains: 40,
        depth: 10,
        projection: Projection::None,
        counter: CounterKind::Exact,
        seed: 7,
    }
}

struct Library {
    table: DatasetTable,
    ensemble: ChainEnsemble,
    reports: Vec<ScoreReport>,
    scores: Vec<f64>,
}

impl Library {
    fn top(&self, k: usize) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.scores.len()).collect();
        rows.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]).then(a.cmp(&b)));
        rows.truncate(k);
        rows
    }

    fn rest(&self, view: &[usize]) -> Vec<usize> {
        (0..self.scores.len())
            .filter(|r| !view.contains(r))
            .collect()
    }

    fn points(&self, rows: &[usize]) -> Vec<Point> {
        rows.iter().map(|&r| self.table.rows()[r].clone()).collect()
    }

    fn explain(&self, row: usize) -> ImportanceVector {
        explain_scored(&self.table.rows()[row], &self.reports[row], &self.ensemble).unwrap()
    }

    fn slice(&self, rows: &[usize], cols: &[usize]) -> Json {
        json!({
            "rows": rows,
            "values": rows
                .iter()
                .map(|&r| cols.iter().map(|&j| self.table.rows()[r].get(j).clone()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        })
    }
}

async fn contract(dir: &std::path::Path) -> Result<usize, String> {
    use common::{app, call, fitted_run, small_run, transactions, upload};
    let table = transactions(300, 20, 1);
    let ensemble = ChainEnsemble::fit(&table, service_params()).unwrap();
    let reports = ensemble.score_batch(&table).unwrap();
    let scores = reports.iter().map(|r| r.final_score).collect();
    let o = Library {
        table,
        ensemble,
        reports,
        scores,
    };

    let app = app(dir);
    let ds = upload(&app, &o.table).await;
    let run = fitted_run(&app, small_run(&ds)).await;
    let mut routes = 0;
    let mut same = |name: &str, status: StatusCode, got: &Json, want: &Json| {
        routes += 1;
        ensure(status.is_success() && got == want, || {
            format!("{name}: {status} {got} != {want}")
        })
    };

    let fp = o.table.fingerprint();
    let info = json!({
        "dataset_id": format!("ds-{}", &fp[..16]),
        "rows": 320,
        "features": ["amount", "balance", "fee", "k_symbol"],
        "dropped": [],
        "fingerprint": fp,
    });
    let (s, got) = call(&app, "GET", "/datasets", None).await;
    same("GET /datasets", s, &got, &json!([info]))?;
    let (s, got) = call(&app, "GET", &format!("/runs/{run}"), None).await;
    let want =
        json!({ "run_id": run, "dataset_id": ds, "status": "done", "params": service_params() });
    same("GET /runs/{id}", s, &got, &want)?;

    let view = o.top(20);
    let rest = o.rest(&view);
    let (s, got) = call(&app, "GET", &format!("/runs/{run}/anomalies?top=20"), None).await;
    let want: Vec<Json> = view
        .iter()
        .map(|&r| json!({ "row": r, "score": o.scores[r], "importances": o.explain(r) }))
        .collect();
    same("anomalies", s, &got, &Json::Array(want))?;

    let (s, got) = call(
        &app,
        "GET",
        &format!("/runs/{run}/summary?clusters=3&top=20"),
        None,
    )
    .await;
    let view_scores: Vec<f64> = view.iter().map(|&r| o.scores[r]).collect();
    let imps: Vec<_> = view.iter().map(|&r| o.explain(r)).collect();
    let layout = summarize(&view, &view_scores, &imps, 3).map_err(|e| e.to_string())?;
    same("summary", s, &got, &serde_json::to_value(&layout).unwrap())?;

    let (s, got) = call(
        &app,
        "GET",
        &format!("/runs/{run}/explore/histogram?feature=amount&top=20"),
        None,
    )
    .await;
    let want = json!({ "features": ["amount"], "anomalies": o.slice(&view, &[0]), "inliers": o.slice(&rest, &[0]) });
    same("histogram", s, &got, &want)?;
    let (s, got) = call(
        &app,
        "GET",
        &format!("/runs/{run}/explore/density?fx=amount&fy=fee&top=20"),
        None,
    )
    .await;
    let want = json!({ "features": ["amount", "fee"], "anomalies": o.slice(&view, &[0, 2]), "inliers": o.slice(&rest, &[0, 2]) });
    same("density", s, &got, &want)?;
    let (s, got) = call(
        &app,
        "GET",
        &format!("/runs/{run}/explore/parallel?features=k_symbol,balance&top=20"),
        None,
    )
    .await;
    let want = json!({ "features": ["k_symbol", "balance"], "anomalies": o.slice(&view, &[3, 1]), "inliers": o.slice(&rest, &[3, 1]) });
    same("parallel", s, &got, &want)?;
    let (s, got) = call(
        &app,
        "GET",
        &format!("/runs/{run}/explore/lookout?budget=2&top=20"),
        None,
    )
    .await;
    let want = lookout_select(&o.points(&view), &o.points(&rest), o.table.schema(), 2, 7)
        .map_err(|e| e.to_string())?;
    same("lookout", s, &got, &serde_json::to_value(&want).unwrap())?;

    let members = layout.members(0);
    let body = json!({ "cluster_id": 0, "clusters": 3, "top": 20, "coverage_min": 0.5, "purity_min": 0.9 });
    let (s, got) = call(
        &app,
        "POST",
        &format!("/runs/{run}/rules/candidates"),
        Some(body),
    )
    .await;
    let want = mine_candidates(
        &o.points(&members),
        &o.points(&rest),
        o.table.schema(),
        &MiningConfig::with_thresholds(0.5, 0.9),
    )
    .map_err(|e| e.to_string())?;
    same(
        "rule candidates",
        s,
        &got,
        &serde_json::to_value(&want).unwrap(),
    )?;

    let rule = Rule::new(vec![Predicate::equals("k_symbol", "UVER")]).unwrap();
    let (s, got) = call(
        &app,
        "POST",
        &format!("/runs/{run}/rules/score"),
        Some(json!({ "rule": rule, "top": 20 })),
    )
    .await;
    let score = score_rule(&rule, &o.points(&view), &o.points(&rest), o.table.schema())
        .map_err(|e| e.to_string())?;
    same("rule score", s, &got, &serde_json::to_value(score).unwrap())?;

    let (s, got) = call(
        &app,
        "POST",
        "/rules",
        Some(json!({ "rule": rule, "run_id": run, "top": 20 })),
    )
    .await;
    let record = RuleRecord {
        rule: rule.clone(),
        score,
        fingerprint: fp.clone(),
    };
    same(
        "save rule",
        s,
        &got,
        &serde_json::to_value(&record).unwrap(),
    )?;
    let (s, got) = call(&app, "GET", "/rules", None).await;
    same("list rules", s, &got, &json!([record]))?;

    let (s, got) = call(
        &app,
        "POST",
        &format!("/runs/{run}/labels"),
        Some(json!({ "rows": [7, 3, 7] })),
    )
    .await;
    let want = json!({ "run_id": run, "dataset_id": ds, "status": "done", "params": service_params(), "imported": [3, 7] });
    same("labels", s, &got, &want)?;
    Ok(routes)
}

async fn session(dir: &std::path::Path) -> Vec<String> {
    use common::{app, fitted_run, raw, small_run, transactions, upload};
    let app = app(dir);
    let ds = upload(&app, &transactions(200, 15, 9)).await;
    let run = fitted_run(&app, small_run(&ds)).await;
    let mut out = vec![ds, run.clone()];
    let rule = json!({ "predicates": [{ "feature": "amount", "lo": 5000.0, "hi": null }, { "feature": "k_symbol", "value": "UVER" }] });
    let steps: Vec<(&str, String, Option<Json>)> = vec![
        ("GET", format!("/runs/{run}"), None),
        ("GET", format!("/runs/{run}/anomalies?top=25"), None),
        (
            "GET",
            format!("/runs/{run}/summary?clusters=3&top=25"),
            None,
        ),
        (
            "GET",
            format!("/runs/{run}/explore/density?fx=amount&fy=balance&top=25"),
            None,
        ),
        (
            "GET",
            format!("/runs/{run}/explore/lookout?budget=2&top=25"),
            None,
        ),
        (
            "POST",
            format!("/runs/{run}/rules/candidates"),
            Some(json!({ "cluster_id": 1, "top": 25, "coverage_min": 0.3, "purity_min": 0.8 })),
        ),
        (
            "POST",
            format!("/runs/{run}/rules/score"),
            Some(json!({ "rule": rule, "cluster_id": 0, "top": 25 })),
        ),
        (
            "POST",
            "/rules".into(),
            Some(json!({ "rule": rule, "run_id": run, "top": 25 })),
        ),
        ("GET", "/rules".into(), None),
        (
            "POST",
            format!("/runs/{run}/labels"),
            Some(json!({ "rows": [200, 201, 202, 7] })),
        ),
        ("GET", format!("/runs/{run}/summary?clusters=2"), None),
    ];
    for (method, uri, body) in steps {
        let builder = axum::http::Request::builder().method(method).uri(&uri);
        let req = match body {
            Some(b) => builder
                .header("content-type", "application/json")
                .body(axum::body::Body::from(b.to_string()))
                .unwrap(),
            None => builder.body(axum::body::Body::empty()).unwrap(),
        };
        let (s, text) = raw(&app, req).await;
        out.push(format!("{method} {uri} {s} {text}"));
    }
    out
}

fn service() -> Outcome {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let routes = contract(dir.path()).await?;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = session(a.path()).await;
        let second = session(b.path()).await;
        ensure(first == second, || "replayed session differs".into())?;
        Ok(format!(
            "{routes} route checks equal the library, {}-step replay identical",
            first.len()
        ))
    })
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "bin-id equivalence", Some(5), bin_ids),
        (2, "scoring oracle", Some(10), scoring),
        (3, "count-min soundness", Some(5), count_min),
        (4, "detection quality", Some(120), detection),
        (5, "explanation quality", Some(120), explanation),
        (6, "projection ordering", Some(180), projection_ordering),
        (7, "random walk with restart", None, rwr),
        (8, "simulator soundness", Some(180), simulator),
        (9, "rule engine", Some(30), rules),
        (10, "metrics", None, metrics),
        (11, "service contract", None, service),
    ];
    let mut failed = Vec::new();
    for (n, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(secs)) if elapsed > Duration::from_secs(secs) => {
                Err(format!("took {elapsed:.1?}, budget {secs} s"))
            }
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{elapsed:.1?}]"),
            Err(detail) => {
                println!("FAIL criterion {n} ({name}): {detail} [{elapsed:.1?}]");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} of 11 criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
