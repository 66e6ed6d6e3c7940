//! Seeded training datasets.

use alarm_core::dataio::{DatasetTable, Feature, FeatureSchema, Point, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Mixed-type data: three clusters along a shared continuous factor, six real
/// features and two categoricals tied to the cluster, each with a rare value.
pub fn mixed(n: usize, seed: u64) -> DatasetTable {
    let schema = FeatureSchema::new(vec![
        Feature::real("amount"),
        Feature::real("balance"),
        Feature::real("duration"),
        Feature::real("rate"),
        Feature::real("volume"),
        Feature::real("latency"),
        Feature::categorical("channel", ["web", "branch", "phone", "fax"]),
        Feature::categorical("tier", ["basic", "plus", "legacy"]),
    ])
    .expect("valid fixture schema");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("positive sd");
    let centers = [[0.0, 0.0], [2.0, 1.0], [1.0, 3.0]];
    let channels = ["web", "branch", "phone"];
    let rows = (0..n)
        .map(|_| {
            let c = rng.random_range(0..3);
            let t: f64 = rng.random();
            let [a, b] = centers[c];
            let mut e = || noise.sample(&mut rng);
            let reals = [
                a + t + e(),
                b + 2.0 * t + e(),
                a - b + 0.5 * t + e(),
                (a + b) * 0.5 + t * t + e(),
                3.0 * t + a * 0.5 + e(),
                b - t + e(),
            ];
            let channel = if rng.random_bool(0.02) {
                "fax"
            } else {
                channels[c]
            };
            let tier = if rng.random_bool(0.02) {
                "legacy"
            } else if c == 0 {
                "basic"
            } else {
                "plus"
            };
            let mut values: Vec<Value> = reals.iter().map(|&v| Value::Real(v)).collect();
            values.push(Value::Cat(channel.into()));
            values.push(Value::Cat(tier.into()));
            Point::new(values)
        })
        .collect();
    DatasetTable::new(schema, rows, None).expect("fixture rows conform")
}

/// One real feature drawn from `N(mean, sd²)`.
pub fn gaussian_1d(n: usize, mean: f64, sd: f64, seed: u64) -> DatasetTable {
    let schema = FeatureSchema::new(vec![Feature::real("x")]).expect("valid schema");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mean, sd).expect("positive sd");
    let rows = (0..n)
        .map(|_| Point::reals(&[normal.sample(&mut rng)]))
        .collect();
    DatasetTable::new(schema, rows, None).expect("fixture rows conform")
}
