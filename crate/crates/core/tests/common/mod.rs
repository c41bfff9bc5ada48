#![allow(dead_code)]

use std::sync::Arc;

use hcil::{Dataset, FeatureRecord, GroupId, SpeciesId, Taxonomy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `groups` groups of `per_group` species each.
pub fn grid_taxonomy(groups: usize, per_group: usize) -> Arc<Taxonomy> {
    let spec: Vec<(String, Vec<String>)> = (0..groups)
        .map(|g| {
            (
                format!("g{g}"),
                (0..per_group).map(|s| format!("g{g}s{s}")).collect(),
            )
        })
        .collect();
    Arc::new(Taxonomy::from_names(&spec).unwrap())
}

/// Random records with uniformly chosen species, arbitrary float values and
/// unique `(fish_id, frame_id)` keys.
pub fn random_dataset(seed: u64, n: usize, d: usize, taxonomy: Arc<Taxonomy>) -> Dataset {
    let mut r = rng(seed);
    let species = taxonomy.species().to_vec();
    let records = (0..n)
        .map(|i| {
            let s = &species[r.random_range(0..species.len())];
            FeatureRecord {
                fish_id: (i / 7) as u64 * 1000 + s.id.0 as u64,
                frame_id: (i % 7) as u64,
                group: s.group,
                species: s.id,
                feature: (0..d).map(|_| r.random_range(-1e3f32..1e3)).collect(),
            }
        })
        .collect();
    Dataset::new(d, records, taxonomy).unwrap()
}

pub fn record(fish: u64, frame: u64, g: u16, s: u16, feature: Vec<f32>) -> FeatureRecord {
    FeatureRecord {
        fish_id: fish,
        frame_id: frame,
        group: GroupId(g),
        species: SpeciesId(s),
        feature,
    }
}

/// Gaussian blob around `center`.
pub fn blob(r: &mut ChaCha8Rng, center: &[f32], spread: f32, n: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|&c| {
                    let z: f32 = r.sample(rand_distr::StandardNormal);
                    c + spread * z
                })
                .collect()
        })
        .collect()
}

pub fn dot(w: &[f64], x: &[f32]) -> f64 {
    let mut s = 0.0;
    for k in 0..w.len() {
        s += w[k] * x[k] as f64;
    }
    s
}
