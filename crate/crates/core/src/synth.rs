//! Synthetic hierarchical feature datasets: groups are well-separated
//! super-clusters, species are sub-clusters around their group center, and
//! every fish track is a run of noisy frames of one species.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{Dataset, FeatureRecord};
use crate::taxonomy::{SpeciesId, Taxonomy};

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dimension: usize,
    /// One entry per group.
    pub species_per_group: Vec<usize>,
    /// Optional group names; defaults to `group-<g>`.
    #[serde(default)]
    pub group_names: Vec<String>,
    pub tracks_per_species: usize,
    pub frames_per_track: usize,
    /// Minimum distance between group centers.
    pub group_separation: f64,
    /// Minimum distance between species centers of one group.
    pub species_separation: f64,
    /// Per-coordinate standard deviation of frame noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Six groups, 31 species (Sharks=4, Skates=2, Flatfish=2, ...), with
    /// enough class overlap that old classes can be forgotten.
    pub fn paper_shape(seed: u64) -> Self {
        let t = Taxonomy::paper_shape();
        SynthSpec {
            dimension: 32,
            species_per_group: t.groups().iter().map(|g| t.children(g.id).len()).collect(),
            group_names: t.groups().iter().map(|g| g.name.clone()).collect(),
            tracks_per_species: 16,
            frames_per_track: 12,
            group_separation: 6.0,
            species_separation: 3.0,
            noise: 1.0,
            seed,
        }
    }

    /// Three groups of three species in 8 dimensions, for quick runs.
    pub fn small(seed: u64) -> Self {
        SynthSpec {
            dimension: 8,
            species_per_group: vec![3, 3, 3],
            group_names: vec![],
            tracks_per_species: 6,
            frames_per_track: 5,
            group_separation: 8.0,
            species_separation: 4.0,
            noise: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.dimension == 0 {
            return bad("dimension must be at least 1".into());
        }
        if self.species_per_group.is_empty() || self.species_per_group.contains(&0) {
            return bad("every group needs at least one species".into());
        }
        if self.tracks_per_species == 0 || self.frames_per_track == 0 {
            return bad("track and frame counts must be at least 1".into());
        }
        if self.species_separation.is_nan() || self.species_separation <= 0.0 {
            return bad("species separation must be positive".into());
        }
        if self.group_separation.is_nan() || self.group_separation <= self.species_separation {
            return bad("group separation must exceed species separation".into());
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return bad("noise must be positive".into());
        }
        if !self.group_names.is_empty() && self.group_names.len() != self.species_per_group.len() {
            return bad("group_names must name every group".into());
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let groups: Vec<(String, Vec<String>)> = self
            .species_per_group
            .iter()
            .enumerate()
            .map(|(g, &n)| {
                let name = self
                    .group_names
                    .get(g)
                    .cloned()
                    .unwrap_or_else(|| format!("group-{g}"));
                let species = (0..n).map(|k| format!("{name}-{}", k + 1)).collect();
                (name, species)
            })
            .collect();
        Taxonomy::from_names(&groups)
    }
}

/// Class centers of a generated dataset.
#[derive(Debug, Clone)]
pub struct Centers {
    pub groups: Vec<Vec<f64>>,
    pub species: BTreeMap<SpeciesId, Vec<f64>>,
}

pub fn generate(spec: &SynthSpec) -> Result<(Dataset, Taxonomy)> {
    let (ds, taxonomy, _) = generate_with_centers(spec)?;
    Ok((ds, taxonomy))
}

pub fn generate_with_centers(spec: &SynthSpec) -> Result<(Dataset, Taxonomy, Centers)> {
    spec.validate()?;
    let taxonomy = spec.taxonomy()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dimension;

    let origin = vec![0.0; d];
    let group_centers = place(
        &mut rng,
        &origin,
        spec.group_separation,
        spec.species_per_group.len(),
        "group",
    )?;
    let mut species_centers = BTreeMap::new();
    for group in taxonomy.groups() {
        let children = taxonomy.children(group.id);
        let centers = place(
            &mut rng,
            &group_centers[group.id.0 as usize],
            spec.species_separation,
            children.len(),
            "species",
        )?;
        species_centers.extend(children.into_iter().zip(centers));
    }

    let mut records = Vec::new();
    let mut fish_id = 0u64;
    for s in taxonomy.species() {
        let center = &species_centers[&s.id];
        for _ in 0..spec.tracks_per_species {
            for frame in 0..spec.frames_per_track {
                let feature = center
                    .iter()
                    .map(|&c| {
                        let z: f64 = rng.sample(StandardNormal);
                        (c + spec.noise * z) as f32
                    })
                    .collect();
                records.push(FeatureRecord {
                    fish_id,
                    frame_id: frame as u64,
                    group: s.group,
                    species: s.id,
                    feature,
                });
            }
            fish_id += 1;
        }
    }
    let ds = Dataset::new(d, records, Arc::new(taxonomy.clone()))?;
    Ok((
        ds,
        taxonomy,
        Centers {
            groups: group_centers,
            species: species_centers,
        },
    ))
}

/// Places `count` points at distance `radius` from `around`, pairwise at
/// least `radius` apart, by rejection sampling random directions.
fn place(
    rng: &mut ChaCha8Rng,
    around: &[f64],
    radius: f64,
    count: usize,
    what: &str,
) -> Result<Vec<Vec<f64>>> {
    let d = around.len();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let p: Vec<f64> = around
                .iter()
                .zip(&dir)
                .map(|(c, v)| c + radius * v / norm)
                .collect();
            // small slack so points exactly `radius` apart are accepted
            if out.iter().all(|q| distance(q, &p) >= radius * (1.0 - 1e-9)) {
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {count} {what} centers {radius} apart in dimension {d}; use a larger dimension"
            )));
        }
    }
    Ok(out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Holds out the last `test_tracks` tracks (by fish id) of every species.
pub fn split_tracks(ds: &Dataset, test_tracks: usize) -> (Dataset, Dataset) {
    let mut tracks_of: BTreeMap<SpeciesId, Vec<u64>> = BTreeMap::new();
    for (fish, frames) in ds.tracks() {
        tracks_of.entry(frames[0].species).or_default().push(fish);
    }
    let held: std::collections::HashSet<u64> = tracks_of
        .values()
        .flat_map(|fish| fish.iter().rev().take(test_tracks).copied())
        .collect();
    let (test, train): (Vec<_>, Vec<_>) = ds
        .records()
        .iter()
        .cloned()
        .partition(|r| held.contains(&r.fish_id));
    let taxonomy = Arc::clone(ds.taxonomy());
    (
        Dataset::new(ds.dimension(), train, Arc::clone(&taxonomy)).expect("subset of valid data"),
        Dataset::new(ds.dimension(), test, taxonomy).expect("subset of valid data"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_at_center() {
        let spec = SynthSpec {
            dimension: 3,
            species_per_group: vec![1],
            group_names: vec![],
            tracks_per_species: 1,
            frames_per_track: 1,
            group_separation: 2.0,
            species_separation: 1.0,
            noise: 1e-9,
            seed: 3,
        };
        let (ds, t, centers) = generate_with_centers(&spec).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(t.num_species(), 1);
        let c = &centers.species[&SpeciesId(0)];
        for (v, c) in ds.records()[0].feature.iter().zip(c) {
            assert!((*v as f64 - c).abs() < 1e-6);
        }
    }

    #[test]
    fn paper_shape_taxonomy() {
        let (_, t) = generate(&SynthSpec::paper_shape(1)).unwrap();
        assert_eq!(t, Taxonomy::paper_shape());
    }

    #[test]
    fn separations_hold() {
        let spec = SynthSpec::paper_shape(5);
        let (_, t, c) = generate_with_centers(&spec).unwrap();
        for i in 0..c.groups.len() {
            for j in i + 1..c.groups.len() {
                assert!(distance(&c.groups[i], &c.groups[j]) >= spec.group_separation * (1.0 - 1e-9));
            }
        }
        for g in t.groups() {
            let kids = t.children(g.id);
            for (a, &x) in kids.iter().enumerate() {
                for &y in &kids[a + 1..] {
                    let dist = distance(&c.species[&x], &c.species[&y]);
                    assert!(dist >= spec.species_separation * (1.0 - 1e-9));
                }
            }
        }
    }

    #[test]
    fn infeasible_packing_suggests_larger_dimension() {
        let mut spec = SynthSpec::small(0);
        spec.dimension = 1;
        match generate(&spec) {
            Err(Error::Generation(m)) => assert!(m.contains("larger dimension")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SynthSpec::small(0);
        spec.species_separation = spec.group_separation;
        assert!(generate(&spec).is_err());
        let mut spec = SynthSpec::small(0);
        spec.noise = 0.0;
        assert!(generate(&spec).is_err());
        let mut spec = SynthSpec::small(0);
        spec.frames_per_track = 0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn track_split_holds_out_per_species() {
        let spec = SynthSpec::small(2);
        let (ds, t) = generate(&spec).unwrap();
        let (train, test) = split_tracks(&ds, 2);
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.tracks().len(), 2 * t.num_species());
        assert!(train
            .tracks()
            .keys()
            .all(|f| !test.tracks().contains_key(f)));
    }
}
