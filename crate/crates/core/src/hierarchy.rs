//! Coarse-to-fine classifier: one coarse SVM per group, and per group a
//! bank of fine SVMs that grows as new species are seen.
//!
//! Inference routes hard through the coarse argmax, then takes the argmax of
//! the chosen group's fine bank. A group with a single seen species has no
//! fine SVMs and routes straight to that species. No task identifier is ever
//! consumed; the maximum confidence decides.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureRecord;
use crate::svm::{self, CalibratedSvm, SvmId, SvmParams, SvmProblem};
use crate::taxonomy::{GroupId, SpeciesId, Taxonomy};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierPrediction {
    pub group: GroupId,
    pub group_confidence: f64,
    pub species: SpeciesId,
    pub species_confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalModel {
    taxonomy: Arc<Taxonomy>,
    dimension: usize,
    params: SvmParams,
    coarse: BTreeMap<GroupId, CalibratedSvm>,
    /// Sorted by species id within each group.
    fine: BTreeMap<GroupId, Vec<CalibratedSvm>>,
    seen: BTreeSet<SpeciesId>,
}

/// One group's fine SVMs as stored in the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineBank {
    pub group: GroupId,
    pub svms: Vec<CalibratedSvm>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    dimension: usize,
    params: SvmParams,
    taxonomy: Taxonomy,
    seen_species: Vec<SpeciesId>,
    coarse: Vec<CalibratedSvm>,
    fine: Vec<FineBank>,
}

impl HierarchicalModel {
    pub fn new(taxonomy: Arc<Taxonomy>, dimension: usize, params: SvmParams) -> Result<Self> {
        params.validate()?;
        Ok(HierarchicalModel {
            taxonomy,
            dimension,
            params,
            coarse: BTreeMap::new(),
            fine: BTreeMap::new(),
            seen: BTreeSet::new(),
        })
    }

    /// Assembles a model from already trained parts.
    pub fn from_parts(
        taxonomy: Arc<Taxonomy>,
        dimension: usize,
        params: SvmParams,
        coarse: Vec<CalibratedSvm>,
        fine: Vec<FineBank>,
        seen: BTreeSet<SpeciesId>,
    ) -> Result<Self> {
        let mut model = Self::new(taxonomy, dimension, params)?;
        for s in &seen {
            if model.taxonomy.parent(*s).is_none() {
                return Err(Error::Taxonomy(format!("unknown seen species {s}")));
            }
        }
        model.seen = seen;
        for svm in coarse {
            let SvmId::Coarse(g) = svm.id else {
                return Err(Error::Validation(format!("{} in coarse bank", svm.id)));
            };
            if !model.taxonomy.has_group(g) {
                return Err(Error::Taxonomy(format!("coarse SVM for unknown group {g}")));
            }
            model.check_dim(&svm)?;
            model.coarse.insert(g, svm);
        }
        for bank in fine {
            let mut svms = bank.svms;
            for svm in &svms {
                let SvmId::Fine(s) = svm.id else {
                    return Err(Error::Validation(format!("{} in fine bank", svm.id)));
                };
                if model.taxonomy.parent(s) != Some(bank.group) {
                    return Err(Error::Taxonomy(format!(
                        "fine SVM for species {s} filed under group {}",
                        bank.group
                    )));
                }
                if !model.seen.contains(&s) {
                    return Err(Error::Validation(format!(
                        "fine SVM for unseen species {s}"
                    )));
                }
                model.check_dim(svm)?;
            }
            svms.sort_by_key(|s| s.id);
            if !svms.is_empty() {
                model.fine.insert(bank.group, svms);
            }
        }
        Ok(model)
    }

    fn check_dim(&self, svm: &CalibratedSvm) -> Result<()> {
        if svm.weights.len() != self.dimension || svm.dimension != self.dimension {
            return Err(Error::Validation(format!(
                "{} has dimension {}, model has {}",
                svm.id,
                svm.weights.len(),
                self.dimension
            )));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn params(&self) -> &SvmParams {
        &self.params
    }

    pub fn seen_species(&self) -> &BTreeSet<SpeciesId> {
        &self.seen
    }

    pub fn coarse_bank(&self) -> impl Iterator<Item = &CalibratedSvm> {
        self.coarse.values()
    }

    pub fn fine_bank(&self, group: GroupId) -> &[CalibratedSvm] {
        self.fine.get(&group).map_or(&[], Vec::as_slice)
    }

    /// Seen species of `group`, ascending.
    pub fn seen_in_group(&self, group: GroupId) -> Vec<SpeciesId> {
        self.seen
            .iter()
            .copied()
            .filter(|&s| self.taxonomy.parent(s) == Some(group))
            .collect()
    }

    /// Every SVM in global id order (coarse by group, then fine by species).
    pub fn svms(&self) -> Vec<&CalibratedSvm> {
        let mut all: Vec<&CalibratedSvm> = self.coarse.values().collect();
        let mut fine: Vec<&CalibratedSvm> = self.fine.values().flatten().collect();
        fine.sort_by_key(|s| s.id);
        all.extend(fine);
        all
    }

    pub fn svm(&self, id: SvmId) -> Option<&CalibratedSvm> {
        match id {
            SvmId::Coarse(g) => self.coarse.get(&g),
            SvmId::Fine(s) => {
                let g = self.taxonomy.parent(s)?;
                self.fine.get(&g)?.iter().find(|svm| svm.id == id)
            }
        }
    }

    /// Retrains one-vs-all coarse SVMs for every group present in `view`.
    ///
    /// Groups absent from `view` keep their previous SVM.
    pub fn train_coarse(&mut self, view: &[&FeatureRecord]) -> Result<()> {
        self.check_view(view)?;
        let groups: BTreeSet<GroupId> = view.iter().map(|r| r.group).collect();
        if groups.len() < 2 {
            let named = groups
                .iter()
                .next()
                .map(|g| format!("{g} ({})", self.taxonomy.group_name(*g)))
                .unwrap_or_else(|| "<none>".into());
            return Err(Error::Degenerate(format!(
                "coarse training needs at least two groups, data only has group {named}"
            )));
        }
        let params = self.params;
        let trained = groups
            .par_iter()
            .map(|&g| fit_one_vs_all(SvmId::Coarse(g), view, |r| r.group == g, &params))
            .collect::<Result<Vec<_>>>()?;
        for (g, svm) in groups.into_iter().zip(trained) {
            self.coarse.insert(g, svm);
        }
        Ok(())
    }

    /// Adds `new_species` to `group` and (re)trains the group's fine bank on
    /// `view` (new species data plus memory of the group; records of other
    /// groups are ignored).
    ///
    /// Each seen species of the group gets a one-vs-all SVM against its
    /// siblings. A species whose problem in `view` lacks positives or
    /// negatives keeps its previous SVM, or gets a constant one if it never
    /// had one.
    pub fn expand_fine(
        &mut self,
        group: GroupId,
        view: &[&FeatureRecord],
        new_species: &BTreeSet<SpeciesId>,
    ) -> Result<()> {
        if !self.taxonomy.has_group(group) {
            return Err(Error::Taxonomy(format!("unknown group {group}")));
        }
        for &s in new_species {
            match self.taxonomy.parent(s) {
                None => return Err(Error::Taxonomy(format!("unknown species {s}"))),
                Some(g) if g != group => {
                    return Err(Error::Taxonomy(format!(
                        "species {s} belongs to group {g}, not {group}"
                    )))
                }
                Some(_) => {}
            }
            if self.seen.contains(&s) {
                return Err(Error::DuplicateClass(s.0));
            }
        }
        self.check_view(view)?;

        let mut members: BTreeSet<SpeciesId> = self.seen_in_group(group).into_iter().collect();
        members.extend(new_species.iter().copied());
        let local: Vec<&FeatureRecord> = view
            .iter()
            .copied()
            .filter(|r| r.group == group && members.contains(&r.species))
            .collect();
        self.seen.extend(new_species.iter().copied());

        if members.len() < 2 {
            self.fine.remove(&group);
            return Ok(());
        }

        let params = self.params;
        let previous: BTreeMap<SpeciesId, CalibratedSvm> = self
            .fine
            .remove(&group)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|svm| match svm.id {
                SvmId::Fine(s) => Some((s, svm)),
                SvmId::Coarse(_) => None,
            })
            .collect();
        let dimension = self.dimension;
        let bank = members
            .par_iter()
            .map(|&s| {
                let id = SvmId::Fine(s);
                let pos = local.iter().filter(|r| r.species == s).count();
                if pos > 0 && pos < local.len() {
                    fit_one_vs_all(id, &local, |r| r.species == s, &params)
                } else if let Some(old) = previous.get(&s) {
                    log::info!("{id}: no one-vs-all data in this view, keeping previous SVM");
                    Ok(old.clone())
                } else {
                    log::warn!(
                        "{id}: one-vs-all problem has {} positives and {} negatives, installing constant SVM",
                        pos,
                        local.len() - pos
                    );
                    Ok(CalibratedSvm::constant(id, dimension))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.fine.insert(group, bank);
        Ok(())
    }

    fn check_view(&self, view: &[&FeatureRecord]) -> Result<()> {
        for r in view {
            if r.feature.len() != self.dimension {
                return Err(Error::Validation(format!(
                    "record ({}, {}) has dimension {}, model has {}",
                    r.fish_id,
                    r.frame_id,
                    r.feature.len(),
                    self.dimension
                )));
            }
            self.taxonomy.check_pair(r.group, r.species)?;
        }
        Ok(())
    }

    /// Coarse argmax, then the fine argmax inside that group. Ties go to the
    /// lowest id.
    pub fn predict_image(&self, x: &[f32]) -> Result<HierPrediction> {
        if self.coarse.is_empty() {
            return Err(Error::Untrained("no coarse SVMs".into()));
        }
        if x.len() != self.dimension {
            return Err(Error::Validation(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.dimension
            )));
        }
        let (group, group_confidence) = argmax(
            self.coarse
                .iter()
                .map(|(&g, svm)| (g, svm.confidence_unchecked(x))),
        )
        .expect("coarse bank is non-empty");

        let seen = self.seen_in_group(group);
        let (species, species_confidence) = match seen.as_slice() {
            [] => {
                return Err(Error::Untrained(format!(
                    "group {group} has a coarse SVM but no seen species"
                )))
            }
            [only] => (*only, group_confidence),
            _ => {
                let bank = self.fine_bank(group);
                argmax(bank.iter().map(|svm| {
                    let SvmId::Fine(s) = svm.id else {
                        unreachable!("fine bank holds fine SVMs")
                    };
                    (s, svm.confidence_unchecked(x))
                }))
                .ok_or_else(|| Error::Untrained(format!("group {group} has no fine SVMs")))?
            }
        };
        Ok(HierPrediction {
            group,
            group_confidence,
            species,
            species_confidence,
        })
    }

    /// Majority vote over per-frame predictions of one fish track.
    pub fn predict_video(&self, frames: &[&[f32]]) -> Result<HierPrediction> {
        if frames.is_empty() {
            return Err(Error::Validation("video has no frames".into()));
        }
        let preds = frames
            .iter()
            .map(|x| self.predict_image(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(majority_vote(&preds).expect("non-empty"))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            dimension: self.dimension,
            params: self.params,
            taxonomy: (*self.taxonomy).clone(),
            seen_species: self.seen.iter().copied().collect(),
            coarse: self.coarse.values().cloned().collect(),
            fine: self
                .fine
                .iter()
                .map(|(&group, svms)| FineBank {
                    group,
                    svms: svms.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("model file: {e}")))?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported model schema version {}",
                file.schema_version
            )));
        }
        Self::from_parts(
            Arc::new(file.taxonomy),
            file.dimension,
            file.params,
            file.coarse,
            file.fine,
            file.seen_species.into_iter().collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Trains and calibrates the SVM separating `is_positive` records from the
/// rest of `records`, with the positive penalty rebalanced by class ratio.
fn fit_one_vs_all(
    id: SvmId,
    records: &[&FeatureRecord],
    is_positive: impl Fn(&FeatureRecord) -> bool,
    params: &SvmParams,
) -> Result<CalibratedSvm> {
    let features: Vec<&[f32]> = records.iter().map(|r| r.feature.as_slice()).collect();
    let labels: Vec<f64> = records
        .iter()
        .map(|r| if is_positive(r) { 1.0 } else { -1.0 })
        .collect();
    let problem = SvmProblem::new(features.clone(), labels.clone(), params.c)
        .map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("{id}: {m}")),
            other => other,
        })?
        .balanced();
    let out = svm::train(&problem, params);
    log::debug!(
        "{id}: {} rows, {} epochs, gap {:.2e}",
        problem.len(),
        out.epochs,
        out.duality_gap
    );
    svm::calibrate(out.svm, id, &features, &labels)
}

/// First maximum wins, so iterating ids ascending breaks ties to the lowest.
fn argmax<K: Copy>(items: impl Iterator<Item = (K, f64)>) -> Option<(K, f64)> {
    let mut best: Option<(K, f64)> = None;
    for (k, v) in items {
        match best {
            Some((_, bv)) if v.partial_cmp(&bv) != Some(std::cmp::Ordering::Greater) => {}
            _ => best = Some((k, v)),
        }
    }
    best
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Track-level prediction from per-frame predictions.
///
/// The modal group wins; the species is the modal one among frames of that
/// group. Count ties go to the higher mean confidence, then the lowest id.
/// Reported confidences are means over the frames that voted for the winner.
/// Returns `None` for an empty slice.
pub fn majority_vote(preds: &[HierPrediction]) -> Option<HierPrediction> {
    if preds.is_empty() {
        return None;
    }
    let mut by_group: BTreeMap<GroupId, Vec<f64>> = BTreeMap::new();
    for p in preds {
        by_group.entry(p.group).or_default().push(p.group_confidence);
    }
    let (group, group_confidence) = pick_mode(by_group);

    let mut by_species: BTreeMap<SpeciesId, Vec<f64>> = BTreeMap::new();
    for p in preds.iter().filter(|p| p.group == group) {
        by_species
            .entry(p.species)
            .or_default()
            .push(p.species_confidence);
    }
    let (species, species_confidence) = pick_mode(by_species);
    Some(HierPrediction {
        group,
        group_confidence,
        species,
        species_confidence,
    })
}

fn pick_mode<K: Copy + Ord>(votes: BTreeMap<K, Vec<f64>>) -> (K, f64) {
    let mut best: Option<(K, usize, f64)> = None;
    for (k, mut confs) in votes {
        let count = confs.len();
        let mean = stable_mean(&mut confs);
        let better = match best {
            None => true,
            Some((_, bc, bm)) => count > bc || (count == bc && mean > bm),
        };
        if better {
            best = Some((k, count, mean));
        }
    }
    let (k, _, mean) = best.expect("at least one vote");
    (k, mean)
}
