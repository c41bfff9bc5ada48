//! Fixed-budget rehearsal memory.
//!
//! Two pools share the store: hard cases (records whose confidence on their
//! true side of some SVM is lowest, at most `n` overall) and per-class
//! exemplar lists picked by herding (at most `m` overall). Budgets are split
//! evenly into quotas, with remainders going to the lowest ids, and pools
//! are truncated to their quotas whenever the number of SVMs or classes
//! grows. Exemplar lists are only ever cut to a prefix, so the herding
//! priority order survives every rebalance.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{Dataset, FeatureRecord};
use crate::hierarchy::HierarchicalModel;
use crate::svm::{CalibratedSvm, SvmId};
use crate::taxonomy::{GroupId, SpeciesId, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Selected for `svm` with this true-side confidence.
    HardCase { svm: SvmId, confidence: f64 },
    /// Position `rank` (1-based) in the herding order of `class`.
    Exemplar { class: SpeciesId, rank: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub record: FeatureRecord,
    pub provenance: Provenance,
}

/// Herding output for one class, most important first.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarList {
    pub class: SpeciesId,
    pub records: Vec<FeatureRecord>,
}

impl ExemplarList {
    /// Runs herding over `records` (all of class `class`) for `target` picks.
    pub fn select(class: SpeciesId, records: &[&FeatureRecord], target: usize) -> Self {
        let features: Vec<&[f32]> = records.iter().map(|r| r.feature.as_slice()).collect();
        let picks = herd_select(&features, target);
        ExemplarList {
            class,
            records: picks.into_iter().map(|i| records[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn truncate(&mut self, keep: usize) {
        self.records.truncate(keep);
    }

    pub fn keys(&self) -> Vec<(u64, u64)> {
        self.records.iter().map(FeatureRecord::key).collect()
    }
}

/// Herding: greedily picks rows so the running mean of the picks stays
/// closest to the mean of all rows.
///
/// Returns indices into `features` in pick order. Picks are without
/// replacement and exact distance ties go to the lowest index. A target
/// above `features.len()` is clamped with a warning.
pub fn herd_select(features: &[&[f32]], target: usize) -> Vec<usize> {
    let n = features.len();
    if n == 0 || target == 0 {
        return Vec::new();
    }
    let target = if target > n {
        log::warn!("herding target {target} exceeds class size {n}, clamping");
        n
    } else {
        target
    };
    let d = features[0].len();

    let mut mean = vec![0.0f64; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f.iter()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut running = vec![0.0f64; d];
    let mut taken = vec![false; n];
    let mut picks = Vec::with_capacity(target);
    for k in 1..=target {
        let k = k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = mean
                .iter()
                .zip(&running)
                .zip(f.iter())
                .map(|((&mu, &s), &v)| {
                    let diff = mu - (s + v as f64) / k;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("fewer picks than rows");
        taken[i] = true;
        for (s, &v) in running.iter_mut().zip(features[i].iter()) {
            *s += v as f64;
        }
        picks.push(i);
    }
    picks
}

/// Even split of `budget` over `keys` (ascending); the first
/// `budget % keys.len()` keys get one extra.
pub fn split_budget<K: Ord + Copy>(budget: usize, keys: impl IntoIterator<Item = K>) -> BTreeMap<K, usize> {
    let keys: BTreeSet<K> = keys.into_iter().collect();
    if keys.is_empty() {
        return BTreeMap::new();
    }
    let base = budget / keys.len();
    let extra = budget % keys.len();
    keys.into_iter()
        .enumerate()
        .map(|(rank, k)| (k, base + usize::from(rank < extra)))
        .collect()
}

/// Scores `data` under every SVM in `svms` and keeps, per SVM, its `quota`
/// records with the lowest confidence on their true side.
///
/// Coarse SVMs see every record; fine SVMs see the records of their group.
/// Positives are scored by confidence, negatives by one minus confidence.
/// The union is deduplicated on `(fish_id, frame_id)`: a record already
/// taken by a lower SVM id is skipped, not replaced.
pub fn select_hard_cases(
    svms: &[&CalibratedSvm],
    taxonomy: &Taxonomy,
    data: &[FeatureRecord],
    quotas: &BTreeMap<SvmId, usize>,
) -> Result<Vec<MemoryRecord>> {
    let by_id: BTreeMap<SvmId, &CalibratedSvm> = svms.iter().map(|s| (s.id, *s)).collect();
    let mut taken: HashSet<(u64, u64)> = HashSet::new();
    let mut pool = Vec::new();
    for (&id, &quota) in quotas {
        if quota == 0 || data.is_empty() {
            continue;
        }
        let svm = by_id
            .get(&id)
            .ok_or_else(|| Error::Untrained(format!("no trained SVM {id} for hard-case scoring")))?;
        let fine_group: Option<GroupId> = match id {
            SvmId::Coarse(_) => None,
            SvmId::Fine(s) => Some(
                taxonomy
                    .parent(s)
                    .ok_or_else(|| Error::Taxonomy(format!("unknown species {s}")))?,
            ),
        };
        let mut scored = Vec::new();
        for (idx, r) in data.iter().enumerate() {
            if fine_group.is_some_and(|g| r.group != g) {
                continue;
            }
            let conf = svm.confidence(&r.feature)?;
            let positive = match id {
                SvmId::Coarse(g) => r.group == g,
                SvmId::Fine(s) => r.species == s,
            };
            let true_side = if positive { conf } else { 1.0 - conf };
            scored.push((true_side, idx));
        }
        // stable: equal scores keep data order
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(confidence, idx) in scored.iter().take(quota) {
            let r = &data[idx];
            if taken.insert(r.key()) {
                pool.push(MemoryRecord {
                    record: r.clone(),
                    provenance: Provenance::HardCase { svm: id, confidence },
                });
            }
        }
    }
    Ok(pool)
}

/// Keys of the exemplar lists chosen by herding during one update, in their
/// full original order (before any truncation).
pub type HerdingLog = BTreeMap<SpeciesId, Vec<(u64, u64)>>;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    hard_budget: usize,
    exemplar_budget: usize,
    /// Entries carry `Provenance::HardCase`.
    hard_cases: Vec<MemoryRecord>,
    exemplars: BTreeMap<SpeciesId, ExemplarList>,
    seen_classes: BTreeSet<SpeciesId>,
    hard_quotas: BTreeMap<SvmId, usize>,
    exemplar_quotas: BTreeMap<SpeciesId, usize>,
}

impl MemoryStore {
    /// `hard_budget` is the total hard-case count `n`, `exemplar_budget` the
    /// total exemplar count `m`.
    pub fn new(hard_budget: usize, exemplar_budget: usize) -> Self {
        MemoryStore {
            hard_budget,
            exemplar_budget,
            hard_cases: Vec::new(),
            exemplars: BTreeMap::new(),
            seen_classes: BTreeSet::new(),
            hard_quotas: BTreeMap::new(),
            exemplar_quotas: BTreeMap::new(),
        }
    }

    pub fn hard_budget(&self) -> usize {
        self.hard_budget
    }

    pub fn exemplar_budget(&self) -> usize {
        self.exemplar_budget
    }

    pub fn hard_cases(&self) -> &[MemoryRecord] {
        &self.hard_cases
    }

    pub fn exemplars(&self) -> &BTreeMap<SpeciesId, ExemplarList> {
        &self.exemplars
    }

    pub fn hard_quotas(&self) -> &BTreeMap<SvmId, usize> {
        &self.hard_quotas
    }

    pub fn exemplar_quotas(&self) -> &BTreeMap<SpeciesId, usize> {
        &self.exemplar_quotas
    }

    pub fn seen_classes(&self) -> &BTreeSet<SpeciesId> {
        &self.seen_classes
    }

    pub fn num_hard_cases(&self) -> usize {
        self.hard_cases.len()
    }

    pub fn num_exemplars(&self) -> usize {
        self.exemplars.values().map(ExemplarList::len).sum()
    }

    /// Registers `classes` as seen and stores their herding lists.
    /// Lists are clipped to the class quota at the next [`rebalance`].
    ///
    /// [`rebalance`]: MemoryStore::rebalance
    pub fn insert_exemplars(&mut self, lists: Vec<ExemplarList>) {
        for list in lists {
            self.seen_classes.insert(list.class);
            self.exemplars.insert(list.class, list);
        }
    }

    pub fn insert_hard_cases(&mut self, pool: Vec<MemoryRecord>) {
        let mut present: HashSet<(u64, u64)> =
            self.hard_cases.iter().map(|m| m.record.key()).collect();
        for m in pool {
            debug_assert!(matches!(m.provenance, Provenance::HardCase { .. }));
            if present.insert(m.record.key()) {
                self.hard_cases.push(m);
            }
        }
    }

    /// Recomputes quotas for the active SVMs and the seen classes, then
    /// truncates both pools to them.
    pub fn rebalance(&mut self, active_svms: impl IntoIterator<Item = SvmId>) {
        self.hard_quotas = split_budget(self.hard_budget, active_svms);
        self.exemplar_quotas = split_budget(self.exemplar_budget, self.seen_classes.iter().copied());

        for (class, list) in self.exemplars.iter_mut() {
            list.truncate(self.exemplar_quotas.get(class).copied().unwrap_or(0));
        }
        self.exemplars.retain(|_, l| !l.is_empty());

        let mut per_svm: BTreeMap<SvmId, Vec<MemoryRecord>> = BTreeMap::new();
        for m in self.hard_cases.drain(..) {
            let Provenance::HardCase { svm, .. } = m.provenance else {
                continue;
            };
            per_svm.entry(svm).or_default().push(m);
        }
        for (svm, mut entries) in per_svm {
            let quota = self.hard_quotas.get(&svm).copied().unwrap_or(0);
            entries.sort_by(|a, b| hard_confidence(a).total_cmp(&hard_confidence(b)));
            entries.truncate(quota);
            self.hard_cases.extend(entries);
        }
    }

    /// One task's memory update, after the model was trained on the task:
    /// score hard cases of `task` under the current SVMs, herd exemplars for
    /// the classes new in `task`, then rebalance.
    ///
    /// Returns the untruncated herding order of every new class.
    pub fn update(&mut self, model: &HierarchicalModel, task: &Dataset) -> Result<HerdingLog> {
        let svms = model.svms();
        let ids: Vec<SvmId> = svms.iter().map(|s| s.id).collect();
        let hard_quotas = split_budget(self.hard_budget, ids.iter().copied());
        let pool = select_hard_cases(&svms, model.taxonomy(), task.records(), &hard_quotas)?;
        self.insert_hard_cases(pool);

        let new_classes: BTreeSet<SpeciesId> = task
            .species()
            .into_iter()
            .filter(|s| !self.seen_classes.contains(s))
            .collect();
        let all_classes = self.seen_classes.iter().chain(&new_classes).copied();
        let class_quotas = split_budget(self.exemplar_budget, all_classes);

        let mut log = HerdingLog::new();
        let mut lists = Vec::new();
        for &class in &new_classes {
            let members: Vec<&FeatureRecord> = task
                .records()
                .iter()
                .filter(|r| r.species == class)
                .collect();
            let target = class_quotas[&class].min(members.len());
            let list = ExemplarList::select(class, &members, target);
            log.insert(class, list.keys());
            lists.push(list);
        }
        // classes with a zero quota are still seen
        self.seen_classes.extend(new_classes.iter().copied());
        self.insert_exemplars(lists);
        self.rebalance(ids);
        Ok(log)
    }

    /// Deduplicated union of exemplars and hard cases as plain records.
    pub fn training_view(&self) -> Vec<&FeatureRecord> {
        let mut seen = HashSet::new();
        self.exemplars
            .values()
            .flat_map(|l| l.records.iter())
            .chain(self.hard_cases.iter().map(|m| &m.record))
            .filter(|r| seen.insert(r.key()))
            .collect()
    }

    /// All stored items with provenance, exemplars first.
    pub fn records(&self) -> Vec<MemoryRecord> {
        let mut out: Vec<MemoryRecord> = self
            .exemplars
            .values()
            .flat_map(|l| {
                l.records.iter().enumerate().map(|(k, r)| MemoryRecord {
                    record: r.clone(),
                    provenance: Provenance::Exemplar {
                        class: l.class,
                        rank: k + 1,
                    },
                })
            })
            .collect();
        out.extend(self.hard_cases.iter().cloned());
        out
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        let refs = self
            .records()
            .into_iter()
            .map(|m| RecordRef {
                fish_id: m.record.fish_id,
                frame_id: m.record.frame_id,
                group: m.record.group,
                species: m.record.species,
                provenance: m.provenance,
            })
            .collect();
        MemorySnapshot {
            hard_budget: self.hard_budget,
            exemplar_budget: self.exemplar_budget,
            hard_quotas: self
                .hard_quotas
                .iter()
                .map(|(&svm, &quota)| SvmQuota { svm, quota })
                .collect(),
            exemplar_quotas: self
                .exemplar_quotas
                .iter()
                .map(|(&class, &quota)| ClassQuota { class, quota })
                .collect(),
            hard_cases: self.num_hard_cases(),
            exemplars: self.num_exemplars(),
            records: refs,
        }
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        self.snapshot().save(path)
    }
}

fn hard_confidence(m: &MemoryRecord) -> f64 {
    match m.provenance {
        Provenance::HardCase { confidence, .. } => confidence,
        Provenance::Exemplar { .. } => f64::INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRef {
    pub fish_id: u64,
    pub frame_id: u64,
    pub group: GroupId,
    pub species: SpeciesId,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmQuota {
    pub svm: SvmId,
    pub quota: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassQuota {
    pub class: SpeciesId,
    pub quota: usize,
}

/// On-disk view of a memory store: budgets, quotas and record references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub hard_budget: usize,
    pub exemplar_budget: usize,
    pub hard_quotas: Vec<SvmQuota>,
    pub exemplar_quotas: Vec<ClassQuota>,
    pub hard_cases: usize,
    pub exemplars: usize,
    pub records: Vec<RecordRef>,
}

impl MemorySnapshot {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("memory snapshot: {e}")))
    }

    /// Human-readable summary used by `inspect-memory`.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "hard cases: {} / budget {} over {} SVMs",
            self.hard_cases,
            self.hard_budget,
            self.hard_quotas.len()
        );
        let _ = writeln!(
            out,
            "exemplars:  {} / budget {} over {} classes",
            self.exemplars,
            self.exemplar_budget,
            self.exemplar_quotas.len()
        );
        let mut per_class: BTreeMap<SpeciesId, (usize, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = per_class.entry(r.species).or_default();
            match r.provenance {
                Provenance::Exemplar { .. } => e.0 += 1,
                Provenance::HardCase { .. } => e.1 += 1,
            }
        }
        let quotas: BTreeMap<SpeciesId, usize> =
            self.exemplar_quotas.iter().map(|q| (q.class, q.quota)).collect();
        let _ = writeln!(out, "{:>8} {:>6} {:>10} {:>10}", "species", "quota", "exemplars", "hard");
        for (s, (ex, hard)) in per_class {
            let _ = writeln!(
                out,
                "{:>8} {:>6} {:>10} {:>10}",
                s.0,
                quotas.get(&s).copied().unwrap_or(0),
                ex,
                hard
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svm::LinearSvm;

    fn rows(data: &[Vec<f32>]) -> Vec<&[f32]> {
        data.iter().map(|r| &r[..]).collect()
    }

    fn rec(fish: u64, g: u16, s: u16, f: &[f32]) -> FeatureRecord {
        FeatureRecord {
            fish_id: fish,
            frame_id: 0,
            group: GroupId(g),
            species: SpeciesId(s),
            feature: f.to_vec(),
        }
    }

    #[test]
    fn herding_singleton() {
        let data = vec![vec![3.0f32, -1.0]];
        assert_eq!(herd_select(&rows(&data), 1), vec![0]);
    }

    #[test]
    fn herding_worked_example() {
        // mean (1,0): first pick (1,0); then (0,0) and (2,0) tie at 0.5
        let data = vec![vec![0.0f32, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(herd_select(&rows(&data), 2), vec![2, 0]);
    }

    #[test]
    fn herding_clamps_to_class_size() {
        let data = vec![vec![0.0f32], vec![1.0]];
        assert_eq!(herd_select(&rows(&data), 5).len(), 2);
        assert!(herd_select(&rows(&data), 0).is_empty());
    }

    #[test]
    fn budget_split_matches_remainder_rule() {
        let q = split_budget(1800, 0u16..31);
        assert_eq!(q[&0], 59);
        assert_eq!(q[&1], 59);
        assert!(q.iter().filter(|(&k, _)| k >= 2).all(|(_, &v)| v == 58));
        assert_eq!(q.values().sum::<usize>(), 1800);
        assert_eq!(split_budget(10, [7u16]), BTreeMap::from([(7, 10)]));
        assert!(split_budget(10, std::iter::empty::<u16>()).is_empty());
    }

    fn one_d_taxonomy() -> Taxonomy {
        Taxonomy::from_names(&[("g0", vec!["a"]), ("g1", vec!["b"])]).unwrap()
    }

    #[test]
    fn hard_cases_keep_lowest_true_side() {
        // margins chosen so the fixed map gives confidences 0.9, 0.9, 0.1, 0.2
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let svm = CalibratedSvm::uncalibrated(
            SvmId::Coarse(GroupId(0)),
            LinearSvm {
                weights: vec![1.0],
                bias: 0.0,
            },
        );
        let data: Vec<FeatureRecord> = [0.9, 0.9, 0.1, 0.2]
            .iter()
            .enumerate()
            .map(|(i, &p)| rec(i as u64, 0, 0, &[logit(p) as f32]))
            .collect();
        let quotas = BTreeMap::from([(svm.id, 2)]);
        let pool = select_hard_cases(&[&svm], &one_d_taxonomy(), &data, &quotas).unwrap();
        let fish: Vec<u64> = pool.iter().map(|m| m.record.fish_id).collect();
        assert_eq!(fish, vec![2, 3]);

        let zero = BTreeMap::from([(svm.id, 0)]);
        assert!(select_hard_cases(&[&svm], &one_d_taxonomy(), &data, &zero)
            .unwrap()
            .is_empty());
        assert!(select_hard_cases(&[&svm], &one_d_taxonomy(), &[], &quotas)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn hard_cases_need_trained_svm() {
        let data = vec![rec(0, 0, 0, &[1.0])];
        let quotas = BTreeMap::from([(SvmId::Coarse(GroupId(1)), 1)]);
        assert!(matches!(
            select_hard_cases(&[], &one_d_taxonomy(), &data, &quotas),
            Err(Error::Untrained(_))
        ));
    }

    #[test]
    fn empty_store_view() {
        assert!(MemoryStore::new(200, 1800).training_view().is_empty());
    }

    #[test]
    fn view_deduplicates_overlap() {
        let mut store = MemoryStore::new(5, 5);
        let r = rec(1, 0, 0, &[0.5]);
        store.insert_exemplars(vec![ExemplarList {
            class: SpeciesId(0),
            records: vec![r.clone()],
        }]);
        store.hard_cases.push(MemoryRecord {
            record: r,
            provenance: Provenance::HardCase {
                svm: SvmId::Coarse(GroupId(0)),
                confidence: 0.3,
            },
        });
        assert_eq!(store.training_view().len(), 1);
    }

    #[test]
    fn rebalance_truncates_to_prefix() {
        let mut store = MemoryStore::new(0, 4);
        let list = |class: u16, n: u64| ExemplarList {
            class: SpeciesId(class),
            records: (0..n).map(|i| rec(100 * class as u64 + i, 0, class, &[i as f32])).collect(),
        };
        store.insert_exemplars(vec![list(0, 4)]);
        store.rebalance([]);
        assert_eq!(store.num_exemplars(), 4);
        let original = store.exemplars()[&SpeciesId(0)].keys();
        store.insert_exemplars(vec![list(1, 4), list(2, 4)]);
        store.rebalance([]);
        // 4 over 3 classes: 2, 1, 1
        assert_eq!(store.exemplar_quotas()[&SpeciesId(0)], 2);
        assert_eq!(store.exemplars()[&SpeciesId(0)].keys(), original[..2].to_vec());
        assert_eq!(store.num_exemplars(), 4);
    }
}
