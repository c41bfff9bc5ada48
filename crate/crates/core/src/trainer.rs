//! The incremental protocol. Per task:
//!
//! 1. training view = task data plus the memory's records
//! 2. retrain coarse SVMs on the view
//! 3. expand the fine bank of every group that gained species
//! 4. score hard cases of the task data under the new SVMs
//! 5. herd exemplars for each new class
//! 6. rebalance memory quotas
//!
//! Feature vectors are never modified.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{self, CohortTable, EvalReport};
use crate::feature_store::{Dataset, FeatureRecord, TaskStream};
use crate::hierarchy::HierarchicalModel;
use crate::memory::{HerdingLog, MemoryStore};
use crate::taxonomy::{GroupId, SpeciesId, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    /// 1-based.
    pub task: usize,
    pub new_species: Vec<SpeciesId>,
    pub seen_species: usize,
    pub task_records: usize,
    pub memory_records_used: usize,
    pub svms: usize,
    pub hard_cases: usize,
    pub exemplars: usize,
    pub eval: Option<EvalReport>,
    /// Wall time; kept out of the report file so reruns are byte-identical.
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub hard_budget: usize,
    pub exemplar_budget: usize,
    pub tasks: Vec<TaskEntry>,
    pub forgetting: Option<CohortTable>,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.tasks.last().and_then(|t| t.eval.as_ref())
    }
}

/// Stateful driver for one task stream.
pub struct IncrementalTrainer {
    model: HierarchicalModel,
    memory: MemoryStore,
    tasks_done: usize,
}

impl IncrementalTrainer {
    pub fn new(taxonomy: Arc<Taxonomy>, dimension: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(IncrementalTrainer {
            model: HierarchicalModel::new(taxonomy, dimension, cfg.svm)?,
            memory: MemoryStore::new(cfg.hard_budget, cfg.exemplar_budget),
            tasks_done: 0,
        })
    }

    pub fn model(&self) -> &HierarchicalModel {
        &self.model
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    pub fn into_parts(self) -> (HierarchicalModel, MemoryStore) {
        (self.model, self.memory)
    }

    /// Runs one task. Errors carry the 1-based task index.
    pub fn step(&mut self, task: &Dataset) -> Result<(TaskEntry, HerdingLog)> {
        self.tasks_done += 1;
        let index = self.tasks_done;
        self.step_inner(index, task)
            .map_err(|e| Error::Task {
                index,
                source: Box::new(e),
            })
    }

    fn step_inner(&mut self, index: usize, task: &Dataset) -> Result<(TaskEntry, HerdingLog)> {
        let start = Instant::now();
        if task.is_empty() {
            log::info!("task {index} is empty, nothing to train");
            return Ok((self.entry(index, vec![], 0, 0, start), HerdingLog::new()));
        }
        if task.dimension() != self.model.dimension() {
            return Err(Error::Validation(format!(
                "task has dimension {}, model has {}",
                task.dimension(),
                self.model.dimension()
            )));
        }

        let memory_view = self.memory.training_view();
        let memory_used = memory_view.len();
        let mut view: Vec<&FeatureRecord> = task.records().iter().collect();
        view.extend(memory_view);

        self.model.train_coarse(&view)?;

        let mut new_by_group: BTreeMap<GroupId, BTreeSet<SpeciesId>> = BTreeMap::new();
        for s in task.species() {
            if self.model.seen_species().contains(&s) {
                return Err(Error::DuplicateClass(s.0));
            }
            let g = task.taxonomy().parent(s).expect("validated dataset");
            new_by_group.entry(g).or_default().insert(s);
        }
        let new_species: Vec<SpeciesId> = new_by_group.values().flatten().copied().collect();
        for (&g, species) in &new_by_group {
            self.model.expand_fine(g, &view, species)?;
        }
        drop(view);

        let herding = self.memory.update(&self.model, task)?;
        let entry = self.entry(index, new_species, task.len(), memory_used, start);
        log::info!(
            "task {index}: {} new species, {} SVMs, memory {} hard + {} exemplars, {:.2?}",
            entry.new_species.len(),
            entry.svms,
            entry.hard_cases,
            entry.exemplars,
            entry.elapsed
        );
        Ok((entry, herding))
    }

    fn entry(
        &self,
        task: usize,
        new_species: Vec<SpeciesId>,
        task_records: usize,
        memory_records_used: usize,
        start: Instant,
    ) -> TaskEntry {
        TaskEntry {
            task,
            new_species,
            seen_species: self.model.seen_species().len(),
            task_records,
            memory_records_used,
            svms: self.model.svms().len(),
            hard_cases: self.memory.num_hard_cases(),
            exemplars: self.memory.num_exemplars(),
            eval: None,
            elapsed: start.elapsed(),
        }
    }
}

pub struct TrainOutcome {
    pub model: HierarchicalModel,
    pub memory: MemoryStore,
    pub report: TrainReport,
    /// Full herding order per task, before any truncation.
    pub herding: Vec<HerdingLog>,
}

/// Trains through `stream` task by task. With `test`, the model is evaluated
/// after every task and the report gets a forgetting breakdown.
pub fn run_stream(
    stream: &TaskStream,
    cfg: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<TrainOutcome> {
    let mut trainer = IncrementalTrainer::new(
        Arc::clone(stream.taxonomy()),
        stream.dimension(),
        cfg,
    )?;
    let mut entries = Vec::with_capacity(stream.len());
    let mut herding = Vec::with_capacity(stream.len());
    for task in stream.tasks() {
        let (mut entry, log) = trainer.step(task)?;
        if let Some(test) = test {
            if trainer.model().coarse_bank().next().is_some() {
                entry.eval = Some(eval::evaluate(trainer.model(), test)?);
            }
        }
        entries.push(entry);
        herding.push(log);
    }

    let forgetting = if stream.len() >= 2 && entries.iter().all(|e| e.eval.is_some()) {
        let reports: Vec<EvalReport> = entries
            .iter()
            .map(|e| e.eval.clone().expect("checked"))
            .collect();
        Some(eval::forgetting_breakdown(&reports, stream)?)
    } else {
        None
    };
    let (model, memory) = trainer.into_parts();
    Ok(TrainOutcome {
        report: TrainReport {
            hard_budget: cfg.hard_budget,
            exemplar_budget: cfg.exemplar_budget,
            tasks: entries,
            forgetting,
        },
        model,
        memory,
        herding,
    })
}

/// Upper-bound comparator: every task's data at once, trained in one step.
pub fn run_joint_oracle(stream: &TaskStream, cfg: &TrainConfig) -> Result<HierarchicalModel> {
    let joint = TaskStream::new(vec![stream.joined()])?;
    Ok(run_stream(&joint, cfg, None)?.model)
}
