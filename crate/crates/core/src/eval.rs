//! Image- and video-level accuracy at both taxonomy levels, plus per-cohort
//! forgetting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{Dataset, TaskStream};
use crate::hierarchy::{majority_vote, HierPrediction, HierarchicalModel};
use crate::taxonomy::SpeciesId;

/// Correct/total counts for one species.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeciesCounts {
    pub frames: u64,
    pub correct_frames: u64,
    pub tracks: u64,
    pub correct_tracks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub img_c: f64,
    pub img_f: f64,
    pub video_c: f64,
    pub video_f: f64,
    pub frames: u64,
    pub tracks: u64,
    /// Frames whose predicted species is not a child of the predicted group.
    pub routing_violations: u64,
    /// `group_confusion[true][predicted]`, frame counts.
    pub group_confusion: Vec<Vec<u64>>,
    /// Fine-level counts keyed by true species.
    pub per_species: BTreeMap<SpeciesId, SpeciesCounts>,
}

struct TrackOutcome {
    frames: Vec<(bool, bool, usize, usize, bool)>,
    truth: SpeciesId,
    video: HierPrediction,
}

/// Scores `model` on every frame and every track of `test`.
///
/// Test species the model has never seen are scored as errors.
pub fn evaluate(model: &HierarchicalModel, test: &Dataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Validation("test set has no tracks".into()));
    }
    let taxonomy = model.taxonomy();
    for r in test.records() {
        taxonomy.check_pair(r.group, r.species).map_err(|e| {
            Error::Taxonomy(format!(
                "test record ({}, {}) is not in the model taxonomy: {e}",
                r.fish_id, r.frame_id
            ))
        })?;
    }

    let tracks: Vec<_> = test.tracks().into_iter().collect();
    let outcomes = tracks
        .par_iter()
        .map(|(fish, frames)| {
            let truth = frames[0].species;
            if frames.iter().any(|r| r.species != truth) {
                log::warn!("track {fish} mixes species labels; scoring against the first frame");
            }
            let preds = frames
                .iter()
                .map(|r| model.predict_image(&r.feature))
                .collect::<Result<Vec<_>>>()?;
            let per_frame = frames
                .iter()
                .zip(&preds)
                .map(|(r, p)| {
                    let routed = taxonomy.parent(p.species) == Some(p.group);
                    (
                        p.group == r.group,
                        p.species == r.species,
                        r.group.0 as usize,
                        p.group.0 as usize,
                        routed,
                    )
                })
                .collect();
            Ok(TrackOutcome {
                frames: per_frame,
                truth,
                video: majority_vote(&preds).expect("tracks are non-empty"),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let g = taxonomy.num_groups();
    let mut confusion = vec![vec![0u64; g]; g];
    let mut per_species: BTreeMap<SpeciesId, SpeciesCounts> = BTreeMap::new();
    let (mut frames, mut img_c, mut img_f, mut routing_violations) = (0u64, 0u64, 0u64, 0u64);
    let (mut video_c, mut video_f) = (0u64, 0u64);
    for ((_, track), out) in tracks.iter().zip(&outcomes) {
        for (r, &(gc, fc, tg, pg, routed)) in track.iter().zip(&out.frames) {
            frames += 1;
            img_c += u64::from(gc);
            img_f += u64::from(fc);
            routing_violations += u64::from(!routed);
            confusion[tg][pg] += 1;
            let e = per_species.entry(r.species).or_default();
            e.frames += 1;
            e.correct_frames += u64::from(fc);
        }
        let truth_group = taxonomy.parent(out.truth).expect("checked above");
        let vc = out.video.group == truth_group;
        let vf = out.video.species == out.truth;
        video_c += u64::from(vc);
        video_f += u64::from(vf);
        let e = per_species.entry(out.truth).or_default();
        e.tracks += 1;
        e.correct_tracks += u64::from(vf);
    }
    let n_tracks = tracks.len() as u64;
    Ok(EvalReport {
        img_c: percent(img_c, frames),
        img_f: percent(img_f, frames),
        video_c: percent(video_c, n_tracks),
        video_f: percent(video_f, n_tracks),
        frames,
        tracks: n_tracks,
        routing_violations,
        group_confusion: confusion,
        per_species,
    })
}

fn percent(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

impl EvalReport {
    /// Frame-level fine accuracy over test frames of `species`, or `None`
    /// when the test set has none of them.
    pub fn cohort_accuracy(&self, species: &BTreeSet<SpeciesId>) -> Option<f64> {
        let (mut correct, mut total) = (0, 0);
        for s in species {
            if let Some(c) = self.per_species.get(s) {
                correct += c.correct_frames;
                total += c.frames;
            }
        }
        (total > 0).then(|| percent(correct, total))
    }

    /// Aligned table with the columns img_C, img_F, video_C, video_F.
    pub fn to_table(&self, label: &str) -> String {
        let mut out = table_header();
        out.push_str(&table_row(
            label,
            [self.img_c, self.img_f, self.video_c, self.video_f],
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

pub fn table_header() -> String {
    format!(
        "{:<16} {:>7} {:>7} {:>7} {:>7}\n",
        "method", "img_C", "img_F", "video_C", "video_F"
    )
}

/// One table row, percentages at one decimal.
pub fn table_row(label: &str, values: [f64; 4]) -> String {
    format!(
        "{:<16} {:>7.1} {:>7.1} {:>7.1} {:>7.1}\n",
        label, values[0], values[1], values[2], values[3]
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    /// 1-based task that introduced the cohort.
    pub task: usize,
    pub species: Vec<SpeciesId>,
    /// Fine accuracy after each task from `task` on; `None` when the test
    /// set has no frames of the cohort.
    pub trajectory: Vec<Option<f64>>,
    /// Best historical accuracy minus final accuracy.
    pub forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    pub rows: Vec<CohortRow>,
    /// Mean forgetting over cohorts introduced before the last task.
    pub mean_forgetting: f64,
}

/// Cohort trajectories from one report per task of `stream`.
pub fn forgetting_breakdown(reports: &[EvalReport], stream: &TaskStream) -> Result<CohortTable> {
    forgetting_by_cohort(reports, &stream.cohorts())
}

pub fn forgetting_by_cohort(
    reports: &[EvalReport],
    cohorts: &[BTreeSet<SpeciesId>],
) -> Result<CohortTable> {
    if reports.len() != cohorts.len() {
        return Err(Error::Validation(format!(
            "{} reports for {} tasks",
            reports.len(),
            cohorts.len()
        )));
    }
    if reports.len() < 2 {
        return Err(Error::Validation(
            "forgetting needs at least two evaluated tasks".into(),
        ));
    }
    let rows: Vec<CohortRow> = cohorts
        .iter()
        .enumerate()
        .map(|(t, species)| {
            let trajectory: Vec<Option<f64>> = reports[t..]
                .iter()
                .map(|r| r.cohort_accuracy(species))
                .collect();
            let observed: Vec<f64> = trajectory.iter().flatten().copied().collect();
            let forgetting = match observed.last() {
                Some(&last) => observed.iter().copied().fold(f64::MIN, f64::max) - last,
                None => 0.0,
            };
            CohortRow {
                task: t + 1,
                species: species.iter().copied().collect(),
                trajectory,
                forgetting,
            }
        })
        .collect();
    let old = &rows[..rows.len() - 1];
    let mean_forgetting = old.iter().map(|r| r.forgetting).sum::<f64>() / old.len() as f64;
    Ok(CohortTable {
        rows,
        mean_forgetting,
    })
}

impl CohortTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:>8} {:>10}  trajectory", "cohort", "classes", "forgetting");
        for r in &self.rows {
            let traj: Vec<String> = r
                .trajectory
                .iter()
                .map(|v| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.1}")))
                .collect();
            let _ = writeln!(
                out,
                "{:<6} {:>8} {:>10.1}  {}",
                r.task,
                r.species.len(),
                r.forgetting,
                traj.join(" -> ")
            );
        }
        let _ = writeln!(out, "mean forgetting (old cohorts): {:.1}", self.mean_forgetting);
        out
    }
}
