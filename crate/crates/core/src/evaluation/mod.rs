//! Ranking metrics, the next-item / period-item / next-scene protocols,
//! user-length stratification and representation export.

mod metrics;

pub use metrics::{ndcg_at_k, rank_candidates, recall_at_k, RecallDenominator};

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMode, LabeledExample};
use crate::encoder::{Branch, DualModel, Inputs};
use crate::error::{Error, Result};
use crate::numerics::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    NextItem,
    PeriodItem,
    NextScene,
}

impl Task {
    pub fn branch(self) -> Branch {
        match self {
            Task::NextScene => Branch::Scene,
            _ => Branch::Item,
        }
    }

    pub fn label_mode(self) -> LabelMode {
        match self {
            Task::PeriodItem => LabelMode::Period,
            _ => LabelMode::Next,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::NextItem => "next-item",
            Task::PeriodItem => "period-item",
            Task::NextScene => "next-scene",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "next-item" => Ok(Task::NextItem),
            "period-item" => Ok(Task::PeriodItem),
            "next-scene" => Ok(Task::NextScene),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Anything that assigns a score to each candidate of an example.
pub trait Scorer: Sync {
    /// One score vector per example, aligned with `candidates[b]`.
    fn score(
        &self,
        examples: &[&LabeledExample],
        candidates: &[&[usize]],
        branch: Branch,
    ) -> Result<Vec<Vec<f64>>>;
}

impl Scorer for DualModel {
    fn score(
        &self,
        examples: &[&LabeledExample],
        candidates: &[&[usize]],
        branch: Branch,
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let f = self.forward(
            &mut tape,
            &Inputs::from_examples(examples.iter().copied()),
            None,
        )?;
        let o = match branch {
            Branch::Item => f.o_v,
            Branch::Scene => f.o_s,
        };
        let p = self.score_candidates(&mut tape, o, candidates, branch)?;
        let flat = tape.value(p).values();
        let mut out = Vec::with_capacity(candidates.len());
        let mut at = 0;
        for c in candidates {
            out.push(flat[at..at + c.len()].to_vec());
            at += c.len();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub recall_denominator: RecallDenominator,
    /// Rank every vocabulary id instead of the example's candidate set.
    pub full_vocabulary: bool,
    pub batch_size: usize,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10],
            recall_denominator: RecallDenominator::Relevant,
            full_vocabulary: false,
            batch_size: 256,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub users: usize,
    pub metrics: Vec<AtK>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub users: usize,
    pub metrics: Vec<AtK>,
    /// Keyed by `low`, `medium`, `high`.
    pub groups: BTreeMap<String, GroupMetrics>,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.ndcg)
    }
}

/// Per-user `(recall, ndcg)` at each k.
fn user_metrics(
    candidates: &[usize],
    scores: &[f64],
    relevant: &HashSet<usize>,
    cfg: &EvalConfig,
) -> Result<Vec<(f64, f64)>> {
    let ranked = rank_candidates(candidates, scores)?;
    cfg.ks
        .iter()
        .map(|&k| {
            Ok((
                recall_at_k(&ranked, relevant, k, cfg.recall_denominator)?,
                ndcg_at_k(&ranked, relevant, k)?,
            ))
        })
        .collect()
}

fn per_user<S: Scorer + ?Sized>(
    scorer: &S,
    examples: &[LabeledExample],
    task: Task,
    vocab_size: usize,
    cfg: &EvalConfig,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let all: Vec<usize> = (1..=vocab_size).collect();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&LabeledExample> = chunk.iter().collect();
        let cands: Vec<&[usize]> = chunk
            .iter()
            .map(|e| match (cfg.full_vocabulary, task.branch()) {
                (true, _) => all.as_slice(),
                (false, Branch::Item) => e.item_candidates.as_slice(),
                (false, Branch::Scene) => e.scene_candidates.as_slice(),
            })
            .collect();
        let scores = scorer.score(&refs, &cands, task.branch())?;
        for ((e, c), s) in chunk.iter().zip(&cands).zip(&scores) {
            let relevant: HashSet<usize> = match task.branch() {
                Branch::Item => e.item_positives(),
                Branch::Scene => e.scene_positives(),
            }
            .into_iter()
            .collect();
            out.push(user_metrics(c, s, &relevant, cfg)?);
        }
    }
    Ok(out)
}

fn average(cfg: &EvalConfig, rows: &[&Vec<(f64, f64)>]) -> Vec<AtK> {
    let n = rows.len().max(1) as f64;
    cfg.ks
        .iter()
        .enumerate()
        .map(|(i, &k)| AtK {
            k,
            recall: rows.iter().map(|r| r[i].0).sum::<f64>() / n,
            ndcg: rows.iter().map(|r| r[i].1).sum::<f64>() / n,
        })
        .collect()
}

/// Scores every example and averages the metrics uniformly over users.
/// Work is split across `cfg.workers` threads; the result does not depend on
/// the worker count.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    task: Task,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if dataset.mode != task.label_mode() {
        return Err(Error::Contract(format!(
            "task {} needs {:?} labels, dataset has {:?}",
            task.name(),
            task.label_mode(),
            dataset.mode
        )));
    }
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::Config("ks must be non-empty and positive".into()));
    }
    let vocab = match task.branch() {
        Branch::Item => dataset.num_items(),
        Branch::Scene => dataset.num_scenes(),
    };
    let workers = cfg.workers.max(1);
    let rows: Vec<Vec<(f64, f64)>> = if workers == 1 || dataset.len() < 2 {
        per_user(scorer, &dataset.examples, task, vocab, cfg)?
    } else {
        let chunk = dataset.len().div_ceil(workers);
        let parts: Vec<Result<Vec<Vec<(f64, f64)>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = dataset
                .examples
                .chunks(chunk)
                .map(|part| s.spawn(move || per_user(scorer, part, task, vocab, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut rows = Vec::with_capacity(dataset.len());
        for p in parts {
            rows.extend(p?);
        }
        rows
    };

    let all: Vec<&Vec<(f64, f64)>> = rows.iter().collect();
    let mut groups = BTreeMap::new();
    if dataset.len() >= 3 {
        let g = group_by_length(dataset)?;
        for (name, idx) in [("low", &g.low), ("medium", &g.medium), ("high", &g.high)] {
            let sel: Vec<&Vec<(f64, f64)>> = idx.iter().map(|&i| &rows[i]).collect();
            groups.insert(
                name.to_string(),
                GroupMetrics {
                    users: idx.len(),
                    metrics: average(cfg, &sel),
                },
            );
        }
    }
    Ok(MetricsReport {
        task,
        users: rows.len(),
        metrics: average(cfg, &all),
        groups,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LengthGroups {
    pub low: Vec<usize>,
    pub medium: Vec<usize>,
    pub high: Vec<usize>,
}

impl LengthGroups {
    pub fn group_of(&self, i: usize) -> &'static str {
        if self.low.contains(&i) {
            "low"
        } else if self.medium.contains(&i) {
            "medium"
        } else {
            "high"
        }
    }
}

/// Tercile split by history length. With sorted lengths `l`, the cut points
/// are `l[ceil(n/3) - 1]` and `l[ceil(2n/3) - 1]`; a user goes to the lowest
/// group whose cut point is at least its length.
pub fn group_by_length(dataset: &Dataset) -> Result<LengthGroups> {
    let lens: Vec<usize> = dataset.examples.iter().map(|e| e.history_len).collect();
    group_lengths(&lens)
}

pub fn group_lengths(lens: &[usize]) -> Result<LengthGroups> {
    let n = lens.len();
    if n < 3 {
        return Err(Error::Contract(format!(
            "length grouping needs at least 3 users, got {n}"
        )));
    }
    let mut sorted = lens.to_vec();
    sorted.sort_unstable();
    let t1 = sorted[n.div_ceil(3) - 1];
    let t2 = sorted[(2 * n).div_ceil(3) - 1];
    let mut g = LengthGroups::default();
    for (i, &l) in lens.iter().enumerate() {
        if l <= t1 {
            g.low.push(i);
        } else if l <= t2 {
            g.medium.push(i);
        } else {
            g.high.push(i);
        }
    }
    Ok(g)
}

#[derive(Serialize)]
struct ExportLine<'a> {
    user: &'a str,
    group: &'a str,
    z: Vec<f64>,
}

/// Writes one JSON line per user: `{user, group, z}` with `z = z_S ++ z_V`.
pub fn export_representations(model: &DualModel, dataset: &Dataset, path: &Path) -> Result<()> {
    let groups = if dataset.len() >= 3 {
        Some(group_by_length(dataset)?)
    } else {
        None
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut row = 0;
    for chunk in dataset.examples.chunks(256) {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &Inputs::from_examples(chunk), None)?;
        let z = tape.concat_cols(&[f.z_s, f.z_v])?;
        let z = tape.value(z);
        for (b, e) in chunk.iter().enumerate() {
            let line = ExportLine {
                user: &e.user,
                group: groups.as_ref().map_or("all", |g| g.group_of(row)),
                z: z.row(b).to_vec(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            row += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
