use std::sync::Arc;

use rand::Rng as _;

use super::*;
use crate::data::{Split, Vocab, Vocabs};
use crate::encoder::EncoderConfig;

/// Puts the example's positives first.
struct Oracle;

impl Scorer for Oracle {
    fn score(
        &self,
        ex: &[&LabeledExample],
        cands: &[&[usize]],
        branch: Branch,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(ex
            .iter()
            .zip(cands)
            .map(|(e, c)| {
                let pos = match branch {
                    Branch::Item => e.item_positives(),
                    Branch::Scene => e.scene_positives(),
                };
                c.iter()
                    .map(|id| if pos.contains(id) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect())
    }
}

/// Uniform scores keyed by user, independent of batching.
struct Random(u64);

impl Scorer for Random {
    fn score(
        &self,
        ex: &[&LabeledExample],
        cands: &[&[usize]],
        _: Branch,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(ex
            .iter()
            .zip(cands)
            .map(|(e, c)| {
                let u: u64 = e.user[1..].parse().unwrap();
                let mut r = crate::rng::keyed(self.0, &[u]);
                c.iter().map(|_| r.random::<f64>()).collect()
            })
            .collect())
    }
}

/// Applies `2x + 1` to another scorer's outputs.
struct Affine<S>(S);

impl<S: Scorer> Scorer for Affine<S> {
    fn score(
        &self,
        ex: &[&LabeledExample],
        cands: &[&[usize]],
        b: Branch,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .0
            .score(ex, cands, b)?
            .into_iter()
            .map(|v| v.into_iter().map(|x| 2.0 * x + 1.0).collect())
            .collect())
    }
}

fn vocabs(items: usize, scenes: usize) -> Arc<Vocabs> {
    Arc::new(Vocabs {
        items: Vocab::from_tokens((0..items).map(|i| format!("i{i}")).collect()),
        scenes: Vocab::from_tokens((0..scenes).map(|i| format!("s{i}")).collect()),
    })
}

fn dataset(
    users: usize,
    items_per_user: usize,
    positives: usize,
    mode: LabelMode,
    seed: u64,
) -> Dataset {
    let mut r = crate::rng::from_seed(seed);
    let examples = (0..users)
        .map(|u| {
            let mut cands: Vec<usize> = (1..=items_per_user).collect();
            use rand::seq::SliceRandom;
            cands.shuffle(&mut r);
            let len = r.random_range(1..=4);
            let mut ids = vec![0; 4];
            let mut mask = vec![0u8; 4];
            for p in 4 - len..4 {
                ids[p] = r.random_range(1..=10);
                mask[p] = 1;
            }
            LabeledExample {
                user: format!("u{u}"),
                item_ids: ids.clone(),
                scene_ids: ids
                    .iter()
                    .map(|&i| if i == 0 { 0 } else { 1 + i % 3 })
                    .collect(),
                mask,
                item_labels: (0..items_per_user)
                    .map(|i| u8::from(i < positives))
                    .collect(),
                item_candidates: cands,
                scene_candidates: vec![2, 1, 3],
                scene_labels: vec![1, 0, 0],
                history_len: len + u % 5,
            }
        })
        .collect();
    Dataset {
        split: Split::Test,
        mode,
        max_len: 4,
        examples,
        vocabs: vocabs(items_per_user.max(10), 3),
    }
}

#[test]
fn oracle_scores_perfectly() {
    let d = dataset(20, 30, 1, LabelMode::Next, 1);
    let r = evaluate(&Oracle, &d, Task::NextItem, &EvalConfig::default()).unwrap();
    assert_eq!(r.recall(5), Some(1.0));
    assert_eq!(r.ndcg(10), Some(1.0));
    let s = evaluate(&Oracle, &d, Task::NextScene, &EvalConfig::default()).unwrap();
    assert_eq!(s.recall(5), Some(1.0));
    let p = dataset(20, 30, 4, LabelMode::Period, 2);
    let r = evaluate(&Oracle, &p, Task::PeriodItem, &EvalConfig::default()).unwrap();
    assert_eq!(r.recall(5), Some(1.0));
}

#[test]
fn random_scorer_is_binomial() {
    let n = 4000;
    let d = dataset(n, 100, 1, LabelMode::Next, 3);
    let r = evaluate(&Random(5), &d, Task::NextItem, &EvalConfig::default()).unwrap();
    let sigma = (0.05f64 * 0.95 / n as f64).sqrt();
    let got = r.recall(5).unwrap();
    assert!((got - 0.05).abs() < 3.0 * sigma, "{got}");
}

#[test]
fn mode_mismatch_is_contract_error() {
    let d = dataset(5, 10, 1, LabelMode::Next, 1);
    assert!(matches!(
        evaluate(&Oracle, &d, Task::PeriodItem, &EvalConfig::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn monotone_transform_keeps_metrics() {
    let d = dataset(50, 20, 2, LabelMode::Next, 4);
    let cfg = EvalConfig::default();
    let a = evaluate(&Random(1), &d, Task::NextItem, &cfg).unwrap();
    let b = evaluate(&Affine(Random(1)), &d, Task::NextItem, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn worker_count_does_not_matter() {
    let d = dataset(37, 20, 2, LabelMode::Next, 6);
    let one = evaluate(&Random(2), &d, Task::NextItem, &EvalConfig::default()).unwrap();
    for workers in [2, 3, 8] {
        let cfg = EvalConfig {
            workers,
            batch_size: 5,
            ..EvalConfig::default()
        };
        assert_eq!(evaluate(&Random(2), &d, Task::NextItem, &cfg).unwrap(), one);
    }
}

#[test]
fn groups_cover_users() {
    let d = dataset(40, 10, 1, LabelMode::Next, 7);
    let r = evaluate(&Random(3), &d, Task::NextItem, &EvalConfig::default()).unwrap();
    assert_eq!(r.groups.values().map(|g| g.users).sum::<usize>(), 40);
    for m in r
        .metrics
        .iter()
        .chain(r.groups.values().flat_map(|g| &g.metrics))
    {
        assert!((0.0..=1.0).contains(&m.recall) && (0.0..=1.0).contains(&m.ndcg));
    }
}

#[test]
fn tercile_examples() {
    let g = group_lengths(&(1..=9).collect::<Vec<_>>()).unwrap();
    assert_eq!((g.low.len(), g.medium.len(), g.high.len()), (3, 3, 3));
    let g = group_lengths(&[4; 7]).unwrap();
    assert_eq!((g.low.len(), g.medium.len(), g.high.len()), (7, 0, 0));
    let g = group_lengths(&[1, 1, 2, 2, 3, 3]).unwrap();
    assert_eq!(g.low, vec![0, 1]);
    assert_eq!(g.medium, vec![2, 3]);
    assert_eq!(g.high, vec![4, 5]);
    let g = group_lengths(&[3, 1, 2, 1, 3, 2, 2]).unwrap();
    assert_eq!(g, group_lengths(&[3, 1, 2, 1, 3, 2, 2]).unwrap());
    assert_eq!(
        (g.low, g.medium, g.high),
        (vec![1, 2, 3, 5, 6], vec![], vec![0, 4])
    );
    assert!(group_lengths(&[1, 2]).is_err());
}

#[test]
fn export_lines_and_width() {
    let cfg = EncoderConfig {
        item_dim: 4,
        scene_dim: 2,
        num_heads: 1,
        max_len: 4,
        ..EncoderConfig::default()
    };
    let d = dataset(3, 8, 1, LabelMode::Next, 8);
    let m = DualModel::new(&cfg, d.num_items(), d.num_scenes(), &[4], 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    export_representations(&m, &d, &a).unwrap();
    export_representations(&m, &d, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        assert_eq!(l["z"].as_array().unwrap().len(), 6);
        assert!(["low", "medium", "high"].contains(&l["group"].as_str().unwrap()));
    }
}
