//! Synthetic scene/item logs with a known generating process.
//!
//! Each user walks a Markov chain over scenes. At every step the item comes
//! from the current scene's item distribution with probability `interplay`,
//! otherwise from a global distribution. Afterwards each event's logged scene
//! may be overwritten by the scene of a later event of the same user
//! (delayed conversion), which leaves items and timestamps untouched.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_scenes: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Probability that an item is drawn from its scene's distribution.
    pub interplay: f64,
    /// Probability that an event's logged scene is replaced by a later one.
    pub misalignment_rate: f64,
    /// Row-stochastic `num_scenes x num_scenes`; generated from the seed when absent.
    pub scene_transition: Option<Vec<Vec<f64>>>,
    /// Scene item distributions live on disjoint item blocks.
    pub well_separated: bool,
    /// First timestamp of each user is uniform in `0..=start_offset_max`.
    pub start_offset_max: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_users: 2000,
            num_items: 200,
            num_scenes: 8,
            seq_len_min: 12,
            seq_len_max: 24,
            interplay: 1.0,
            misalignment_rate: 0.2,
            scene_transition: None,
            well_separated: true,
            start_offset_max: 6,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("{k}: {why}")));
        if self.num_users == 0 {
            return bad("num_users", "must be positive");
        }
        if self.num_items == 0 {
            return bad("num_items", "must be positive");
        }
        if self.num_scenes == 0 {
            return bad("num_scenes", "must be positive");
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad("seq_len_min", "need 1 <= seq_len_min <= seq_len_max");
        }
        if !(0.0..=1.0).contains(&self.interplay) {
            return bad("interplay", "must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.misalignment_rate) {
            return bad("misalignment_rate", "must be in [0, 1]");
        }
        if self.well_separated && self.num_items < self.num_scenes {
            return bad(
                "num_items",
                "well-separated mode needs at least one item per scene",
            );
        }
        if let Some(m) = &self.scene_transition {
            if m.len() != self.num_scenes || m.iter().any(|r| r.len() != self.num_scenes) {
                return bad("scene_transition", "must be num_scenes x num_scenes");
            }
            for row in m {
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p))
                    || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return bad("scene_transition", "rows must be probability vectors");
                }
            }
        }
        Ok(())
    }
}

/// The distributions the logs were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_items: Vec<Vec<f64>>,
    pub global_items: Vec<f64>,
    pub scene_transition: Vec<Vec<f64>>,
    pub spec: SynthSpec,
}

/// Stream index reserved for the ground-truth distributions.
const TRUTH_STREAM: u64 = u64::MAX;

fn dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        v = vec![1.0 / n as f64; n];
    }
    v
}

fn categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the running sum; take the last nonzero entry
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Item range `[lo, hi)` owned by scene `s` in well-separated mode.
pub fn scene_block(s: usize, num_scenes: usize, num_items: usize) -> (usize, usize) {
    (s * num_items / num_scenes, (s + 1) * num_items / num_scenes)
}

fn ground_truth(spec: &SynthSpec) -> GroundTruth {
    let mut r = rng::keyed(spec.seed, &[TRUTH_STREAM]);
    let (ns, ni) = (spec.num_scenes, spec.num_items);
    let scene_items = (0..ns)
        .map(|s| {
            if spec.well_separated {
                let (lo, hi) = scene_block(s, ns, ni);
                let block = dirichlet(0.1, hi - lo, &mut r);
                let mut row = vec![0.0; ni];
                row[lo..hi].copy_from_slice(&block);
                row
            } else {
                dirichlet(0.1, ni, &mut r)
            }
        })
        .collect();
    let global_items = dirichlet(1.0, ni, &mut r);
    let scene_transition = spec.scene_transition.clone().unwrap_or_else(|| {
        (0..ns)
            .map(|_| {
                let d = dirichlet(0.3, ns, &mut r);
                d.iter().map(|p| 0.1 / ns as f64 + 0.9 * p).collect()
            })
            .collect()
    });
    GroundTruth {
        scene_items,
        global_items,
        scene_transition,
        spec: spec.clone(),
    }
}

/// Generates the event log, users in index order, each user's events in
/// timestamp order.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Interaction>, GroundTruth)> {
    spec.validate()?;
    let truth = ground_truth(spec);
    let mut out = Vec::new();
    for u in 0..spec.num_users {
        let mut r = rng::keyed(spec.seed, &[u as u64]);
        let len = r.random_range(spec.seq_len_min..=spec.seq_len_max);
        let start = r.random_range(0..=spec.start_offset_max);
        let mut scenes = Vec::with_capacity(len);
        let mut items = Vec::with_capacity(len);
        let mut scene = r.random_range(0..spec.num_scenes);
        for step in 0..len {
            if step > 0 {
                scene = categorical(&truth.scene_transition[scene], &mut r);
            }
            let dist = if r.random::<f64>() < spec.interplay {
                &truth.scene_items[scene]
            } else {
                &truth.global_items
            };
            scenes.push(scene);
            items.push(categorical(dist, &mut r));
        }
        let mut logged = scenes.clone();
        for i in 0..len {
            if r.random::<f64>() < spec.misalignment_rate && i + 1 < len {
                let j = r.random_range(i + 1..len);
                logged[i] = scenes[j];
            }
        }
        for i in 0..len {
            out.push(Interaction {
                user: format!("u{u}"),
                item: format!("i{}", items[i]),
                scene: format!("s{}", logged[i]),
                ts: start + i as u64,
            });
        }
    }
    Ok((out, truth))
}

/// Plug-in estimate of the mutual information (nats) between logged scene and
/// item.
pub fn scene_item_mutual_information(events: &[Interaction]) -> f64 {
    let n = events.len() as f64;
    if events.is_empty() {
        return 0.0;
    }
    let mut joint: HashMap<(&str, &str), f64> = HashMap::new();
    let mut ps: HashMap<&str, f64> = HashMap::new();
    let mut pi: HashMap<&str, f64> = HashMap::new();
    for e in events {
        *joint
            .entry((e.scene.as_str(), e.item.as_str()))
            .or_default() += 1.0;
        *ps.entry(e.scene.as_str()).or_default() += 1.0;
        *pi.entry(e.item.as_str()).or_default() += 1.0;
    }
    let mut keys: Vec<_> = joint.keys().copied().collect();
    keys.sort_unstable();
    keys.iter()
        .map(|k| {
            let c = joint[k];
            c / n * (c * n / (ps[k.0] * pi[k.1])).ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_users: 50,
            num_items: 30,
            num_scenes: 3,
            seq_len_min: 5,
            seq_len_max: 9,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn truth_rows_are_stochastic() {
        let (_, t) = generate(&small()).unwrap();
        for row in t
            .scene_items
            .iter()
            .chain(&t.scene_transition)
            .chain([&t.global_items])
        {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_misalignment_keeps_generating_scene() {
        // in well-separated mode with interplay 1 the item reveals its scene
        let spec = SynthSpec {
            misalignment_rate: 0.0,
            ..small()
        };
        let (log, _) = generate(&spec).unwrap();
        for e in &log {
            let item: usize = e.item[1..].parse().unwrap();
            let scene: usize = e.scene[1..].parse().unwrap();
            let (lo, hi) = scene_block(scene, spec.num_scenes, spec.num_items);
            assert!((lo..hi).contains(&item));
        }
    }

    #[test]
    fn misalignment_only_touches_scenes() {
        let a = generate(&SynthSpec {
            misalignment_rate: 0.0,
            ..small()
        })
        .unwrap()
        .0;
        let b = generate(&SynthSpec {
            misalignment_rate: 0.9,
            ..small()
        })
        .unwrap()
        .0;
        assert_eq!(a.len(), b.len());
        let mut changed = 0;
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((&x.user, &x.item, x.ts), (&y.user, &y.item, y.ts));
            changed += usize::from(x.scene != y.scene);
        }
        assert!(changed > 0);
    }

    #[test]
    fn deterministic_from_seed() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthSpec { seed: 8, ..small() };
        assert_ne!(generate(&small()).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SynthSpec {
            interplay: 1.5,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            num_users: 0,
            ..small()
        })
        .is_err());
        let bad_rows = SynthSpec {
            scene_transition: Some(vec![vec![0.5, 0.4, 0.0]; 3]),
            ..small()
        };
        assert!(generate(&bad_rows).is_err());
    }
}
