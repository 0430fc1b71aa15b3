//! Interaction logs, temporal splitting, vocabularies and labeled examples.
//!
//! Id `0` is reserved in every id vector: it is the left-padding id and the
//! mask token used by the masking augmentation. Real vocabulary ids start at
//! `1`; the last id of each vocabulary is the shared unknown token.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub scene: String,
    pub ts: u64,
}

/// One user's events, split at a timestamp boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub user: String,
    pub history: Vec<Interaction>,
    pub future: Vec<Interaction>,
}

/// Reads newline-delimited JSON records with keys `user`, `item`, `scene`, `ts`.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            message: "record is not a JSON object".into(),
        })?;
        let text = |key: &str| -> Result<String> {
            match obj.get(key).and_then(Value::as_str) {
                Some(s) if !s.is_empty() => Ok(s.to_string()),
                _ => Err(Error::Schema {
                    line: line_no,
                    key: key.into(),
                }),
            }
        };
        let user = text("user")?;
        let item = text("item")?;
        let scene = text("scene")?;
        let ts = obj
            .get("ts")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Schema {
                line: line_no,
                key: "ts".into(),
            })?;
        out.push(Interaction {
            user,
            item,
            scene,
            ts,
        });
    }
    Ok(out)
}

pub fn write_interactions<W: Write>(mut w: W, interactions: &[Interaction]) -> std::io::Result<()> {
    for it in interactions {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups events per user (users in first-appearance order), orders each
/// user's events by `(ts, input position)` and splits at `split_ts`.
/// Users with fewer than `min_hist` history or `min_future` future events are
/// dropped.
pub fn build_sequences(
    interactions: &[Interaction],
    split_ts: u64,
    min_hist: usize,
    min_future: usize,
) -> Vec<BehaviorSequence> {
    let mut order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<&Interaction>> = HashMap::new();
    for it in interactions {
        per_user
            .entry(it.user.as_str())
            .or_insert_with(|| {
                order.push(it.user.as_str());
                Vec::new()
            })
            .push(it);
    }
    let mut out = Vec::new();
    for user in order {
        let mut events = per_user.remove(user).unwrap_or_default();
        // stable: equal timestamps keep input order
        events.sort_by_key(|e| e.ts);
        let (history, future): (Vec<_>, Vec<_>) = events.into_iter().partition(|e| e.ts < split_ts);
        if history.len() < min_hist.max(1) || future.len() < min_future.max(1) {
            continue;
        }
        out.push(BehaviorSequence {
            user: user.to_string(),
            history: history.into_iter().cloned().collect(),
            future: future.into_iter().cloned().collect(),
        });
    }
    out
}

/// String to contiguous id map. Ids run `1..=size`, where `size` is the
/// unknown-token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 1))
            .collect();
        Vocab { tokens, index }
    }

    fn observe(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.tokens.push(token.to_string());
            self.index.insert(token.to_string(), self.tokens.len());
        }
    }

    /// Number of non-pad ids, unknown token included.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn unk(&self) -> usize {
        self.size()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk())
    }

    /// Inverse lookup; `None` for the pad and unknown ids.
    pub fn token(&self, id: usize) -> Option<&str> {
        (id >= 1)
            .then(|| self.tokens.get(id - 1))
            .flatten()
            .map(String::as_str)
    }

    pub fn known(&self) -> usize {
        self.tokens.len()
    }

    /// Known tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabs {
    pub items: Vocab,
    pub scenes: Vocab,
}

/// Builds item and scene vocabularies in first-appearance order (history then
/// future of each sequence). Pass only training sequences.
pub fn build_vocabs(sequences: &[BehaviorSequence]) -> Vocabs {
    let mut items = Vocab::from_tokens(Vec::new());
    let mut scenes = Vocab::from_tokens(Vec::new());
    for seq in sequences {
        for e in seq.history.iter().chain(&seq.future) {
            items.observe(&e.item);
            scenes.observe(&e.scene);
        }
    }
    Vocabs { items, scenes }
}

/// Keeps the most recent `max_len` ids and left-pads with [`PAD`].
pub fn truncate_pad(ids: &[usize], max_len: usize) -> (Vec<usize>, Vec<u8>) {
    let keep = &ids[ids.len().saturating_sub(max_len)..];
    let pad = max_len - keep.len();
    let mut padded = vec![PAD; pad];
    padded.extend_from_slice(keep);
    let mut mask = vec![0u8; pad];
    mask.extend(std::iter::repeat_n(1u8, keep.len()));
    (padded, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Positives are the first future item and scene.
    Next,
    /// Positives are every distinct future item and scene.
    Period,
}

/// How many negatives to draw for a candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Negatives {
    Sample(usize),
    /// Every id of the vocabulary that is not a positive.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub mode: LabelMode,
    pub item_negatives: Negatives,
    pub scene_negatives: Negatives,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub user: String,
    pub item_ids: Vec<usize>,
    pub scene_ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub item_candidates: Vec<usize>,
    pub item_labels: Vec<u8>,
    pub scene_candidates: Vec<usize>,
    pub scene_labels: Vec<u8>,
    /// History length before truncation.
    pub history_len: usize,
}

impl LabeledExample {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn item_positives(&self) -> Vec<usize> {
        positives(&self.item_candidates, &self.item_labels)
    }

    pub fn scene_positives(&self) -> Vec<usize> {
        positives(&self.scene_candidates, &self.scene_labels)
    }

    /// Redraws negatives, keeping positives.
    pub fn resample_negatives<R: Rng>(
        &mut self,
        item_vocab: usize,
        scene_vocab: usize,
        item_neg: Negatives,
        scene_neg: Negatives,
        rng: &mut R,
    ) -> Result<()> {
        let (c, l) = candidates(&self.item_positives(), item_vocab, item_neg, rng)?;
        self.item_candidates = c;
        self.item_labels = l;
        let (c, l) = candidates(&self.scene_positives(), scene_vocab, scene_neg, rng)?;
        self.scene_candidates = c;
        self.scene_labels = l;
        Ok(())
    }
}

fn positives(cands: &[usize], labels: &[u8]) -> Vec<usize> {
    cands
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&c, _)| c)
        .collect()
}

/// Uniform negatives over `1..=vocab_size` excluding `exclude`, without
/// replacement. Errors when the vocabulary cannot supply `n` of them.
pub fn sample_negatives<R: Rng>(
    exclude: &[usize],
    vocab_size: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    let available = (1..=vocab_size).filter(|i| !excluded.contains(i)).count();
    if available < n {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} ids cannot supply {} positives plus {n} negatives",
            excluded.len()
        )));
    }
    if 2 * n > available {
        let mut pool: Vec<usize> = (1..=vocab_size).filter(|i| !excluded.contains(i)).collect();
        pool.shuffle(rng);
        pool.truncate(n);
        return Ok(pool);
    }
    let mut chosen = Vec::with_capacity(n);
    let mut seen = excluded;
    while chosen.len() < n {
        let c = rng.random_range(1..=vocab_size);
        if seen.insert(c) {
            chosen.push(c);
        }
    }
    Ok(chosen)
}

fn candidates<R: Rng>(
    pos: &[usize],
    vocab_size: usize,
    neg: Negatives,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<u8>)> {
    let negs = match neg {
        Negatives::Sample(n) => sample_negatives(pos, vocab_size, n, rng)?,
        Negatives::All => (1..=vocab_size).filter(|i| !pos.contains(i)).collect(),
    };
    let mut c = pos.to_vec();
    let mut l = vec![1u8; pos.len()];
    c.extend(&negs);
    l.extend(std::iter::repeat_n(0u8, negs.len()));
    Ok((c, l))
}

fn dedup_in_order(ids: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut seen = HashSet::new();
    ids.filter(|i| seen.insert(*i)).collect()
}

/// Builds the padded inputs and candidate/label vectors for one sequence.
pub fn make_labels<R: Rng>(
    seq: &BehaviorSequence,
    vocabs: &Vocabs,
    cfg: &LabelConfig,
    rng: &mut R,
) -> Result<LabeledExample> {
    if seq.history.is_empty() || seq.future.is_empty() {
        return Err(Error::Contract(format!(
            "user {} has an empty history or future",
            seq.user
        )));
    }
    if cfg.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let items: Vec<usize> = seq
        .history
        .iter()
        .map(|e| vocabs.items.id(&e.item))
        .collect();
    let scenes: Vec<usize> = seq
        .history
        .iter()
        .map(|e| vocabs.scenes.id(&e.scene))
        .collect();
    let (item_ids, mask) = truncate_pad(&items, cfg.max_len);
    let (scene_ids, _) = truncate_pad(&scenes, cfg.max_len);

    let (pos_items, pos_scenes) = match cfg.mode {
        LabelMode::Next => (
            vec![vocabs.items.id(&seq.future[0].item)],
            vec![vocabs.scenes.id(&seq.future[0].scene)],
        ),
        LabelMode::Period => (
            dedup_in_order(seq.future.iter().map(|e| vocabs.items.id(&e.item))),
            dedup_in_order(seq.future.iter().map(|e| vocabs.scenes.id(&e.scene))),
        ),
    };
    let (item_candidates, item_labels) =
        candidates(&pos_items, vocabs.items.size(), cfg.item_negatives, rng)?;
    let (scene_candidates, scene_labels) =
        candidates(&pos_scenes, vocabs.scenes.size(), cfg.scene_negatives, rng)?;
    Ok(LabeledExample {
        user: seq.user.clone(),
        item_ids,
        scene_ids,
        mask,
        item_candidates,
        item_labels,
        scene_candidates,
        scene_labels,
        history_len: seq.history.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub mode: LabelMode,
    pub max_len: usize,
    pub examples: Vec<LabeledExample>,
    pub vocabs: Arc<Vocabs>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_items(&self) -> usize {
        self.vocabs.items.size()
    }

    pub fn num_scenes(&self) -> usize {
        self.vocabs.scenes.size()
    }
}

/// Sequences assigned to train/val/test plus the train-split vocabularies.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<BehaviorSequence>,
    pub val: Vec<BehaviorSequence>,
    pub test: Vec<BehaviorSequence>,
    pub vocabs: Arc<Vocabs>,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub split_ts: u64,
    pub min_hist: usize,
    pub min_future: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Prepared {
    /// Temporal split, seeded user shuffle into train/val/test, and
    /// vocabulary construction on the training users.
    pub fn new(interactions: &[Interaction], cfg: &SplitConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.val_fraction)
            || !(0.0..1.0).contains(&cfg.test_fraction)
            || cfg.val_fraction + cfg.test_fraction >= 1.0
        {
            return Err(Error::Config(
                "val_fraction + test_fraction must be in [0, 1)".into(),
            ));
        }
        let mut seqs = build_sequences(interactions, cfg.split_ts, cfg.min_hist, cfg.min_future);
        if seqs.is_empty() {
            return Err(Error::Config(
                "no user survives the history/future filter".into(),
            ));
        }
        let mut r = rng::keyed(cfg.seed, &[rng::tag::SPLIT]);
        seqs.shuffle(&mut r);
        let n = seqs.len();
        let n_val = (n as f64 * cfg.val_fraction).round() as usize;
        let n_test = (n as f64 * cfg.test_fraction).round() as usize;
        let test = seqs.split_off(n - n_test);
        let val = seqs.split_off(n - n_test - n_val);
        let train = seqs;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let vocabs = Arc::new(build_vocabs(&train));
        Ok(Prepared {
            train,
            val,
            test,
            vocabs,
            seed: cfg.seed,
        })
    }

    /// Every sequence goes to training; val and test are empty.
    pub fn train_only(seqs: Vec<BehaviorSequence>, seed: u64) -> Self {
        let vocabs = Arc::new(build_vocabs(&seqs));
        Prepared {
            train: seqs,
            val: Vec::new(),
            test: Vec::new(),
            vocabs,
            seed,
        }
    }

    /// Replaces the vocabularies, e.g. with those stored in a checkpoint.
    /// Tokens unknown to `vocabs` map to its unknown id.
    pub fn with_vocabs(mut self, vocabs: Vocabs) -> Self {
        self.vocabs = Arc::new(vocabs);
        self
    }

    pub fn sequences(&self, split: Split) -> &[BehaviorSequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Labeled dataset for one split. Negatives are drawn from a stream keyed
    /// by (seed, split, mode, example index), so the result is reproducible.
    pub fn dataset(&self, split: Split, cfg: &LabelConfig) -> Result<Dataset> {
        let mode_tag = match cfg.mode {
            LabelMode::Next => 0,
            LabelMode::Period => 1,
        };
        let examples = self
            .sequences(split)
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng::keyed(
                    self.seed,
                    &[rng::tag::LABELS, split.tag(), mode_tag, i as u64],
                );
                make_labels(s, &self.vocabs, cfg, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            split,
            mode: cfg.mode,
            max_len: cfg.max_len,
            examples,
            vocabs: Arc::clone(&self.vocabs),
        })
    }
}
