//! Small reproducible synthetic setups shared by tests and examples.

use crate::data::{LabelConfig, LabelMode, Negatives, Prepared, SplitConfig};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::synth::{generate, SynthSpec};

/// Encoder sized for single-core runs over sequences of at most 20 events.
pub fn desk_encoder() -> EncoderConfig {
    EncoderConfig {
        item_dim: 16,
        scene_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ff_mult: 2,
        max_len: 20,
        ..EncoderConfig::default()
    }
}

/// 64 users over 40 items and 4 scenes. Split at timestamp 7 every user
/// keeps 1 to 7 history events and at least one future event.
pub fn fixture_a_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_users: 64,
        num_items: 40,
        num_scenes: 4,
        seq_len_min: 8,
        seq_len_max: 12,
        seed,
        ..SynthSpec::default()
    }
}

pub fn split_config(split_ts: u64, seed: u64) -> SplitConfig {
    SplitConfig {
        split_ts,
        min_hist: 1,
        min_future: 1,
        val_fraction: 0.1,
        test_fraction: 0.1,
        seed,
    }
}

pub fn labels(mode: LabelMode, item_negatives: usize, max_len: usize) -> LabelConfig {
    LabelConfig {
        mode,
        item_negatives: Negatives::Sample(item_negatives),
        scene_negatives: Negatives::All,
        max_len,
    }
}

/// Generates `spec` and splits it at `split_ts`, every user into training.
pub fn train_only(spec: &SynthSpec, split_ts: u64) -> Result<Prepared> {
    let (log, _) = generate(spec)?;
    let seqs = crate::data::build_sequences(&log, split_ts, 1, 1);
    Ok(Prepared::train_only(seqs, spec.seed))
}

/// Generates `spec` and splits users 8/1/1 after the temporal split.
pub fn prepared(spec: &SynthSpec, split_ts: u64) -> Result<Prepared> {
    let (log, _) = generate(spec)?;
    Prepared::new(&log, &split_config(split_ts, spec.seed))
}
