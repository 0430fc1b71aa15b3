//! The run configuration: one flat TOML document. Every key is optional and
//! falls back to the default shown in the README; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dualseq::data::{LabelConfig, Negatives, SplitConfig};
use dualseq::encoder::{EncoderConfig, SelectorMode, Variant};
use dualseq::evaluation::{EvalConfig, RecallDenominator, Task};
use dualseq::objectives::{AprConfig, AugmentKind, CcrConfig, GeneratorLoss, PriorKind};
use dualseq::synth::SynthSpec;
use dualseq::training::{GridSet, TrainConfig};
use dualseq::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Shared by generation, splitting, initialization and training.
    pub seed: u64,

    // paths
    /// Interaction log read by train, evaluate and ablate.
    pub data_path: Option<PathBuf>,
    pub out_dir: PathBuf,

    // synthetic generator
    pub num_users: usize,
    pub num_items: usize,
    pub num_scenes: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub interplay: f64,
    pub misalignment_rate: f64,
    pub well_separated: bool,
    pub start_offset_max: u64,
    pub scene_transition: Option<Vec<Vec<f64>>>,

    // split and labels
    pub split_ts: u64,
    pub min_hist: usize,
    pub min_future: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Sampled item negatives per example; 0 uses the whole vocabulary.
    pub item_negatives: usize,
    /// Sampled scene negatives per example; 0 uses the whole vocabulary.
    pub scene_negatives: usize,

    // encoder
    pub item_dim: usize,
    pub scene_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_mult: usize,
    pub fusion_mlp_layers: usize,
    pub fusion_concat: bool,
    pub selector_mode: SelectorMode,
    pub max_len: usize,
    pub variant: Variant,
    pub causal: bool,
    pub dropout: f64,
    pub init_std: f64,

    // training
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub disc_steps_per_gen_step: usize,
    pub enable_apr: bool,
    pub enable_ccr: bool,
    pub resample_negatives: bool,
    pub val_k: usize,
    pub val_full_vocabulary: bool,

    // contrastive regularizer
    pub tau_plus: f64,
    pub tau_minus: f64,
    pub num_positives: usize,
    pub mask_ratio: f64,
    pub augmentations: Vec<AugmentKind>,

    // adversarial prior regularizer
    pub prior: PriorKind,
    pub disc_hidden: Vec<usize>,
    pub generator_loss: GeneratorLoss,

    // evaluation
    pub task: Task,
    pub ks: Vec<usize>,
    pub recall_denominator: RecallDenominator,
    pub full_vocabulary: bool,
    pub eval_batch_size: usize,
    pub workers: usize,

    // ablation
    pub grid: GridSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let enc = EncoderConfig::default();
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        RunConfig {
            seed: train.seed,
            data_path: None,
            out_dir: PathBuf::from("out"),
            num_users: synth.num_users,
            num_items: synth.num_items,
            num_scenes: synth.num_scenes,
            seq_len_min: synth.seq_len_min,
            seq_len_max: synth.seq_len_max,
            interplay: synth.interplay,
            misalignment_rate: synth.misalignment_rate,
            well_separated: synth.well_separated,
            start_offset_max: synth.start_offset_max,
            scene_transition: None,
            split_ts: 14,
            min_hist: 1,
            min_future: 1,
            val_fraction: 0.1,
            test_fraction: 0.1,
            item_negatives: 100,
            scene_negatives: 0,
            item_dim: enc.item_dim,
            scene_dim: enc.scene_dim,
            num_layers: enc.num_layers,
            num_heads: enc.num_heads,
            ff_mult: enc.ff_mult,
            fusion_mlp_layers: enc.fusion_mlp_layers,
            fusion_concat: enc.fusion_concat,
            selector_mode: enc.selector_mode,
            max_len: enc.max_len,
            variant: enc.variant,
            causal: enc.causal,
            dropout: enc.dropout,
            init_std: enc.init_std,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            lambda: train.lambda,
            alpha: train.alpha,
            beta: train.beta,
            disc_steps_per_gen_step: train.disc_steps_per_gen_step,
            enable_apr: train.enable_apr,
            enable_ccr: train.enable_ccr,
            resample_negatives: train.resample_negatives,
            val_k: train.val_k,
            val_full_vocabulary: train.val_full_vocabulary,
            tau_plus: train.ccr.tau_plus,
            tau_minus: train.ccr.tau_minus,
            num_positives: train.ccr.num_positives,
            mask_ratio: train.ccr.mask_ratio,
            augmentations: train.ccr.augmentations.clone(),
            prior: train.apr.prior,
            disc_hidden: train.apr.disc_hidden.clone(),
            generator_loss: train.apr.generator_loss,
            task: Task::NextItem,
            ks: eval.ks,
            recall_denominator: eval.recall_denominator,
            full_vocabulary: eval.full_vocabulary,
            eval_batch_size: eval.batch_size,
            workers: eval.workers,
            grid: GridSet::Core,
        }
    }
}

fn negatives(n: usize) -> Negatives {
    if n == 0 {
        Negatives::All
    } else {
        Negatives::Sample(n)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every section without running anything.
    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        self.encoder().validate()?;
        self.train().validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(
                "ks: cut-offs must be non-empty and positive".into(),
            ));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers: must be at least 1".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size: must be at least 1".into()));
        }
        Ok(())
    }

    /// The data path, which must name an existing file.
    pub fn require_data(&self) -> Result<&Path> {
        let p = self
            .data_path
            .as_deref()
            .ok_or_else(|| Error::Config("data_path: required by this command".into()))?;
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "data file not found"),
            ));
        }
        Ok(p)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_users: self.num_users,
            num_items: self.num_items,
            num_scenes: self.num_scenes,
            seq_len_min: self.seq_len_min,
            seq_len_max: self.seq_len_max,
            interplay: self.interplay,
            misalignment_rate: self.misalignment_rate,
            scene_transition: self.scene_transition.clone(),
            well_separated: self.well_separated,
            start_offset_max: self.start_offset_max,
            seed: self.seed,
        }
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            split_ts: self.split_ts,
            min_hist: self.min_hist,
            min_future: self.min_future,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }

    /// Label construction for the configured task.
    pub fn labels(&self) -> LabelConfig {
        LabelConfig {
            mode: self.task.label_mode(),
            item_negatives: negatives(self.item_negatives),
            scene_negatives: negatives(self.scene_negatives),
            max_len: self.max_len,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            item_dim: self.item_dim,
            scene_dim: self.scene_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_mult: self.ff_mult,
            fusion_mlp_layers: self.fusion_mlp_layers,
            fusion_concat: self.fusion_concat,
            selector_mode: self.selector_mode,
            max_len: self.max_len,
            variant: self.variant,
            causal: self.causal,
            dropout: self.dropout,
            init_std: self.init_std,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            disc_steps_per_gen_step: self.disc_steps_per_gen_step,
            enable_apr: self.enable_apr,
            enable_ccr: self.enable_ccr,
            resample_negatives: self.resample_negatives,
            val_k: self.val_k,
            val_full_vocabulary: self.val_full_vocabulary,
            ccr: CcrConfig {
                tau_plus: self.tau_plus,
                tau_minus: self.tau_minus,
                num_positives: self.num_positives,
                mask_ratio: self.mask_ratio,
                augmentations: self.augmentations.clone(),
            },
            apr: AprConfig {
                prior: self.prior,
                disc_hidden: self.disc_hidden.clone(),
                generator_loss: self.generator_loss,
            },
            ..TrainConfig::default()
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            ks: self.ks.clone(),
            recall_denominator: self.recall_denominator,
            full_vocabulary: self.full_vocabulary,
            batch_size: self.eval_batch_size,
            workers: self.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("num_userz = 3").unwrap_err().to_string();
        assert!(err.contains("num_userz"), "{err}");
    }

    #[test]
    fn typed_values() {
        let c = RunConfig::parse(
            "variant = \"one-to-one\"\nprior = \"laplace\"\nks = [1, 20]\ntask = \"next-scene\"\ngrid = \"all\"\n",
        )
        .unwrap();
        assert_eq!(c.variant, Variant::OneToOne);
        assert_eq!(c.prior, PriorKind::Laplace);
        assert_eq!(c.eval().ks, vec![1, 20]);
        assert_eq!(c.task, Task::NextScene);
        assert_eq!(c.grid, GridSet::All);
    }

    #[test]
    fn section_validation_runs_on_parse() {
        assert!(matches!(
            RunConfig::parse("num_heads = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("ks = []"), Err(Error::Config(_))));
    }
}
