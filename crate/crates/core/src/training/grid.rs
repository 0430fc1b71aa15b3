use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainReport};
use crate::data::Dataset;
use crate::encoder::{EncoderConfig, Variant};
use crate::error::Result;
use crate::evaluation::{evaluate, EvalConfig, MetricsReport, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridVariant {
    Full,
    NoApr,
    NoCcr,
    NoAprCcr,
    OneToOne,
    NoConcat,
    NoMlp,
    Mlp1,
    Mlp2,
    Mlp3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridSet {
    /// Regularizer and encoder ablations.
    Core,
    /// Core plus the fusion ablations and the MLP-depth sweep.
    All,
}

impl std::str::FromStr for GridSet {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "core" => Ok(GridSet::Core),
            "all" => Ok(GridSet::All),
            other => Err(crate::Error::Config(format!("unknown grid {other:?}"))),
        }
    }
}

impl GridSet {
    pub fn variants(self) -> Vec<GridVariant> {
        use GridVariant::*;
        let mut v = vec![Full, NoApr, NoCcr, NoAprCcr, OneToOne];
        if self == GridSet::All {
            v.extend([NoConcat, NoMlp, Mlp1, Mlp2, Mlp3]);
        }
        v
    }
}

impl GridVariant {
    pub fn name(self) -> &'static str {
        match self {
            GridVariant::Full => "full",
            GridVariant::NoApr => "no-apr",
            GridVariant::NoCcr => "no-ccr",
            GridVariant::NoAprCcr => "no-apr-ccr",
            GridVariant::OneToOne => "one-to-one",
            GridVariant::NoConcat => "no-concat",
            GridVariant::NoMlp => "no-mlp",
            GridVariant::Mlp1 => "mlp-1",
            GridVariant::Mlp2 => "mlp-2",
            GridVariant::Mlp3 => "mlp-3",
        }
    }

    /// Applies the ablation on top of the base configs.
    pub fn configure(self, enc: &EncoderConfig, cfg: &TrainConfig) -> (EncoderConfig, TrainConfig) {
        let (mut e, mut t) = (enc.clone(), cfg.clone());
        match self {
            GridVariant::Full => {}
            GridVariant::NoApr => t.enable_apr = false,
            GridVariant::NoCcr => t.enable_ccr = false,
            GridVariant::NoAprCcr => {
                t.enable_apr = false;
                t.enable_ccr = false;
            }
            GridVariant::OneToOne => {
                e.variant = Variant::OneToOne;
                e.fusion_mlp_layers = e.fusion_mlp_layers.max(1);
            }
            GridVariant::NoConcat => e.fusion_concat = false,
            GridVariant::NoMlp => e.fusion_mlp_layers = 0,
            GridVariant::Mlp1 => e.fusion_mlp_layers = 1,
            GridVariant::Mlp2 => e.fusion_mlp_layers = 2,
            GridVariant::Mlp3 => e.fusion_mlp_layers = 3,
        }
        (e, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: GridVariant,
    pub metrics: MetricsReport,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub task: Task,
    pub rows: Vec<AblationRow>,
}

/// Trains every variant of `set` with the same seed and data, scoring each
/// on `test` for `task`.
pub fn run_ablation_grid(
    train_set: &Dataset,
    val: Option<&Dataset>,
    test: &Dataset,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    task: Task,
    set: GridSet,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for variant in set.variants() {
        let (e, t) = variant.configure(enc, cfg);
        let (model, report) = train(train_set, val, &e, &t)?;
        let metrics = evaluate(&model, test, task, eval)?;
        rows.push(AblationRow {
            variant,
            metrics,
            report,
        });
    }
    Ok(AblationTable {
        seed: cfg.seed,
        task,
        rows,
    })
}
