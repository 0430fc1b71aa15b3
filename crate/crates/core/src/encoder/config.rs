use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Separate item and scene encoders whose outputs cross-feed.
    Dual,
    /// One encoder over per-position concatenated item and scene embeddings.
    OneToOne,
    /// Item encoder only; the scene representation is a zero vector.
    ItemOnly,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Variant::Dual),
            "one-to-one" => Ok(Variant::OneToOne),
            "item-only" => Ok(Variant::ItemOnly),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorMode {
    /// One shared linear projection followed by a linear head per branch.
    SharedLinear,
    /// An independent two-layer MLP per branch.
    SeparateMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub item_dim: usize,
    pub scene_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Feed-forward hidden width as a multiple of the branch width.
    pub ff_mult: usize,
    /// Affine layers in each fusion MLP; 0 passes the branch's own `h` through.
    pub fusion_mlp_layers: usize,
    /// When false each fusion MLP sees only its own branch.
    pub fusion_concat: bool,
    pub selector_mode: SelectorMode,
    pub max_len: usize,
    pub variant: Variant,
    pub causal: bool,
    pub dropout: f64,
    /// Standard deviation of embedding and position tables.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            item_dim: 16,
            scene_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ff_mult: 2,
            fusion_mlp_layers: 2,
            fusion_concat: true,
            selector_mode: SelectorMode::SharedLinear,
            max_len: 50,
            variant: Variant::Dual,
            causal: false,
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.item_dim == 0 || self.scene_dim == 0 {
            return bad("item_dim and scene_dim must be positive".into());
        }
        if self.num_heads == 0 || self.item_dim % self.num_heads != 0 {
            return bad(format!(
                "item_dim {} not divisible by num_heads {}",
                self.item_dim, self.num_heads
            ));
        }
        if self.variant == Variant::Dual && self.scene_dim % self.num_heads != 0 {
            return bad(format!(
                "scene_dim {} not divisible by num_heads {}",
                self.scene_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be at least 1".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.variant == Variant::OneToOne && self.fusion_mlp_layers == 0 {
            return bad("the one-to-one variant needs fusion_mlp_layers >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}
