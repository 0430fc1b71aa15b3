//! Forward path: embeddings, the item and scene transformer encoders, the
//! fusion MLPs that cross-feed the two branches, and the selectors whose
//! outputs are scored against candidate embeddings.
//!
//! ```text
//! h_S = f_S(scenes)          h_V = f_V(items)
//! z_S = g_S(h_S ++ h_V)      z_V = g_V(h_S ++ h_V)
//! o_S = r_S(z_S ++ z_V)      o_V = r_V(z_S ++ z_V)
//! ```
//!
//! Seen as a latent-variable model, `f`/`g` play the role of the two
//! posteriors over `z_V` and `z_S` (both conditioned on the full pair of
//! histories), `r` plus candidate scoring is the pair of likelihood terms, and
//! the discriminators owned here implement the prior-matching penalties. See
//! `docs/theory.md` and [`crate::theory`].

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{EncoderConfig, SelectorMode, Variant};

use crate::data::{LabeledExample, PAD};
use crate::error::{Error, Result};
use crate::numerics::{dropout, ParamId, ParamStore, Tape, Tensor, Var};
use crate::objectives;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Item,
    Scene,
}

#[derive(Debug, Clone)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

/// Affine layers with GELU between them and nothing after the last.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Affine>,
}

#[derive(Debug, Clone)]
struct Layer {
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln1: (ParamId, ParamId),
    ff1: Affine,
    ff2: Affine,
    ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Transformer {
    pos: ParamId,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
enum Selector {
    Shared {
        proj: Affine,
        head_s: Affine,
        head_v: Affine,
    },
    Separate {
        r_s: Mlp,
        r_v: Mlp,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    item_emb: ParamId,
    scene_emb: ParamId,
    item_enc: Transformer,
    scene_enc: Option<Transformer>,
    joint: Option<Affine>,
    fuse_s: Mlp,
    fuse_v: Mlp,
    select: Selector,
    disc_s: Mlp,
    disc_v: Mlp,
}

/// All learnable state of the model.
#[derive(Debug, Clone)]
pub struct DualModel {
    pub config: EncoderConfig,
    pub num_items: usize,
    pub num_scenes: usize,
    pub disc_hidden: Vec<usize>,
    pub store: ParamStore,
    layout: Layout,
    encoder_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    pub h_s: Var,
    pub h_v: Var,
    pub z_s: Var,
    pub z_v: Var,
    pub o_s: Var,
    pub o_v: Var,
}

/// Padded id vectors for a batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inputs {
    pub items: Vec<Vec<usize>>,
    pub scenes: Vec<Vec<usize>>,
    pub masks: Vec<Vec<u8>>,
}

impl Inputs {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a LabeledExample>) -> Self {
        let mut x = Inputs::default();
        for e in examples {
            x.items.push(e.item_ids.clone());
            x.scenes.push(e.scene_ids.clone());
            x.masks.push(e.mask.clone());
        }
        x
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    std: f64,
}

impl Builder<'_> {
    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add_normal(name, shape, self.std, self.seed)
    }

    /// Dense weights use Glorot scaling so that stacked layers without a
    /// normalization in between neither shrink nor blow up the signal.
    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Affine> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Ok(Affine {
            w: self
                .store
                .add_normal(&format!("{name}.w"), &[fan_in, fan_out], std, self.seed)?,
            b: self
                .store
                .add_constant(&format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    fn mlp(&mut self, name: &str, widths: &[usize]) -> Result<Mlp> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.affine(&format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    fn layer_norm(&mut self, name: &str, width: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.store
                .add_constant(&format!("{name}.gamma"), &[width], 1.0)?,
            self.store
                .add_constant(&format!("{name}.beta"), &[width], 0.0)?,
        ))
    }

    fn transformer(&mut self, name: &str, cfg: &EncoderConfig, d: usize) -> Result<Transformer> {
        let pos = self.normal(&format!("{name}.pos"), &[cfg.max_len, d])?;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("{name}.l{l}");
                Ok(Layer {
                    q: self.affine(&format!("{p}.q"), d, d)?,
                    k: self.affine(&format!("{p}.k"), d, d)?,
                    v: self.affine(&format!("{p}.v"), d, d)?,
                    o: self.affine(&format!("{p}.o"), d, d)?,
                    ln1: self.layer_norm(&format!("{p}.ln1"), d)?,
                    ff1: self.affine(&format!("{p}.ff1"), d, d * cfg.ff_mult)?,
                    ff2: self.affine(&format!("{p}.ff2"), d * cfg.ff_mult, d)?,
                    ln2: self.layer_norm(&format!("{p}.ln2"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Transformer { pos, layers })
    }
}

fn mlp_widths(input: usize, hidden: usize, output: usize, layers: usize) -> Vec<usize> {
    let mut w = vec![input];
    for _ in 1..layers {
        w.push(hidden);
    }
    w.push(output);
    w
}

impl DualModel {
    /// Builds a freshly initialized model. `num_items` and `num_scenes` are
    /// vocabulary sizes (unknown token included); tables get one extra row
    /// for id 0. Initialization depends only on `(seed, parameter name)`.
    pub fn new(
        config: &EncoderConfig,
        num_items: usize,
        num_scenes: usize,
        disc_hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if num_items == 0 || num_scenes == 0 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        let (dv, ds) = (config.item_dim, config.scene_dim);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            seed,
            std: config.init_std,
        };
        let item_emb = b.normal("item.emb", &[num_items + 1, dv])?;
        let scene_emb = b.normal("scene.emb", &[num_scenes + 1, ds])?;
        let item_enc = b.transformer("item", config, dv)?;
        let scene_enc = match config.variant {
            Variant::Dual => Some(b.transformer("scene", config, ds)?),
            _ => None,
        };
        let joint = match config.variant {
            Variant::OneToOne => Some(b.affine("joint", dv + ds, dv)?),
            _ => None,
        };
        let (in_s, in_v) = match (config.variant, config.fusion_concat) {
            (Variant::OneToOne, _) => (dv, dv),
            (_, true) => (ds + dv, ds + dv),
            (_, false) => (ds, dv),
        };
        let n = config.fusion_mlp_layers;
        let (fuse_s, fuse_v) = if n == 0 {
            (Mlp { layers: vec![] }, Mlp { layers: vec![] })
        } else {
            (
                b.mlp("fuse_s", &mlp_widths(in_s, in_s, ds, n))?,
                b.mlp("fuse_v", &mlp_widths(in_v, in_v, dv, n))?,
            )
        };
        let cat = ds + dv;
        let select = match config.selector_mode {
            SelectorMode::SharedLinear => Selector::Shared {
                proj: b.affine("select.shared", cat, cat)?,
                head_s: b.affine("select.s", cat, ds)?,
                head_v: b.affine("select.v", cat, dv)?,
            },
            SelectorMode::SeparateMlp => Selector::Separate {
                r_s: b.mlp("select_s", &[cat, cat, ds])?,
                r_v: b.mlp("select_v", &[cat, cat, dv])?,
            },
        };
        let widths = |input: usize| {
            let mut w = vec![input];
            w.extend_from_slice(disc_hidden);
            w.push(1);
            w
        };
        let disc_s = b.mlp("disc_s", &widths(ds))?;
        let disc_v = b.mlp("disc_v", &widths(dv))?;

        let disc_ids: Vec<ParamId> = disc_s
            .layers
            .iter()
            .chain(&disc_v.layers)
            .flat_map(|a| [a.w, a.b])
            .collect();
        let encoder_ids = store.ids().filter(|id| !disc_ids.contains(id)).collect();
        Ok(DualModel {
            config: config.clone(),
            num_items,
            num_scenes,
            disc_hidden: disc_hidden.to_vec(),
            store,
            layout: Layout {
                item_emb,
                scene_emb,
                item_enc,
                scene_enc,
                joint,
                fuse_s,
                fuse_v,
                select,
                disc_s,
                disc_v,
            },
            encoder_ids,
            disc_ids,
        })
    }

    /// Everything trained by the prediction objective.
    pub fn encoder_params(&self) -> &[ParamId] {
        &self.encoder_ids
    }

    /// Parameters of the two discriminators.
    pub fn discriminator_params(&self) -> &[ParamId] {
        &self.disc_ids
    }

    pub fn param(&self, name: &str) -> Option<ParamId> {
        self.store.by_name(name)
    }

    fn width(&self, branch: Branch) -> usize {
        match branch {
            Branch::Item => self.config.item_dim,
            Branch::Scene => self.config.scene_dim,
        }
    }

    fn embedding(&self, branch: Branch) -> ParamId {
        match branch {
            Branch::Item => self.layout.item_emb,
            Branch::Scene => self.layout.scene_emb,
        }
    }

    fn affine(&self, tape: &mut Tape, x: Var, a: &Affine, frozen: bool) -> Result<Var> {
        let (w, b) = if frozen {
            (
                tape.frozen_param(&self.store, a.w),
                tape.frozen_param(&self.store, a.b),
            )
        } else {
            (tape.param(&self.store, a.w), tape.param(&self.store, a.b))
        };
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn mlp(&self, tape: &mut Tape, mut x: Var, mlp: &Mlp, frozen: bool) -> Result<Var> {
        for (i, layer) in mlp.layers.iter().enumerate() {
            if i > 0 {
                x = tape.gelu(x);
            }
            x = self.affine(tape, x, layer, frozen)?;
        }
        Ok(x)
    }

    /// Token rows of the batch: real positions only, with segment bounds and
    /// the row of each sequence's last real position.
    fn token_layout(
        &self,
        masks: &[Vec<u8>],
    ) -> Result<(Vec<usize>, Vec<usize>, Vec<(usize, usize)>, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(masks.len());
        let mut last = Vec::with_capacity(masks.len());
        for (b, mask) in masks.iter().enumerate() {
            if mask.len() > self.config.max_len {
                return Err(Error::Contract(format!(
                    "sequence of length {} exceeds max_len {}",
                    mask.len(),
                    self.config.max_len
                )));
            }
            let start = positions.len();
            for (p, &m) in mask.iter().enumerate() {
                if m == 1 {
                    rows.push(b);
                    positions.push(p);
                }
            }
            let len = positions.len() - start;
            if len == 0 {
                return Err(Error::Contract(format!(
                    "sequence {b} has no real position"
                )));
            }
            segments.push((start, len));
            last.push(start + len - 1);
        }
        Ok((rows, positions, segments, last))
    }

    fn gather_tokens(
        ids: &[Vec<usize>],
        masks: &[Vec<u8>],
        table_rows: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (seq, mask) in ids.iter().zip(masks) {
            if seq.len() != mask.len() {
                return Err(Error::Contract("id and mask lengths differ".into()));
            }
            for (&id, &m) in seq.iter().zip(mask) {
                if m == 1 {
                    if id >= table_rows {
                        return Err(Error::Contract(format!(
                            "id {id} outside a table of {table_rows} rows"
                        )));
                    }
                    out.push(id);
                }
            }
        }
        Ok(out)
    }

    fn run_transformer(
        &self,
        tape: &mut Tape,
        enc: &Transformer,
        mut x: Var,
        positions: &[usize],
        segments: &[(usize, usize)],
        last: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let pos_table = tape.param(&self.store, enc.pos);
        let pos = tape.gather_rows(pos_table, positions)?;
        x = tape.add(x, pos)?;
        let rate = self.config.dropout;
        if let Some(r) = rng.as_deref_mut() {
            x = dropout(tape, x, rate, r)?;
        }
        for layer in &enc.layers {
            let q = self.affine(tape, x, &layer.q, false)?;
            let k = self.affine(tape, x, &layer.k, false)?;
            let v = self.affine(tape, x, &layer.v, false)?;
            let a = tape.segment_attention(
                q,
                k,
                v,
                segments,
                self.config.num_heads,
                self.config.causal,
            )?;
            let mut a = self.affine(tape, a, &layer.o, false)?;
            if let Some(r) = rng.as_deref_mut() {
                a = dropout(tape, a, rate, r)?;
            }
            let res = tape.add(x, a)?;
            let (g1, b1) = (
                tape.param(&self.store, layer.ln1.0),
                tape.param(&self.store, layer.ln1.1),
            );
            x = tape.layer_norm(res, g1, b1)?;
            let f = self.affine(tape, x, &layer.ff1, false)?;
            let f = tape.gelu(f);
            let mut f = self.affine(tape, f, &layer.ff2, false)?;
            if let Some(r) = rng.as_deref_mut() {
                f = dropout(tape, f, rate, r)?;
            }
            let res = tape.add(x, f)?;
            let (g2, b2) = (
                tape.param(&self.store, layer.ln2.0),
                tape.param(&self.store, layer.ln2.1),
            );
            x = tape.layer_norm(res, g2, b2)?;
        }
        tape.gather_rows(x, last)
    }

    /// Encodes one branch's padded id sequences into `[B x width]`, reading
    /// the output at each sequence's last real position. Padded positions
    /// never enter the computation.
    pub fn encode_branch(
        &self,
        tape: &mut Tape,
        ids: &[Vec<usize>],
        masks: &[Vec<u8>],
        branch: Branch,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let enc = match (branch, &self.layout.scene_enc) {
            (Branch::Item, _) => &self.layout.item_enc,
            (Branch::Scene, Some(e)) => e,
            (Branch::Scene, None) => {
                return Err(Error::Contract(format!(
                    "variant {:?} has no scene encoder",
                    self.config.variant
                )))
            }
        };
        let (_, positions, segments, last) = self.token_layout(masks)?;
        let table_rows = self.store.tensor(self.embedding(branch)).rows();
        let tokens = Self::gather_tokens(ids, masks, table_rows)?;
        let table = tape.param(&self.store, self.embedding(branch));
        let x = tape.gather_rows(table, &tokens)?;
        self.run_transformer(tape, enc, x, &positions, &segments, &last, rng)
    }

    /// Single encoder over `[item_emb ++ scene_emb]` projected to the item
    /// width, per position.
    pub fn encode_one_to_one(
        &self,
        tape: &mut Tape,
        items: &[Vec<usize>],
        scenes: &[Vec<usize>],
        masks: &[Vec<u8>],
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let joint = self.layout.joint.as_ref().ok_or_else(|| {
            Error::Contract("model was not built with the one-to-one variant".into())
        })?;
        if items.len() != scenes.len() || items.iter().zip(scenes).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Contract(
                "item and scene sequences differ in length".into(),
            ));
        }
        let (_, positions, segments, last) = self.token_layout(masks)?;
        let it = Self::gather_tokens(items, masks, self.num_items + 1)?;
        let sc = Self::gather_tokens(scenes, masks, self.num_scenes + 1)?;
        let ti = tape.param(&self.store, self.layout.item_emb);
        let ts = tape.param(&self.store, self.layout.scene_emb);
        let ei = tape.gather_rows(ti, &it)?;
        let es = tape.gather_rows(ts, &sc)?;
        let cat = tape.concat_cols(&[ei, es])?;
        let x = self.affine(tape, cat, joint, false)?;
        self.run_transformer(
            tape,
            &self.layout.item_enc,
            x,
            &positions,
            &segments,
            &last,
            rng,
        )
    }

    /// `(h_S, h_V)` for the configured variant.
    pub fn encode(
        &self,
        tape: &mut Tape,
        inputs: &Inputs,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Var)> {
        match self.config.variant {
            Variant::Dual => {
                let h_v = self.encode_branch(
                    tape,
                    &inputs.items,
                    &inputs.masks,
                    Branch::Item,
                    rng.as_deref_mut(),
                )?;
                let h_s =
                    self.encode_branch(tape, &inputs.scenes, &inputs.masks, Branch::Scene, rng)?;
                Ok((h_s, h_v))
            }
            Variant::ItemOnly => {
                let h_v =
                    self.encode_branch(tape, &inputs.items, &inputs.masks, Branch::Item, rng)?;
                let h_s = tape.constant(Tensor::zeros(&[inputs.len(), self.config.scene_dim]));
                Ok((h_s, h_v))
            }
            Variant::OneToOne => {
                let h = self.encode_one_to_one(
                    tape,
                    &inputs.items,
                    &inputs.scenes,
                    &inputs.masks,
                    rng,
                )?;
                Ok((h, h))
            }
        }
    }

    /// Sequence feature enhancement: `(z_S, z_V)`.
    pub fn fuse(&self, tape: &mut Tape, h_s: Var, h_v: Var) -> Result<(Var, Var)> {
        if self.config.fusion_mlp_layers == 0 {
            return Ok((h_s, h_v));
        }
        let (u_s, u_v) = match (self.config.variant, self.config.fusion_concat) {
            (Variant::OneToOne, _) => (h_v, h_v),
            (_, true) => {
                let u = tape.concat_cols(&[h_s, h_v])?;
                (u, u)
            }
            (_, false) => (h_s, h_v),
        };
        let z_s = self.mlp(tape, u_s, &self.layout.fuse_s, false)?;
        let z_v = self.mlp(tape, u_v, &self.layout.fuse_v, false)?;
        Ok((z_s, z_v))
    }

    /// Feature selection: `(o_S, o_V)` from `z_S ++ z_V`.
    pub fn select(&self, tape: &mut Tape, z_s: Var, z_v: Var) -> Result<(Var, Var)> {
        let c = tape.concat_cols(&[z_s, z_v])?;
        match &self.layout.select {
            Selector::Shared {
                proj,
                head_s,
                head_v,
            } => {
                let p = self.affine(tape, c, proj, false)?;
                Ok((
                    self.affine(tape, p, head_s, false)?,
                    self.affine(tape, p, head_v, false)?,
                ))
            }
            Selector::Separate { r_s, r_v } => Ok((
                self.mlp(tape, c, r_s, false)?,
                self.mlp(tape, c, r_v, false)?,
            )),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        inputs: &Inputs,
        rng: Option<&mut Rng>,
    ) -> Result<ForwardOutputs> {
        let (h_s, h_v) = self.encode(tape, inputs, rng)?;
        let (z_s, z_v) = self.fuse(tape, h_s, h_v)?;
        let (o_s, o_v) = self.select(tape, z_s, z_v)?;
        Ok(ForwardOutputs {
            h_s,
            h_v,
            z_s,
            z_v,
            o_s,
            o_v,
        })
    }

    /// Probabilities `sigmoid(o_b . e_k)` for every candidate of every row,
    /// flattened in row order. Candidate embeddings come from the same tables
    /// as the inputs.
    pub fn score_candidates(
        &self,
        tape: &mut Tape,
        o: Var,
        candidates: &[&[usize]],
        branch: Branch,
    ) -> Result<Var> {
        let rows = self.store.tensor(self.embedding(branch)).rows();
        let mut ids = Vec::new();
        let mut owners = Vec::new();
        for (b, cands) in candidates.iter().enumerate() {
            for &c in cands.iter() {
                if c == PAD || c >= rows {
                    return Err(Error::Contract(format!("candidate id {c} is not scorable")));
                }
                ids.push(c);
                owners.push(b);
            }
        }
        let table = tape.param(&self.store, self.embedding(branch));
        let e = tape.gather_rows(table, &ids)?;
        objectives::score(tape, o, e, &owners)
    }

    /// `D(z)` as probabilities `[B x 1]`. With `frozen` the discriminator's
    /// parameters receive no gradient.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        z: Var,
        branch: Branch,
        frozen: bool,
    ) -> Result<Var> {
        if tape.shape(z).1 != self.width(branch) {
            return Err(Error::dim(
                "discriminate",
                &[tape.shape(z).1],
                &[self.width(branch)],
            ));
        }
        let d = match branch {
            Branch::Item => &self.layout.disc_v,
            Branch::Scene => &self.layout.disc_s,
        };
        let logit = self.mlp(tape, z, d, frozen)?;
        Ok(tape.sigmoid(logit))
    }
}

#[cfg(test)]
mod tests;
