//! Loss terms: per-branch candidate BCE, the conditional contrastive
//! regularizer, adversarial prior matching, and their weighted total.

mod augment;
mod prior;

pub use augment::{augment, augment_mask, augment_reorder, mask_count, AugmentKind};
pub use prior::{sample_prior, PriorKind};

use serde::{Deserialize, Serialize};

use crate::encoder::{Branch, DualModel};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcrConfig {
    pub tau_plus: f64,
    pub tau_minus: f64,
    pub num_positives: usize,
    pub mask_ratio: f64,
    /// Augmentations cycled over the positive views, in order.
    pub augmentations: Vec<AugmentKind>,
}

impl Default for CcrConfig {
    fn default() -> Self {
        CcrConfig {
            tau_plus: 1.0,
            tau_minus: 0.07,
            num_positives: 2,
            mask_ratio: 0.2,
            augmentations: vec![AugmentKind::Mask, AugmentKind::Reorder],
        }
    }
}

impl CcrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_plus > 0.0) || !(self.tau_minus > 0.0) {
            return Err(Error::Parameter("CCR temperatures must be positive".into()));
        }
        if self.num_positives == 0 {
            return Err(Error::Config("num_positives must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} must be in [0, 1)",
                self.mask_ratio
            )));
        }
        if self.augmentations.is_empty() {
            return Err(Error::Config(
                "at least one augmentation must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Augmentation used for the `i`-th positive view.
    pub fn view_kind(&self, i: usize) -> AugmentKind {
        self.augmentations[i % self.augmentations.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// `E[ln(1 - D(z))]`, the literal min-max form.
    Minimax,
    /// `-E[ln D(z)]`.
    NonSaturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprConfig {
    pub prior: PriorKind,
    pub disc_hidden: Vec<usize>,
    pub generator_loss: GeneratorLoss,
}

impl Default for AprConfig {
    fn default() -> Self {
        AprConfig {
            prior: PriorKind::StandardGaussian,
            disc_hidden: vec![16],
            generator_loss: GeneratorLoss::NonSaturating,
        }
    }
}

/// `sigmoid(o_b . e_k)` for every candidate row `e_k`, where `owners[k]`
/// names the row `b` of `o` that candidate belongs to. Returns `[K x 1]`.
pub fn score(tape: &mut Tape, o: Var, candidates: Var, owners: &[usize]) -> Result<Var> {
    let (rows, width) = tape.shape(o);
    let (k, ew) = tape.shape(candidates);
    if ew != width {
        return Err(Error::Contract(format!(
            "representation width {width} does not match embedding width {ew}"
        )));
    }
    if owners.len() != k || owners.iter().any(|&b| b >= rows) {
        return Err(Error::Contract(
            "candidate owners do not match the batch".into(),
        ));
    }
    let o_rep = tape.gather_rows(o, owners)?;
    let prod = tape.mul(o_rep, candidates)?;
    let logits = tape.row_sum(prod);
    Ok(tape.sigmoid(logits))
}

/// Mean binary cross-entropy over `K` candidates.
pub fn dsl_loss(tape: &mut Tape, y_hat: Var, y: &[f64]) -> Result<Var> {
    let k = y.len();
    if k == 0 {
        return Err(Error::Contract(
            "dsl_loss needs at least one candidate".into(),
        ));
    }
    tape.bce(y_hat, y, &vec![1.0 / k as f64; k])
}

/// Mean over examples of each example's mean candidate BCE. `groups` holds
/// the candidate count of each example, in the order of `y`.
pub fn dsl_loss_grouped(tape: &mut Tape, y_hat: Var, y: &[f64], groups: &[usize]) -> Result<Var> {
    if groups.iter().sum::<usize>() != y.len() || groups.iter().any(|&g| g == 0) {
        return Err(Error::Contract(
            "candidate groups do not cover the labels".into(),
        ));
    }
    let b = groups.len() as f64;
    let weights: Vec<f64> = groups
        .iter()
        .flat_map(|&g| std::iter::repeat_n(1.0 / (g as f64 * b), g))
        .collect();
    tape.bce(y_hat, y, &weights)
}

/// Tape handles of one contrastive evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CcrTerms {
    pub loss: Var,
    pub positive: Var,
    pub negative: Var,
    /// `[1 x N+]`
    pub w_plus: Var,
    /// `[1 x N-]`
    pub w_minus: Var,
}

/// Weighted-similarity term `sum_i w_i s_i` with `w = softmax(sign * s)` over
/// the columns of `s` (`[R x N]`); returns `([R x 1], w)`.
fn weighted_similarity(
    tape: &mut Tape,
    s: Var,
    sign: f64,
    keep: Option<Vec<bool>>,
) -> Result<(Var, Var)> {
    let signed = tape.scale(s, sign);
    let w = match keep {
        Some(k) => tape.masked_softmax_rows(signed, 1.0, k)?,
        None => tape.softmax_rows(signed, 1.0)?,
    };
    let ws = tape.mul(w, s)?;
    Ok((tape.row_sum(ws), w))
}

/// Contrastive loss of one anchor `h` (`[1 x d]`) against positives
/// (`[N+ x d]`) and negatives (`[N- x d]`):
///
/// ```text
/// -sum_i w+_i s(h, h+_i)  +  sum_j w-_j s(h, h-_j)
/// w+ = softmax_i(-s(h, h+_i))    w- = softmax_j(s(h, h-_j))
/// s(a, b) = a.b / tau
/// ```
///
/// The weights are part of the differentiated graph.
pub fn ccr_loss(
    tape: &mut Tape,
    h: Var,
    positives: Var,
    negatives: Var,
    tau_plus: f64,
    tau_minus: f64,
) -> Result<CcrTerms> {
    if !(tau_plus > 0.0) || !(tau_minus > 0.0) {
        return Err(Error::Parameter("CCR temperatures must be positive".into()));
    }
    let (hr, d) = tape.shape(h);
    let (np, dp) = tape.shape(positives);
    let (nn, dn) = tape.shape(negatives);
    if hr != 1 {
        return Err(Error::Contract("ccr_loss takes a single anchor row".into()));
    }
    if np == 0 || nn == 0 {
        return Err(Error::Contract(
            "ccr_loss needs at least one positive and one negative".into(),
        ));
    }
    if dp != d || dn != d {
        return Err(Error::dim("ccr_loss", &[d], &[dp, dn]));
    }
    let pt = tape.transpose(positives);
    let sp = tape.matmul(h, pt)?;
    let sp = tape.scale(sp, 1.0 / tau_plus);
    let nt = tape.transpose(negatives);
    let sn = tape.matmul(h, nt)?;
    let sn = tape.scale(sn, 1.0 / tau_minus);
    let (pos, w_plus) = weighted_similarity(tape, sp, -1.0, None)?;
    let positive = tape.scale(pos, -1.0);
    let (negative, w_minus) = weighted_similarity(tape, sn, 1.0, None)?;
    let positive = tape.sum(positive);
    let negative = tape.sum(negative);
    let loss = tape.add(positive, negative)?;
    Ok(CcrTerms {
        loss,
        positive,
        negative,
        w_plus,
        w_minus,
    })
}

/// Batched contrastive loss averaged over anchors. `h` is `[B x d]`; each
/// entry of `views` is `[B x d]` and row `b` of every view is a positive for
/// anchor `b`. Negatives of anchor `b` are the other rows of `h`. Needs
/// `B >= 2`.
pub fn ccr_loss_batch(
    tape: &mut Tape,
    h: Var,
    views: &[Var],
    tau_plus: f64,
    tau_minus: f64,
) -> Result<Var> {
    if !(tau_plus > 0.0) || !(tau_minus > 0.0) {
        return Err(Error::Parameter("CCR temperatures must be positive".into()));
    }
    let (b, _) = tape.shape(h);
    if views.is_empty() || b < 2 {
        return Err(Error::Contract(
            "ccr_loss_batch needs a positive view and two anchors".into(),
        ));
    }
    let sims = views
        .iter()
        .map(|&v| {
            let p = tape.mul(h, v)?;
            Ok(tape.row_sum(p))
        })
        .collect::<Result<Vec<_>>>()?;
    let sp = tape.concat_cols(&sims)?;
    let sp = tape.scale(sp, 1.0 / tau_plus);
    let (pos, _) = weighted_similarity(tape, sp, -1.0, None)?;
    let ht = tape.transpose(h);
    let sn = tape.matmul(h, ht)?;
    let sn = tape.scale(sn, 1.0 / tau_minus);
    let keep = (0..b * b).map(|i| i / b != i % b).collect();
    let (neg, _) = weighted_similarity(tape, sn, 1.0, Some(keep))?;
    let per_anchor = tape.sub(neg, pos)?;
    Ok(tape.mean(per_anchor))
}

/// Discriminator objective on one branch, negated so that minimizing trains
/// `D`: `-(mean ln D(prior) + mean ln(1 - D(z)))`. `z` enters as a constant.
pub fn apr_discriminator_loss(
    tape: &mut Tape,
    model: &DualModel,
    branch: Branch,
    prior: &Tensor,
    z: &Tensor,
) -> Result<Var> {
    if prior.rows() != z.rows() || prior.cols() != z.cols() {
        return Err(Error::dim(
            "apr_discriminator_loss",
            prior.shape(),
            z.shape(),
        ));
    }
    let n = prior.rows();
    let w = vec![1.0 / n as f64; n];
    let p = tape.constant(prior.clone());
    let zc = tape.constant(z.clone());
    let dp = model.discriminate(tape, p, branch, false)?;
    let dz = model.discriminate(tape, zc, branch, false)?;
    let real = tape.bce(dp, &vec![1.0; n], &w)?;
    let fake = tape.bce(dz, &vec![0.0; n], &w)?;
    tape.add(real, fake)
}

/// Encoder-side adversarial term on one branch with `D` frozen.
pub fn apr_generator_term(
    tape: &mut Tape,
    model: &DualModel,
    branch: Branch,
    z: Var,
    form: GeneratorLoss,
) -> Result<Var> {
    let n = tape.shape(z).0;
    let w = vec![1.0 / n as f64; n];
    let d = model.discriminate(tape, z, branch, true)?;
    match form {
        GeneratorLoss::NonSaturating => tape.bce(d, &vec![1.0; n], &w),
        GeneratorLoss::Minimax => {
            let l = tape.bce(d, &vec![0.0; n], &w)?;
            Ok(tape.scale(l, -1.0))
        }
    }
}

/// Scalar loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub dsl_item: f64,
    pub dsl_scene: f64,
    pub apr: f64,
    pub ccr: f64,
    pub total: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `dsl_item + lambda dsl_scene + alpha apr + beta ccr`.
pub fn total_loss(
    dsl_item: f64,
    dsl_scene: f64,
    apr: f64,
    ccr: f64,
    lambda: f64,
    alpha: f64,
    beta: f64,
) -> Result<LossBundle> {
    for (term, v) in [
        ("dsl_item", dsl_item),
        ("dsl_scene", dsl_scene),
        ("apr", apr),
        ("ccr", ccr),
        ("lambda", lambda),
        ("alpha", alpha),
        ("beta", beta),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                term: term.into(),
                batch: None,
            });
        }
    }
    Ok(LossBundle {
        dsl_item,
        dsl_scene,
        apr,
        ccr,
        total: dsl_item + lambda * dsl_scene + alpha * apr + beta * ccr,
        lambda,
        alpha,
        beta,
    })
}

/// Tape version of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_var(
    tape: &mut Tape,
    dsl_item: Var,
    dsl_scene: Option<Var>,
    apr: Option<Var>,
    ccr: Option<Var>,
    lambda: f64,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = dsl_item;
    for (term, w) in [(dsl_scene, lambda), (apr, alpha), (ccr, beta)] {
        if let Some(t) = term {
            let s = tape.scale(t, w);
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
