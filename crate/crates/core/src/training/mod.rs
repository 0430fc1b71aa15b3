//! The optimization loop: per batch, discriminator updates against prior
//! samples, then one encoder update on the weighted total loss. Early stopping
//! keeps the parameters of the best validation epoch.

mod adam;
mod grid;

pub use adam::{Adam, AdamConfig};
pub use grid::{run_ablation_grid, AblationRow, AblationTable, GridSet, GridVariant};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMode, LabeledExample, Negatives};
use crate::encoder::{Branch, DualModel, EncoderConfig, Inputs, Variant};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, Task};
use crate::numerics::{ParamStore, Tape, Var};
use crate::objectives::{
    apr_discriminator_loss, apr_generator_term, augment, ccr_loss_batch, dsl_loss_grouped,
    sample_prior, total_loss, AprConfig, CcrConfig, LossBundle,
};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub disc_steps_per_gen_step: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub enable_apr: bool,
    pub enable_ccr: bool,
    /// Redraw sampled negatives at the start of every epoch after the first.
    pub resample_negatives: bool,
    /// Cut-off for the validation recall that drives early stopping.
    pub val_k: usize,
    /// Rank the whole item vocabulary during validation rather than each
    /// example's sampled candidates, which saturate quickly.
    pub val_full_vocabulary: bool,
    pub ccr: CcrConfig,
    pub apr: AprConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            lambda: 1.0,
            alpha: 2e-7,
            beta: 5e-6,
            seed: 7,
            disc_steps_per_gen_step: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            enable_apr: true,
            enable_ccr: true,
            resample_negatives: true,
            val_k: 10,
            val_full_vocabulary: true,
            ccr: CcrConfig::default(),
            apr: AprConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.val_k == 0 {
            return bad("val_k must be at least 1");
        }
        for (k, v) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{k} must be finite and non-negative"
                )));
            }
        }
        self.ccr.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of each term.
    pub loss: LossBundle,
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Wall-clock figures; excluded from reproducibility comparisons.
    pub timing: Timing,
}

impl TrainReport {
    pub fn loss_trajectory(&self) -> Vec<LossBundle> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Row-per-example views of a batch re-encoded after augmentation.
fn augmented_views(
    model: &DualModel,
    tape: &mut Tape,
    batch: &[(usize, &LabeledExample)],
    inputs: &Inputs,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let ccr = &cfg.ccr;
    let key = |idx: usize, branch: u64, view: usize| {
        rng::keyed(
            cfg.seed,
            &[tag::AUGMENT, epoch as u64, idx as u64, branch, view as u64],
        )
    };
    let mut views_s = Vec::new();
    let mut views_v = Vec::new();
    for view in 0..ccr.num_positives {
        let kind = ccr.view_kind(view);
        match model.config.variant {
            Variant::OneToOne => {
                // augment positions so item and scene stay paired
                let mut items = Vec::with_capacity(batch.len());
                let mut scenes = Vec::with_capacity(batch.len());
                for &(idx, e) in batch {
                    let slots: Vec<usize> = (1..=e.mask.len()).collect();
                    let moved = augment(
                        kind,
                        &slots,
                        &e.mask,
                        ccr.mask_ratio,
                        &mut key(idx, 2, view),
                    );
                    items.push(
                        moved
                            .iter()
                            .map(|&s| if s == 0 { 0 } else { e.item_ids[s - 1] })
                            .collect(),
                    );
                    scenes.push(
                        moved
                            .iter()
                            .map(|&s| if s == 0 { 0 } else { e.scene_ids[s - 1] })
                            .collect(),
                    );
                }
                let h = model.encode_one_to_one(tape, &items, &scenes, &inputs.masks, None)?;
                views_v.push(h);
            }
            variant => {
                let items: Vec<Vec<usize>> = batch
                    .iter()
                    .map(|&(idx, e)| {
                        augment(
                            kind,
                            &e.item_ids,
                            &e.mask,
                            ccr.mask_ratio,
                            &mut key(idx, 0, view),
                        )
                    })
                    .collect();
                views_v.push(model.encode_branch(
                    tape,
                    &items,
                    &inputs.masks,
                    Branch::Item,
                    None,
                )?);
                if variant == Variant::Dual {
                    let scenes: Vec<Vec<usize>> = batch
                        .iter()
                        .map(|&(idx, e)| {
                            augment(
                                kind,
                                &e.scene_ids,
                                &e.mask,
                                ccr.mask_ratio,
                                &mut key(idx, 1, view),
                            )
                        })
                        .collect();
                    views_s.push(model.encode_branch(
                        tape,
                        &scenes,
                        &inputs.masks,
                        Branch::Scene,
                        None,
                    )?);
                }
            }
        }
    }
    Ok((views_s, views_v))
}

fn discriminator_step(
    model: &mut DualModel,
    opt: &mut Adam,
    z_s: &crate::numerics::Tensor,
    z_v: &crate::numerics::Tensor,
    cfg: &TrainConfig,
    key: [u64; 3],
) -> Result<()> {
    for step in 0..cfg.disc_steps_per_gen_step {
        let mut r = rng::keyed(cfg.seed, &[tag::PRIOR, key[0], key[1], step as u64]);
        let n = z_s.rows();
        let prior_s = sample_prior(cfg.apr.prior, z_s.cols(), n, &mut r);
        let prior_v = sample_prior(cfg.apr.prior, z_v.cols(), n, &mut r);
        let mut tape = Tape::new();
        let ls = apr_discriminator_loss(&mut tape, model, Branch::Scene, &prior_s, z_s)?;
        let lv = apr_discriminator_loss(&mut tape, model, Branch::Item, &prior_v, z_v)?;
        let loss = tape.add(ls, lv)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Numeric {
                term: "discriminator".into(),
                batch: Some(key[2] as usize),
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut model.store, &grads);
    }
    Ok(())
}

fn finite(term: &str, v: f64, batch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            term: term.into(),
            batch: Some(batch),
        })
    }
}

struct BatchOut {
    bundle: LossBundle,
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut DualModel,
    enc_opt: &mut Adam,
    disc_opt: &mut Adam,
    batch: &[(usize, &LabeledExample)],
    cfg: &TrainConfig,
    epoch: usize,
    batch_index: usize,
    global_batch: usize,
) -> Result<BatchOut> {
    let examples: Vec<&LabeledExample> = batch.iter().map(|(_, e)| *e).collect();
    let inputs = Inputs::from_examples(examples.iter().copied());
    let mut tape = Tape::new();
    let mut drop_rng = rng::keyed(cfg.seed, &[tag::DROPOUT, epoch as u64, batch_index as u64]);
    let dropout = (model.config.dropout > 0.0).then_some(&mut drop_rng);
    let f = model.forward(&mut tape, &inputs, dropout)?;

    let item_c: Vec<&[usize]> = examples
        .iter()
        .map(|e| e.item_candidates.as_slice())
        .collect();
    let scene_c: Vec<&[usize]> = examples
        .iter()
        .map(|e| e.scene_candidates.as_slice())
        .collect();
    let labels =
        |ls: Vec<&[u8]>| -> Vec<f64> { ls.into_iter().flatten().map(|&l| f64::from(l)).collect() };
    let pv = model.score_candidates(&mut tape, f.o_v, &item_c, Branch::Item)?;
    let ps = model.score_candidates(&mut tape, f.o_s, &scene_c, Branch::Scene)?;
    let yv = labels(examples.iter().map(|e| e.item_labels.as_slice()).collect());
    let ys = labels(examples.iter().map(|e| e.scene_labels.as_slice()).collect());
    let gv: Vec<usize> = item_c.iter().map(|c| c.len()).collect();
    let gs: Vec<usize> = scene_c.iter().map(|c| c.len()).collect();
    let dsl_v = dsl_loss_grouped(&mut tape, pv, &yv, &gv)?;
    let dsl_s = dsl_loss_grouped(&mut tape, ps, &ys, &gs)?;
    let weighted_s = tape.scale(dsl_s, cfg.lambda);
    let mut total = tape.add(dsl_v, weighted_s)?;

    let mut apr_value = 0.0;
    if cfg.enable_apr {
        let z_s = tape.value(f.z_s).clone();
        let z_v = tape.value(f.z_v).clone();
        discriminator_step(
            model,
            disc_opt,
            &z_s,
            &z_v,
            cfg,
            [epoch as u64, batch_index as u64, global_batch as u64],
        )?;
        let gs = apr_generator_term(
            &mut tape,
            model,
            Branch::Scene,
            f.z_s,
            cfg.apr.generator_loss,
        )?;
        let gv = apr_generator_term(
            &mut tape,
            model,
            Branch::Item,
            f.z_v,
            cfg.apr.generator_loss,
        )?;
        let apr = tape.add(gs, gv)?;
        apr_value = tape.value(apr).item();
        let a = tape.scale(apr, cfg.alpha);
        total = tape.add(total, a)?;
    }

    let mut ccr_value = 0.0;
    if cfg.enable_ccr && batch.len() >= 2 {
        let (views_s, views_v) = augmented_views(model, &mut tape, batch, &inputs, cfg, epoch)?;
        let (tp, tm) = (cfg.ccr.tau_plus, cfg.ccr.tau_minus);
        let mut ccr = ccr_loss_batch(&mut tape, f.h_v, &views_v, tp, tm)?;
        if !views_s.is_empty() {
            let s = ccr_loss_batch(&mut tape, f.h_s, &views_s, tp, tm)?;
            ccr = tape.add(ccr, s)?;
        }
        ccr_value = tape.value(ccr).item();
        let c = tape.scale(ccr, cfg.beta);
        total = tape.add(total, c)?;
    }

    let bundle = total_loss(
        finite("dsl_item", tape.value(dsl_v).item(), global_batch)?,
        finite("dsl_scene", tape.value(dsl_s).item(), global_batch)?,
        finite("apr", apr_value, global_batch)?,
        finite("ccr", ccr_value, global_batch)?,
        cfg.lambda,
        cfg.alpha,
        cfg.beta,
    )?;
    finite("total", tape.value(total).item(), global_batch)?;
    let grads = tape.backward(total)?;
    enc_opt.step(&mut model.store, &grads);
    Ok(BatchOut { bundle })
}

fn mean_bundle(bundles: &[LossBundle], cfg: &TrainConfig) -> LossBundle {
    let n = bundles.len().max(1) as f64;
    let avg = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
    LossBundle {
        dsl_item: avg(|b| b.dsl_item),
        dsl_scene: avg(|b| b.dsl_scene),
        apr: avg(|b| b.apr),
        ccr: avg(|b| b.ccr),
        total: avg(|b| b.total),
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        beta: cfg.beta,
    }
}

fn check_compatible(a: &Dataset, b: &Dataset) -> Result<()> {
    if a.vocabs != b.vocabs || a.max_len != b.max_len {
        return Err(Error::Contract(
            "training and validation data use different vocabularies".into(),
        ));
    }
    Ok(())
}

/// Builds a model from `enc` and trains it. With a non-empty `val` set the
/// returned model is the one from the best validation epoch; otherwise it is
/// the final one.
pub fn train(
    train_set: &Dataset,
    val: Option<&Dataset>,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(DualModel, TrainReport)> {
    cfg.validate()?;
    enc.validate()?;
    let model = DualModel::new(
        enc,
        train_set.num_items(),
        train_set.num_scenes(),
        &cfg.apr.disc_hidden,
        cfg.seed,
    )?;
    train_model(model, train_set, val, cfg)
}

/// Trains an existing model in place of a fresh one.
pub fn train_model(
    mut model: DualModel,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(DualModel, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.num_items != train_set.num_items() || model.num_scenes != train_set.num_scenes() {
        return Err(Error::Contract(
            "model tables do not match the dataset vocabularies".into(),
        ));
    }
    if train_set.max_len > model.config.max_len {
        return Err(Error::Config(format!(
            "dataset max_len {} exceeds encoder max_len {}",
            train_set.max_len, model.config.max_len
        )));
    }
    let val = val.filter(|v| !v.is_empty());
    if let Some(v) = val {
        check_compatible(train_set, v)?;
    }
    let started = Instant::now();
    let mut enc_opt = Adam::new(cfg.adam(), &model.store, model.encoder_params());
    let mut disc_opt = Adam::new(cfg.adam(), &model.store, model.discriminator_params());
    let mut examples: Vec<LabeledExample> = train_set.examples.clone();
    let (ni, ns) = (train_set.num_items(), train_set.num_scenes());
    let val_task = match val.map(|v| v.mode) {
        Some(LabelMode::Period) => Task::PeriodItem,
        _ => Task::NextItem,
    };
    let eval_cfg = EvalConfig {
        ks: vec![cfg.val_k],
        full_vocabulary: cfg.val_full_vocabulary,
        ..EvalConfig::default()
    };

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut global_batch = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        if epoch > 0 && cfg.resample_negatives {
            for (i, e) in examples.iter_mut().enumerate() {
                let mut r = rng::keyed(cfg.seed, &[tag::NEGATIVES, epoch as u64, i as u64]);
                let ni_neg = e.item_candidates.len() - e.item_positives().len();
                let ns_neg = e.scene_candidates.len() - e.scene_positives().len();
                e.resample_negatives(
                    ni,
                    ns,
                    Negatives::Sample(ni_neg),
                    Negatives::Sample(ns_neg),
                    &mut r,
                )?;
            }
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::keyed(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut bundles = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, &LabeledExample)> =
                chunk.iter().map(|&i| (i, &examples[i])).collect();
            let out = train_batch(
                &mut model,
                &mut enc_opt,
                &mut disc_opt,
                &batch,
                cfg,
                epoch,
                b,
                global_batch,
            )?;
            bundles.push(out.bundle);
            global_batch += 1;
        }
        let val_recall = match val {
            Some(v) => Some(
                evaluate(&model, v, val_task, &eval_cfg)?
                    .recall(cfg.val_k)
                    .expect("requested k"),
            ),
            None => None,
        };
        records.push(EpochRecord {
            epoch,
            loss: mean_bundle(&bundles, cfg),
            val_recall,
        });
        if let Some(score) = val_recall {
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = epoch + 1 < cfg.max_epochs;
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => records.len() - 1,
    };
    Ok((
        model,
        TrainReport {
            seed: cfg.seed,
            epochs: records,
            best_epoch,
            stopped_early,
            timing: Timing {
                seconds: started.elapsed().as_secs_f64(),
            },
        },
    ))
}

#[cfg(test)]
mod tests;
