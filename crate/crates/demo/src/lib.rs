//! Browser demo. Three operations, each returning a JSON string for the page
//! in `www/` to draw:
//!
//! - contrastive weights of a toy anchor as the temperatures move
//! - the scene x item co-occurrence of a generated log, with its mutual
//!   information
//! - a histogram of draws from one of the adversarial priors
//!
//! The plain functions are native Rust so they can be tested without a
//! browser; the `#[wasm_bindgen]` wrappers only turn errors into `JsError`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dualseq::numerics::{Tape, Tensor};
use dualseq::objectives::{ccr_loss, sample_prior, PriorKind};
use dualseq::rng;
use dualseq::synth::{generate, scene_item_mutual_information, SynthSpec};
use dualseq::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct CcrView {
    /// 2-d points so the page can plot them.
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub w_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub loss: f64,
    /// Gradient of the loss at the anchor; the page draws it as an arrow.
    pub anchor_grad: Vec<f64>,
}

fn points(r: &mut rng::Rng, n: usize, center: [f64; 2], spread: f64) -> Vec<Vec<f64>> {
    use rand::Rng as _;
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|c| c + spread * (r.random::<f64>() * 2.0 - 1.0))
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor) -> Vec<f64> {
    t.values().to_vec()
}

pub fn ccr_view(
    seed: u64,
    num_pos: usize,
    num_neg: usize,
    tau_plus: f64,
    tau_minus: f64,
) -> Result<CcrView> {
    if num_pos == 0 || num_neg == 0 || num_pos > 64 || num_neg > 64 {
        return Err(Error::Parameter(
            "between 1 and 64 positives and negatives".into(),
        ));
    }
    let mut r = rng::from_seed(seed);
    let anchor = vec![1.0, 0.2];
    let positives = points(&mut r, num_pos, [0.8, 0.4], 0.6);
    let negatives = points(&mut r, num_neg, [-0.2, 0.6], 1.0);

    let mut tape = Tape::new();
    let h = tape.leaf(Tensor::matrix(1, 2, anchor.clone())?);
    let p = tape.constant(Tensor::from_rows(&positives)?);
    let n = tape.constant(Tensor::from_rows(&negatives)?);
    let terms = ccr_loss(&mut tape, h, p, n, tau_plus, tau_minus)?;
    let grads = tape.backward(terms.loss)?;
    Ok(CcrView {
        anchor,
        positives,
        negatives,
        w_plus: rows(tape.value(terms.w_plus)),
        w_minus: rows(tape.value(terms.w_minus)),
        loss: tape.value(terms.loss).values()[0],
        anchor_grad: grads
            .wrt(h)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; 2]),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Heatmap {
    pub scenes: usize,
    pub items: usize,
    /// `counts[s][i]`: events of item `i` logged under scene `s`.
    pub counts: Vec<Vec<u64>>,
    /// Plug-in mutual information in nats.
    pub mutual_information: f64,
    pub events: usize,
}

pub fn scene_item_heatmap(
    seed: u64,
    num_scenes: usize,
    num_items: usize,
    interplay: f64,
    misalignment_rate: f64,
) -> Result<Heatmap> {
    if num_scenes > 32 || num_items > 200 {
        return Err(Error::Parameter("at most 32 scenes and 200 items".into()));
    }
    let spec = SynthSpec {
        num_users: 300,
        num_items,
        num_scenes,
        interplay,
        misalignment_rate,
        seed,
        ..SynthSpec::default()
    };
    let (log, _) = generate(&spec)?;
    let mut counts = vec![vec![0u64; num_items]; num_scenes];
    for e in &log {
        // generated ids are "s<k>" and "i<k>"
        let s: usize = e.scene[1..]
            .parse()
            .map_err(|_| Error::Contract("scene id".into()))?;
        let i: usize = e.item[1..]
            .parse()
            .map_err(|_| Error::Contract("item id".into()))?;
        counts[s][i] += 1;
    }
    Ok(Heatmap {
        scenes: num_scenes,
        items: num_items,
        counts,
        mutual_information: scene_item_mutual_information(&log),
        events: log.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
}

pub fn prior_histogram(prior: &str, seed: u64, n: usize, bins: usize) -> Result<Histogram> {
    let kind: PriorKind = prior.parse()?;
    if n == 0 || n > 200_000 || bins == 0 || bins > 200 {
        return Err(Error::Parameter(
            "1..=200000 samples and 1..=200 bins".into(),
        ));
    }
    let mut r = rng::from_seed(seed);
    let draws = sample_prior(kind, 1, n, &mut r).into_values();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let variance = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    // clip the long tail of the lognormal so the bins stay readable
    let lo = draws
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .max(-8.0);
    let hi = draws
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .min(12.0);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0; bins];
    for x in draws {
        if (lo..=hi).contains(&x) {
            counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    Ok(Histogram {
        lo,
        hi,
        counts,
        mean,
        variance,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = ccrView)]
pub fn ccr_view_js(
    seed: u32,
    num_pos: u32,
    num_neg: u32,
    tau_plus: f64,
    tau_minus: f64,
) -> std::result::Result<String, JsError> {
    to_js(ccr_view(
        seed as u64,
        num_pos as usize,
        num_neg as usize,
        tau_plus,
        tau_minus,
    ))
}

#[wasm_bindgen(js_name = sceneItemHeatmap)]
pub fn scene_item_heatmap_js(
    seed: u32,
    num_scenes: u32,
    num_items: u32,
    interplay: f64,
    misalignment_rate: f64,
) -> std::result::Result<String, JsError> {
    to_js(scene_item_heatmap(
        seed as u64,
        num_scenes as usize,
        num_items as usize,
        interplay,
        misalignment_rate,
    ))
}

#[wasm_bindgen(js_name = priorHistogram)]
pub fn prior_histogram_js(
    prior: &str,
    seed: u32,
    n: u32,
    bins: u32,
) -> std::result::Result<String, JsError> {
    to_js(prior_histogram(
        prior,
        seed as u64,
        n as usize,
        bins as usize,
    ))
}
