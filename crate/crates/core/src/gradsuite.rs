//! Finite-difference check of every tape operation and loss term on
//! randomized small shapes.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{Branch, DualModel, EncoderConfig, Inputs, Variant};
use crate::error::Result;
use crate::numerics::gradcheck::{check_inputs, check_params, Options};
use crate::numerics::{Tape, Tensor, Var};
use crate::objectives::{
    apr_discriminator_loss, apr_generator_term, ccr_loss, ccr_loss_batch, dsl_loss,
    dsl_loss_grouped, score, total_loss_var, GeneratorLoss,
};
use crate::rng::{self, Rng};

/// Largest relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn uniform(r: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| r.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

fn normal(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    uniform(r, rows, cols, -1.5, 1.5)
}

/// Reduces `v` to a scalar with fixed pseudo-random weights, so that
/// gradients of outputs with constant sums (softmax, layer norm) stay
/// informative.
fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let (m, n) = tape.shape(v);
    let mut r = rng::keyed(0x5eed, &[m as u64, n as u64]);
    let w = tape.constant(uniform(&mut r, m, n, -1.0, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type Case = Box<dyn Fn(&mut Rng, Options) -> Result<f64>>;
type Func = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn inputs_case(gen: fn(&mut Rng) -> (Vec<Tensor>, Func)) -> Case {
    Box::new(move |r, opts| {
        let (inputs, func) = gen(r);
        check_inputs(&inputs, |t, v| func(t, v), opts)
    })
}

fn dims(r: &mut Rng) -> (usize, usize, usize) {
    (
        r.random_range(1..=5),
        r.random_range(1..=6),
        r.random_range(1..=5),
    )
}

fn op_cases() -> Vec<(&'static str, Case)> {
    let mut cases: Vec<(&'static str, Case)> = Vec::new();
    let mut add = |name: &'static str, gen: fn(&mut Rng) -> (Vec<Tensor>, Func)| {
        cases.push((name, inputs_case(gen)));
    };
    add("matmul", |r| {
        let (m, k, n) = dims(r);
        (
            vec![normal(r, m, k), normal(r, k, n)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y)
            }),
        )
    });
    add("transpose", |r| {
        let (m, n, _) = dims(r);
        (
            vec![normal(r, m, n)],
            Box::new(|t, v| {
                let y = t.transpose(v[0]);
                project(t, y)
            }),
        )
    });
    add("add", |r| {
        let (m, n, _) = dims(r);
        (
            vec![normal(r, m, n), normal(r, m, n)],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y)
            }),
        )
    });
    add("sub", |r| {
        let (m, n, _) = dims(r);
        (
            vec![normal(r, m, n), normal(r, m, n)],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y)
            }),
        )
    });
    add("mul", |r| {
        let (m, n, _) = dims(r);
        (
            vec![normal(r, m, n), normal(r, m, n)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y)
            }),
        )
    });
    add("add_bias", |r| {
        let (m, n, _) = dims(r);
        let b = Tensor::vector(normal(r, 1, n).into_values());
        (
            vec![normal(r, m, n), b],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y)
            }),
        )
    });
    add("scale", |r| {
        let (m, n, _) = dims(r);
        (
            vec![normal(r, m, n)],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                project(t, y)
            }),
        )
    });
    add("sum", |r| {
        let (m, n, _) = dims(r);
        (
            vec![normal(r, m, n)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            }),
        )
    });
    add("mean", |r| {
        let (m, n, _) = dims(r);
        (
            vec![normal(r, m, n)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.mean(y))
            }),
        )
    });
    add("row_sum", |r| {
        let (m, n, _) = dims(r);
        (
            vec![normal(r, m, n)],
            Box::new(|t, v| {
                let y = t.row_sum(v[0]);
                project(t, y)
            }),
        )
    });
    add("gelu", |r| {
        let (m, n, _) = dims(r);
        (
            vec![uniform(r, m, n, -3.0, 3.0)],
            Box::new(|t, v| {
                let y = t.gelu(v[0]);
                project(t, y)
            }),
        )
    });
    add("sigmoid", |r| {
        let (m, n, _) = dims(r);
        (
            vec![uniform(r, m, n, -4.0, 4.0)],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y)
            }),
        )
    });
    add("softmax", |r| {
        let (m, n, _) = dims(r);
        let tau = r.random_range(0.3..2.0);
        (
            vec![normal(r, m, n + 1)],
            Box::new(move |t, v| {
                let y = t.softmax_rows(v[0], tau)?;
                project(t, y)
            }),
        )
    });
    add("masked_softmax", |r| {
        let (m, n, _) = dims(r);
        let n = n + 1;
        let keep: Vec<bool> = (0..m * n)
            .map(|i| i % n == 0 || r.random::<bool>())
            .collect();
        (
            vec![normal(r, m, n)],
            Box::new(move |t, v| {
                let y = t.masked_softmax_rows(v[0], 0.7, keep.clone())?;
                project(t, y)
            }),
        )
    });
    add("layer_norm", |r| {
        let (m, n, _) = dims(r);
        let n = n + 1;
        let g = Tensor::vector(uniform(r, 1, n, 0.5, 1.5).into_values());
        let b = Tensor::vector(normal(r, 1, n).into_values());
        (
            vec![normal(r, m, n), g, b],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y)
            }),
        )
    });
    add("embedding_lookup", |r| {
        let (rows, d, k) = dims(r);
        let idx: Vec<usize> = (0..k + 2).map(|_| r.random_range(0..rows)).collect();
        (
            vec![normal(r, rows, d)],
            Box::new(move |t, v| {
                let y = t.gather_rows(v[0], &idx)?;
                project(t, y)
            }),
        )
    });
    add("concat_cols", |r| {
        let (m, a, b) = dims(r);
        (
            vec![normal(r, m, a), normal(r, m, b)],
            Box::new(|t, v| {
                let y = t.concat_cols(&[v[0], v[1], v[0]])?;
                project(t, y)
            }),
        )
    });
    add("concat_rows", |r| {
        let (a, n, b) = dims(r);
        (
            vec![normal(r, a, n), normal(r, b, n)],
            Box::new(|t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                project(t, y)
            }),
        )
    });
    add("slice_cols", |r| {
        let (m, n, _) = dims(r);
        let n = n + 2;
        let start = r.random_range(0..n - 1);
        let len = r.random_range(1..=n - start);
        (
            vec![normal(r, m, n)],
            Box::new(move |t, v| {
                let y = t.slice_cols(v[0], start, len)?;
                project(t, y)
            }),
        )
    });
    add("mean_bce", |r| {
        let (k, _, _) = dims(r);
        let k = k + 1;
        let y: Vec<f64> = (0..k)
            .map(|_| f64::from(r.random::<bool>() as u8))
            .collect();
        (
            vec![uniform(r, k, 1, 0.05, 0.95)],
            Box::new(move |t, v| {
                let w = vec![1.0 / y.len() as f64; y.len()];
                t.bce(v[0], &y, &w)
            }),
        )
    });
    add("attention", |r| {
        let heads = r.random_range(1..=2);
        let d = heads * r.random_range(1..=3);
        let lens: Vec<usize> = (0..r.random_range(1..=3))
            .map(|_| r.random_range(1..=4))
            .collect();
        let total: usize = lens.iter().sum();
        let mut segs = Vec::new();
        let mut at = 0;
        for l in lens {
            segs.push((at, l));
            at += l;
        }
        let causal = r.random::<bool>();
        (
            vec![
                normal(r, total, d),
                normal(r, total, d),
                normal(r, total, d),
            ],
            Box::new(move |t, v| {
                let y = t.segment_attention(v[0], v[1], v[2], &segs, heads, causal)?;
                project(t, y)
            }),
        )
    });
    add("mul_const", |r| {
        let (m, n, _) = dims(r);
        let f = normal(r, m, n).into_values();
        (
            vec![normal(r, m, n)],
            Box::new(move |t, v| {
                let y = t.mul_const(v[0], f.clone())?;
                project(t, y)
            }),
        )
    });
    cases
}

fn loss_cases() -> Vec<(&'static str, Case)> {
    let mut cases: Vec<(&'static str, Case)> = Vec::new();
    let mut add = |name: &'static str, gen: fn(&mut Rng) -> (Vec<Tensor>, Func)| {
        cases.push((name, inputs_case(gen)));
    };
    add("score", |r| {
        let (b, d, k) = dims(r);
        let owners: Vec<usize> = (0..k + 1).map(|_| r.random_range(0..b)).collect();
        let k = owners.len();
        (
            vec![normal(r, b, d), normal(r, k, d)],
            Box::new(move |t, v| {
                let p = score(t, v[0], v[1], &owners)?;
                project(t, p)
            }),
        )
    });
    add("dsl_loss", |r| {
        let (_, d, k) = dims(r);
        let k = k + 1;
        let y: Vec<f64> = (0..k).map(|i| f64::from(u8::from(i == 0))).collect();
        let owners = vec![0; k];
        (
            vec![uniform(r, 1, d, -0.7, 0.7), uniform(r, k, d, -0.7, 0.7)],
            Box::new(move |t, v| {
                let p = score(t, v[0], v[1], &owners)?;
                dsl_loss(t, p, &y)
            }),
        )
    });
    add("dsl_loss_grouped", |r| {
        let groups: Vec<usize> = (0..r.random_range(1..=3))
            .map(|_| r.random_range(1..=4))
            .collect();
        let n: usize = groups.iter().sum();
        let y: Vec<f64> = (0..n)
            .map(|_| f64::from(r.random::<bool>() as u8))
            .collect();
        (
            vec![uniform(r, n, 1, 0.05, 0.95)],
            Box::new(move |t, v| dsl_loss_grouped(t, v[0], &y, &groups)),
        )
    });
    add("ccr_loss", |r| {
        let (np, d, nn) = dims(r);
        let (tp, tm) = (r.random_range(0.5..1.5), r.random_range(0.3..1.0));
        (
            vec![
                uniform(r, 1, d, -0.8, 0.8),
                uniform(r, np, d, -0.8, 0.8),
                uniform(r, nn, d, -0.8, 0.8),
            ],
            Box::new(move |t, v| Ok(ccr_loss(t, v[0], v[1], v[2], tp, tm)?.loss)),
        )
    });
    add("ccr_weights", |r| {
        let (np, d, nn) = dims(r);
        (
            vec![
                uniform(r, 1, d, -0.8, 0.8),
                uniform(r, np + 1, d, -0.8, 0.8),
                uniform(r, nn + 1, d, -0.8, 0.8),
            ],
            Box::new(|t, v| {
                let c = ccr_loss(t, v[0], v[1], v[2], 1.0, 0.5)?;
                let a = project(t, c.w_plus)?;
                let b = project(t, c.w_minus)?;
                t.add(a, b)
            }),
        )
    });
    add("ccr_loss_batch", |r| {
        let (b, d, nv) = dims(r);
        let b = b + 1;
        let nv = nv.min(3);
        let mut inputs = vec![uniform(r, b, d, -0.8, 0.8)];
        for _ in 0..nv {
            inputs.push(uniform(r, b, d, -0.8, 0.8));
        }
        (
            inputs,
            Box::new(|t, v| ccr_loss_batch(t, v[0], &v[1..], 1.0, 0.4)),
        )
    });
    add("total_loss", |r| {
        let w: Vec<f64> = (0..3).map(|_| r.random_range(0.0..2.0)).collect();
        (
            (0..4).map(|_| uniform(r, 1, 1, -1.0, 1.0)).collect(),
            Box::new(move |t, v| {
                let s: Vec<Var> = v.iter().map(|&x| t.sum(x)).collect();
                let s2: Vec<Var> = s.iter().map(|&x| t.mul(x, x)).collect::<Result<_>>()?;
                total_loss_var(
                    t,
                    s2[0],
                    Some(s2[1]),
                    Some(s2[2]),
                    Some(s2[3]),
                    w[0],
                    w[1],
                    w[2],
                )
            }),
        )
    });
    cases
}

fn tiny_model(r: &mut Rng, variant: Variant) -> Result<DualModel> {
    let cfg = EncoderConfig {
        item_dim: 4,
        scene_dim: 2,
        num_layers: 1,
        num_heads: 2,
        ff_mult: 2,
        max_len: 4,
        variant,
        init_std: 0.4,
        ..EncoderConfig::default()
    };
    DualModel::new(&cfg, 6, 3, &[3], r.random())
}

fn tiny_inputs(r: &mut Rng, b: usize) -> Inputs {
    let mut x = Inputs::default();
    for _ in 0..b {
        let len = r.random_range(1..=4);
        let pad = 4 - len;
        x.items.push(
            (0..4)
                .map(|p| if p < pad { 0 } else { r.random_range(1..=6) })
                .collect(),
        );
        x.scenes.push(
            (0..4)
                .map(|p| if p < pad { 0 } else { r.random_range(1..=3) })
                .collect(),
        );
        x.masks.push((0..4).map(|p| u8::from(p >= pad)).collect());
    }
    x
}

fn model_cases() -> Vec<(&'static str, Case)> {
    let disc: Case = Box::new(|r, opts| {
        let m = tiny_model(r, Variant::Dual)?;
        let n = r.random_range(2..=5);
        let (prior, z) = (normal(r, n, 2), normal(r, n, 2));
        check_params(
            &m.store,
            m.discriminator_params(),
            |t, store| {
                let mut mm = m.clone();
                mm.store = store.clone();
                apr_discriminator_loss(t, &mm, Branch::Scene, &prior, &z)
            },
            opts,
        )
    });
    let generator = |form: GeneratorLoss| -> Case {
        Box::new(move |r, opts| {
            let m = tiny_model(r, Variant::Dual)?;
            let n = r.random_range(1..=5);
            check_inputs(
                &[normal(r, n, 4)],
                |t, v| apr_generator_term(t, &m, Branch::Item, v[0], form),
                opts,
            )
        })
    };
    let encoder = |variant: Variant| -> Case {
        Box::new(move |r, opts| {
            let m = tiny_model(r, variant)?;
            let x = tiny_inputs(r, 3);
            let ids = m.encoder_params().to_vec();
            check_params(
                &m.store,
                &ids,
                |t, store| {
                    let mut mm = m.clone();
                    mm.store = store.clone();
                    let f = mm.forward(t, &x, None)?;
                    let ic: Vec<&[usize]> = vec![&[1, 2, 5], &[3, 4], &[6, 1]];
                    let sc: Vec<&[usize]> = vec![&[1, 2], &[3], &[2, 3]];
                    let pv = mm.score_candidates(t, f.o_v, &ic, Branch::Item)?;
                    let ps = mm.score_candidates(t, f.o_s, &sc, Branch::Scene)?;
                    let lv =
                        dsl_loss_grouped(t, pv, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[3, 2, 2])?;
                    let ls = dsl_loss_grouped(t, ps, &[1.0, 0.0, 1.0, 0.0, 1.0], &[2, 1, 2])?;
                    let ccr = ccr_loss_batch(t, f.h_v, &[f.o_v], 1.0, 0.5)?;
                    let g = apr_generator_term(
                        t,
                        &mm,
                        Branch::Scene,
                        f.z_s,
                        GeneratorLoss::NonSaturating,
                    )?;
                    total_loss_var(t, lv, Some(ls), Some(g), Some(ccr), 0.5, 0.3, 0.2)
                },
                opts,
            )
        })
    };
    vec![
        ("apr_discriminator", disc),
        ("apr_generator_minimax", generator(GeneratorLoss::Minimax)),
        (
            "apr_generator_non_saturating",
            generator(GeneratorLoss::NonSaturating),
        ),
        ("model_dual", encoder(Variant::Dual)),
        ("model_one_to_one", encoder(Variant::OneToOne)),
    ]
}

/// Runs `instances` random instances of every check.
pub fn run_suite(instances: usize, seed: u64, opts: Options) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut checks = Vec::new();
    let all = op_cases()
        .into_iter()
        .chain(loss_cases())
        .chain(model_cases());
    for (i, (name, case)) in all.enumerate() {
        let mut r = rng::keyed(seed, &[i as u64]);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(case(&mut r, opts)?);
        }
        checks.push(CheckResult {
            name: name.to_string(),
            instances,
            worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(SuiteReport {
        checks,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_catches_flipped_gradients() {
        let ok = run_suite(3, 1, Options::default()).unwrap();
        for c in &ok.checks {
            assert!(c.passed, "{c:?}");
        }
        let bad = run_suite(
            1,
            1,
            Options {
                flip_sign: true,
                ..Options::default()
            },
        )
        .unwrap();
        assert!(bad.checks.iter().all(|c| !c.passed), "{bad:?}");
    }
}
