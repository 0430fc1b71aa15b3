use super::*;
use crate::encoder::EncoderConfig;
use crate::numerics::sigmoid;

fn leaf(t: &mut Tape, rows: usize, cols: usize, v: &[f64]) -> Var {
    t.leaf(
        Tensor::matrix(rows, cols, v.to_vec())
            .unwrap()
            .with_grad(true),
    )
}

#[test]
fn score_examples() {
    let mut t = Tape::new();
    let o = leaf(&mut t, 1, 3, &[1.0, 1.0, 1.0]);
    let e = leaf(&mut t, 2, 3, &[1.0, 1.0, 1.0, 1.0, -1.0, 0.0]);
    let p = score(&mut t, o, e, &[0, 0]).unwrap();
    assert!((t.value(p).values()[0] - 0.9525741268224334).abs() < 1e-15);
    assert_eq!(t.value(p).values()[1], 0.5);

    let neg = t.scale(o, -1.0);
    let q = score(&mut t, neg, e, &[0, 0]).unwrap();
    for (a, b) in t.value(p).values().iter().zip(t.value(q).values()) {
        assert!((a + b - 1.0).abs() < 1e-15);
    }
    let bad = leaf(&mut t, 1, 2, &[1.0, 0.0]);
    assert!(matches!(
        score(&mut t, bad, e, &[0, 0]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn dsl_examples() {
    let mut t = Tape::new();
    let p = leaf(&mut t, 2, 1, &[0.5, 0.5]);
    let l = dsl_loss(&mut t, p, &[1.0, 0.0]).unwrap();
    assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let q = leaf(&mut t, 3, 1, &[1.0, 0.0, 1.0]);
    let l = dsl_loss(&mut t, q, &[1.0, 0.0, 1.0]).unwrap();
    assert!(t.value(l).item() <= 1e-11);
}

#[test]
fn grouped_dsl_is_mean_of_means() {
    let mut t = Tape::new();
    let p = leaf(&mut t, 5, 1, &[0.9, 0.2, 0.3, 0.6, 0.5]);
    let l = dsl_loss_grouped(&mut t, p, &[1.0, 0.0, 1.0, 0.0, 0.0], &[2, 3]).unwrap();
    let bce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let a = (bce(0.9, 1.0) + bce(0.2, 0.0)) / 2.0;
    let b = (bce(0.3, 1.0) + bce(0.6, 0.0) + bce(0.5, 0.0)) / 3.0;
    assert!((t.value(l).item() - (a + b) / 2.0).abs() < 1e-14);
}

#[test]
fn ccr_singleton_and_symmetry() {
    let mut t = Tape::new();
    let h = leaf(&mut t, 1, 2, &[0.3, -1.2]);
    let p = leaf(&mut t, 1, 2, &[0.7, 0.4]);
    let n = leaf(&mut t, 2, 2, &[0.1, 0.2, -0.5, 0.9]);
    let c = ccr_loss(&mut t, h, p, n, 0.5, 0.07).unwrap();
    assert_eq!(t.value(c.w_plus).values(), &[1.0]);
    let s = (0.3 * 0.7 - 1.2 * 0.4) / 0.5;
    assert_eq!(t.value(c.positive).item(), -s);

    let two = leaf(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let hh = leaf(&mut t, 1, 2, &[2.0, 2.0]);
    let c = ccr_loss(&mut t, hh, two, n, 1.0, 1.0).unwrap();
    assert_eq!(t.value(c.w_plus).values(), &[0.5, 0.5]);
}

#[test]
fn ccr_worked_example() {
    let mut t = Tape::new();
    let h = leaf(&mut t, 1, 2, &[1.0, 0.0]);
    let p = leaf(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let n = leaf(&mut t, 1, 2, &[0.0, 1.0]);
    let c = ccr_loss(&mut t, h, p, n, 1.0, 0.07).unwrap();
    let w = t.value(c.w_plus).values();
    assert!((w[0] - 0.2689).abs() < 1e-4 && (w[1] - 0.7311).abs() < 1e-4);
    assert!((t.value(c.positive).item() + 0.2689).abs() < 1e-4);
}

#[test]
fn ccr_rejects_empty_sets() {
    let mut t = Tape::new();
    let h = leaf(&mut t, 1, 2, &[1.0, 0.0]);
    let p = leaf(&mut t, 1, 2, &[1.0, 0.0]);
    let empty = t.constant(Tensor::zeros(&[0, 2]));
    assert!(matches!(
        ccr_loss(&mut t, h, p, empty, 1.0, 1.0),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        ccr_loss(&mut t, h, empty, p, 1.0, 1.0),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        ccr_loss(&mut t, h, p, p, 0.0, 1.0),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn batch_ccr_matches_per_anchor_form() {
    let mut r = crate::rng::from_seed(4);
    let (b, d) = (4, 3);
    let h = crate::objectives::sample_prior(PriorKind::StandardGaussian, d, b, &mut r);
    let v1 = crate::objectives::sample_prior(PriorKind::StandardGaussian, d, b, &mut r);
    let v2 = crate::objectives::sample_prior(PriorKind::StandardGaussian, d, b, &mut r);
    let mut t = Tape::new();
    let (hv, a, c) = (
        t.constant(h.clone()),
        t.constant(v1.clone()),
        t.constant(v2.clone()),
    );
    let batch = ccr_loss_batch(&mut t, hv, &[a, c], 0.8, 0.3).unwrap();
    let mut expect = 0.0;
    for i in 0..b {
        let mut u = Tape::new();
        let anchor = u.constant(Tensor::matrix(1, d, h.row(i).to_vec()).unwrap());
        let pos = u.constant(Tensor::from_rows(&[v1.row(i).to_vec(), v2.row(i).to_vec()]).unwrap());
        let negs: Vec<Vec<f64>> = (0..b)
            .filter(|&j| j != i)
            .map(|j| h.row(j).to_vec())
            .collect();
        let neg = u.constant(Tensor::from_rows(&negs).unwrap());
        let c = ccr_loss(&mut u, anchor, pos, neg, 0.8, 0.3).unwrap();
        expect += u.value(c.loss).item() / b as f64;
    }
    assert!((t.value(batch).item() - expect).abs() < 1e-12);
}

fn constant_disc_model() -> DualModel {
    let cfg = EncoderConfig {
        item_dim: 4,
        scene_dim: 2,
        num_heads: 1,
        max_len: 4,
        ..EncoderConfig::default()
    };
    let mut m = DualModel::new(&cfg, 5, 3, &[3], 1).unwrap();
    for name in ["disc_s.1.w", "disc_v.1.w"] {
        let id = m.param(name).unwrap();
        m.store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    m
}

#[test]
fn constant_discriminator_losses() {
    let m = constant_disc_model();
    let prior = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.0, 1.0, 2.0]).unwrap();
    let z = Tensor::matrix(3, 2, vec![5.0, 1.0, 0.0, 0.0, -2.0, 0.4]).unwrap();
    let mut t = Tape::new();
    let l = apr_discriminator_loss(&mut t, &m, Branch::Scene, &prior, &z).unwrap();
    assert!((t.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let g = t.backward(l).unwrap();
    for (id, _) in g.params() {
        assert!(m.discriminator_params().contains(&id));
    }

    let mut t = Tape::new();
    let zv = t.leaf(z.clone().with_grad(true));
    let mm = apr_generator_term(&mut t, &m, Branch::Scene, zv, GeneratorLoss::Minimax).unwrap();
    assert!((t.value(mm).item() - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn generator_term_leaves_discriminator_frozen() {
    let m = DualModel::new(
        &EncoderConfig {
            item_dim: 4,
            scene_dim: 2,
            num_heads: 1,
            max_len: 4,
            ..EncoderConfig::default()
        },
        5,
        3,
        &[3],
        2,
    )
    .unwrap();
    let mut t = Tape::new();
    let z = t.leaf(
        Tensor::matrix(2, 4, vec![0.3, -0.1, 0.5, 2.0, 1.0, 0.0, -1.0, 0.2])
            .unwrap()
            .with_grad(true),
    );
    let l = apr_generator_term(&mut t, &m, Branch::Item, z, GeneratorLoss::NonSaturating).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.params().count(), 0);
    assert!(g.wrt(z).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn total_loss_examples() {
    let b = total_loss(0.4, 0.6, 9.0, 7.0, 1.0, 0.0, 0.0).unwrap();
    assert_eq!(b.total, 1.0);
    let b = total_loss(1.0, 1.0, 1.0, 1.0, 0.2, 0.0, 0.0).unwrap();
    assert!((b.total - 1.2).abs() < 1e-15);
    assert!(matches!(
        total_loss(1.0, f64::NAN, 0.0, 0.0, 1.0, 0.0, 0.0),
        Err(Error::Numeric { ref term, .. }) if term == "dsl_scene"
    ));
}

#[test]
fn sigmoid_symmetry_through_score() {
    for x in [-3.0, -0.1, 0.0, 2.5] {
        assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
    }
}
