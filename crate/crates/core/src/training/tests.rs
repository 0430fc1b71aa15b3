use super::*;
use crate::data::Split;
use crate::fixtures::{desk_encoder, fixture_a_spec, labels, prepared, train_only};
use crate::numerics::Tensor;

fn fixture_a() -> Dataset {
    let p = train_only(&fixture_a_spec(7), 7).unwrap();
    assert_eq!(p.train.len(), 64);
    p.dataset(Split::Train, &labels(LabelMode::Next, 10, 20))
        .unwrap()
}

fn small_enc() -> EncoderConfig {
    EncoderConfig {
        item_dim: 8,
        scene_dim: 4,
        ..desk_encoder()
    }
}

#[test]
fn loss_decreases_over_two_epochs() {
    let cfg = TrainConfig {
        max_epochs: 2,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let (_, report) = train(&fixture_a(), None, &small_enc(), &cfg).unwrap();
    let e = &report.epochs;
    assert_eq!(e.len(), 2);
    assert!(
        e[1].loss.dsl_item < e[0].loss.dsl_item,
        "{:?}",
        report.loss_trajectory()
    );
}

#[test]
fn disabled_regularizers_leave_discriminators_alone() {
    let cfg = TrainConfig {
        max_epochs: 2,
        alpha: 0.0,
        beta: 0.0,
        enable_apr: false,
        enable_ccr: false,
        ..TrainConfig::default()
    };
    let data = fixture_a();
    let fresh = DualModel::new(
        &small_enc(),
        data.num_items(),
        data.num_scenes(),
        &cfg.apr.disc_hidden,
        cfg.seed,
    )
    .unwrap();
    let (trained, report) = train(&data, None, &small_enc(), &cfg).unwrap();
    for &id in fresh.discriminator_params() {
        assert_eq!(fresh.store.tensor(id), trained.store.tensor(id));
    }
    assert!(report
        .epochs
        .iter()
        .all(|e| e.loss.apr == 0.0 && e.loss.ccr == 0.0));
}

#[test]
fn training_is_reproducible() {
    let cfg = TrainConfig {
        max_epochs: 2,
        alpha: 0.5,
        beta: 0.01,
        ..TrainConfig::default()
    };
    let data = fixture_a();
    let (m1, r1) = train(&data, None, &small_enc(), &cfg).unwrap();
    let (m2, r2) = train(&data, None, &small_enc(), &cfg).unwrap();
    assert_eq!(r1.epochs, r2.epochs);
    for id in m1.store.ids() {
        assert_eq!(m1.store.tensor(id), m2.store.tensor(id));
    }
    let (_, r3) = train(&data, None, &small_enc(), &TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(r1.epochs, r3.epochs);
}

#[test]
fn discriminator_separates_disjoint_inputs() {
    let m0 = DualModel::new(&small_enc(), 5, 3, &[8], 1).unwrap();
    let mut m = m0.clone();
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        &m.store,
        m.discriminator_params(),
    );
    let n = 64;
    let mut r = rng::from_seed(3);
    let prior = sample_prior(crate::objectives::PriorKind::StandardGaussian, 4, n, &mut r);
    let z = Tensor::matrix(n, 4, prior.values().iter().map(|v| v * 0.1 + 4.0).collect()).unwrap();
    for _ in 0..200 {
        let mut t = Tape::new();
        let l = apr_discriminator_loss(&mut t, &m, Branch::Scene, &prior, &z).unwrap();
        let g = t.backward(l).unwrap();
        for (id, _) in g.params() {
            assert!(m.discriminator_params().contains(&id));
        }
        opt.step(&mut m.store, &g);
    }
    let mut t = Tape::new();
    let (p, q) = (t.constant(prior.clone()), t.constant(z.clone()));
    let dp = m.discriminate(&mut t, p, Branch::Scene, true).unwrap();
    let dz = m.discriminate(&mut t, q, Branch::Scene, true).unwrap();
    let correct = t.value(dp).values().iter().filter(|&&v| v > 0.5).count()
        + t.value(dz).values().iter().filter(|&&v| v < 0.5).count();
    assert!(correct as f64 / (2 * n) as f64 > 0.95);
    for &id in m.encoder_params() {
        assert_eq!(m.store.tensor(id), m0.store.tensor(id));
    }
}

#[test]
fn early_stopping_returns_best_epoch() {
    let p = prepared(&fixture_a_spec(11), 7).unwrap();
    let lc = labels(LabelMode::Next, 10, 20);
    let train_set = p.dataset(Split::Train, &lc).unwrap();
    let val = p.dataset(Split::Val, &lc).unwrap();
    let cfg = TrainConfig {
        max_epochs: 6,
        patience: 2,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let (model, report) = train(&train_set, Some(&val), &small_enc(), &cfg).unwrap();
    let best = report
        .epochs
        .iter()
        .map(|e| e.val_recall.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.epochs[report.best_epoch].val_recall, Some(best));
    let again = evaluate(
        &model,
        &val,
        Task::NextItem,
        &EvalConfig {
            ks: vec![10],
            full_vocabulary: true,
            ..EvalConfig::default()
        },
    )
    .unwrap();
    assert_eq!(again.recall(10), Some(best));
}

#[test]
fn grid_enumeration_and_shared_init() {
    assert_eq!(GridSet::Core.variants().len(), 5);
    assert_eq!(GridSet::All.variants().len(), 10);
    let data = fixture_a();
    let base = TrainConfig::default();
    let mut first: Option<Tensor> = None;
    for v in GridSet::All.variants() {
        let (e, t) = v.configure(&small_enc(), &base);
        let m = DualModel::new(
            &e,
            data.num_items(),
            data.num_scenes(),
            &t.apr.disc_hidden,
            t.seed,
        )
        .unwrap();
        let emb = m.store.tensor(m.param("item.emb").unwrap()).clone();
        match &first {
            None => first = Some(emb),
            Some(f) => assert_eq!(f, &emb, "{}", v.name()),
        }
    }
}

#[test]
fn every_variant_trains() {
    let data = fixture_a();
    let cfg = TrainConfig {
        max_epochs: 1,
        alpha: 0.1,
        beta: 0.01,
        ..TrainConfig::default()
    };
    for variant in [Variant::Dual, Variant::OneToOne, Variant::ItemOnly] {
        let enc = EncoderConfig {
            variant,
            ..small_enc()
        };
        let (_, r) = train(&data, None, &enc, &cfg).unwrap();
        assert!(
            r.epochs[0].loss.ccr != 0.0 && r.epochs[0].loss.apr != 0.0,
            "{variant:?}"
        );
    }
}
