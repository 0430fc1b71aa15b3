use super::*;
use crate::objectives::dsl_loss_grouped;
use rand::Rng as _;

fn cfg() -> EncoderConfig {
    EncoderConfig {
        item_dim: 8,
        scene_dim: 4,
        num_heads: 2,
        max_len: 6,
        ..EncoderConfig::default()
    }
}

fn model(cfg: &EncoderConfig) -> DualModel {
    DualModel::new(cfg, 12, 5, &[6], 3).unwrap()
}

fn batch(seed: u64, b: usize, max_len: usize) -> Inputs {
    let mut r = crate::rng::from_seed(seed);
    let mut x = Inputs::default();
    for _ in 0..b {
        let len = r.random_range(1..=max_len);
        let mut items = vec![0; max_len];
        let mut scenes = vec![0; max_len];
        let mut mask = vec![0u8; max_len];
        for p in max_len - len..max_len {
            items[p] = r.random_range(1..=12);
            scenes[p] = r.random_range(1..=5);
            mask[p] = 1;
        }
        x.items.push(items);
        x.scenes.push(scenes);
        x.masks.push(mask);
    }
    x
}

fn outputs(m: &DualModel, x: &Inputs) -> Vec<Tensor> {
    let mut t = Tape::new();
    let f = m.forward(&mut t, x, None).unwrap();
    [f.h_s, f.h_v, f.z_s, f.z_v, f.o_s, f.o_v]
        .iter()
        .map(|&v| t.value(v).clone())
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `x W + b` by explicit loops.
fn affine_ref(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.values()[j] + (0..w.rows()).map(|i| x[i] * w.at(i, j)).sum::<f64>())
        .collect()
}

fn param(m: &DualModel, name: &str) -> Tensor {
    m.store.tensor(m.param(name).unwrap()).clone()
}

#[test]
fn length_one_has_branch_widths() {
    let m = model(&cfg());
    let x = Inputs {
        items: vec![vec![0, 0, 0, 0, 0, 3]],
        scenes: vec![vec![0, 0, 0, 0, 0, 2]],
        masks: vec![vec![0, 0, 0, 0, 0, 1]],
    };
    let out = outputs(&m, &x);
    let widths: Vec<usize> = out.iter().map(|t| t.cols()).collect();
    assert_eq!(widths, vec![4, 8, 4, 8, 4, 8]);
    assert!(out.iter().all(|t| t.all_finite()));
}

#[test]
fn padded_positions_do_not_matter() {
    for variant in [Variant::Dual, Variant::OneToOne, Variant::ItemOnly] {
        let m = model(&EncoderConfig { variant, ..cfg() });
        let x = batch(5, 4, 6);
        let mut y = x.clone();
        for b in 0..y.len() {
            for p in 0..6 {
                if y.masks[b][p] == 0 {
                    y.items[b][p] = 7;
                    y.scenes[b][p] = 1;
                }
            }
        }
        assert_eq!(outputs(&m, &x), outputs(&m, &y), "{variant:?}");
    }
}

#[test]
fn all_pad_is_rejected() {
    let m = model(&cfg());
    let x = Inputs {
        items: vec![vec![0; 6]],
        scenes: vec![vec![0; 6]],
        masks: vec![vec![0; 6]],
    };
    assert!(matches!(
        m.forward(&mut Tape::new(), &x, None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn position_sensitive() {
    let m = model(&cfg());
    let x = Inputs {
        items: vec![vec![0, 0, 2, 5, 9, 4]],
        scenes: vec![vec![0, 0, 1, 2, 3, 4]],
        masks: vec![vec![0, 0, 1, 1, 1, 1]],
    };
    let mut y = x.clone();
    y.items[0].swap(2, 3);
    assert_ne!(outputs(&m, &x)[1], outputs(&m, &y)[1]);
}

#[test]
fn fusion_single_layer_is_its_bias_at_zero_input() {
    let c = EncoderConfig {
        fusion_mlp_layers: 1,
        ..cfg()
    };
    let mut m = model(&c);
    let bs = m.param("fuse_s.0.b").unwrap();
    m.store
        .values_mut(bs)
        .copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
    let mut t = Tape::new();
    let hs = t.constant(Tensor::zeros(&[1, 4]));
    let hv = t.constant(Tensor::zeros(&[1, 8]));
    let (zs, zv) = m.fuse(&mut t, hs, hv).unwrap();
    assert_eq!(t.value(zs).values(), &[0.5, -1.0, 2.0, 0.25]);
    assert_eq!(t.value(zv).values(), &[0.0; 8]);
}

#[test]
fn fusion_identity_recovers_item_block() {
    let c = EncoderConfig {
        fusion_mlp_layers: 1,
        ..cfg()
    };
    let mut m = model(&c);
    let w = m.param("fuse_v.0.w").unwrap();
    let vals = m.store.values_mut(w);
    vals.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..8 {
        vals[(4 + j) * 8 + j] = 1.0;
    }
    let h_v: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
    let mut t = Tape::new();
    let hs = t.constant(Tensor::zeros(&[1, 4]));
    let hv = t.constant(Tensor::matrix(1, 8, h_v.clone()).unwrap());
    let (_, zv) = m.fuse(&mut t, hs, hv).unwrap();
    assert_eq!(t.value(zv).values(), h_v.as_slice());
}

#[test]
fn fusion_matches_affine_chain() {
    let mut m = model(&cfg());
    let mut r = crate::rng::from_seed(11);
    for id in m.encoder_params().to_vec() {
        m.store.perturb(id, 0.3, &mut r);
    }
    let hs: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let hv: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(1, 4, hs.clone()).unwrap());
    let b = t.constant(Tensor::matrix(1, 8, hv.clone()).unwrap());
    let (zs, zv) = m.fuse(&mut t, a, b).unwrap();
    let (os, ov) = m.select(&mut t, zs, zv).unwrap();

    let cat: Vec<f64> = hs.iter().chain(&hv).copied().collect();
    let chain = |prefix: &str| {
        let l0 = affine_ref(
            &cat,
            &param(&m, &format!("{prefix}.0.w")),
            &param(&m, &format!("{prefix}.0.b")),
        );
        let l0: Vec<f64> = l0.into_iter().map(gelu).collect();
        affine_ref(
            &l0,
            &param(&m, &format!("{prefix}.1.w")),
            &param(&m, &format!("{prefix}.1.b")),
        )
    };
    let (zs_ref, zv_ref) = (chain("fuse_s"), chain("fuse_v"));
    for (a, b) in t
        .value(zs)
        .values()
        .iter()
        .zip(&zs_ref)
        .chain(t.value(zv).values().iter().zip(&zv_ref))
    {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    let zcat: Vec<f64> = zs_ref.iter().chain(&zv_ref).copied().collect();
    let p = affine_ref(
        &zcat,
        &param(&m, "select.shared.w"),
        &param(&m, "select.shared.b"),
    );
    let os_ref = affine_ref(&p, &param(&m, "select.s.w"), &param(&m, "select.s.b"));
    let ov_ref = affine_ref(&p, &param(&m, "select.v.w"), &param(&m, "select.v.b"));
    for (a, b) in t
        .value(os)
        .values()
        .iter()
        .zip(&os_ref)
        .chain(t.value(ov).values().iter().zip(&ov_ref))
    {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn separate_selector_widths() {
    let m = model(&EncoderConfig {
        selector_mode: SelectorMode::SeparateMlp,
        ..cfg()
    });
    let out = outputs(&m, &batch(2, 3, 6));
    assert_eq!((out[4].cols(), out[5].cols()), (4, 8));
    assert_eq!((out[4].rows(), out[5].rows()), (3, 3));
}

#[test]
fn zero_fusion_layers_pass_through() {
    let m = model(&EncoderConfig {
        fusion_mlp_layers: 0,
        ..cfg()
    });
    let out = outputs(&m, &batch(4, 2, 6));
    assert_eq!(out[0], out[2]);
    assert_eq!(out[1], out[3]);
}

#[test]
fn one_to_one_shapes_and_difference() {
    let dual = model(&cfg());
    let joint = model(&EncoderConfig {
        variant: Variant::OneToOne,
        ..cfg()
    });
    let x = batch(8, 3, 6);
    let a = outputs(&dual, &x);
    let b = outputs(&joint, &x);
    assert_eq!(b[1].cols(), 8);
    assert_eq!(b[0], b[1]);
    assert_ne!(a[5], b[5]);

    let mut t = Tape::new();
    let bad = joint.encode_one_to_one(&mut t, &[vec![1, 2]], &[vec![1]], &[vec![1, 1]], None);
    assert!(matches!(bad, Err(Error::Contract(_))));
}

#[test]
fn one_to_one_with_constant_scenes_tracks_items() {
    let joint = model(&EncoderConfig {
        variant: Variant::OneToOne,
        ..cfg()
    });
    let mut x = batch(9, 2, 6);
    for s in x.scenes.iter_mut() {
        s.iter_mut().for_each(|v| *v = 2);
    }
    let mut y = x.clone();
    y.items = x.items.clone();
    assert_eq!(outputs(&joint, &x), outputs(&joint, &y));
    y.items[0][5] = if x.items[0][5] == 1 { 2 } else { 1 };
    assert_ne!(outputs(&joint, &x)[1].row(0), outputs(&joint, &y)[1].row(0));
    assert_eq!(outputs(&joint, &x)[1].row(1), outputs(&joint, &y)[1].row(1));
}

fn dsl_batch_losses(m: &DualModel, x: &Inputs, t: &mut Tape) -> (Var, Var) {
    let f = m.forward(t, x, None).unwrap();
    let items: Vec<Vec<usize>> = (0..x.len()).map(|b| vec![1 + b % 12, 3, 7]).collect();
    let scenes: Vec<Vec<usize>> = (0..x.len()).map(|b| vec![1 + b % 5, 4]).collect();
    let ic: Vec<&[usize]> = items.iter().map(Vec::as_slice).collect();
    let sc: Vec<&[usize]> = scenes.iter().map(Vec::as_slice).collect();
    let pv = m.score_candidates(t, f.o_v, &ic, Branch::Item).unwrap();
    let ps = m.score_candidates(t, f.o_s, &sc, Branch::Scene).unwrap();
    let yv: Vec<f64> = (0..x.len()).flat_map(|_| [1.0, 0.0, 0.0]).collect();
    let ys: Vec<f64> = (0..x.len()).flat_map(|_| [1.0, 0.0]).collect();
    let lv = dsl_loss_grouped(t, pv, &yv, &vec![3; x.len()]).unwrap();
    let ls = dsl_loss_grouped(t, ps, &ys, &vec![2; x.len()]).unwrap();
    (lv, ls)
}

#[test]
fn every_encoder_parameter_gets_gradient() {
    for seed in 0..3 {
        let m = DualModel::new(&cfg(), 12, 5, &[6], seed).unwrap();
        let x = batch(seed + 20, 6, 6);
        let mut t = Tape::new();
        let (lv, ls) = dsl_batch_losses(&m, &x, &mut t);
        let loss = t.add(lv, ls).unwrap();
        let g = t.backward(loss).unwrap();
        for &id in m.encoder_params() {
            let grad = g.param_or_zero(&m.store, id);
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "{} has zero gradient",
                m.store.get(id).name
            );
        }
        for &id in m.discriminator_params() {
            assert!(g.param(id).is_none());
        }
    }
}

#[test]
fn scene_encoder_learns_from_item_loss() {
    let m = model(&cfg());
    let mut t = Tape::new();
    let (lv, _) = dsl_batch_losses(&m, &batch(31, 5, 6), &mut t);
    let g = t.backward(lv).unwrap();
    for name in ["scene.emb", "scene.pos", "scene.l0.q.w", "scene.l1.ff2.w"] {
        let grad = g.param_or_zero(&m.store, m.param(name).unwrap());
        assert!(grad.iter().any(|&v| v != 0.0), "{name}");
    }
}

#[test]
fn init_depends_on_name_and_seed_only() {
    let a = model(&cfg());
    let b = model(&EncoderConfig {
        variant: Variant::ItemOnly,
        fusion_concat: false,
        ..cfg()
    });
    assert_eq!(param(&a, "item.emb"), param(&b, "item.emb"));
    assert_eq!(param(&a, "item.l1.ff1.w"), param(&b, "item.l1.ff1.w"));
    assert!(b.param("scene.l0.q.w").is_none());
}

#[test]
fn checkpoint_round_trip_and_shape_check() {
    let m = model(&cfg());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&path, &m, None).unwrap();
    let (back, vocabs) = load_checkpoint(&path).unwrap();
    assert!(vocabs.is_none());
    let x = batch(1, 3, 6);
    assert_eq!(outputs(&m, &x), outputs(&back, &x));

    let mut ck = Checkpoint::from_model(&m, None);
    ck.params[0].shape = vec![1, 1];
    assert!(matches!(ck.into_model(), Err(Error::Checkpoint(_))));
    std::fs::write(&path, "{not json").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn candidate_scoring_rejects_pad() {
    let m = model(&cfg());
    let mut t = Tape::new();
    let f = m.forward(&mut t, &batch(3, 1, 6), None).unwrap();
    let c: &[usize] = &[0, 1];
    assert!(m
        .score_candidates(&mut t, f.o_v, &[c], Branch::Item)
        .is_err());
}
