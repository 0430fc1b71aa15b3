use dualseq_demo::{ccr_view, prior_histogram, scene_item_heatmap};

#[test]
fn ccr_weights_sharpen_as_temperature_drops() {
    let warm = ccr_view(1, 6, 6, 2.0, 2.0).unwrap();
    let cold = ccr_view(1, 6, 6, 0.1, 0.1).unwrap();
    for v in [&warm, &cold] {
        assert!((v.w_plus.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v.w_minus.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v.anchor_grad.len(), 2);
    }
    let max = |w: &[f64]| w.iter().copied().fold(0.0, f64::max);
    assert!(max(&cold.w_minus) > max(&warm.w_minus));
    assert!(max(&cold.w_plus) > max(&warm.w_plus));
}

#[test]
fn heatmap_counts_every_event() {
    let h = scene_item_heatmap(3, 4, 40, 1.0, 0.0).unwrap();
    let total: u64 = h.counts.iter().flatten().sum();
    assert_eq!(total as usize, h.events);
    assert!(h.mutual_information > 0.5);
    let noisy = scene_item_heatmap(3, 4, 40, 1.0, 0.5).unwrap();
    assert!(noisy.mutual_information < h.mutual_information);
}

#[test]
fn histogram_moments() {
    let h = prior_histogram("standard-gaussian", 5, 20_000, 40).unwrap();
    assert!(h.mean.abs() < 0.05 && (h.variance - 1.0).abs() < 0.05);
    assert_eq!(h.counts.iter().sum::<usize>(), 20_000);
    assert!(prior_histogram("cauchy", 5, 10, 4).is_err());
}
