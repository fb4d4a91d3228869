use markov_equilibrium_web::{lq_policies, mean_variance, tv_profile};

#[test]
fn mean_variance_tracks_closed_form() {
    let d = mean_variance(1.02, 0.05, 0.1, 1.0, 4).unwrap();
    assert_eq!(d.epochs, vec![1, 2, 3]);
    for ((u, c), s) in d.equilibrium.iter().zip(&d.closed_form).zip(&d.spread) {
        assert!((u - c).abs() < 1e-6, "{u} vs {c}");
        assert!(*s < 1e-6);
    }
}

#[test]
fn lq_policies_split_only_with_a_drifting_target() {
    let drifting = lq_policies(0.5, 1.0, true).unwrap();
    assert!(drifting.naive_gap > 1e-3);
    let spread = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(spread(&drifting.equilibrium, &drifting.precommitment) > 0.1);

    let fixed = lq_policies(0.5, 1.0, false).unwrap();
    assert!(fixed.naive_gap <= 1e-9);
    assert!(spread(&fixed.equilibrium, &fixed.naive) < 1e-9);
}

#[test]
fn tv_profiles_separate_smooth_and_degenerate_kernels() {
    let d = tv_profile(1.0, 0.0).unwrap();
    // smooth kernel: distance decreases to zero with the offset
    assert!(d.additive.windows(2).all(|w| w[1] <= w[0]));
    assert!(*d.additive.last().unwrap() < 1e-3);
    // scaled noise at u = 0: the indicator of {0} jumps from 1 to 0
    assert!(d.degenerate.iter().all(|&g| g == 1.0));
    let away = tv_profile(1.0, 0.5).unwrap();
    assert!(away.degenerate.iter().all(|&g| g == 0.0));
}
