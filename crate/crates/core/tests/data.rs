use adseg::data::{make_synthetic, stack_depth, SyntheticSpec};
use adseg::Volume;

#[test]
fn equal_skew_gives_equal_class_sizes() {
    let mut totals = [0usize; 3];
    for seed in 0..20 {
        let spec = SyntheticSpec { num_classes: 4, seed, ..SyntheticSpec::default() };
        let data = make_synthetic(&spec).unwrap();
        for (_, y) in &data.split.labeled {
            for c in 1..4u8 {
                totals[c as usize - 1] += y.count(c);
            }
        }
    }
    let mean = totals.iter().sum::<usize>() as f64 / 3.0;
    for t in totals {
        assert!((t as f64 - mean).abs() <= 0.1 * mean, "{totals:?}");
    }
}

#[test]
fn skew_shrinks_later_classes() {
    let spec = SyntheticSpec { num_classes: 3, class_frequency_skew: 3.0, grid_size: [24; 3], ..SyntheticSpec::default() };
    let data = make_synthetic(&spec).unwrap();
    let y = &data.split.labeled[0].1;
    let ratio = y.count(1) as f64 / y.count(2) as f64;
    assert!((1.8..5.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn domains_differ_in_mean_intensity() {
    let mut gaps = Vec::new();
    let mut means: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for seed in 0..20 {
        let spec = SyntheticSpec { num_domains: 2, seed, ..SyntheticSpec::default() };
        let data = make_synthetic(&spec).unwrap();
        let split = &data.split;
        let vols = split
            .labeled
            .iter()
            .map(|(v, _)| v)
            .zip(&split.labeled_domains)
            .chain(split.unlabeled.iter().zip(&split.unlabeled_domains));
        let mut per = [Vec::new(), Vec::new()];
        for (v, &d) in vols {
            per[d as usize].push(v.mean());
        }
        let m = |x: &Vec<f64>| x.iter().sum::<f64>() / x.len() as f64;
        gaps.push(m(&per[1]) - m(&per[0]));
        means[0].extend(&per[0]);
        means[1].extend(&per[1]);
    }
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64)
    };
    let ((m0, v0), (m1, v1)) = (stats(&means[0]), stats(&means[1]));
    let pooled = ((v0 + v1) / 2.0).sqrt();
    assert!(m1 - m0 > pooled, "gap {} pooled std {pooled}", m1 - m0);
    assert!(gaps.iter().all(|&g| g > 0.0));
}

#[test]
fn synthetic_is_deterministic() {
    let spec = SyntheticSpec { num_domains: 2, seed: 7, test_per_domain: 1, ..SyntheticSpec::default() };
    assert_eq!(make_synthetic(&spec).unwrap(), make_synthetic(&spec).unwrap());
}

#[test]
fn stacking_ten_slices_to_thirty_two() {
    let v = Volume::new([10, 1, 1], (0..10).map(f64::from).collect(), [1.0; 3]).unwrap();
    let s = stack_depth(&v, 32).unwrap();
    let expect: Vec<f64> = (0..32).map(|i| (i % 10) as f64).collect();
    assert_eq!(s.data(), &expect[..]);
    assert!(stack_depth(&v, 8).is_err());
}
