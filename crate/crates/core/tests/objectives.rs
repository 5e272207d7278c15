use adseg::objectives::{dice_ce, l_deno, ramp_weight};
use adseg::{one_hot_encode, LabelMap, ProbMap};

#[test]
fn two_class_hand_value() {
    // one voxel of each class, logits chosen so p = (0.8, 0.2) and (0.3, 0.7)
    let l = |p: f64| (p / (1.0 - p)).ln();
    let logits = ProbMap::logits(2, [1, 1, 2], vec![l(0.8), l(0.3), 0.0, 0.0]).unwrap();
    let y = one_hot_encode(&LabelMap::new([1, 1, 2], vec![0, 1], 2).unwrap()).unwrap();
    let ce = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
    let eps = 1e-5;
    let dice0 = 1.0 - (2.0 * 0.8 + eps) / (1.1 + 1.0 + eps);
    let dice1 = 1.0 - (2.0 * 0.7 + eps) / (0.9 + 1.0 + eps);
    let expect = 0.5 * (ce + (dice0 + dice1) / 2.0);
    let got = dice_ce(&logits, &y, None).unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    let weighted = dice_ce(&logits, &y, Some(&[1.0, 1.0])).unwrap();
    assert!((weighted - got).abs() < 1e-15);
}

#[test]
fn batch_loss_is_the_mean() {
    let y = one_hot_encode(&LabelMap::new([1, 1, 2], vec![0, 1], 2).unwrap()).unwrap();
    let a = ProbMap::logits(2, [1, 1, 2], vec![1.0, -0.5, 0.2, 0.3]).unwrap();
    let b = ProbMap::logits(2, [1, 1, 2], vec![-2.0, 0.5, 0.9, 0.1]).unwrap();
    let both = l_deno(&[a.clone(), b.clone()], &[y.clone(), y.clone()]).unwrap();
    let mean = (dice_ce(&a, &y, None).unwrap() + dice_ce(&b, &y, None).unwrap()) / 2.0;
    assert!((both - mean).abs() < 1e-14);
}

#[test]
fn ramp_reaches_mu_at_forty_percent() {
    assert!((ramp_weight(400, 1000, 10.0) - 10.0).abs() < 1e-12);
    assert!((ramp_weight(200, 1000, 10.0) - 10.0 * (-5.0f64 * 0.25).exp()).abs() < 1e-12);
    assert!((ramp_weight(0, 1000, 10.0) - 10.0 * (-5.0f64).exp()).abs() < 1e-12);
    assert_eq!(ramp_weight(900, 1000, 10.0), 10.0);
}
