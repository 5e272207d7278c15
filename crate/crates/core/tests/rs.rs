use adseg::rs::{ensemble, gaussian_blur3d, RsConfig};
use adseg::{ProbKind, ProbMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn blurred_spike_matches_explicit_kernel() {
    let (k, n) = (2, 9usize);
    let dims = [n, n, n];
    let centre = (4 * n + 4) * n + 4;
    let mut data = vec![0.0; 2 * n * n * n];
    for v in 0..n * n * n {
        let hot = v == centre;
        data[v] = if hot { 0.0 } else { 1.0 };
        data[n * n * n + v] = if hot { 1.0 } else { 0.0 };
    }
    let p = ProbMap::new(k, dims, data, ProbKind::Simplex).unwrap();
    let (sigma, radius) = (1.0f64, 2i64);
    let out = gaussian_blur3d(&p, sigma, radius as usize).unwrap();

    let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    for z in 0..n as i64 {
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                let (dz, dy, dx) = (z - 4, y - 4, x - 4);
                let expect = if dz.abs() <= radius && dy.abs() <= radius && dx.abs() <= radius {
                    taps[(dz + radius) as usize] * taps[(dy + radius) as usize] * taps[(dx + radius) as usize]
                        / norm.powi(3)
                } else {
                    0.0
                };
                let v = ((z as usize * n) + y as usize) * n + x as usize;
                let got = out.data()[n * n * n + v];
                assert!((got - expect).abs() < 1e-12, "({z},{y},{x}) {got} vs {expect}");
            }
        }
    }
}

#[test]
fn confident_agreement_survives_sampling() {
    let (k, dims) = (3, [4, 4, 4]);
    let n = 64;
    let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 3) as u8).collect();
    let mut xi = vec![0.0; k * n];
    let mut psi = vec![0.0; k * n];
    for (v, &c) in labels.iter().enumerate() {
        for j in 0..k {
            xi[j * n + v] = if j == c as usize { 0.98 } else { 0.01 };
            psi[j * n + v] = if j == c as usize { 6.0 } else { -6.0 };
        }
    }
    let p_xi = ProbMap::new(k, dims, xi, ProbKind::Simplex).unwrap();
    let p_psi = ProbMap::logits(k, dims, psi).unwrap();
    let cfg = RsConfig { blur_radius: 0, ..RsConfig::default() };
    let mut agree = 0;
    for seed in 0..100 {
        let out = ensemble(&p_xi, &p_psi, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        agree += out.data().iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    assert!(agree as f64 >= 0.99 * (100 * n) as f64, "agreement {agree}");
}
