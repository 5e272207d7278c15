use adseg::eval::{sliding_window_infer, tile_starts};
use adseg::{ProbMap, Volume};

fn pointwise(v: &Volume) -> adseg::Result<ProbMap> {
    let n = v.data().len();
    let mut data = vec![0.0; 2 * n];
    for (i, &x) in v.data().iter().enumerate() {
        data[n + i] = 3.0 * x - 1.0;
    }
    ProbMap::logits(2, v.dims(), data)
}

fn ramp_volume(dims: [usize; 3]) -> Volume {
    let n = dims.iter().product();
    let data = (0..n).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    Volume::new(dims, data, [1.0; 3]).unwrap()
}

#[test]
fn single_tile_is_a_direct_forward() {
    let v = ramp_volume([16, 16, 16]);
    let direct = pointwise(&v).unwrap().softmax();
    let tiled = sliding_window_infer(&v, [16, 16, 16], 0.5, 2, pointwise).unwrap();
    for (a, b) in tiled.data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn blending_a_translation_invariant_predictor_is_exact() {
    let v = ramp_volume([20, 24, 18]);
    let direct = pointwise(&v).unwrap().softmax();
    for overlap in [0.0, 0.25, 0.5, 0.75] {
        let tiled = sliding_window_infer(&v, [16, 16, 16], overlap, 2, pointwise).unwrap();
        let worst = tiled.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "overlap {overlap}: {worst}");
    }
}

#[test]
fn small_volumes_are_padded() {
    let v = ramp_volume([10, 16, 16]);
    let out = sliding_window_infer(&v, [16, 16, 16], 0.5, 2, pointwise).unwrap();
    assert_eq!(out.dims(), [10, 16, 16]);
    let direct = pointwise(&v).unwrap().softmax();
    let worst = out.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9);
}

#[test]
fn tiles_cover_every_index() {
    for len in 16..60 {
        for stride in [4, 8, 12, 16] {
            let starts = tile_starts(len, 16, stride);
            let mut seen = vec![false; len];
            for s in &starts {
                seen[*s..s + 16].iter_mut().for_each(|x| *x = true);
            }
            assert!(seen.iter().all(|&x| x), "len {len} stride {stride}");
            assert_eq!(*starts.last().unwrap(), len - 16);
        }
    }
}
