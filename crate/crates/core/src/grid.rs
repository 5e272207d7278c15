//! Low-level 3D grid routines: reflection indexing, separable Gaussian
//! filtering and coordinate resampling.

use crate::types::{voxel_count, Dims};
use crate::{Error, Result};

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid
/// for any integer offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / s).collect())
}

/// Convolves one `dims`-shaped channel with `taps` along every axis using
/// reflected borders. The total sum of the channel is preserved.
pub fn separable_filter(channel: &[f64], dims: Dims, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let [d, h, w] = dims;
    let mut cur = channel.to_vec();
    let mut next = vec![0.0; cur.len()];
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let idx = (z * h + y) * w + x;
                    let pos = [z, y, x][axis] as isize;
                    let base = idx - pos as usize * stride;
                    let mut acc = 0.0;
                    for (j, &t) in taps.iter().enumerate() {
                        let src = reflect_index(pos + j as isize - r, len);
                        acc += t * cur[base + src * stride];
                    }
                    next[idx] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Trilinear interpolation with coordinates clamped to the grid.
pub fn sample_trilinear(data: &[f64], dims: Dims, p: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let c = p[a].clamp(0.0, max);
        let f = c.floor();
        lo[a] = f as usize;
        frac[a] = c - f;
    }
    let [_, h, w] = dims;
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut weight = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let up = (corner >> (2 - a)) & 1 == 1;
            idx[a] = if up { (lo[a] + 1).min(dims[a] - 1) } else { lo[a] };
            weight *= if up { frac[a] } else { 1.0 - frac[a] };
        }
        if weight != 0.0 {
            acc += weight * data[(idx[0] * h + idx[1]) * w + idx[2]];
        }
    }
    acc
}

/// Nearest-neighbour lookup with coordinates clamped to the grid.
pub fn sample_nearest<T: Copy>(data: &[T], dims: Dims, p: [f64; 3]) -> T {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        idx[a] = p[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize;
    }
    data[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]]
}

/// Copies the sub-box starting at `origin` with extent `size`; indices beyond
/// the source are reflected.
pub fn crop_reflect<T: Copy>(data: &[T], dims: Dims, origin: [isize; 3], size: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        let sz = reflect_index(origin[0] + z as isize, dims[0]);
        for y in 0..size[1] {
            let sy = reflect_index(origin[1] + y as isize, dims[1]);
            for x in 0..size[2] {
                let sx = reflect_index(origin[2] + x as isize, dims[2]);
                out.push(data[(sz * dims[1] + sy) * dims[2] + sx]);
            }
        }
    }
    out
}
