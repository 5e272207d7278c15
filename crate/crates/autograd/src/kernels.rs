//! Raw forward/backward kernels over contiguous `[N, C, D, H, W]` buffers.
//!
//! Convolutions lower to GEMM through an explicit im2col buffer. Batch items
//! are processed sequentially and weight gradients are accumulated in batch
//! order, so results are bit-reproducible.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with explicit row/col strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that lie inside the provided slices
    // (checked by callers through the shape arithmetic below) and `c` is a
    // dense row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_dim(&self, d: usize) -> Result<usize> {
        let padded = d + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return Err(Error::Shape(format!(
                "extent {d} too small for kernel {} (pad {})",
                self.kernel, self.pad
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

fn dims5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    match t.shape() {
        &[n, c, d, h, w] => Ok([n, c, d, h, w]),
        s => Err(Error::Shape(format!("{what}: expected rank-5 tensor, got {s:?}"))),
    }
}

/// Fills `cols` (`[Cin*k^3, L]`) from a single `[Cin, D, H, W]` sample.
fn im2col(x: &[f64], cin: usize, dims: [usize; 3], out: [usize; 3], g: ConvGeometry, cols: &mut [f64]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let k = g.kernel;
    let l = od * oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = (z * g.stride + kd) as isize - g.pad as isize;
                        for y in 0..oh {
                            let iy = (y * g.stride + kh) as isize - g.pad as isize;
                            let inside_zy =
                                iz >= 0 && (iz as usize) < d && iy >= 0 && (iy as usize) < h;
                            for xx in 0..ow {
                                let ix = (xx * g.stride + kw) as isize - g.pad as isize;
                                dst[idx] = if inside_zy && ix >= 0 && (ix as usize) < w {
                                    xc[(iz as usize * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into a `[Cin, D, H, W]` gradient buffer.
fn col2im(cols: &[f64], cin: usize, dims: [usize; 3], out: [usize; 3], g: ConvGeometry, dx: &mut [f64]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let k = g.kernel;
    let l = od * oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let dxc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * l..(row + 1) * l];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = (z * g.stride + kd) as isize - g.pad as isize;
                        for y in 0..oh {
                            let iy = (y * g.stride + kh) as isize - g.pad as isize;
                            let inside_zy =
                                iz >= 0 && (iz as usize) < d && iy >= 0 && (iy as usize) < h;
                            for xx in 0..ow {
                                let ix = (xx * g.stride + kw) as isize - g.pad as isize;
                                if inside_zy && ix >= 0 && (ix as usize) < w {
                                    dxc[(iz as usize * h + iy as usize) * w + ix as usize] +=
                                        src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<([usize; 5], [usize; 3], usize)> {
    let [n, cin, d, h, wd] = dims5(x, "conv3d input")?;
    let ws = w.shape();
    if ws.len() != 5 || ws[1] != cin || ws[2..].iter().any(|&s| s != g.kernel) {
        return Err(Error::Shape(format!(
            "conv3d weight {ws:?} does not match input channels {cin} / kernel {}",
            g.kernel
        )));
    }
    let out = [g.out_dim(d)?, g.out_dim(h)?, g.out_dim(wd)?];
    Ok(([n, cin, d, h, wd], out, ws[0]))
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let ([n, cin, d, h, wd], out, cout) = conv_dims(x, w, g)?;
    if b.len() != cout {
        return Err(Error::Shape(format!("conv3d bias len {} != {cout}", b.len())));
    }
    let l = out[0] * out[1] * out[2];
    let kk = cin * g.kernel.pow(3);
    let in_per = cin * d * h * wd;
    let mut y = Tensor::zeros(&[n, cout, out[0], out[1], out[2]]);
    let mut cols = vec![0.0; kk * l];
    for s in 0..n {
        im2col(&x.data()[s * in_per..(s + 1) * in_per], cin, [d, h, wd], out, g, &mut cols);
        let ys = &mut y.data_mut()[s * cout * l..(s + 1) * cout * l];
        for (co, chunk) in ys.chunks_mut(l).enumerate() {
            chunk.fill(b.data()[co]);
        }
        gemm(cout, kk, l, w.data(), (kk as isize, 1), &cols, (l as isize, 1), 1.0, ys);
    }
    Ok(y)
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    g: ConvGeometry,
    dy: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let ([n, cin, d, h, wd], out, cout) = conv_dims(x, w, g)?;
    let l = out[0] * out[1] * out[2];
    let kk = cin * g.kernel.pow(3);
    let in_per = cin * d * h * wd;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![0.0; kk * l];
    let mut dcols = vec![0.0; kk * l];
    for s in 0..n {
        let dys = &dy.data()[s * cout * l..(s + 1) * cout * l];
        for (co, chunk) in dys.chunks(l).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        im2col(&x.data()[s * in_per..(s + 1) * in_per], cin, [d, h, wd], out, g, &mut cols);
        // dW[cout, kk] += dY[cout, l] * cols^T
        gemm(cout, l, kk, dys, (l as isize, 1), &cols, (1, l as isize), 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            // dcols[kk, l] = W^T * dY
            gemm(kk, cout, l, w.data(), (1, kk as isize), dys, (l as isize, 1), 0.0, &mut dcols);
            col2im(&dcols, cin, [d, h, wd], out, g, &mut dx.data_mut()[s * in_per..(s + 1) * in_per]);
        }
    }
    Ok((dx, dw, db))
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x up-sampling).
/// Weight layout `[Cin, Cout, 2, 2, 2]`.
pub fn upconv2_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, cin, d, h, wd] = dims5(x, "upconv input")?;
    let ws = w.shape();
    if ws.len() != 5 || ws[0] != cin || ws[2..] != [2, 2, 2] {
        return Err(Error::Shape(format!("upconv weight {ws:?} vs input channels {cin}")));
    }
    let cout = ws[1];
    if b.len() != cout {
        return Err(Error::Shape(format!("upconv bias len {} != {cout}", b.len())));
    }
    let l = d * h * wd;
    let rows = cout * 8;
    let mut blocks = vec![0.0; rows * l];
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let mut y = Tensor::zeros(&[n, cout, od, oh, ow]);
    for s in 0..n {
        let xs = &x.data()[s * cin * l..(s + 1) * cin * l];
        // blocks[cout*8, l] = W^T[cout*8, cin] * X[cin, l]
        gemm(rows, cin, l, w.data(), (1, rows as isize), xs, (l as isize, 1), 0.0, &mut blocks);
        let ys = &mut y.data_mut()[s * cout * od * oh * ow..(s + 1) * cout * od * oh * ow];
        for co in 0..cout {
            let bias = b.data()[co];
            for tap in 0..8 {
                let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let src = &blocks[(co * 8 + tap) * l..(co * 8 + tap + 1) * l];
                let mut idx = 0;
                for z in 0..d {
                    for yy in 0..h {
                        let base = ((co * od + 2 * z + a) * oh + 2 * yy + bb) * ow + c;
                        for xx in 0..wd {
                            ys[base + 2 * xx] = src[idx] + bias;
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn upconv2_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let [n, cin, d, h, wd] = dims5(x, "upconv input")?;
    let cout = w.shape()[1];
    let l = d * h * wd;
    let rows = cout * 8;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let mut blocks = vec![0.0; rows * l];
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for s in 0..n {
        let dys = &dy.data()[s * cout * od * oh * ow..(s + 1) * cout * od * oh * ow];
        for co in 0..cout {
            for tap in 0..8 {
                let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let dst = &mut blocks[(co * 8 + tap) * l..(co * 8 + tap + 1) * l];
                let mut idx = 0;
                for z in 0..d {
                    for yy in 0..h {
                        let base = ((co * od + 2 * z + a) * oh + 2 * yy + bb) * ow + c;
                        for xx in 0..wd {
                            dst[idx] = dys[base + 2 * xx];
                            idx += 1;
                        }
                    }
                }
            }
            db.data_mut()[co] += dys[co * od * oh * ow..(co + 1) * od * oh * ow].iter().sum::<f64>();
        }
        let xs = &x.data()[s * cin * l..(s + 1) * cin * l];
        // dW[cin, cout*8] += X[cin, l] * blocks^T
        gemm(cin, l, rows, xs, (l as isize, 1), &blocks, (1, l as isize), 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            // dX[cin, l] = W[cin, cout*8] * blocks
            gemm(
                cin,
                rows,
                l,
                w.data(),
                (rows as isize, 1),
                &blocks,
                (l as isize, 1),
                0.0,
                &mut dx.data_mut()[s * cin * l..(s + 1) * cin * l],
            );
        }
    }
    Ok((dx, dw, db))
}

/// Per-sample group statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<(Tensor, GroupNormCache)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("group norm input {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if groups == 0 || c % groups != 0 || gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "group norm: {c} channels, {groups} groups, affine {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    let s = x.spatial_size();
    let per_group = c / groups * s;
    let mut y = Tensor::zeros(shape);
    let mut xhat = Tensor::zeros(shape);
    let mut rstd = Vec::with_capacity(n * groups);
    for (gi, xs) in x.data().chunks(per_group).enumerate() {
        let mean = xs.iter().sum::<f64>() / per_group as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        let group = gi % groups;
        let off = gi * per_group;
        for (j, v) in xs.iter().enumerate() {
            let ch = group * (c / groups) + j / s;
            let xh = (v - mean) * r;
            xhat.data_mut()[off + j] = xh;
            y.data_mut()[off + j] = xh * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((y, GroupNormCache { xhat, rstd }))
}

pub fn group_norm_backward(
    cache: &GroupNormCache,
    gamma: &Tensor,
    groups: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let shape = cache.xhat.shape();
    let c = shape[1];
    let s = cache.xhat.spatial_size();
    let cpg = c / groups;
    let per_group = cpg * s;
    let m = per_group as f64;
    let mut dx = Tensor::zeros(shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for (gi, (dys, xh)) in dy
        .data()
        .chunks(per_group)
        .zip(cache.xhat.data().chunks(per_group))
        .enumerate()
    {
        let group = gi % groups;
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..per_group {
            let ch = group * cpg + j / s;
            dgamma.data_mut()[ch] += dys[j] * xh[j];
            dbeta.data_mut()[ch] += dys[j];
            let dxh = dys[j] * gamma.data()[ch];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let r = cache.rstd[gi];
        let off = gi * per_group;
        for j in 0..per_group {
            let ch = group * cpg + j / s;
            let dxh = dys[j] * gamma.data()[ch];
            dx.data_mut()[off + j] = r / m * (m * dxh - sum_dxh - xh[j] * sum_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

/// `y[N, out] = x[N, in] * W[out, in]^T + b`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, fin) = match x.shape() {
        &[n, f] => (n, f),
        s => return Err(Error::Shape(format!("linear input {s:?}"))),
    };
    let ws = w.shape();
    if ws.len() != 2 || ws[1] != fin || b.len() != ws[0] {
        return Err(Error::Shape(format!("linear weight {ws:?} vs input width {fin}")));
    }
    let fout = ws[0];
    let mut y = Tensor::zeros(&[n, fout]);
    for row in y.data_mut().chunks_mut(fout) {
        row.copy_from_slice(b.data());
    }
    gemm(n, fin, fout, x.data(), (fin as isize, 1), w.data(), (1, fin as isize), 1.0, y.data_mut());
    Ok(y)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[fout]);
    for row in dy.data().chunks(fout) {
        for (a, b) in db.data_mut().iter_mut().zip(row) {
            *a += b;
        }
    }
    gemm(n, fout, fin, dy.data(), (fout as isize, 1), w.data(), (fin as isize, 1), 0.0, dx.data_mut());
    gemm(fout, n, fin, dy.data(), (1, fout as isize), x.data(), (fin as isize, 1), 0.0, dw.data_mut());
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Tensor {
        let [n, cin, d, h, wd] = dims5(x, "").unwrap();
        let cout = w.shape()[0];
        let k = g.kernel;
        let out = [g.out_dim(d).unwrap(), g.out_dim(h).unwrap(), g.out_dim(wd).unwrap()];
        let mut y = Tensor::zeros(&[n, cout, out[0], out[1], out[2]]);
        let mut idx = 0;
        for s in 0..n {
            for co in 0..cout {
                for z in 0..out[0] {
                    for yy in 0..out[1] {
                        for xx in 0..out[2] {
                            let mut acc = b.data()[co];
                            for ci in 0..cin {
                                for a in 0..k {
                                    for bb in 0..k {
                                        for c in 0..k {
                                            let iz = (z * g.stride + a) as isize - g.pad as isize;
                                            let iy = (yy * g.stride + bb) as isize - g.pad as isize;
                                            let ix = (xx * g.stride + c) as isize - g.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= wd {
                                                continue;
                                            }
                                            let xv = x.data()[(((s * cin + ci) * d + iz) * h + iy) * wd + ix];
                                            let wv = w.data()[(((co * cin + ci) * k + a) * k + bb) * k + c];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y.data_mut()[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for g in [
            ConvGeometry { kernel: 3, stride: 1, pad: 1 },
            ConvGeometry { kernel: 2, stride: 2, pad: 0 },
            ConvGeometry { kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = ramp(&[2, 3, 4, 4, 6], 0.1);
            let w = ramp(&[5, 3, g.kernel, g.kernel, g.kernel], 0.05);
            let b = ramp(&[5], 0.3);
            let fast = conv3d_forward(&x, &w, &b, g).unwrap();
            let slow = naive_conv(&x, &w, &b, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn upconv_places_each_tap_once() {
        let x = Tensor::new(&[1, 1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(&[1, 1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::new(&[1], vec![0.5]).unwrap();
        let y = upconv2_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        let expect: Vec<f64> = (0..8).map(|i| 2.0 * i as f64 + 0.5).collect();
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let x = ramp(&[2, 4, 3, 3, 3], 0.7);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let (y, _) = group_norm_forward(&x, &gamma, &beta, 2, 0.0).unwrap();
        for chunk in y.data().chunks(2 * 27) {
            let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / chunk.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }
}
