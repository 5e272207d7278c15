//! Sampling-based volumetric data augmentation.
//!
//! Each call samples `n_aug` distinct operations from a pool of seven and
//! applies them in the sampled order. Spatial operations resample image and
//! label with one shared geometry (trilinear for the image, nearest for the
//! label); voxel operations only touch the image.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::grid;
use crate::types::{voxel_count, Dims, LabelMap, Volume};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentationOp {
    RandomCrop,
    RandomRotation,
    RandomScaling,
    GaussianBlur,
    Brightness,
    Contrast,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Spatial,
    Voxel,
}

impl AugmentationOp {
    pub const ALL: [AugmentationOp; 7] = [
        AugmentationOp::RandomCrop,
        AugmentationOp::RandomRotation,
        AugmentationOp::RandomScaling,
        AugmentationOp::GaussianBlur,
        AugmentationOp::Brightness,
        AugmentationOp::Contrast,
        AugmentationOp::Gamma,
    ];

    pub fn kind(self) -> OpKind {
        match self {
            AugmentationOp::RandomCrop | AugmentationOp::RandomRotation | AugmentationOp::RandomScaling => {
                OpKind::Spatial
            }
            _ => OpKind::Voxel,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentationOp::RandomCrop => "random_crop",
            AugmentationOp::RandomRotation => "random_rotation",
            AugmentationOp::RandomScaling => "random_scaling",
            AugmentationOp::GaussianBlur => "gaussian_blur",
            AugmentationOp::Brightness => "brightness",
            AugmentationOp::Contrast => "contrast",
            AugmentationOp::Gamma => "gamma",
        }
    }
}

/// Parameter ranges of the seven operations.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdaConfig {
    /// Output extent of `random_crop`.
    pub patch: Dims,
    /// Maximum absolute rotation per axis, degrees.
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub blur_sigma: (f64, f64),
    /// Maximum absolute shift as a fraction of the dynamic range.
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub gamma: (f64, f64),
}

impl SvdaConfig {
    pub fn new(patch: Dims) -> Self {
        Self {
            patch,
            rotation_deg: 30.0,
            scale: (0.85, 1.25),
            blur_sigma: (0.5, 1.5),
            brightness: 0.1,
            contrast: (0.75, 1.25),
            gamma: (0.7, 1.5),
        }
    }
}

/// An operation together with the parameters it was applied with.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedOp {
    pub op: AugmentationOp,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub volume: Volume,
    pub label: Option<LabelMap>,
    pub applied: Vec<AppliedOp>,
}

/// Draws `n_aug` distinct operations uniformly without replacement, in random order.
pub fn sample_ops<R: Rng + ?Sized>(n_aug: usize, rng: &mut R) -> Result<Vec<AugmentationOp>> {
    if n_aug == 0 || n_aug > AugmentationOp::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "n_aug must lie in 1..=7, got {n_aug}"
        )));
    }
    let mut pool = AugmentationOp::ALL;
    let (picked, _) = pool.partial_shuffle(rng, n_aug);
    Ok(picked.to_vec())
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Rotation by `angle` radians in the plane orthogonal to `axis`
/// (0 = depth, 1 = height, 2 = width).
fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    m
}

/// Rotation taking input coordinates (relative to the centre) to output
/// coordinates, for per-axis angles in degrees.
pub fn rotation_matrix(angles_deg: [f64; 3]) -> Mat3 {
    let r = |a: usize| axis_rotation(a, angles_deg[a].to_radians());
    mat_mul(&r(0), &mat_mul(&r(1), &r(2)))
}

/// Resamples image (and label) through `inverse`, which maps output
/// coordinates relative to the grid centre onto input coordinates.
fn warp(v: &Volume, y: Option<&LabelMap>, inverse: &Mat3) -> Result<(Volume, Option<LabelMap>)> {
    let dims = v.dims();
    let c = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let n = voxel_count(dims);
    let mut img = Vec::with_capacity(n);
    let mut lab = y.map(|_| Vec::with_capacity(n));
    for z in 0..dims[0] {
        for yy in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64 - c[0], yy as f64 - c[1], x as f64 - c[2]];
                let mut q = [0.0; 3];
                for i in 0..3 {
                    q[i] = c[i] + (0..3).map(|j| inverse[i][j] * p[j]).sum::<f64>();
                }
                img.push(grid::sample_trilinear(v.data(), dims, q));
                if let (Some(out), Some(src)) = (lab.as_mut(), y) {
                    out.push(grid::sample_nearest(src.data(), dims, q));
                }
            }
        }
    }
    let label = match (lab, y) {
        (Some(data), Some(src)) => Some(src.with_data(data)?),
        _ => None,
    };
    Ok((v.with_data(img)?, label))
}

/// Extracts a `patch`-sized box at `origin`; regions outside the volume are
/// filled by reflection.
pub fn crop(v: &Volume, y: Option<&LabelMap>, origin: [isize; 3], patch: Dims) -> Result<(Volume, Option<LabelMap>)> {
    let dims = v.dims();
    let img = grid::crop_reflect(v.data(), dims, origin, patch);
    let lab = match y {
        Some(l) => Some(LabelMap::new(patch, grid::crop_reflect(l.data(), dims, origin, patch), l.num_classes())?),
        None => None,
    };
    Ok((Volume::new(patch, img, v.spacing())?, lab))
}

/// Random crop origin. Axes shorter than the patch are centred (and later
/// reflection-padded).
pub fn random_origin<R: Rng + ?Sized>(dims: Dims, patch: Dims, rng: &mut R) -> [isize; 3] {
    let mut o = [0isize; 3];
    for a in 0..3 {
        o[a] = if dims[a] > patch[a] {
            rng.random_range(0..=dims[a] - patch[a]) as isize
        } else {
            -(((patch[a] - dims[a]) / 2) as isize)
        };
    }
    o
}

/// Brings a pair to exactly `patch` size with a random crop (or reflection padding).
pub fn crop_to_patch<R: Rng + ?Sized>(
    v: &Volume,
    y: Option<&LabelMap>,
    patch: Dims,
    rng: &mut R,
) -> Result<(Volume, Option<LabelMap>)> {
    if v.dims() == patch {
        return Ok((v.clone(), y.cloned()));
    }
    let origin = random_origin(v.dims(), patch, rng);
    crop(v, y, origin, patch)
}

pub fn blur_volume(v: &Volume, sigma: f64) -> Result<Volume> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let taps = grid::gaussian_kernel(sigma, radius)?;
    v.with_data(grid::separable_filter(v.data(), v.dims(), &taps))
}

/// Applies `ops` in order, sampling each operation's parameters from `cfg`.
pub fn apply<R: Rng + ?Sized>(
    v: &Volume,
    y: Option<&LabelMap>,
    ops: &[AugmentationOp],
    cfg: &SvdaConfig,
    rng: &mut R,
) -> Result<AugmentedPair> {
    if let Some(l) = y {
        if l.dims() != v.dims() {
            return Err(Error::Shape(format!(
                "augmenting volume {:?} with label {:?}",
                v.dims(),
                l.dims()
            )));
        }
    }
    let mut vol = v.clone();
    let mut lab = y.cloned();
    let mut applied = Vec::with_capacity(ops.len());
    for &op in ops {
        let params = match op {
            AugmentationOp::RandomCrop => {
                let origin = random_origin(vol.dims(), cfg.patch, rng);
                let (nv, nl) = crop(&vol, lab.as_ref(), origin, cfg.patch)?;
                vol = nv;
                lab = nl;
                origin.iter().map(|&o| o as f64).collect()
            }
            AugmentationOp::RandomRotation => {
                let r = cfg.rotation_deg;
                let angles = [
                    uniform(rng, (-r, r)),
                    uniform(rng, (-r, r)),
                    uniform(rng, (-r, r)),
                ];
                let rot = rotation_matrix(angles);
                // inverse of a rotation is its transpose
                let mut inv = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        inv[i][j] = rot[j][i];
                    }
                }
                let (nv, nl) = warp(&vol, lab.as_ref(), &inv)?;
                vol = nv;
                lab = nl;
                angles.to_vec()
            }
            AugmentationOp::RandomScaling => {
                let s = uniform(rng, cfg.scale);
                let inv = [[1.0 / s, 0.0, 0.0], [0.0, 1.0 / s, 0.0], [0.0, 0.0, 1.0 / s]];
                let (nv, nl) = warp(&vol, lab.as_ref(), &inv)?;
                vol = nv;
                lab = nl;
                vec![s]
            }
            AugmentationOp::GaussianBlur => {
                let sigma = uniform(rng, cfg.blur_sigma);
                vol = blur_volume(&vol, sigma)?;
                vec![sigma]
            }
            AugmentationOp::Brightness => {
                let (lo, hi) = vol.min_max();
                let shift = uniform(rng, (-cfg.brightness, cfg.brightness)) * (hi - lo);
                vol = vol.with_data(vol.data().iter().map(|x| x + shift).collect())?;
                vec![shift]
            }
            AugmentationOp::Contrast => {
                let f = uniform(rng, cfg.contrast);
                let mean = vol.mean();
                vol = vol.with_data(vol.data().iter().map(|x| (x - mean) * f + mean).collect())?;
                vec![f]
            }
            AugmentationOp::Gamma => {
                let g = uniform(rng, cfg.gamma);
                let (lo, hi) = vol.min_max();
                if hi > lo {
                    let range = hi - lo;
                    vol = vol.with_data(
                        vol.data()
                            .iter()
                            .map(|x| lo + range * ((x - lo) / range).powf(g))
                            .collect(),
                    )?;
                }
                vec![g]
            }
        };
        applied.push(AppliedOp { op, params });
    }
    Ok(AugmentedPair {
        volume: vol,
        label: lab,
        applied,
    })
}

/// Samples `n_aug` operations and applies them.
pub fn augment<R: Rng + ?Sized>(
    v: &Volume,
    y: Option<&LabelMap>,
    n_aug: usize,
    cfg: &SvdaConfig,
    rng: &mut R,
) -> Result<AugmentedPair> {
    let ops = sample_ops(n_aug, rng)?;
    apply(v, y, &ops, cfg, rng)
}
