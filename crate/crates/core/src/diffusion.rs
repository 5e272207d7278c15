//! Label-space diffusion: linear noise schedule, forward corruption of
//! one-hot labels and the deterministic DDIM sampler.
//!
//! Timesteps run `1..=T`; `alpha_bar(0)` is defined as 1 so that stepping to
//! `t_prev = 0` lands on the clean prediction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::types::{softmax_channels, voxel_count, OneHot, ProbKind, ProbMap, Volume};
use crate::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;
pub const DEFAULT_T: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear beta schedule from `1e-4` to `2e-2` over `t_max` steps.
pub fn make_schedule(t_max: usize) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("diffusion needs at least one timestep".into()));
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                BETA_START
            } else {
                BETA_START + (BETA_END - BETA_START) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

impl NoiseSchedule {
    /// Schedule from explicit cumulative coefficients (values in `[0, 1]`,
    /// non-increasing).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::InvalidArgument("empty schedule".into()));
        }
        if alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) || alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("alpha_bar must be non-increasing in [0, 1]".into()));
        }
        let mut prev = 1.0;
        let betas = alpha_bar
            .iter()
            .map(|&a| {
                let b = if prev > 0.0 { 1.0 - a / prev } else { 1.0 };
                prev = a;
                b
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative signal coefficient at timestep `t` (`t = 0` gives 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `y_t = sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps`, elementwise on raw buffers.
pub fn diffuse(y0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if y0.len() != eps.len() {
        return Err(Error::Shape(format!("noise has {} values for {}", eps.len(), y0.len())));
    }
    let a = sched.alpha_bar(t);
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(y0.iter().zip(eps).map(|(y, e)| s * y + n * e).collect())
}

/// Forward process on a one-hot label; the result has the layout `(K, D, H, W)`.
pub fn forward_diffuse(y0: &OneHot, t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    diffuse(y0.data(), t, eps, sched)
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev` with an
/// x0-prediction.
pub fn ddim_step(
    y_t: &[f64],
    pred_y0: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
    }
    sched.check_t(t)?;
    if y_t.len() != pred_y0.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values for {}",
            pred_y0.len(),
            y_t.len()
        )));
    }
    if t_prev == 0 {
        return Ok(pred_y0.to_vec());
    }
    let a_t = sched.alpha_bar(t);
    let a_prev = sched.alpha_bar(t_prev);
    let noise_t = (1.0 - a_t).sqrt();
    let (s_t, s_prev, n_prev) = (a_t.sqrt(), a_prev.sqrt(), (1.0 - a_prev).sqrt());
    Ok(y_t
        .iter()
        .zip(pred_y0)
        .map(|(&y, &p)| {
            let eps = if noise_t > 0.0 { (y - s_t * p) / noise_t } else { 0.0 };
            s_prev * p + n_prev * eps
        })
        .collect())
}

/// Evenly spaced descending timesteps `T, ..., T/steps`.
pub fn ddim_timesteps(steps: usize, t_max: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::InvalidArgument(format!(
            "DDIM steps must lie in 1..={t_max}, got {steps}"
        )));
    }
    Ok((0..steps).map(|i| (steps - i) * t_max / steps).collect())
}

/// Runs the sampler for a batch laid out as `[N, K, S]`.
///
/// `denoiser(y_t, t)` returns logits of the same layout. Each x0-prediction
/// is the channel softmax of those logits; the final logits are softmaxed
/// into the returned probabilities.
pub fn ddim_generate_batch<F, R>(
    mut denoiser: F,
    batch: usize,
    num_classes: usize,
    voxels: usize,
    steps: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let grid = ddim_timesteps(steps, sched.steps())?;
    let len = batch * num_classes * voxels;
    let mut y: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let per = num_classes * voxels;
    let mut probs = Vec::new();
    for (i, &t) in grid.iter().enumerate() {
        let logits = denoiser(&y, t)?;
        if logits.len() != len {
            return Err(Error::Shape(format!(
                "denoiser returned {} values, expected {len}",
                logits.len()
            )));
        }
        probs = logits
            .chunks(per)
            .flat_map(|c| softmax_channels(c, num_classes))
            .collect();
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        y = ddim_step(&y, &probs, t, t_prev, sched)?;
    }
    Ok(probs)
}

/// Single-volume sampler producing a simplex probability map.
pub fn ddim_generate<F, R>(
    mut denoiser: F,
    x: &Volume,
    num_classes: usize,
    steps: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ProbMap>
where
    F: FnMut(&Volume, &[f64], usize) -> Result<ProbMap>,
    R: Rng + ?Sized,
{
    let dims = x.dims();
    let n = voxel_count(dims);
    let probs = ddim_generate_batch(
        |y, t| {
            let p = denoiser(x, y, t)?;
            if p.num_classes() != num_classes || p.dims() != dims {
                return Err(Error::Shape(format!(
                    "denoiser output {}x{:?}, expected {num_classes}x{dims:?}",
                    p.num_classes(),
                    p.dims()
                )));
            }
            Ok(p.as_logits().into_data())
        },
        1,
        num_classes,
        n,
        steps,
        sched,
        rng,
    )?;
    ProbMap::new(num_classes, dims, probs, ProbKind::Simplex)
}

/// Sinusoidal timestep features: `dim / 2` sines followed by `dim / 2`
/// cosines at geometrically spaced frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepEmbedding {
    pub values: Vec<f64>,
}

pub fn timestep_embed(t: usize, dim: usize) -> Result<TimestepEmbedding> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp())
        .collect();
    let mut values = Vec::with_capacity(dim);
    values.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    values.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    Ok(TimestepEmbedding { values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!(make_schedule(0).is_err());
    }

    #[test]
    fn schedule_strictly_decreasing() {
        let s = make_schedule(DEFAULT_T).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bar(1) < 1.0 && s.alpha_bar(1000) > 0.0);
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn forward_limits_and_hand_value() {
        let y0 = [1.0, 0.0];
        let eps = [0.5, -0.3];
        let one = NoiseSchedule::from_alpha_bar(vec![1.0]).unwrap();
        assert_eq!(diffuse(&y0, 1, &eps, &one).unwrap(), y0.to_vec());
        let zero = NoiseSchedule::from_alpha_bar(vec![0.0]).unwrap();
        assert_eq!(diffuse(&y0, 1, &eps, &zero).unwrap(), eps.to_vec());
        let quarter = NoiseSchedule::from_alpha_bar(vec![0.25]).unwrap();
        let got = diffuse(&[1.0], 1, &[0.5], &quarter).unwrap()[0];
        assert!((got - 0.9330127).abs() < 1e-7);
        assert!(diffuse(&y0, 2, &eps, &quarter).is_err());
    }

    #[test]
    fn ddim_step_rules() {
        let s = make_schedule(100).unwrap();
        let y = [0.3, -1.2, 2.0];
        let p = [0.1, 0.7, 0.2];
        assert_eq!(ddim_step(&y, &p, 10, 0, &s).unwrap(), p.to_vec());
        assert!(ddim_step(&y, &p, 10, 10, &s).is_err());
        let flat = NoiseSchedule::from_alpha_bar(vec![0.5, 0.5]).unwrap();
        let out = ddim_step(&y, &p, 2, 1, &flat).unwrap();
        for (a, b) in out.iter().zip(y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn timesteps_grid() {
        assert_eq!(ddim_timesteps(4, 100).unwrap(), vec![100, 75, 50, 25]);
        assert_eq!(ddim_timesteps(1, 100).unwrap(), vec![100]);
        assert!(ddim_timesteps(0, 100).is_err());
    }

    #[test]
    fn embedding_basics() {
        let e = timestep_embed(0, 8).unwrap();
        assert!(e.values[..4].iter().all(|&v| v == 0.0));
        assert!(e.values[4..].iter().all(|&v| v == 1.0));
        assert_eq!(timestep_embed(17, 16).unwrap(), timestep_embed(17, 16).unwrap());
        assert!(timestep_embed(3, 7).is_err());
    }
}
