//! Pseudo-label ensembling: a Gumbel-Softmax sample of the diffusion map,
//! Gaussian-smoothed, plus the softmax of the difficulty-aware map, then
//! argmax.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::grid::{gaussian_kernel, separable_filter};
use crate::types::{argmax_channels, softmax_channels, voxel_count, LabelMap, ProbKind, ProbMap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsConfig {
    pub temperature: f64,
    pub blur_sigma: f64,
    /// Kernel half-width in voxels; 0 disables smoothing in [`ensemble`].
    pub blur_radius: usize,
}

impl Default for RsConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            blur_sigma: 1.0,
            blur_radius: 2,
        }
    }
}

impl RsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Gumbel temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("blur sigma must be positive, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}

/// `softmax((logits + g) / temperature)` with caller-provided noise `g`.
pub fn gumbel_softmax_with_noise(logits: &ProbMap, temperature: f64, noise: &[f64]) -> Result<ProbMap> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("Gumbel temperature must be positive, got {temperature}")));
    }
    if noise.len() != logits.data().len() {
        return Err(Error::Shape(format!(
            "{} noise values for {} logits",
            noise.len(),
            logits.data().len()
        )));
    }
    let k = logits.num_classes();
    // simplex inputs enter through a floored log
    let perturbed: Vec<f64> = logits
        .as_logits()
        .data()
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    ProbMap::new(k, logits.dims(), softmax_channels(&perturbed, k), ProbKind::Simplex)
}

/// Gumbel-Softmax with i.i.d. standard Gumbel noise per voxel and class.
pub fn gumbel_softmax<R: Rng + ?Sized>(logits: &ProbMap, temperature: f64, rng: &mut R) -> Result<ProbMap> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
    let noise: Vec<f64> = (0..logits.data().len()).map(|_| gumbel.sample(rng)).collect();
    gumbel_softmax_with_noise(logits, temperature, &noise)
}

/// Separable Gaussian smoothing of every channel with reflected borders.
pub fn gaussian_blur3d(p: &ProbMap, sigma: f64, radius: usize) -> Result<ProbMap> {
    if radius < 1 {
        return Err(Error::InvalidArgument("blur radius must be at least 1".into()));
    }
    if p.kind() != ProbKind::Simplex {
        return Err(Error::InvalidArgument("blur expects a simplex map".into()));
    }
    let taps = gaussian_kernel(sigma, radius)?;
    let dims = p.dims();
    let n = voxel_count(dims);
    let mut out = Vec::with_capacity(p.data().len());
    for c in 0..p.num_classes() {
        let blurred = separable_filter(&p.data()[c * n..(c + 1) * n], dims, &taps);
        out.extend(blurred.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    ProbMap::new(p.num_classes(), dims, out, ProbKind::Simplex)
}

/// Hard pseudo label `argmax(blur(gumbel_softmax(p_xi)) + softmax(p_psi))`.
pub fn ensemble<R: Rng + ?Sized>(p_xi: &ProbMap, p_psi: &ProbMap, cfg: &RsConfig, rng: &mut R) -> Result<LabelMap> {
    cfg.validate()?;
    if p_xi.num_classes() != p_psi.num_classes() || p_xi.dims() != p_psi.dims() {
        return Err(Error::Shape(format!(
            "ensemble inputs {}x{:?} and {}x{:?}",
            p_xi.num_classes(),
            p_xi.dims(),
            p_psi.num_classes(),
            p_psi.dims()
        )));
    }
    let mut sample = gumbel_softmax(p_xi, cfg.temperature, rng)?;
    if cfg.blur_radius > 0 {
        sample = gaussian_blur3d(&sample, cfg.blur_sigma, cfg.blur_radius)?;
    }
    let psi = p_psi.softmax();
    let sum: Vec<f64> = sample.data().iter().zip(psi.data()).map(|(a, b)| a + b).collect();
    let k = p_xi.num_classes();
    LabelMap::new(p_xi.dims(), argmax_channels(&sum, k), k)
}
