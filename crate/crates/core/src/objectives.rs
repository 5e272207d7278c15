//! Combined Dice + cross-entropy loss with its analytic gradient, the three
//! training losses and the Gaussian ramp-up of the unsupervised weight.
//!
//! For one sample with softmax `p`, one-hot `y`, `S` voxels and class
//! weights `w` (all ones when absent):
//!
//! ```text
//! CE   = sum_k w_k * (-1/S) * sum_v y_kv ln p_kv
//! Dice = (1/K) * sum_k w_k * (1 - (2 I_k + eps) / (P_k + G_k + eps))
//! L    = (CE + Dice) / 2
//! ```

use adseg_autograd::Tensor;

use crate::types::{one_hot_encode, LabelMap, OneHot, ProbMap};
use crate::{Error, Result};

pub const EPS_DICE: f64 = 1e-5;
pub const DEFAULT_MU: f64 = 10.0;
pub const RAMP_FRACTION: f64 = 0.4;

/// Loss value and gradient with respect to the logits of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceCeTerms {
    pub ce: f64,
    pub dice: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_weights(weights: Option<&[f64]>, k: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; k]),
        Some(w) if w.len() != k => Err(Error::Shape(format!("{} class weights for {k} classes", w.len()))),
        Some(w) if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
            Err(Error::InvalidArgument("class weights must be finite and nonnegative".into()))
        }
        Some(w) => Ok(w.to_vec()),
    }
}

/// DiceCE on raw `(K, S)` buffers: `logits` and a one-hot `target`.
pub fn dice_ce_terms(logits: &[f64], target: &[f64], k: usize, weights: Option<&[f64]>) -> Result<DiceCeTerms> {
    if k == 0 || logits.len() != target.len() || logits.len() % k != 0 || logits.is_empty() {
        return Err(Error::Shape(format!(
            "logits {} and target {} values for {k} classes",
            logits.len(),
            target.len()
        )));
    }
    let w = check_weights(weights, k)?;
    let s = logits.len() / k;
    let sf = s as f64;
    let kf = k as f64;

    let mut p = vec![0.0; logits.len()];
    let mut log_p = vec![0.0; logits.len()];
    for v in 0..s {
        let m = (0..k).map(|c| logits[c * s + v]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (logits[c * s + v] - m).exp()).sum();
        let lz = z.ln();
        for c in 0..k {
            let i = c * s + v;
            log_p[i] = logits[i] - m - lz;
            p[i] = log_p[i].exp();
        }
    }

    let mut ce = 0.0;
    let mut dice = 0.0;
    // dL_dice / dp, before the softmax chain
    let mut g_dice_p = vec![0.0; logits.len()];
    for c in 0..k {
        let ch = c * s..(c + 1) * s;
        let (pc, yc, lc) = (&p[ch.clone()], &target[ch.clone()], &log_p[ch.clone()]);
        let ce_c: f64 = -yc.iter().zip(lc).map(|(y, l)| y * l).sum::<f64>() / sf;
        ce += w[c] * ce_c;
        let inter: f64 = pc.iter().zip(yc).map(|(a, b)| a * b).sum();
        let denom = pc.iter().sum::<f64>() + yc.iter().sum::<f64>() + EPS_DICE;
        let num = 2.0 * inter + EPS_DICE;
        dice += w[c] * (1.0 - num / denom);
        let scale = -w[c] / kf / (denom * denom);
        for (g, y) in g_dice_p[ch].iter_mut().zip(yc) {
            *g = scale * (2.0 * y * denom - num);
        }
    }
    dice /= kf;

    let mut grad = vec![0.0; logits.len()];
    for v in 0..s {
        let dot: f64 = (0..k).map(|c| p[c * s + v] * g_dice_p[c * s + v]).sum();
        let wy: f64 = (0..k).map(|c| w[c] * target[c * s + v]).sum();
        for c in 0..k {
            let i = c * s + v;
            let g_ce = (p[i] * wy - w[c] * target[i]) / sf;
            let g_dice = p[i] * (g_dice_p[i] - dot);
            grad[i] = 0.5 * (g_ce + g_dice);
        }
    }
    Ok(DiceCeTerms {
        ce,
        dice,
        loss: 0.5 * (ce + dice),
        grad,
    })
}

fn check_pair(logits: &ProbMap, target: &OneHot) -> Result<()> {
    if logits.num_classes() != target.num_classes() || logits.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "logits {}x{:?} vs target {}x{:?}",
            logits.num_classes(),
            logits.dims(),
            target.num_classes(),
            target.dims()
        )));
    }
    Ok(())
}

/// DiceCE of a logit map against a one-hot target; simplex inputs are
/// treated through their log.
pub fn dice_ce(logits: &ProbMap, target: &OneHot, weights: Option<&[f64]>) -> Result<f64> {
    check_pair(logits, target)?;
    Ok(dice_ce_terms(logits.as_logits().data(), target.data(), target.num_classes(), weights)?.loss)
}

/// Value and logit gradient as a map of the same layout.
pub fn dice_ce_with_grad(logits: &ProbMap, target: &OneHot, weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    check_pair(logits, target)?;
    let t = dice_ce_terms(logits.as_logits().data(), target.data(), target.num_classes(), weights)?;
    Ok((t.loss, t.grad))
}

/// Batch-mean DiceCE on `[N, K, ...]` tensors, with gradient of the mean.
pub fn batch_dice_ce(logits: &Tensor, targets: &Tensor, weights: Option<&[f64]>) -> Result<(f64, Tensor)> {
    if logits.shape() != targets.shape() || logits.shape().len() < 2 || logits.shape()[0] == 0 {
        return Err(Error::Shape(format!(
            "batch logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    let per = logits.len() / n;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for i in 0..n {
        let span = i * per..(i + 1) * per;
        let t = dice_ce_terms(&logits.data()[span.clone()], &targets.data()[span], k, weights)?;
        total += t.loss;
        grad.extend(t.grad.into_iter().map(|g| g / n as f64));
    }
    Ok((total / n as f64, Tensor::new(logits.shape(), grad)?))
}

fn mean_over<T>(logits: &[ProbMap], targets: &[T], f: impl Fn(&ProbMap, &T) -> Result<f64>) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty batch".into()));
    }
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", logits.len(), targets.len())));
    }
    let mut acc = 0.0;
    for (p, y) in logits.iter().zip(targets) {
        acc += f(p, y)?;
    }
    Ok(acc / logits.len() as f64)
}

/// Mean DiceCE of the denoising decoder over the labeled batch.
pub fn l_deno(logits: &[ProbMap], targets: &[OneHot]) -> Result<f64> {
    mean_over(logits, targets, |p, y| dice_ce(p, y, None))
}

/// Class-weighted DiceCE of the difficulty-aware decoder.
pub fn l_diff(logits: &[ProbMap], targets: &[OneHot], weights: &[f64]) -> Result<f64> {
    mean_over(logits, targets, |p, y| dice_ce(p, y, Some(weights)))
}

/// DiceCE of the predictor against (detached) pseudo labels.
pub fn l_u(logits: &[ProbMap], pseudo: &[LabelMap]) -> Result<f64> {
    mean_over(logits, pseudo, |p, y| dice_ce(p, &one_hot_encode(y)?, None))
}

/// `mu * exp(-5 (1 - r)^2)` with `r = min(iteration / ramp_len, 1)`.
pub fn ramp_weight_with_len(iteration: usize, ramp_len: f64, mu: f64) -> f64 {
    let r = if ramp_len > 0.0 {
        (iteration as f64 / ramp_len).min(1.0)
    } else {
        1.0
    };
    mu * (-5.0 * (1.0 - r) * (1.0 - r)).exp()
}

/// Ramp over the first 40% of training.
pub fn ramp_weight(iteration: usize, max_iterations: usize, mu: f64) -> f64 {
    ramp_weight_with_len(iteration, RAMP_FRACTION * max_iterations as f64, mu)
}

/// Per-iteration loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_deno: f64,
    pub l_diff: f64,
    pub l_u: f64,
    pub ramp_weight: f64,
    /// Extra supervised loss through the predictor; nonzero only in the
    /// coupled ablation.
    pub l_coupled: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_deno: f64, l_diff: f64, l_u: f64, ramp_weight: f64, l_coupled: f64) -> Self {
        Self {
            l_deno,
            l_diff,
            l_u,
            ramp_weight,
            l_coupled,
            total: l_deno + l_diff + ramp_weight * l_u + l_coupled,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_deno, self.l_diff, self.l_u, self.l_coupled, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LabelMap;

    fn target(labels: &[u8], k: usize) -> OneHot {
        one_hot_encode(&LabelMap::new([1, 1, labels.len()], labels.to_vec(), k).unwrap()).unwrap()
    }

    #[test]
    fn uniform_two_class_ce_is_ln2() {
        let y = target(&[0, 1, 0, 1], 2);
        let t = dice_ce_terms(&[0.0; 8], y.data(), 2, None).unwrap();
        assert!((t.ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_small_loss() {
        let labels = [0u8, 1, 1, 0];
        let y = target(&labels, 2);
        let logits: Vec<f64> = y.data().iter().map(|v| 20.0 * v).collect();
        let t = dice_ce_terms(&logits, y.data(), 2, None).unwrap();
        assert!(t.loss <= 0.01, "{}", t.loss);
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let y = target(&[0, 2, 1, 1, 2], 3);
        let logits: Vec<f64> = (0..15).map(|i| ((i * 5) % 7) as f64 * 0.4 - 1.0).collect();
        let a = dice_ce_terms(&logits, y.data(), 3, Some(&[0.5, 1.0, 2.0])).unwrap();
        let b = dice_ce_terms(&logits, y.data(), 3, Some(&[1.0, 2.0, 4.0])).unwrap();
        assert!((2.0 * a.loss - b.loss).abs() < 1e-12);
        let plain = dice_ce_terms(&logits, y.data(), 3, None).unwrap();
        let ones = dice_ce_terms(&logits, y.data(), 3, Some(&[1.0; 3])).unwrap();
        assert_eq!(plain, ones);
    }

    #[test]
    fn empty_batches_are_rejected() {
        assert!(l_deno(&[], &[]).is_err());
        assert!(l_u(&[], &[]).is_err());
    }

    #[test]
    fn ramp_shape() {
        assert!((ramp_weight(0, 100, 10.0) - 10.0 * (-5f64).exp()).abs() < 1e-12);
        assert_eq!(ramp_weight(40, 100, 10.0), 10.0);
        assert_eq!(ramp_weight(100, 100, 10.0), 10.0);
        let mut prev = 0.0;
        for it in 0..=100 {
            let w = ramp_weight(it, 100, 10.0);
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn report_total() {
        let r = LossReport::new(0.5, 0.25, 0.1, 3.0, 0.0);
        assert!((r.total - 1.05).abs() < 1e-12);
    }
}
