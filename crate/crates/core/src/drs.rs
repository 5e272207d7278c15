//! Difficulty-aware class re-weighting from the recent trajectory of
//! per-class Dice scores.
//!
//! For each transition `e-1 -> e` in the window, the Dice change `delta` is
//! paired with the log-ratio `ln(lambda_e / lambda_{e-1})`. Drops accumulate
//! into `du`, gains into `dl`; `d = (du + eps) / (dl + eps)` is small for
//! classes that are being learned quickly. The magnitude factor is the mean
//! of `1 - lambda` over the window, and the final weight `w_lambda * d^alpha`
//! is rescaled to mean 1 across classes.

use std::collections::VecDeque;

use crate::{Error, Result};

pub const EPS_PSI: f64 = 1e-8;
pub const DEFAULT_TAU: usize = 50;
pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyState {
    num_classes: usize,
    tau: usize,
    alpha: f64,
    eps: f64,
    history: VecDeque<Vec<f64>>,
}

impl DifficultyState {
    pub fn new(num_classes: usize, tau: usize, alpha: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("difficulty state needs at least one class".into()));
        }
        if tau == 0 {
            return Err(Error::InvalidArgument("window length must be positive".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            num_classes,
            tau,
            alpha,
            eps: EPS_PSI,
            history: VecDeque::with_capacity(tau + 1),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn history(&self) -> impl Iterator<Item = &[f64]> {
        self.history.iter().map(Vec::as_slice)
    }

    pub fn observe(&mut self, dice: &[f64]) -> Result<()> {
        if dice.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "expected {} Dice values, got {}",
                self.num_classes,
                dice.len()
            )));
        }
        if let Some(bad) = dice.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::InvalidArgument(format!("Dice value {bad} outside [0, 1]")));
        }
        if self.history.len() == self.tau + 1 {
            self.history.pop_front();
        }
        self.history.push_back(dice.to_vec());
        Ok(())
    }

    /// Unnormalized `(w_lambda, d)` per class; `None` before two observations.
    pub fn components(&self) -> Option<Vec<(f64, f64)>> {
        if self.history.len() < 2 {
            return None;
        }
        let transitions = (self.history.len() - 1) as f64;
        let out = (0..self.num_classes)
            .map(|k| {
                let (mut du, mut dl, mut wl) = (0.0, 0.0, 0.0);
                for (prev, cur) in self.history.iter().zip(self.history.iter().skip(1)) {
                    let delta = cur[k] - prev[k];
                    let log_ratio = (cur[k].max(self.eps) / prev[k].max(self.eps)).ln();
                    du += delta.min(0.0) * log_ratio;
                    dl += delta.max(0.0) * log_ratio;
                    wl += 1.0 - cur[k];
                }
                (wl / transitions, (du + self.eps) / (dl + self.eps))
            })
            .collect();
        Some(out)
    }

    /// Per-class weights with mean 1; uniform until two observations exist.
    pub fn weights(&self) -> Vec<f64> {
        let uniform = vec![1.0; self.num_classes];
        let Some(parts) = self.components() else {
            return uniform;
        };
        let raw: Vec<f64> = parts.iter().map(|&(wl, d)| wl * d.powf(self.alpha)).collect();
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return uniform;
        }
        let scale = self.num_classes as f64 / sum;
        raw.into_iter().map(|w| w * scale).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cold_start_is_uniform() {
        let mut s = DifficultyState::new(3, 2, 0.2).unwrap();
        assert_eq!(s.weights(), vec![1.0; 3]);
        s.observe(&[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(s.weights(), vec![1.0; 3]);
        assert!(s.observe(&[0.1, 0.5]).is_err());
        assert!(s.observe(&[0.1, 0.5, 1.5]).is_err());
    }

    #[test]
    fn window_is_bounded() {
        let mut s = DifficultyState::new(1, 2, 0.2).unwrap();
        for i in 0..10 {
            s.observe(&[i as f64 / 10.0]).unwrap();
        }
        assert_eq!(s.len(), 3);
        assert_eq!(s.history().next().unwrap(), &[0.7]);
    }

    #[test]
    fn stagnant_class_is_neutral() {
        let mut s = DifficultyState::new(1, 4, 0.2).unwrap();
        for _ in 0..5 {
            s.observe(&[0.3]).unwrap();
        }
        let (wl, d) = s.components().unwrap()[0];
        assert!((wl - 0.7).abs() < 1e-15);
        assert_eq!(d, 1.0);
    }

    #[test]
    fn zero_dice_stays_finite() {
        let mut s = DifficultyState::new(2, 3, 0.2).unwrap();
        for v in [[0.0, 0.5], [0.4, 0.0], [0.0, 0.0], [1.0, 0.0]] {
            s.observe(&v).unwrap();
        }
        assert!(s.weights().iter().all(|w| w.is_finite() && *w >= 0.0));
    }
}
