//! Flat `key = value` run configuration with named presets.
//!
//! A file (or the override list) must name a `preset`; every other key
//! overrides the preset's defaults. Keys not listed in [`TaskConfig::entries`]
//! are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{Normalize, PreprocessSpec, SyntheticSpec};
use crate::drs::{DEFAULT_ALPHA, DEFAULT_TAU};
use crate::network::check_patch;
use crate::objectives::{DEFAULT_MU, RAMP_FRACTION};
use crate::rs::RsConfig;
use crate::types::{Dims, Task};
use crate::{Error, Result};

pub const PRESETS: [&str; 6] = ["laseg", "synapse", "mmwhs", "mnms", "desk", "desk-uda"];

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub preset: String,
    pub task: Task,
    pub patch_size: Dims,
    pub base_lr: f64,
    pub batch_size: usize,
    pub feature_size: usize,
    pub num_classes: usize,
    pub t_diffusion: usize,
    pub ddim_steps: usize,
    pub n_aug: usize,
    pub tau: usize,
    pub alpha_diff: f64,
    pub mu_unsup: f64,
    pub ramp_fraction: f64,
    pub w_ema: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub emb_dim: usize,
    pub val_every: usize,
    pub overlap: f64,
    /// Ablation: also supervise the predictor with labeled data.
    pub couple_theta: bool,
    pub log_drs_weights: bool,
    pub rs: RsConfig,
    pub preprocess: Option<PreprocessSpec>,
    /// Cyclic depth stacking target applied after preprocessing.
    pub stack_depth: Option<usize>,
    pub synth: SyntheticSpec,
    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn base(preset: &str, task: Task, patch: Dims, lr: f64, batch: usize, k: usize) -> TaskConfig {
    TaskConfig {
        preset: preset.to_string(),
        task,
        patch_size: patch,
        base_lr: lr,
        batch_size: batch,
        feature_size: 32,
        num_classes: k,
        t_diffusion: 1000,
        ddim_steps: 10,
        n_aug: 3,
        tau: DEFAULT_TAU,
        alpha_diff: DEFAULT_ALPHA,
        mu_unsup: DEFAULT_MU,
        ramp_fraction: RAMP_FRACTION,
        w_ema: 0.99,
        max_iterations: 30000,
        seed: 0,
        momentum: 0.9,
        weight_decay: 0.0,
        emb_dim: 32,
        val_every: 100,
        overlap: 0.5,
        couple_theta: false,
        log_drs_weights: false,
        rs: RsConfig::default(),
        preprocess: Some(PreprocessSpec::unit_range()),
        stack_depth: None,
        synth: SyntheticSpec {
            grid_size: patch,
            num_classes: k,
            ..SyntheticSpec::default()
        },
        manifest: None,
        test_manifest: None,
        checkpoint: None,
    }
}

impl TaskConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "laseg" => {
                let mut c = base(name, Task::Ssl, [80, 112, 112], 1e-2, 4, 2);
                c.preprocess = Some(PreprocessSpec {
                    normalize: Normalize::ZeroMeanUnitVar,
                    ..PreprocessSpec::unit_range()
                });
                c
            }
            "synapse" => base(name, Task::Ibssl, [64, 128, 128], 3e-2, 4, 14),
            "mmwhs" => {
                let mut c = base(name, Task::Uda, [128, 128, 128], 5e-3, 2, 5);
                c.preprocess = Some(PreprocessSpec {
                    clip_upper_pct: 2.0,
                    ..PreprocessSpec::unit_range()
                });
                c
            }
            "mnms" => {
                let mut c = base(name, Task::SemiDg, [32, 128, 128], 1e-2, 4, 4);
                c.preprocess = Some(PreprocessSpec {
                    clip_lower_pct: 0.5,
                    clip_upper_pct: 0.5,
                    ..PreprocessSpec::unit_range()
                });
                c.stack_depth = Some(32);
                c
            }
            "desk" | "desk-uda" => {
                let mut c = base(name, Task::Ssl, [16, 16, 16], 0.1, 2, 3);
                c.feature_size = 8;
                c.t_diffusion = 100;
                c.max_iterations = 200;
                c.preprocess = None;
                c.synth.test_per_domain = 2;
                if name == "desk-uda" {
                    c.task = Task::Uda;
                    c.synth.num_domains = 2;
                    c.synth.labeled_domains = Some(vec![0]);
                }
                c
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        check_patch(self.patch_size).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 || self.max_iterations == 0 || self.val_every == 0 {
            return bad("batch_size, max_iterations and val_every must be positive".into());
        }
        if self.feature_size == 0 || self.feature_size % 4 != 0 {
            return bad(format!("feature_size must be a positive multiple of 4, got {}", self.feature_size));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes must lie in 2..=255, got {}", self.num_classes));
        }
        if self.t_diffusion == 0 || self.ddim_steps == 0 || self.ddim_steps > self.t_diffusion {
            return bad("need 1 <= ddim_steps <= t_diffusion".into());
        }
        if self.n_aug == 0 || self.n_aug > 7 {
            return bad(format!("n_aug must lie in 1..=7, got {}", self.n_aug));
        }
        if self.tau == 0 || !(self.alpha_diff > 0.0) || !(self.mu_unsup > 0.0) {
            return bad("tau, alpha_diff and mu_unsup must be positive".into());
        }
        if !(self.w_ema > 0.0 && self.w_ema < 1.0) {
            return bad(format!("w_ema must lie in (0, 1), got {}", self.w_ema));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.ramp_fraction < 0.0 {
            return bad("momentum must lie in [0, 1); weight_decay and ramp_fraction nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1), got {}", self.overlap));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return bad("emb_dim must be even and positive".into());
        }
        self.rs.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = &self.preprocess {
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies one override; `preset` cannot be changed this way.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let ty = |what: &str| Error::Config(format!("{key}: expected {what}, got {v:?}"));
        let int = || v.parse::<usize>().map_err(|_| ty("a nonnegative integer"));
        let real = || v.parse::<f64>().map_err(|_| ty("a number"));
        let boolean = || v.parse::<bool>().map_err(|_| ty("true or false"));
        let dims = || parse_dims(v).ok_or_else(|| ty("three integers like 16,16,16"));
        let list = || parse_list(v).ok_or_else(|| ty("a comma-separated list of integers"));
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        let pre = |c: &mut TaskConfig| *c.preprocess.get_or_insert_with(PreprocessSpec::unit_range);
        match key {
            "preset" => return Err(Error::Config("preset can only be chosen once".into())),
            "task" => self.task = v.parse().map_err(|_| ty("ssl, ibssl, uda or semidg"))?,
            "patch_size" => self.patch_size = dims()?,
            "base_lr" => self.base_lr = real()?,
            "batch_size" => self.batch_size = int()?,
            "feature_size" => self.feature_size = int()?,
            "num_classes" => {
                self.num_classes = int()?;
                self.synth.num_classes = self.num_classes;
            }
            "t_diffusion" => self.t_diffusion = int()?,
            "ddim_steps" => self.ddim_steps = int()?,
            "n_aug" => self.n_aug = int()?,
            "tau" => self.tau = int()?,
            "alpha_diff" => self.alpha_diff = real()?,
            "mu_unsup" => self.mu_unsup = real()?,
            "ramp_fraction" => self.ramp_fraction = real()?,
            "w_ema" => self.w_ema = real()?,
            "max_iterations" => self.max_iterations = int()?,
            "seed" => self.seed = v.parse().map_err(|_| ty("a nonnegative integer"))?,
            "momentum" => self.momentum = real()?,
            "weight_decay" => self.weight_decay = real()?,
            "emb_dim" => self.emb_dim = int()?,
            "val_every" => self.val_every = int()?,
            "overlap" => self.overlap = real()?,
            "couple_theta" => self.couple_theta = boolean()?,
            "log_drs_weights" => self.log_drs_weights = boolean()?,
            "rs.temperature" => self.rs.temperature = real()?,
            "rs.blur_sigma" => self.rs.blur_sigma = real()?,
            "rs.blur_radius" => self.rs.blur_radius = int()?,
            "preprocess.normalize" => {
                if v == "none" {
                    self.preprocess = None;
                } else {
                    let n: Normalize = v.parse().map_err(|_| ty("none, unit_range or zscore"))?;
                    self.preprocess = Some(PreprocessSpec { normalize: n, ..pre(self) });
                }
            }
            "preprocess.clip_lower_pct" => self.preprocess = Some(PreprocessSpec { clip_lower_pct: real()?, ..pre(self) }),
            "preprocess.clip_upper_pct" => self.preprocess = Some(PreprocessSpec { clip_upper_pct: real()?, ..pre(self) }),
            "preprocess.crop_to_foreground" => {
                self.preprocess = Some(PreprocessSpec { crop_to_foreground: boolean()?, ..pre(self) })
            }
            "preprocess.stack_depth" => self.stack_depth = Some(int()?).filter(|&d| d > 0),
            "synth.num_domains" => self.synth.num_domains = int()?,
            "synth.volumes_per_domain" => self.synth.volumes_per_domain = int()?,
            "synth.labeled_fraction" => self.synth.labeled_fraction = real()?,
            "synth.grid_size" => self.synth.grid_size = dims()?,
            "synth.class_frequency_skew" => self.synth.class_frequency_skew = real()?,
            "synth.labeled_domains" => {
                self.synth.labeled_domains = if v == "all" { None } else { Some(list()?) }
            }
            "synth.heldout_domains" => self.synth.heldout_domains = list()?,
            "synth.test_per_domain" => self.synth.test_per_domain = int()?,
            "synth.foreground_fraction" => self.synth.foreground_fraction = real()?,
            "manifest" => self.manifest = path(),
            "test_manifest" => self.test_manifest = path(),
            "checkpoint" => self.checkpoint = path(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every effective setting, in a stable order, as `(key, value)` pairs
    /// that [`TaskConfig::set`] accepts back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let dims = |d: Dims| format!("{},{},{}", d[0], d[1], d[2]);
        let list = |l: &[u32]| l.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pre = self.preprocess.unwrap_or(PreprocessSpec::unit_range());
        let mut out = vec![
            ("preset", self.preset.clone()),
            ("task", self.task.to_string()),
            ("patch_size", dims(self.patch_size)),
            ("base_lr", self.base_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("feature_size", self.feature_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("t_diffusion", self.t_diffusion.to_string()),
            ("ddim_steps", self.ddim_steps.to_string()),
            ("n_aug", self.n_aug.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha_diff", self.alpha_diff.to_string()),
            ("mu_unsup", self.mu_unsup.to_string()),
            ("ramp_fraction", self.ramp_fraction.to_string()),
            ("w_ema", self.w_ema.to_string()),
            ("max_iterations", self.max_iterations.to_string()),
            ("seed", self.seed.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("emb_dim", self.emb_dim.to_string()),
            ("val_every", self.val_every.to_string()),
            ("overlap", self.overlap.to_string()),
            ("couple_theta", self.couple_theta.to_string()),
            ("log_drs_weights", self.log_drs_weights.to_string()),
            ("rs.temperature", self.rs.temperature.to_string()),
            ("rs.blur_sigma", self.rs.blur_sigma.to_string()),
            ("rs.blur_radius", self.rs.blur_radius.to_string()),
            (
                "preprocess.normalize",
                self.preprocess.map_or("none".to_string(), |p| p.normalize.to_string()),
            ),
        ];
        if self.preprocess.is_some() {
            out.push(("preprocess.clip_lower_pct", pre.clip_lower_pct.to_string()));
            out.push(("preprocess.clip_upper_pct", pre.clip_upper_pct.to_string()));
            out.push(("preprocess.crop_to_foreground", pre.crop_to_foreground.to_string()));
        }
        out.extend([
            ("preprocess.stack_depth", self.stack_depth.unwrap_or(0).to_string()),
            ("synth.num_domains", self.synth.num_domains.to_string()),
            ("synth.volumes_per_domain", self.synth.volumes_per_domain.to_string()),
            ("synth.labeled_fraction", self.synth.labeled_fraction.to_string()),
            ("synth.grid_size", dims(self.synth.grid_size)),
            ("synth.class_frequency_skew", self.synth.class_frequency_skew.to_string()),
            (
                "synth.labeled_domains",
                self.synth.labeled_domains.as_deref().map_or("all".to_string(), list),
            ),
            ("synth.heldout_domains", list(&self.synth.heldout_domains)),
            ("synth.test_per_domain", self.synth.test_per_domain.to_string()),
            ("synth.foreground_fraction", self.synth.foreground_fraction.to_string()),
            ("manifest", opt_path(&self.manifest)),
            ("test_manifest", opt_path(&self.test_manifest)),
            ("checkpoint", opt_path(&self.checkpoint)),
        ]);
        out
    }

    /// Text of `config.resolved`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            seed: self.seed,
            ..self.synth.clone()
        }
    }
}

fn parse_dims(v: &str) -> Option<Dims> {
    let parts: Vec<usize> = v
        .split([',', 'x'])
        .map(|s| s.trim().parse().ok())
        .collect::<Option<_>>()?;
    parts.try_into().ok()
}

fn parse_list(v: &str) -> Option<Vec<u32>> {
    if v.is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

/// Splits `key=value` text into pairs; blank lines and `#` comments are
/// skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Builds the effective configuration: preset defaults, then file keys in
/// order, then overrides. Relative paths in the file resolve against its
/// directory.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TaskConfig> {
    let mut pairs = Vec::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let dir = p.parent().unwrap_or(Path::new("."));
        for (k, v) in parse_pairs(&text)? {
            let v = if matches!(k.as_str(), "manifest" | "test_manifest" | "checkpoint") && !v.is_empty() {
                dir.join(&v).display().to_string()
            } else {
                v
            };
            pairs.push((k, v));
        }
    }
    pairs.extend(overrides.iter().cloned());
    let presets: Vec<&String> = pairs.iter().filter(|(k, _)| k == "preset").map(|(_, v)| v).collect();
    let name = presets
        .last()
        .ok_or_else(|| Error::Config("missing required key \"preset\"".into()))?;
    let mut cfg = TaskConfig::preset(name)?;
    for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn table_presets() {
        let s = TaskConfig::preset("synapse").unwrap();
        assert_eq!((s.patch_size, s.base_lr, s.batch_size, s.feature_size), ([64, 128, 128], 3e-2, 4, 32));
        let l = TaskConfig::preset("laseg").unwrap();
        assert_eq!((l.patch_size, l.base_lr, l.batch_size), ([80, 112, 112], 1e-2, 4));
        let m = TaskConfig::preset("mmwhs").unwrap();
        assert_eq!((m.patch_size, m.base_lr, m.batch_size), ([128, 128, 128], 5e-3, 2));
        let n = TaskConfig::preset("mnms").unwrap();
        assert_eq!((n.patch_size, n.base_lr, n.batch_size, n.stack_depth), ([32, 128, 128], 1e-2, 4, Some(32)));
        for p in PRESETS {
            TaskConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let c = parse_config(None, &ov(&[("preset", "desk"), ("base_lr", "1e-3")])).unwrap();
        assert_eq!(c.base_lr, 1e-3);
        assert!(parse_config(None, &ov(&[("preset", "desk"), ("learning_rate", "1")])).is_err());
        assert!(parse_config(None, &ov(&[("base_lr", "1")])).is_err());
        assert!(parse_config(None, &ov(&[("preset", "desk"), ("batch_size", "two")])).is_err());
        assert!(parse_config(None, &ov(&[("preset", "desk"), ("patch_size", "16,20,16")])).is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let mut c = TaskConfig::preset("mnms").unwrap();
        c.synth.labeled_domains = Some(vec![0, 2]);
        c.checkpoint = Some(PathBuf::from("/tmp/ck"));
        let pairs = parse_pairs(&c.render()).unwrap();
        let back = parse_config(None, &pairs).unwrap();
        assert_eq!(back, c);
        let d = TaskConfig::preset("desk").unwrap();
        assert_eq!(parse_config(None, &parse_pairs(&d.render()).unwrap()).unwrap(), d);
    }
}
