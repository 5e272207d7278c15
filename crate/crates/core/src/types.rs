//! Voxel grids shared by every stage of the pipeline.
//!
//! All grids are stored row-major with depth as the slowest axis; channel
//! grids are channel-first `(K, D, H, W)`.

use crate::{Error, Result};

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("grid dims must be >= 1, got {dims:?}")));
    }
    Ok(())
}

/// Intensity volume with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f64>,
    spacing: [f64; 3],
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>, spacing: [f64; 3]) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "volume {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume"));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, data, spacing })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; voxel_count(dims)], [1.0; 3])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, data, self.spacing)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Integer class map with `num_classes` classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    data: Vec<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(dims: Dims, data: Vec<u8>, num_classes: usize) -> Result<Self> {
        check_dims(dims)?;
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::InvalidArgument(format!("num_classes {num_classes} outside 1..=256")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "label {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::InvalidLabel(format!(
                "value {bad} with only {num_classes} classes"
            )));
        }
        Ok(Self { dims, data, num_classes })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        Self::new(self.dims, data, self.num_classes)
    }
}

/// Channel-first one-hot encoding: exactly one channel is 1 at each voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHot {
    num_classes: usize,
    dims: Dims,
    data: Vec<f64>,
}

impl OneHot {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbKind {
    Logits,
    Simplex,
}

/// Per-class score map `(K, D, H, W)`, either raw logits or probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    num_classes: usize,
    dims: Dims,
    data: Vec<f64>,
    kind: ProbKind,
}

pub const SIMPLEX_TOL: f64 = 1e-5;

impl ProbMap {
    pub fn new(num_classes: usize, dims: Dims, data: Vec<f64>, kind: ProbKind) -> Result<Self> {
        check_dims(dims)?;
        let n = voxel_count(dims);
        if num_classes == 0 || data.len() != num_classes * n {
            return Err(Error::Shape(format!(
                "prob map with {num_classes} classes over {dims:?} needs {} values, got {}",
                num_classes * n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probability map"));
        }
        if kind == ProbKind::Simplex {
            if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument("simplex entries must lie in [0, 1]".into()));
            }
            for i in 0..n {
                let s: f64 = (0..num_classes).map(|k| data[k * n + i]).sum();
                if (s - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "simplex channel sum {s} at voxel {i}"
                    )));
                }
            }
        }
        Ok(Self { num_classes, dims, data, kind })
    }

    pub fn logits(num_classes: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::new(num_classes, dims, data, ProbKind::Logits)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> ProbKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = voxel_count(self.dims);
        &self.data[k * n..(k + 1) * n]
    }

    /// Channel-wise softmax; a simplex map is returned unchanged.
    pub fn softmax(&self) -> ProbMap {
        match self.kind {
            ProbKind::Simplex => self.clone(),
            ProbKind::Logits => ProbMap {
                num_classes: self.num_classes,
                dims: self.dims,
                data: softmax_channels(&self.data, self.num_classes),
                kind: ProbKind::Simplex,
            },
        }
    }

    /// Log-probabilities usable as logits; logits pass through untouched.
    pub fn as_logits(&self) -> ProbMap {
        match self.kind {
            ProbKind::Logits => self.clone(),
            ProbKind::Simplex => ProbMap {
                num_classes: self.num_classes,
                dims: self.dims,
                data: self.data.iter().map(|&p| p.max(1e-12).ln()).collect(),
                kind: ProbKind::Logits,
            },
        }
    }
}

/// Numerically stable softmax over the channel axis of a `(K, N)` buffer.
pub fn softmax_channels(data: &[f64], k: usize) -> Vec<f64> {
    let n = data.len() / k;
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        let m = (0..k).map(|c| data[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..k {
            let e = (data[c * n + i] - m).exp();
            out[c * n + i] = e;
            s += e;
        }
        for c in 0..k {
            out[c * n + i] /= s;
        }
    }
    out
}

pub fn one_hot_encode(label: &LabelMap) -> Result<OneHot> {
    let k = label.num_classes;
    let n = label.data.len();
    let mut data = vec![0.0; k * n];
    for (i, &v) in label.data.iter().enumerate() {
        let v = v as usize;
        if v >= k {
            return Err(Error::InvalidLabel(format!("value {v} with only {k} classes")));
        }
        data[v * n + i] = 1.0;
    }
    Ok(OneHot {
        num_classes: k,
        dims: label.dims,
        data,
    })
}

/// Index of the largest channel per voxel; ties go to the lowest index.
pub fn argmax_channels(data: &[f64], k: usize) -> Vec<u8> {
    let n = data.len() / k;
    (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = data[i];
            for c in 1..k {
                let v = data[c * n + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect()
}

pub fn argmax_decode(p: &ProbMap) -> Result<LabelMap> {
    LabelMap::new(p.dims, argmax_channels(&p.data, p.num_classes), p.num_classes)
}

/// Decodes a one-hot grid.
pub fn one_hot_decode(y: &OneHot) -> Result<LabelMap> {
    LabelMap::new(y.dims, argmax_channels(&y.data, y.num_classes), y.num_classes)
}

impl From<OneHot> for ProbMap {
    fn from(y: OneHot) -> Self {
        ProbMap {
            num_classes: y.num_classes,
            dims: y.dims,
            data: y.data,
            kind: ProbKind::Simplex,
        }
    }
}

/// Labeled and unlabeled samples of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<(Volume, LabelMap)>,
    pub unlabeled: Vec<Volume>,
    /// Domain of each labeled sample, then of each unlabeled sample.
    pub labeled_domains: Vec<u32>,
    pub unlabeled_domains: Vec<u32>,
    pub num_classes: usize,
}

impl DatasetSplit {
    pub fn new(
        labeled: Vec<(Volume, LabelMap)>,
        unlabeled: Vec<Volume>,
        labeled_domains: Option<Vec<u32>>,
        unlabeled_domains: Option<Vec<u32>>,
    ) -> Result<Self> {
        let first = labeled
            .first()
            .ok_or_else(|| Error::InvalidArgument("a split needs at least one labeled sample".into()))?;
        let num_classes = first.1.num_classes();
        for (v, y) in &labeled {
            if y.num_classes() != num_classes {
                return Err(Error::InvalidLabel(format!(
                    "mixed class counts {} and {num_classes}",
                    y.num_classes()
                )));
            }
            if v.dims() != y.dims() {
                return Err(Error::Shape(format!(
                    "volume {:?} vs label {:?}",
                    v.dims(),
                    y.dims()
                )));
            }
        }
        let labeled_domains = labeled_domains.unwrap_or_else(|| vec![0; labeled.len()]);
        let unlabeled_domains = unlabeled_domains.unwrap_or_else(|| vec![0; unlabeled.len()]);
        if labeled_domains.len() != labeled.len() || unlabeled_domains.len() != unlabeled.len() {
            return Err(Error::Shape("domain tags do not match sample counts".into()));
        }
        Ok(Self {
            labeled,
            unlabeled,
            labeled_domains,
            unlabeled_domains,
            num_classes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Ssl,
    Ibssl,
    Uda,
    SemiDg,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssl" => Ok(Task::Ssl),
            "ibssl" => Ok(Task::Ibssl),
            "uda" => Ok(Task::Uda),
            "semidg" => Ok(Task::SemiDg),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Ssl => "ssl",
            Task::Ibssl => "ibssl",
            Task::Uda => "uda",
            Task::SemiDg => "semidg",
        })
    }
}
