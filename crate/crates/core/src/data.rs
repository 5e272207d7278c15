//! Dataset ingestion, intensity preprocessing, depth stacking and the
//! seeded synthetic multi-domain generator.
//!
//! On disk, every grid is a `A&D-RAWv1 D H W K sx sy sz\n` header followed by
//! the little-endian payload: `f32` intensities when `K = 0`, `u8` class
//! indices otherwise.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::types::{voxel_count, DatasetSplit, Dims, LabelMap, Volume};
use crate::{Error, Result};

pub const RAW_MAGIC: &str = "A&D-RAWv1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    UnitRange,
    ZeroMeanUnitVar,
}

impl std::str::FromStr for Normalize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit_range" => Ok(Normalize::UnitRange),
            "zero_mean_unit_var" | "zscore" => Ok(Normalize::ZeroMeanUnitVar),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for Normalize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalize::UnitRange => "unit_range",
            Normalize::ZeroMeanUnitVar => "zero_mean_unit_var",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessSpec {
    pub clip_lower_pct: f64,
    pub clip_upper_pct: f64,
    pub normalize: Normalize,
    pub crop_to_foreground: bool,
}

impl PreprocessSpec {
    pub fn unit_range() -> Self {
        Self {
            clip_lower_pct: 0.0,
            clip_upper_pct: 0.0,
            normalize: Normalize::UnitRange,
            crop_to_foreground: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=100.0).contains(&p);
        if !ok(self.clip_lower_pct) || !ok(self.clip_upper_pct) {
            return Err(Error::InvalidArgument("clip percentages must lie in [0, 100]".into()));
        }
        if self.clip_lower_pct + self.clip_upper_pct >= 100.0 {
            return Err(Error::InvalidArgument(
                "clip_lower_pct + clip_upper_pct must be below 100".into(),
            ));
        }
        Ok(())
    }
}

/// Clip thresholds that discard the lowest and highest `pct` percent of the
/// sorted voxel values (`floor(n * pct / 100)` values from each tail).
pub fn clip_bounds(values: &[f64], lower_pct: f64, upper_pct: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cut_lo = ((n as f64 * lower_pct / 100.0).floor() as usize).min(n - 1);
    let cut_hi = ((n as f64 * upper_pct / 100.0).floor() as usize).min(n - 1 - cut_lo);
    (sorted[cut_lo], sorted[n - 1 - cut_hi])
}

/// Clips the intensity histogram tails, then normalizes.
pub fn preprocess(v: &Volume, spec: &PreprocessSpec) -> Result<Volume> {
    spec.validate()?;
    let (lo, hi) = clip_bounds(v.data(), spec.clip_lower_pct, spec.clip_upper_pct);
    let clipped: Vec<f64> = v.data().iter().map(|x| x.clamp(lo, hi)).collect();
    let out = match spec.normalize {
        Normalize::UnitRange => {
            let (mn, mx) = clipped
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let range = mx - mn;
            if range > 0.0 {
                clipped.iter().map(|x| (x - mn) / range).collect()
            } else {
                vec![0.0; clipped.len()]
            }
        }
        Normalize::ZeroMeanUnitVar => {
            let n = clipped.len() as f64;
            let mean = clipped.iter().sum::<f64>() / n;
            let var = clipped.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::Degenerate(
                    "constant volume cannot be standardized".into(),
                ));
            }
            clipped.iter().map(|x| (x - mean) / std).collect()
        }
    };
    v.with_data(out)
}

/// Repeats slices cyclically (`i mod D`) until the depth reaches `target_depth`.
pub fn stack_depth(v: &Volume, target_depth: usize) -> Result<Volume> {
    let [d, h, w] = v.dims();
    if d > target_depth {
        return Err(Error::InvalidArgument(format!(
            "cannot stack depth {d} down to {target_depth}"
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(target_depth * plane);
    for i in 0..target_depth {
        let s = i % d;
        data.extend_from_slice(&v.data()[s * plane..(s + 1) * plane]);
    }
    Volume::new([target_depth, h, w], data, v.spacing())
}

/// Label counterpart of [`stack_depth`].
pub fn stack_depth_label(y: &LabelMap, target_depth: usize) -> Result<LabelMap> {
    let [d, h, w] = y.dims();
    if d > target_depth {
        return Err(Error::InvalidArgument(format!(
            "cannot stack depth {d} down to {target_depth}"
        )));
    }
    let plane = h * w;
    let data = (0..target_depth)
        .flat_map(|i| y.data()[(i % d) * plane..(i % d + 1) * plane].iter().copied())
        .collect();
    LabelMap::new([target_depth, h, w], data, y.num_classes())
}

/// Bounding box `(origin, size)` of voxels strictly above the volume minimum.
pub fn foreground_box(v: &Volume) -> (Dims, Dims) {
    let (mn, _) = v.min_max();
    let [d, h, w] = v.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if v.at(z, y, x) > mn {
                    for (a, c) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return ([0; 3], v.dims());
    }
    (lo, [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1])
}

fn crop_box<T: Copy>(data: &[T], dims: Dims, origin: Dims, size: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let row = ((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2];
            out.extend_from_slice(&data[row..row + size[2]]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Configuration of the synthetic multi-domain generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub volumes_per_domain: usize,
    pub labeled_fraction: f64,
    pub grid_size: Dims,
    pub num_classes: usize,
    pub class_frequency_skew: f64,
    pub seed: u64,
    /// Domains whose training volumes carry labels; `None` means all.
    pub labeled_domains: Option<Vec<u32>>,
    /// Domains never seen in training; they only contribute test volumes.
    pub heldout_domains: Vec<u32>,
    /// Extra labeled volumes generated per evaluation domain.
    pub test_per_domain: usize,
    /// Fraction of the grid covered by foreground objects.
    pub foreground_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_domains: 1,
            volumes_per_domain: 4,
            labeled_fraction: 0.5,
            grid_size: [16, 16, 16],
            num_classes: 3,
            class_frequency_skew: 1.0,
            seed: 0,
            labeled_domains: None,
            heldout_domains: Vec::new(),
            test_per_domain: 0,
            foreground_fraction: 0.15,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidArgument("labeled_fraction must lie in (0, 1]".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::InvalidArgument("synthetic data needs 2..=255 classes".into()));
        }
        if self.num_domains == 0 || self.volumes_per_domain == 0 {
            return Err(Error::InvalidArgument("need at least one domain and one volume".into()));
        }
        if !(self.class_frequency_skew > 0.0) {
            return Err(Error::InvalidArgument("class_frequency_skew must be positive".into()));
        }
        if !(self.foreground_fraction > 0.0 && self.foreground_fraction < 1.0) {
            return Err(Error::InvalidArgument("foreground_fraction must lie in (0, 1)".into()));
        }
        if self.grid_size.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("grid dims must be positive".into()));
        }
        Ok(())
    }

    fn is_labeled_domain(&self, d: u32) -> bool {
        self.labeled_domains.as_ref().is_none_or(|l| l.contains(&d))
    }
}

/// Intensity transfer of one acquisition domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStyle {
    pub gain: f64,
    pub bias: f64,
    pub noise: f64,
}

fn domain_style(rng: &mut ChaCha8Rng, d: u32) -> DomainStyle {
    DomainStyle {
        gain: rng.random_range(0.85..1.15),
        bias: 0.2 * d as f64 + rng.random_range(-0.03..0.03),
        noise: rng.random_range(0.03..0.08),
    }
}

const PLACEMENT_RESTARTS: usize = 20;

/// Paints non-overlapping ellipsoids, one per foreground class, with class
/// `k` covering `skew^-(k-1)` times the volume of class 1. A layout that
/// leaves no room for a later class is redrawn from scratch.
fn draw_labels(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Result<Vec<u8>> {
    let mut last = None;
    for _ in 0..PLACEMENT_RESTARTS {
        match try_draw_labels(rng, spec) {
            Err(Error::Capacity(msg)) => last = Some(msg),
            other => return other,
        }
    }
    Err(Error::Capacity(last.unwrap_or_default()))
}

fn try_draw_labels(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Result<Vec<u8>> {
    let dims = spec.grid_size;
    let n = voxel_count(dims);
    let fg = spec.num_classes - 1;
    let ratios: Vec<f64> = (0..fg).map(|k| spec.class_frequency_skew.powi(-(k as i32))).collect();
    let total: f64 = ratios.iter().sum();
    let mut labels = vec![0u8; n];
    for (k, ratio) in ratios.iter().enumerate() {
        let target = spec.foreground_fraction * n as f64 * ratio / total;
        let radius = (3.0 * target / (4.0 * std::f64::consts::PI)).cbrt();
        let mut placed = false;
        for _ in 0..500 {
            let mut axes = [0.0f64; 3];
            let mut prod = 1.0f64;
            for a in &mut axes {
                *a = rng.random_range(0.8..1.25);
                prod *= *a;
            }
            let norm = prod.cbrt();
            let semi: Vec<f64> = axes.iter().map(|a| (radius * a / norm).max(0.5)).collect();
            let mut center = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let lo = semi[a] - 0.5;
                let hi = dims[a] as f64 - 0.5 - semi[a];
                if hi < lo {
                    fits = false;
                    break;
                }
                center[a] = if hi > lo { rng.random_range(lo..hi) } else { lo };
            }
            if !fits {
                continue;
            }
            let mut cells = Vec::new();
            let mut clash = false;
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let p = [z as f64, y as f64, x as f64];
                        let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum();
                        if r2 <= 1.0 {
                            let i = (z * dims[1] + y) * dims[2] + x;
                            if labels[i] != 0 {
                                clash = true;
                            }
                            cells.push(i);
                        }
                    }
                }
            }
            if clash || cells.is_empty() {
                continue;
            }
            for i in cells {
                labels[i] = (k + 1) as u8;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Capacity(format!(
                "could not place class {} in a {dims:?} grid",
                k + 1
            )));
        }
    }
    Ok(labels)
}

fn render(rng: &mut ChaCha8Rng, labels: &[u8], k: usize, style: DomainStyle) -> Vec<f64> {
    labels
        .iter()
        .map(|&c| {
            let level = c as f64 / (k - 1) as f64;
            let noise: f64 = StandardNormal.sample(rng);
            // keep values exactly representable in the f32 on-disk format
            ((style.gain * level + style.bias + style.noise * noise) as f32) as f64
        })
        .collect()
}

/// Synthetic training split plus held-out labeled test volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub split: DatasetSplit,
    pub test: Vec<(Volume, LabelMap)>,
    pub test_domains: Vec<u32>,
    pub styles: Vec<DomainStyle>,
}

/// Evaluation domains: held-out domains if any, else unlabeled training
/// domains, else every domain.
fn test_domain_list(spec: &SyntheticSpec) -> Vec<u32> {
    if !spec.heldout_domains.is_empty() {
        return spec.heldout_domains.clone();
    }
    let all: Vec<u32> = (0..spec.num_domains as u32).collect();
    let unlabeled: Vec<u32> = all.iter().copied().filter(|&d| !spec.is_labeled_domain(d)).collect();
    if unlabeled.is_empty() {
        all
    } else {
        unlabeled
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let styles: Vec<DomainStyle> = (0..spec.num_domains as u32).map(|d| domain_style(&mut rng, d)).collect();
    let spacing = [1.0; 3];
    let mut labeled = Vec::new();
    let mut labeled_domains = Vec::new();
    let mut unlabeled = Vec::new();
    let mut unlabeled_domains = Vec::new();
    for d in 0..spec.num_domains as u32 {
        if spec.heldout_domains.contains(&d) {
            continue;
        }
        let n_lab = if spec.is_labeled_domain(d) {
            ((spec.labeled_fraction * spec.volumes_per_domain as f64).round() as usize)
                .clamp(1, spec.volumes_per_domain)
        } else {
            0
        };
        for i in 0..spec.volumes_per_domain {
            let labels = draw_labels(&mut rng, spec)?;
            let values = render(&mut rng, &labels, spec.num_classes, styles[d as usize]);
            let v = Volume::new(spec.grid_size, values, spacing)?;
            if i < n_lab {
                labeled.push((v, LabelMap::new(spec.grid_size, labels, spec.num_classes)?));
                labeled_domains.push(d);
            } else {
                unlabeled.push(v);
                unlabeled_domains.push(d);
            }
        }
    }
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("configuration leaves no labeled training volume".into()));
    }
    let mut test = Vec::new();
    let mut test_domains = Vec::new();
    for d in test_domain_list(spec) {
        let style = *styles
            .get(d as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("test domain {d} does not exist")))?;
        for _ in 0..spec.test_per_domain {
            let labels = draw_labels(&mut rng, spec)?;
            let values = render(&mut rng, &labels, spec.num_classes, style);
            test.push((
                Volume::new(spec.grid_size, values, spacing)?,
                LabelMap::new(spec.grid_size, labels, spec.num_classes)?,
            ));
            test_domains.push(d);
        }
    }
    let split = DatasetSplit::new(labeled, unlabeled, Some(labeled_domains), Some(unlabeled_domains))?;
    Ok(SyntheticData {
        split,
        test,
        test_domains,
        styles,
    })
}

// ---------------------------------------------------------------------------
// Raw grid files

fn header(dims: Dims, k: usize, spacing: [f64; 3]) -> String {
    format!(
        "{RAW_MAGIC} {} {} {} {k} {} {} {}\n",
        dims[0], dims[1], dims[2], spacing[0], spacing[1], spacing[2]
    )
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = header(v.dims(), 0, v.spacing()).into_bytes();
    for &x in v.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_label(path: &Path, y: &LabelMap, spacing: [f64; 3]) -> Result<()> {
    let mut buf = header(y.dims(), y.num_classes(), spacing).into_bytes();
    buf.extend_from_slice(y.data());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct RawHeader {
    dims: Dims,
    k: usize,
    spacing: [f64; 3],
    payload_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<RawHeader> {
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 8 || fields[0] != RAW_MAGIC {
        return Err(bad("expected `A&D-RAWv1 D H W K sx sy sz`"));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer in header"));
    let real = |s: &str| s.parse::<f64>().map_err(|_| bad("bad real in header"));
    Ok(RawHeader {
        dims: [int(fields[1])?, int(fields[2])?, int(fields[3])?],
        k: int(fields[4])?,
        spacing: [real(fields[5])?, real(fields[6])?, real(fields[7])?],
        payload_offset: end + 1,
    })
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes, path)?;
    if h.k != 0 {
        return Err(Error::Format(format!("{}: expected an intensity grid (K = 0)", path.display())));
    }
    let payload = &bytes[h.payload_offset..];
    if payload.len() != 4 * voxel_count(h.dims) {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header implies {}",
            path.display(),
            payload.len(),
            4 * voxel_count(h.dims)
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::new(h.dims, data, h.spacing)
}

pub fn read_label(path: &Path) -> Result<(LabelMap, [f64; 3])> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes, path)?;
    if h.k == 0 {
        return Err(Error::Format(format!("{}: expected a label grid (K > 0)", path.display())));
    }
    let payload = &bytes[h.payload_offset..];
    if payload.len() != voxel_count(h.dims) {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header implies {}",
            path.display(),
            payload.len(),
            voxel_count(h.dims)
        )));
    }
    Ok((LabelMap::new(h.dims, payload.to_vec(), h.k)?, h.spacing))
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub labeled: bool,
    pub domain: u32,
    pub volume: PathBuf,
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub preprocess: Option<PreprocessSpec>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses manifest text; relative paths resolve against `base`.
    ///
    /// Besides `labeled|unlabeled` records, a `preprocess` line of `key=value`
    /// pairs may set the [`PreprocessSpec`]; `#` starts a comment.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Format(format!("manifest line {}: {msg}", no + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "preprocess" => {
                    let mut spec = PreprocessSpec::unit_range();
                    for kv in &fields[1..] {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))?;
                        let real = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number {v:?}")));
                        match k {
                            "clip_lower_pct" => spec.clip_lower_pct = real(v)?,
                            "clip_upper_pct" => spec.clip_upper_pct = real(v)?,
                            "normalize" => spec.normalize = v.parse()?,
                            "crop_to_foreground" => {
                                spec.crop_to_foreground =
                                    v.parse().map_err(|_| bad(format!("bad boolean {v:?}")))?
                            }
                            other => return Err(bad(format!("unknown preprocess key {other:?}"))),
                        }
                    }
                    spec.validate()?;
                    m.preprocess = Some(spec);
                }
                role @ ("labeled" | "unlabeled") => {
                    let labeled = role == "labeled";
                    let want = if labeled { 4 } else { 3 };
                    if fields.len() != want {
                        return Err(bad(format!("{role} record needs {want} fields")));
                    }
                    let domain = fields[1]
                        .parse()
                        .map_err(|_| bad(format!("domain must be an integer, got {:?}", fields[1])))?;
                    m.entries.push(ManifestEntry {
                        labeled,
                        domain,
                        volume: base.join(fields[2]),
                        label: labeled.then(|| base.join(fields[3])),
                    });
                }
                other => return Err(bad(format!("unknown record type {other:?}"))),
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Renders the manifest with paths relative to `base` where possible.
    pub fn render(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::new();
        if let Some(p) = &self.preprocess {
            let _ = writeln!(
                out,
                "preprocess clip_lower_pct={} clip_upper_pct={} normalize={} crop_to_foreground={}",
                p.clip_lower_pct, p.clip_upper_pct, p.normalize, p.crop_to_foreground
            );
        }
        for e in &self.entries {
            match &e.label {
                Some(l) if e.labeled => {
                    let _ = writeln!(out, "labeled {} {} {}", e.domain, rel(&e.volume), rel(l));
                }
                _ => {
                    let _ = writeln!(out, "unlabeled {} {}", e.domain, rel(&e.volume));
                }
            }
        }
        out
    }
}

fn load_entry(e: &ManifestEntry, pre: Option<&PreprocessSpec>) -> Result<(Volume, Option<LabelMap>)> {
    let mut v = read_volume(&e.volume)?;
    let mut y = match &e.label {
        Some(p) => {
            let (y, _) = read_label(p)?;
            if y.dims() != v.dims() {
                return Err(Error::Shape(format!(
                    "{}: label {:?} vs volume {:?}",
                    p.display(),
                    y.dims(),
                    v.dims()
                )));
            }
            Some(y)
        }
        None => None,
    };
    if let Some(spec) = pre {
        if spec.crop_to_foreground {
            let (origin, size) = foreground_box(&v);
            v = Volume::new(size, crop_box(v.data(), v.dims(), origin, size), v.spacing())?;
            if let Some(lab) = y.take() {
                let data = crop_box(lab.data(), lab.dims(), origin, size);
                y = Some(LabelMap::new(size, data, lab.num_classes())?);
            }
        }
        v = preprocess(&v, spec)?;
    }
    Ok((v, y))
}

/// Worker count for file loading, from `AD_NUM_WORKERS` (default 1).
pub fn num_workers() -> usize {
    std::env::var("AD_NUM_WORKERS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Loads every manifest entry, preserving manifest order.
pub fn load_entries(manifest: &Manifest) -> Result<Vec<(Volume, Option<LabelMap>)>> {
    let workers = num_workers().min(manifest.entries.len().max(1));
    let pre = manifest.preprocess.as_ref();
    if workers <= 1 {
        return manifest.entries.iter().map(|e| load_entry(e, pre)).collect();
    }
    let chunk = manifest.entries.len().div_ceil(workers);
    let results: Vec<Result<Vec<_>>> = std::thread::scope(|s| {
        let handles: Vec<_> = manifest
            .entries
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| load_entry(e, pre)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(manifest.entries.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn load_split(manifest_path: &Path) -> Result<DatasetSplit> {
    load_split_with(manifest_path, None, None)
}

/// Loads a split. A `preprocess` directive in the manifest takes precedence
/// over `fallback`; `stack_to` then stacks every sample cyclically.
pub fn load_split_with(
    manifest_path: &Path,
    fallback: Option<PreprocessSpec>,
    stack_to: Option<usize>,
) -> Result<DatasetSplit> {
    let mut manifest = Manifest::read(manifest_path)?;
    if manifest.preprocess.is_none() {
        manifest.preprocess = fallback;
    }
    let mut loaded = load_entries(&manifest)?;
    if let Some(depth) = stack_to {
        for (v, y) in &mut loaded {
            *v = stack_depth(v, depth)?;
            if let Some(lab) = y.take() {
                *y = Some(stack_depth_label(&lab, depth)?);
            }
        }
    }
    let mut labeled = Vec::new();
    let mut labeled_domains = Vec::new();
    let mut unlabeled = Vec::new();
    let mut unlabeled_domains = Vec::new();
    for (entry, (v, y)) in manifest.entries.iter().zip(loaded) {
        match y {
            Some(y) => {
                labeled.push((v, y));
                labeled_domains.push(entry.domain);
            }
            None => {
                unlabeled.push(v);
                unlabeled_domains.push(entry.domain);
            }
        }
    }
    DatasetSplit::new(labeled, unlabeled, Some(labeled_domains), Some(unlabeled_domains))
}

/// Writes every sample of `split` under `dir` plus a manifest named
/// `manifest_name`; returns the manifest path.
pub fn write_split(
    dir: &Path,
    manifest_name: &str,
    split: &DatasetSplit,
    preprocess: Option<PreprocessSpec>,
) -> Result<PathBuf> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let stem = manifest_name.trim_end_matches(".manifest");
    let mut manifest = Manifest {
        preprocess,
        entries: Vec::new(),
    };
    for (i, ((v, y), &d)) in split.labeled.iter().zip(&split.labeled_domains).enumerate() {
        let vp = data_dir.join(format!("{stem}_l{i:03}_img.raw"));
        let lp = data_dir.join(format!("{stem}_l{i:03}_lab.raw"));
        write_volume(&vp, v)?;
        write_label(&lp, y, v.spacing())?;
        manifest.entries.push(ManifestEntry {
            labeled: true,
            domain: d,
            volume: vp,
            label: Some(lp),
        });
    }
    for (i, (v, &d)) in split.unlabeled.iter().zip(&split.unlabeled_domains).enumerate() {
        let vp = data_dir.join(format!("{stem}_u{i:03}_img.raw"));
        write_volume(&vp, v)?;
        manifest.entries.push(ManifestEntry {
            labeled: false,
            domain: d,
            volume: vp,
            label: None,
        });
    }
    let path = dir.join(manifest_name);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.render(dir).as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
