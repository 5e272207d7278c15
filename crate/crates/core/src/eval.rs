//! Overlap and surface metrics, and sliding-window whole-volume inference.

use serde::Serialize;

use crate::grid::crop_reflect;
use crate::network::{DecoderRole, DiffVNet};
use crate::types::{softmax_channels, voxel_count, Dims, LabelMap, ProbKind, ProbMap, Volume};
use crate::{Error, Result};
use adseg_autograd::Tensor;

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

fn counts(pred: &[u8], gt: &[u8], k: u8) -> (usize, usize, usize) {
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == k, b == k);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    (p, g, both)
}

/// `2|P and G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, k: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let (p, g, both) = counts(pred.data(), gt.data(), k);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// `|P and G| / |P or G|`; 1 when both masks are empty.
pub fn jaccard_score(pred: &LabelMap, gt: &LabelMap, k: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let (p, g, both) = counts(pred.data(), gt.data(), k);
    let union = p + g - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

/// Hard Dice of every class (background included) pooled over a batch of
/// flat label buffers.
pub fn batch_dice_per_class(pred: &[&[u8]], gt: &[&[u8]], k: usize) -> Vec<f64> {
    (0..k)
        .map(|c| {
            let (mut p, mut g, mut both) = (0, 0, 0);
            for (a, b) in pred.iter().zip(gt) {
                let (x, y, z) = counts(a, b, c as u8);
                p += x;
                g += y;
                both += z;
            }
            if p + g == 0 {
                1.0
            } else {
                2.0 * both as f64 / (p + g) as f64
            }
        })
        .collect()
}

/// Indices of class-`k` voxels with at least one 6-connected neighbour
/// outside the class (the grid exterior counts as outside).
pub fn surface_voxels(label: &LabelMap, k: u8) -> Vec<usize> {
    let [d, h, w] = label.dims();
    let data = label.data();
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && data[(z as usize * h + y as usize) * w + x as usize] == k
    };
    let mut out = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !inside(z, y, x) {
                    continue;
                }
                let border = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                    .iter()
                    .any(|&(dz, dy, dx)| !inside(z + dz, y + dy, x + dx));
                if border {
                    out.push((z as usize * h + y as usize) * w + x as usize);
                }
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line
/// with sample spacing `s`.
fn edt_line(f: &[f64], s: f64, out: &mut [f64]) {
    let s2 = s * s;
    let sites: Vec<usize> = (0..f.len()).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let cross = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
                    if cross <= *z.last().expect("paired") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(cross);
                        break;
                    }
                }
            }
        }
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while j + 1 < v.len() && z[j + 1] < q as f64 {
            j += 1;
        }
        let dq = q as f64 - v[j] as f64;
        *o = s2 * dq * dq + f[v[j]];
    }
}

/// Exact squared Euclidean distance (in physical units) from every voxel to
/// the nearest seed voxel. Without seeds every entry is infinite.
pub fn squared_distance_transform(dims: Dims, seeds: &[usize], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut grid = vec![f64::INFINITY; voxel_count(dims)];
    for &i in seeds {
        grid[i] = 0.0;
    }
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if [z, y, x][axis] != 0 {
                        continue;
                    }
                    let base = (z * h + y) * w + x;
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = grid[base + i * stride];
                    }
                    edt_line(&line, spacing[axis], &mut out);
                    for (i, o) in out.iter().enumerate() {
                        grid[base + i * stride] = *o;
                    }
                }
            }
        }
    }
    grid
}

/// Linear-interpolation percentile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Symmetric surface distances in physical units; `None` when either mask
/// of class `k` is empty.
pub fn symmetric_surface_distances(pred: &LabelMap, gt: &LabelMap, k: u8, spacing: [f64; 3]) -> Result<Option<Vec<f64>>> {
    check_pair(pred, gt)?;
    let sp = surface_voxels(pred, k);
    let sg = surface_voxels(gt, k);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let dims = pred.dims();
    let to_gt = squared_distance_transform(dims, &sg, spacing);
    let to_pred = squared_distance_transform(dims, &sp, spacing);
    let mut all: Vec<f64> = sp.iter().map(|&i| to_gt[i].sqrt()).collect();
    all.extend(sg.iter().map(|&i| to_pred[i].sqrt()));
    Ok(Some(all))
}

/// `(asd, hd95)` for class `k`; `None` when either mask is empty.
pub fn surface_distances(pred: &LabelMap, gt: &LabelMap, k: u8, spacing: [f64; 3]) -> Result<Option<(f64, f64)>> {
    let Some(mut all) = symmetric_surface_distances(pred, gt, k, spacing)? else {
        return Ok(None);
    };
    let asd = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(f64::total_cmp);
    Ok(Some((asd, percentile_sorted(&all, 95.0))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

/// Foreground metrics of one case (classes `1..K`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean: ClassMetrics,
    /// Number of class entries whose surface metrics are undefined.
    pub undefined: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    fn from_classes(per_class: Vec<ClassMetrics>) -> Self {
        let n = per_class.len().max(1) as f64;
        let mean = ClassMetrics {
            dice: per_class.iter().map(|c| c.dice).sum::<f64>() / n,
            jaccard: per_class.iter().map(|c| c.jaccard).sum::<f64>() / n,
            asd: mean_defined(per_class.iter().map(|c| c.asd)),
            hd95: mean_defined(per_class.iter().map(|c| c.hd95)),
        };
        let undefined = per_class.iter().filter(|c| c.asd.is_none()).count();
        Self {
            per_class,
            mean,
            undefined,
        }
    }

    /// Class-wise mean over cases; undefined surface entries are skipped.
    pub fn average(reports: &[MetricReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to average".into()))?;
        let k = first.per_class.len();
        if reports.iter().any(|r| r.per_class.len() != k) {
            return Err(Error::Shape("reports cover different class counts".into()));
        }
        let n = reports.len() as f64;
        let per_class = (0..k)
            .map(|c| ClassMetrics {
                dice: reports.iter().map(|r| r.per_class[c].dice).sum::<f64>() / n,
                jaccard: reports.iter().map(|r| r.per_class[c].jaccard).sum::<f64>() / n,
                asd: mean_defined(reports.iter().map(|r| r.per_class[c].asd)),
                hd95: mean_defined(reports.iter().map(|r| r.per_class[c].hd95)),
            })
            .collect();
        let mut out = Self::from_classes(per_class);
        out.undefined = reports.iter().map(|r| r.undefined).sum();
        Ok(out)
    }
}

pub fn evaluate(pred: &LabelMap, gt: &LabelMap, spacing: [f64; 3]) -> Result<MetricReport> {
    check_pair(pred, gt)?;
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::Shape(format!(
            "{} predicted classes vs {} labeled",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    let mut per_class = Vec::with_capacity(gt.num_classes() - 1);
    for k in 1..gt.num_classes() as u8 {
        let sd = surface_distances(pred, gt, k, spacing)?;
        per_class.push(ClassMetrics {
            dice: dice_score(pred, gt, k)?,
            jaccard: jaccard_score(pred, gt, k)?,
            asd: sd.map(|s| s.0),
            hd95: sd.map(|s| s.1),
        });
    }
    let report = MetricReport::from_classes(per_class);
    if report.undefined > 0 {
        log::info!("{} class(es) with an empty mask; surface metrics excluded", report.undefined);
    }
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with one row per case: means followed by per-class columns.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let k = rows.first().map_or(0, |r| r.1.per_class.len());
    let mut header = vec!["case".to_string(), "dice".into(), "jaccard".into(), "asd".into(), "hd95".into()];
    for metric in ["dice", "jaccard", "asd", "hd95"] {
        header.extend((1..=k).map(|c| format!("{metric}_{c}")));
    }
    let mut out = header.join(",");
    out.push('\n');
    for (name, r) in rows {
        let mut cells = vec![
            name.clone(),
            format!("{:.6}", r.mean.dice),
            format!("{:.6}", r.mean.jaccard),
            fmt_opt(r.mean.asd),
            fmt_opt(r.mean.hd95),
        ];
        cells.extend(r.per_class.iter().map(|c| format!("{:.6}", c.dice)));
        cells.extend(r.per_class.iter().map(|c| format!("{:.6}", c.jaccard)));
        cells.extend(r.per_class.iter().map(|c| fmt_opt(c.asd)));
        cells.extend(r.per_class.iter().map(|c| fmt_opt(c.hd95)));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct JsonRow<'a> {
    case: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

/// One JSON object per case; undefined surface metrics become `null`.
pub fn metrics_jsonl(rows: &[(String, MetricReport)]) -> String {
    rows.iter()
        .map(|(case, report)| {
            let mut line = serde_json::to_string(&JsonRow { case, report }).expect("plain data");
            line.push('\n');
            line
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sliding-window inference

/// Tile origins along one axis: regular steps plus a final tile flush with
/// the end.
pub fn tile_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch < len {
        starts.push(s);
        s += stride;
    }
    starts.push(len - patch);
    starts.dedup();
    starts
}

fn gaussian_importance(patch: Dims) -> Vec<f64> {
    let axis = |p: usize| -> Vec<f64> {
        let c = (p as f64 - 1.0) / 2.0;
        let sigma = p as f64 / 8.0;
        (0..p).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (a, b, c) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut out = Vec::with_capacity(voxel_count(patch));
    for z in &a {
        for y in &b {
            for x in &c {
                out.push((z * y * x).max(1e-8));
            }
        }
    }
    out
}

/// Gaussian-blended tiled prediction. `predict` maps a patch-sized volume to
/// a `K`-class map (logits or simplex); the output is a simplex map over the
/// original grid. Volumes smaller than the patch are reflect-padded
/// symmetrically.
pub fn sliding_window_infer<F>(v: &Volume, patch: Dims, overlap: f64, num_classes: usize, mut predict: F) -> Result<ProbMap>
where
    F: FnMut(&Volume) -> Result<ProbMap>,
{
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let mut stride = [0usize; 3];
    for a in 0..3 {
        stride[a] = (patch[a] as f64 * (1.0 - overlap)).floor() as usize;
        if stride[a] == 0 {
            return Err(Error::InvalidArgument(format!("patch {patch:?} with overlap {overlap} gives zero stride")));
        }
    }
    let dims = v.dims();
    let mut padded = [0usize; 3];
    let mut pad_before = [0usize; 3];
    for a in 0..3 {
        padded[a] = dims[a].max(patch[a]);
        pad_before[a] = (padded[a] - dims[a]) / 2;
    }
    let origin = pad_before.map(|p| -(p as isize));
    let work = crop_reflect(v.data(), dims, origin, padded);
    let n = voxel_count(padded);
    let weights = gaussian_importance(patch);
    let mut acc = vec![0.0; num_classes * n];
    let mut wsum = vec![0.0; n];
    let pn = voxel_count(patch);
    for &z0 in &tile_starts(padded[0], patch[0], stride[0]) {
        for &y0 in &tile_starts(padded[1], patch[1], stride[1]) {
            for &x0 in &tile_starts(padded[2], patch[2], stride[2]) {
                let tile = crop_reflect(&work, padded, [z0 as isize, y0 as isize, x0 as isize], patch);
                let tile = Volume::new(patch, tile, v.spacing())?;
                let p = predict(&tile)?;
                if p.num_classes() != num_classes || p.dims() != patch {
                    return Err(Error::Shape(format!(
                        "predictor returned {}x{:?} for a {num_classes}x{patch:?} tile",
                        p.num_classes(),
                        p.dims()
                    )));
                }
                let probs = p.softmax();
                let probs = probs.data();
                let mut i = 0;
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let row = ((z0 + z) * padded[1] + y0 + y) * padded[2] + x0;
                        for x in 0..patch[2] {
                            let w = weights[i];
                            let dst = row + x;
                            wsum[dst] += w;
                            for c in 0..num_classes {
                                acc[c * n + dst] += w * probs[c * pn + i];
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    let out_n = voxel_count(dims);
    let mut out = vec![0.0; num_classes * out_n];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let src = ((z + pad_before[0]) * padded[1] + y + pad_before[1]) * padded[2] + x + pad_before[2];
                let dst = (z * dims[1] + y) * dims[2] + x;
                for c in 0..num_classes {
                    out[c * out_n + dst] = acc[c * n + src] / wsum[src];
                }
            }
        }
    }
    ProbMap::new(num_classes, dims, out, ProbKind::Simplex)
}

/// Predictor through the image-only stem and the `theta` decoder.
pub fn theta_predictor(net: &DiffVNet) -> impl FnMut(&Volume) -> Result<ProbMap> + '_ {
    move |tile: &Volume| {
        let d = tile.dims();
        let x = Tensor::new(&[1, 1, d[0], d[1], d[2]], tile.data().to_vec())?;
        let logits = net.plain_logits(DecoderRole::Theta, &x)?;
        let k = net.config().num_classes;
        ProbMap::new(k, d, softmax_channels(logits.data(), k), ProbKind::Simplex)
    }
}

/// Whole-volume prediction with the trained predictor.
pub fn predict_volume(net: &DiffVNet, v: &Volume, patch: Dims, overlap: f64) -> Result<ProbMap> {
    sliding_window_infer(v, patch, overlap, net.config().num_classes, theta_predictor(net))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[u8], k: usize) -> LabelMap {
        LabelMap::new([1, 1, values.len()], values.to_vec(), k).unwrap()
    }

    #[test]
    fn dice_hand_count() {
        let p = line(&[1, 1, 0, 0, 0, 0], 2);
        let g = line(&[1, 1, 1, 1, 0, 0], 2);
        assert!((dice_score(&p, &g, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_score(&p, &g, 1).unwrap(), 0.5);
        let empty = line(&[0; 6], 2);
        assert_eq!(dice_score(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice_score(&empty, &g, 1).unwrap(), 0.0);
    }

    #[test]
    fn single_voxels_three_apart() {
        let mut a = vec![0u8; 125];
        let mut b = vec![0u8; 125];
        a[(2 * 5 + 2) * 5] = 1;
        b[(2 * 5 + 2) * 5 + 3] = 1;
        let pa = LabelMap::new([5, 5, 5], a, 2).unwrap();
        let pb = LabelMap::new([5, 5, 5], b, 2).unwrap();
        assert_eq!(surface_distances(&pa, &pb, 1, [1.0; 3]).unwrap(), Some((3.0, 3.0)));
        let empty = LabelMap::new([5, 5, 5], vec![0; 125], 2).unwrap();
        assert_eq!(surface_distances(&pa, &empty, 1, [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn spacing_scales_distances() {
        let mut a = vec![0u8; 8];
        let mut b = vec![0u8; 8];
        a[0] = 1;
        b[7] = 1;
        let pa = LabelMap::new([2, 2, 2], a, 2).unwrap();
        let pb = LabelMap::new([2, 2, 2], b, 2).unwrap();
        let (asd, _) = surface_distances(&pa, &pb, 1, [2.0, 3.0, 6.0]).unwrap().unwrap();
        assert!((asd - 7.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert!((percentile_sorted(&v, 95.0) - 9.5).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[4.0], 95.0), 4.0);
    }

    #[test]
    fn tiles_cover_axis() {
        assert_eq!(tile_starts(16, 16, 8), vec![0]);
        assert_eq!(tile_starts(20, 16, 8), vec![0, 4]);
        assert_eq!(tile_starts(40, 16, 8), vec![0, 8, 16, 24]);
    }

    #[test]
    fn csv_leaves_undefined_blank() {
        let r = MetricReport::from_classes(vec![ClassMetrics {
            dice: 1.0,
            jaccard: 1.0,
            asd: None,
            hd95: None,
        }]);
        let csv = metrics_csv(&[("a".into(), r.clone())]);
        assert_eq!(csv.lines().nth(1).unwrap(), "a,1.000000,1.000000,,,1.000000,1.000000,,");
        assert!(metrics_jsonl(&[("a".into(), r)]).contains("\"asd\":null"));
    }
}
