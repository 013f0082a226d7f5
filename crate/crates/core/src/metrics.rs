//! Evaluation metrics: reconstruction, depth, pose, segmentation, plane
//! recall and multi-view relative pose accuracy.
//!
//! Every result type serializes to JSON and renders as an aligned text
//! table through [`MetricTable`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_between_deg, plane_angle_deg, rotation_error_deg, RigidTransform, Vec3};
use crate::loss::Sum;
use crate::maps::{DepthMap, IdMap, Mask};

pub const DEFAULT_FSCORE_TAU: f64 = 0.1;
pub const DEFAULT_TRANSLATION_THRESHOLDS: [f64; 4] = [1.0, 0.5, 0.2, 0.1];
pub const DEFAULT_ROTATION_THRESHOLDS: [f64; 4] = [30.0, 15.0, 10.0, 5.0];
pub const DEFAULT_RECALL_DEPTH_THRESHOLDS: [f64; 2] = [0.1, 0.6];
pub const DEFAULT_RECALL_NORMAL_THRESHOLDS: [f64; 2] = [5.0, 30.0];
pub const DEFAULT_RRA_RTA_THRESHOLDS: [f64; 3] = [5.0, 10.0, 15.0];

/// Relative translations shorter than this have no usable direction.
pub const MIN_TRANSLATION: f64 = 1e-6;

/// Rows of `(label, value)` printed as two aligned columns.
pub trait MetricTable {
    fn rows(&self) -> Vec<(String, f64)>;

    fn table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k:<width$}  {v:>12.6}").expect("writing to a String");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtThreshold {
    pub threshold: f64,
    pub value: f64,
}

/// Uniform grid over a point set for exact nearest-neighbour queries.
struct NearestGrid<'a> {
    points: &'a [Vec3],
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// `order[starts[c]..starts[c + 1]]` are the points of cell `c`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NearestGrid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let ext = max - min;
        let longest = ext.max();
        let n = points.len();
        let mut cell = if longest > 0.0 { longest } else { 1.0 };
        let count = |c: f64| (0..3).map(|i| (ext[i] / c).floor() as usize + 1).product::<usize>();
        for _ in 0..64 {
            if count(cell * 0.5) > n.max(1) {
                break;
            }
            cell *= 0.5;
        }
        let dims = [0, 1, 2].map(|i| (ext[i] / cell).floor() as usize + 1);
        let mut grid = NearestGrid {
            points,
            min,
            cell,
            dims,
            starts: vec![0; dims[0] * dims[1] * dims[2] + 1],
            order: Vec::with_capacity(n),
        };
        let cells: Vec<usize> = points.iter().map(|p| grid.flat(grid.coords(p))).collect();
        for &c in &cells {
            grid.starts[c + 1] += 1;
        }
        for i in 1..grid.starts.len() {
            grid.starts[i] += grid.starts[i - 1];
        }
        let mut fill = grid.starts.clone();
        grid.order.resize(n, 0);
        for (i, &c) in cells.iter().enumerate() {
            grid.order[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    fn coords(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|i| {
            let c = ((p[i] - self.min[i]) / self.cell).floor();
            c.clamp(0.0, (self.dims[i] - 1) as f64) as usize
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Distance from `p` to its nearest point.
    fn nearest(&self, p: &Vec3) -> f64 {
        let c = self.coords(p).map(|v| v as isize);
        let reach = *self.dims.iter().max().expect("three axes") as isize;
        let mut best = f64::INFINITY;
        for r in 0..=reach {
            let range = |i: usize| (c[i] - r).max(0)..=(c[i] + r).min(self.dims[i] as isize - 1);
            for z in range(2) {
                for y in range(1) {
                    for x in range(0) {
                        let ring = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if ring != r {
                            continue;
                        }
                        let f = self.flat([x as usize, y as usize, z as usize]);
                        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
                            best = best.min((self.points[i] - p).norm_squared());
                        }
                    }
                }
            }
            // Points in rings beyond r lie at least r cells away.
            let bound = r as f64 * self.cell;
            if best <= bound * bound {
                break;
            }
        }
        best.sqrt()
    }
}

fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let grid = NearestGrid::new(to);
    from.par_iter().map(|p| grid.nearest(p)).collect()
}

fn check_sets(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("point sets must be non-empty"));
    }
    if a.iter().chain(b).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("point sets contain non-finite coordinates"));
    }
    Ok(())
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = Sum::default();
    let mut n = 0usize;
    for v in values {
        s.add(v);
        n += 1;
    }
    s.value() / n as f64
}

/// Symmetric mean nearest-neighbour distance (not squared).
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check_sets(a, b)?;
    let ab = mean(nearest_distances(a, b));
    let ba = mean(nearest_distances(b, a));
    Ok(0.5 * (ab + ba))
}

/// F-score in percent of points within `tau` of the other set.
pub fn fscore(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<f64> {
    check_sets(a, b)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("F-score threshold must be positive, got {tau}")));
    }
    let within = |d: Vec<f64>| d.iter().filter(|v| **v <= tau).count() as f64 / d.len() as f64;
    let precision = within(nearest_distances(a, b));
    let recall = within(nearest_distances(b, a));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(200.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rel: f64,
    pub log10: f64,
    /// Meters.
    pub rmse: f64,
    /// Percentages.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricTable for DepthMetrics {
    fn rows(&self) -> Vec<(String, f64)> {
        vec![
            ("rel".into(), self.rel),
            ("log10".into(), self.log10),
            ("rmse".into(), self.rmse),
            ("delta1".into(), self.delta1),
            ("delta2".into(), self.delta2),
            ("delta3".into(), self.delta3),
        ]
    }
}

/// Depth errors over pixels where both maps are positive (and `mask` is set).
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: Option<&Mask>) -> Result<DepthMetrics> {
    if !pred.same_shape(gt) || mask.is_some_and(|m| !m.same_shape(gt)) {
        return Err(Error::invalid("depth maps and mask must share one resolution"));
    }
    let (mut rel, mut log, mut sq) = (Sum::default(), Sum::default(), Sum::default());
    let mut within = [0usize; 3];
    let mut n = 0usize;
    for (i, (&p, &g)) in pred.as_slice().iter().zip(gt.as_slice()).enumerate() {
        let masked = mask.is_none_or(|m| m.as_slice()[i]);
        if !(masked && p > 0.0 && g > 0.0 && p.is_finite() && g.is_finite()) {
            continue;
        }
        n += 1;
        rel.add((p - g).abs() / g);
        log.add((p.log10() - g.log10()).abs());
        sq.add((p - g) * (p - g));
        let ratio = (p / g).max(g / p);
        for (k, count) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *count += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::empty("no pixel has positive predicted and ground-truth depth"));
    }
    let nf = n as f64;
    let pct = |c: usize| 100.0 * c as f64 / nf;
    Ok(DepthMetrics {
        rel: rel.value() / nf,
        log10: log.value() / nf,
        rmse: (sq.value() / nf).sqrt(),
        delta1: pct(within[0]),
        delta2: pct(within[1]),
        delta3: pct(within[2]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub median: f64,
    pub mean: f64,
    /// Percent of errors at or below each threshold.
    pub within: Vec<AtThreshold>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn summarize(values: impl Iterator<Item = f64>, thresholds: &[f64]) -> ErrorSummary {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let within = thresholds
        .iter()
        .map(|&t| AtThreshold {
            threshold: t,
            value: 100.0 * v.iter().filter(|e| **e <= t).count() as f64 / v.len() as f64,
        })
        .collect();
    ErrorSummary {
        median: median(&v),
        mean: mean(v.iter().copied()),
        within,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseAccuracy {
    /// Meters.
    pub translation: ErrorSummary,
    /// Degrees.
    pub rotation: ErrorSummary,
}

impl MetricTable for PoseAccuracy {
    fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        for (name, unit, s) in [("translation", "m", &self.translation), ("rotation", "deg", &self.rotation)] {
            rows.push((format!("{name} median ({unit})"), s.median));
            rows.push((format!("{name} mean ({unit})"), s.mean));
            for t in &s.within {
                rows.push((format!("{name} <= {}{unit} (%)", t.threshold), t.value));
            }
        }
        rows
    }
}

/// Summary of per-pair `(translation m, rotation deg)` errors.
pub fn pose_accuracy(errors: &[(f64, f64)], translation_thresholds: &[f64], rotation_thresholds: &[f64]) -> Result<PoseAccuracy> {
    if errors.is_empty() {
        return Err(Error::invalid("pose accuracy needs at least one error pair"));
    }
    if errors.iter().any(|(t, r)| !(t.is_finite() && r.is_finite() && *t >= 0.0 && *r >= 0.0)) {
        return Err(Error::invalid("pose errors must be finite and non-negative"));
    }
    Ok(PoseAccuracy {
        translation: summarize(errors.iter().map(|e| e.0), translation_thresholds),
        rotation: summarize(errors.iter().map(|e| e.1), rotation_thresholds),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub ri: f64,
    pub voi: f64,
    pub sc: f64,
}

impl MetricTable for SegMetrics {
    fn rows(&self) -> Vec<(String, f64)> {
        vec![("RI".into(), self.ri), ("VOI".into(), self.voi), ("SC".into(), self.sc)]
    }
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    let mut s = Sum::default();
    for c in counts {
        let p = c as f64 / n;
        s.add(-p * p.ln());
    }
    s.value()
}

/// Partition agreement between two label maps. With `ignore_void`, only
/// pixels labelled in both maps (id > 0) count.
pub fn seg_metrics(pred: &IdMap, gt: &IdMap, ignore_void: bool) -> Result<SegMetrics> {
    if !pred.same_shape(gt) {
        return Err(Error::invalid("segmentation maps must share one resolution"));
    }
    let mut joint: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        if ignore_void && (p == 0 || g == 0) {
            continue;
        }
        *joint.entry((p, g)).or_default() += 1;
    }
    if joint.is_empty() {
        return Err(Error::empty("no pixel is labelled in both maps"));
    }
    let mut pred_sizes: BTreeMap<u32, u64> = BTreeMap::new();
    let mut gt_sizes: BTreeMap<u32, u64> = BTreeMap::new();
    for (&(p, g), &c) in &joint {
        *pred_sizes.entry(p).or_default() += c;
        *gt_sizes.entry(g).or_default() += c;
    }
    let n: u64 = joint.values().sum();
    let nf = n as f64;

    let total = pairs(n);
    let ri = if total == 0 {
        1.0
    } else {
        let same_both: u64 = joint.values().map(|&c| pairs(c)).sum();
        let same_pred: u64 = pred_sizes.values().map(|&c| pairs(c)).sum();
        let same_gt: u64 = gt_sizes.values().map(|&c| pairs(c)).sum();
        let agree = total + 2 * same_both - same_pred - same_gt;
        agree as f64 / total as f64
    };

    let h_joint = entropy(joint.values().copied(), nf);
    let voi = (2.0 * h_joint - entropy(pred_sizes.values().copied(), nf) - entropy(gt_sizes.values().copied(), nf)).max(0.0);

    let mut sc = Sum::default();
    for (&g, &gsize) in &gt_sizes {
        let best = joint
            .iter()
            .filter(|((_, jg), _)| *jg == g)
            .map(|(&(p, _), &inter)| inter as f64 / (gsize + pred_sizes[&p] - inter) as f64)
            .fold(0.0, f64::max);
        sc.add(gsize as f64 / nf * best);
    }
    Ok(SegMetrics { ri, voi, sc: sc.value() })
}

/// Instance labels of one view with the per-pixel depth and per-plane
/// normals used by plane recall.
#[derive(Clone, Copy, Debug)]
pub struct PlaneLabels<'a> {
    pub ids: &'a IdMap,
    pub depth: &'a DepthMap,
    pub normals: &'a BTreeMap<u32, Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneRecall {
    pub gt_planes: usize,
    /// Percent of ground-truth planes recalled at each depth threshold (m).
    pub depth: Vec<AtThreshold>,
    /// Percent recalled at each normal threshold (deg).
    pub normal: Vec<AtThreshold>,
}

impl MetricTable for PlaneRecall {
    fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("gt planes".to_string(), self.gt_planes as f64)];
        rows.extend(self.depth.iter().map(|t| (format!("recall depth @{}m (%)", t.threshold), t.value)));
        rows.extend(self.normal.iter().map(|t| (format!("recall normal @{}deg (%)", t.threshold), t.value)));
        rows
    }
}

/// A ground-truth plane counts as recalled when a predicted instance
/// overlaps it with mask IoU above 0.5 and the depth error over the
/// overlap (or the normal angle) is within the threshold.
pub fn plane_recall(pred: &PlaneLabels, gt: &PlaneLabels, depth_thresholds: &[f64], normal_thresholds: &[f64]) -> Result<PlaneRecall> {
    if !(pred.ids.same_shape(gt.ids) && pred.depth.same_shape(gt.ids) && gt.depth.same_shape(gt.ids)) {
        return Err(Error::invalid("instance and depth maps must share one resolution"));
    }
    let mut sizes: [BTreeMap<u32, u64>; 2] = Default::default();
    let mut inter: BTreeMap<(u32, u32), (u64, Sum, u64)> = BTreeMap::new();
    for i in 0..gt.ids.len() {
        let (p, g) = (pred.ids.as_slice()[i], gt.ids.as_slice()[i]);
        if p > 0 {
            *sizes[0].entry(p).or_default() += 1;
        }
        if g > 0 {
            *sizes[1].entry(g).or_default() += 1;
        }
        if p > 0 && g > 0 {
            let e = inter.entry((g, p)).or_insert((0, Sum::default(), 0));
            e.0 += 1;
            let (pd, gd) = (pred.depth.as_slice()[i], gt.depth.as_slice()[i]);
            if pd > 0.0 && gd > 0.0 && pd.is_finite() && gd.is_finite() {
                e.1.add((pd - gd).abs());
                e.2 += 1;
            }
        }
    }
    let [pred_sizes, gt_sizes] = &sizes;
    if gt_sizes.is_empty() {
        return Err(Error::invalid("ground truth has no labelled planes"));
    }
    let normal_of = |labels: &PlaneLabels, id: u32| {
        labels
            .normals
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("plane {id} has no normal")))
    };
    // Per ground-truth plane: (depth error, normal angle) of its match.
    let mut matches: Vec<Option<(Option<f64>, f64)>> = Vec::with_capacity(gt_sizes.len());
    for (&g, &gsize) in gt_sizes {
        let mut found = None;
        for (&(_, p), (count, err, depth_count)) in inter.range((g, 0)..=(g, u32::MAX)) {
            let iou = *count as f64 / (gsize + pred_sizes[&p] - count) as f64;
            if iou > 0.5 {
                let depth_err = (*depth_count > 0).then(|| err.value() / *depth_count as f64);
                let angle = plane_angle_deg(&normal_of(pred, p)?, &normal_of(gt, g)?);
                found = Some((depth_err, angle));
            }
        }
        matches.push(found);
    }
    let pct = |hit: &dyn Fn(&(Option<f64>, f64)) -> bool| {
        100.0 * matches.iter().filter(|m| m.as_ref().is_some_and(hit)).count() as f64 / matches.len() as f64
    };
    Ok(PlaneRecall {
        gt_planes: gt_sizes.len(),
        depth: depth_thresholds
            .iter()
            .map(|&t| AtThreshold {
                threshold: t,
                value: pct(&|m| m.0.is_some_and(|e| e <= t)),
            })
            .collect(),
        normal: normal_thresholds
            .iter()
            .map(|&t| AtThreshold {
                threshold: t,
                value: pct(&|m| m.1 <= t),
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RraRta {
    /// Ordered view pairs evaluated.
    pub pairs: usize,
    /// Pairs whose relative translations are long enough for a direction.
    pub translation_pairs: usize,
    /// Fraction of pairs with relative rotation error below each threshold.
    pub rra: Vec<AtThreshold>,
    /// Fraction with translation direction error below each threshold;
    /// empty when no pair has a usable translation.
    pub rta: Vec<AtThreshold>,
}

impl MetricTable for RraRta {
    fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("pairs".to_string(), self.pairs as f64)];
        rows.extend(self.rra.iter().map(|t| (format!("RRA@{}", t.threshold), t.value)));
        rows.extend(self.rta.iter().map(|t| (format!("RTA@{}", t.threshold), t.value)));
        rows
    }
}

/// Relative rotation and translation-direction accuracy over all ordered
/// pairs of camera-to-reference poses.
pub fn rra_rta(pred: &[RigidTransform], gt: &[RigidTransform], thresholds: &[f64]) -> Result<RraRta> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predicted poses for {} ground-truth poses", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("relative pose accuracy needs at least two poses"));
    }
    let mut rot = Vec::new();
    let mut trans = Vec::new();
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if i == j {
                continue;
            }
            let rp = pred[i].inverse().compose(&pred[j]);
            let rg = gt[i].inverse().compose(&gt[j]);
            rot.push(rotation_error_deg(&rp.rotation, &rg.rotation)?);
            if rp.translation.norm() > MIN_TRANSLATION && rg.translation.norm() > MIN_TRANSLATION {
                trans.push(angle_between_deg(&rp.translation, &rg.translation));
            }
        }
    }
    let below = |errs: &[f64]| -> Vec<AtThreshold> {
        if errs.is_empty() {
            return Vec::new();
        }
        thresholds
            .iter()
            .map(|&t| AtThreshold {
                threshold: t,
                value: errs.iter().filter(|e| **e < t).count() as f64 / errs.len() as f64,
            })
            .collect()
    };
    Ok(RraRta {
        pairs: rot.len(),
        translation_pairs: trans.len(),
        rra: below(&rot),
        rta: below(&trans),
    })
}
