//! Patch, render and pose objectives.
//!
//! The map losses share one three-term structure, averaged over valid
//! pixels:
//!
//! ```text
//! w_cos * mean |1 - n . n_gt| + w_l1 * mean |n - n_gt|_1 + w_d * mean |d - d_gt|
//! ```
//!
//! Gradients are subgradients of the L1 terms with `sign(0) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::maps::{gt_valid, gt_valid_mask, DepthMap, Grid2, Mask, NormalMap};
use crate::splat::RenderedMaps;

/// Weights of the cosine-normal, L1-normal and depth terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub normal_cos: f64,
    pub normal_l1: f64,
    pub depth: f64,
}

impl TermWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.normal_cos, self.normal_l1, self.depth].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!("loss weights must be finite and non-negative, got {self:?}")))
        }
    }

    pub fn scaled(&self, s: f64) -> TermWeights {
        TermWeights {
            normal_cos: self.normal_cos * s,
            normal_l1: self.normal_l1 * s,
            depth: self.depth * s,
        }
    }
}

/// Weights of the translation L1, quaternion L1 and direction terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseWeights {
    pub translation: f64,
    pub rotation: f64,
    pub direction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub patch: TermWeights,
    pub render: TermWeights,
    pub pose: PoseWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            patch: TermWeights {
                normal_cos: 5.0,
                normal_l1: 5.0,
                depth: 20.0,
            },
            render: TermWeights {
                normal_cos: 1.0,
                normal_l1: 1.0,
                depth: 2.0,
            },
            pose: PoseWeights {
                translation: 10.0,
                rotation: 10.0,
                direction: 1.0,
            },
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.render.validate()?;
        let p = &self.pose;
        if [p.translation, p.rotation, p.direction].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!("pose weights must be finite and non-negative, got {p:?}")))
        }
    }
}

/// Value of a map loss and its gradient with respect to the predicted maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MapLoss {
    pub value: f64,
    pub grad_depth: DepthMap,
    pub grad_normal: NormalMap,
    /// Number of pixels that entered the average.
    pub valid: usize,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Compensated (Neumaier) summation.
#[derive(Clone, Copy, Default)]
pub(crate) struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.total + x;
        if self.total.abs() >= x.abs() {
            self.carry += (self.total - t) + x;
        } else {
            self.carry += (x - t) + self.total;
        }
        self.total = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.total + self.carry
    }
}

/// Three-term loss over the pixels where `mask` is set.
pub fn masked_map_loss(
    depth: &DepthMap,
    normal: &NormalMap,
    gt_depth: &DepthMap,
    gt_normal: &NormalMap,
    mask: &Mask,
    w: &TermWeights,
) -> Result<MapLoss> {
    w.validate()?;
    let shapes_match = depth.same_shape(normal) && depth.same_shape(gt_depth) && depth.same_shape(gt_normal) && depth.same_shape(mask);
    if !shapes_match {
        return Err(Error::invalid(format!(
            "map shapes differ: prediction {}x{}, ground truth {}x{}, mask {}x{}",
            depth.width(),
            depth.height(),
            gt_depth.width(),
            gt_depth.height(),
            mask.width(),
            mask.height()
        )));
    }
    let valid = mask.as_slice().iter().filter(|m| **m).count();
    if valid == 0 {
        return Err(Error::empty("no valid pixels to average the loss over"));
    }
    let inv = 1.0 / valid as f64;
    let (mut cos_sum, mut l1_sum, mut d_sum) = (Sum::default(), Sum::default(), Sum::default());
    let mut grad_depth = Grid2::filled(depth.width(), depth.height(), 0.0);
    let mut grad_normal = Grid2::filled(depth.width(), depth.height(), Vec3::zeros());
    for i in 0..depth.len() {
        if !mask.as_slice()[i] {
            continue;
        }
        let (n, g) = (normal.as_slice()[i], gt_normal.as_slice()[i]);
        let cos_res = 1.0 - n.dot(&g);
        let diff = n - g;
        let d_res = depth.as_slice()[i] - gt_depth.as_slice()[i];
        cos_sum.add(cos_res.abs());
        l1_sum.add(diff.abs().sum());
        d_sum.add(d_res.abs());
        grad_depth.as_mut_slice()[i] = w.depth * sign(d_res) * inv;
        grad_normal.as_mut_slice()[i] = (-g * (w.normal_cos * sign(cos_res)) + diff.map(sign) * w.normal_l1) * inv;
    }
    let value = (w.normal_cos * cos_sum.value() + w.normal_l1 * l1_sum.value() + w.depth * d_sum.value()) * inv;
    Ok(MapLoss {
        value,
        grad_depth,
        grad_normal,
        valid,
    })
}

/// Loss between patched maps and ground truth resized to the same lattice.
pub fn patch_loss(
    patch_depth: &DepthMap,
    patch_normal: &NormalMap,
    gt_depth: &DepthMap,
    gt_normal: &NormalMap,
    w: &TermWeights,
) -> Result<MapLoss> {
    let mask = gt_valid_mask(gt_depth, gt_normal);
    masked_map_loss(patch_depth, patch_normal, gt_depth, gt_normal, &mask, w)
}

/// Loss between soft-rendered maps and full-resolution ground truth. Pixels
/// count when the ground truth is valid and the render coverage reaches
/// `coverage_cutoff`.
pub fn render_loss(maps: &RenderedMaps, gt_depth: &DepthMap, gt_normal: &NormalMap, w: &TermWeights, coverage_cutoff: f64) -> Result<MapLoss> {
    if !maps.coverage.same_shape(gt_depth) || !gt_depth.same_shape(gt_normal) {
        return Err(Error::invalid(format!(
            "render is {}x{} but ground truth is {}x{}",
            maps.width(),
            maps.height(),
            gt_depth.width(),
            gt_depth.height()
        )));
    }
    let mask = Grid2::from_fn(gt_depth.width(), gt_depth.height(), |c, r| {
        gt_valid(*gt_depth.get(c, r), gt_normal.get(c, r)) && *maps.coverage.get(c, r) >= coverage_cutoff
    });
    masked_map_loss(&maps.depth, &maps.normal, gt_depth, gt_normal, &mask, w)
}

/// Relative-pose loss: translation L1, L1 between the ground-truth
/// quaternion and the normalized prediction (sign chosen closest), and one
/// minus the cosine between translation directions.
pub fn pose_loss(pred: &RigidTransform, gt: &RigidTransform, w: &PoseWeights) -> Result<f64> {
    let q = pred.rotation.normalized()?.to_array();
    let qg = gt.rotation.normalized()?.to_array();
    let plus: f64 = qg.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
    let minus: f64 = qg.iter().zip(&q).map(|(a, b)| (a + b).abs()).sum();
    let (t, tg) = (pred.translation, gt.translation);
    let trans = (tg - t).abs().sum();
    let direction = if t.norm() < 1e-8 || tg.norm() < 1e-8 {
        0.0
    } else {
        1.0 - t.dot(&tg) / (t.norm() * tg.norm())
    };
    Ok(w.translation * trans + w.rotation * plus.min(minus) + w.direction * direction)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Shrinks ground-truth maps to one value per `stride x stride` patch: the
/// median of the valid depths and the renormalized componentwise median of
/// the valid normals. Patches without valid pixels get depth 0 and a zero
/// normal.
pub fn resize_targets(depth: &DepthMap, normal: &NormalMap, stride: usize) -> Result<(DepthMap, NormalMap)> {
    if stride == 0 || depth.width() % stride != 0 || depth.height() % stride != 0 || !depth.same_shape(normal) {
        return Err(Error::invalid(format!(
            "cannot resize {}x{} maps by stride {stride}",
            depth.width(),
            depth.height()
        )));
    }
    let (cols, rows) = (depth.width() / stride, depth.height() / stride);
    let mut out_d = Grid2::filled(cols, rows, 0.0);
    let mut out_n = Grid2::filled(cols, rows, Vec3::zeros());
    let mut buf: [Vec<f64>; 4] = Default::default();
    for row in 0..rows {
        for col in 0..cols {
            buf.iter_mut().for_each(Vec::clear);
            for y in row * stride..(row + 1) * stride {
                for x in col * stride..(col + 1) * stride {
                    let (d, n) = (*depth.get(x, y), normal.get(x, y));
                    if gt_valid(d, n) {
                        buf[0].push(d);
                        for c in 0..3 {
                            buf[c + 1].push(n[c]);
                        }
                    }
                }
            }
            if buf[0].is_empty() {
                continue;
            }
            let [ref mut bd, ref mut bx, ref mut by, ref mut bz] = buf;
            let n = Vec3::new(median(bx), median(by), median(bz));
            if n.norm() > 1e-12 {
                *out_d.get_mut(col, row) = median(bd);
                *out_n.get_mut(col, row) = n.normalize();
            }
        }
    }
    Ok((out_d, out_n))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::Quaternion;

    fn constant(w: usize, h: usize, d: f64, n: Vec3) -> (DepthMap, NormalMap) {
        (Grid2::filled(w, h, d), Grid2::filled(w, h, n))
    }

    fn defaults() -> LossWeights {
        LossWeights::default()
    }

    #[test]
    fn patch_loss_is_zero_at_ground_truth() {
        let (d, n) = constant(32, 24, 2.0, Vec3::z());
        let l = patch_loss(&d, &n, &d, &n, &defaults().patch).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.valid, 768);
        assert!(l.grad_depth.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn patch_loss_depth_offset() {
        let (gd, gn) = constant(32, 24, 2.0, Vec3::z());
        let (d, _) = constant(32, 24, 2.1, Vec3::z());
        let l = patch_loss(&d, &gn, &gd, &gn, &defaults().patch).unwrap();
        assert_abs_diff_eq!(l.value, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn patch_loss_antiparallel_normals() {
        let (gd, gn) = constant(32, 24, 2.0, Vec3::z());
        let (_, n) = constant(32, 24, 2.0, -Vec3::z());
        let l = patch_loss(&gd, &n, &gd, &gn, &defaults().patch).unwrap();
        assert_abs_diff_eq!(l.value, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn render_loss_depth_offset() {
        let (gd, gn) = constant(64, 48, 3.0, -Vec3::z());
        let maps = RenderedMaps {
            depth: Grid2::filled(64, 48, 3.05),
            normal: gn.clone(),
            coverage: Grid2::filled(64, 48, 1.0),
            instance: None,
        };
        let l = render_loss(&maps, &gd, &gn, &defaults().render, 0.5).unwrap();
        assert_abs_diff_eq!(l.value, 0.1, epsilon = 1e-9);
        let doubled = render_loss(&maps, &gd, &gn, &defaults().render.scaled(2.0), 0.5).unwrap();
        assert_abs_diff_eq!(doubled.value, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn render_loss_ignores_uncovered_and_invalid_pixels() {
        let (mut gd, gn) = constant(16, 16, 3.0, -Vec3::z());
        *gd.get_mut(0, 0) = 0.0;
        let mut coverage = Grid2::filled(16, 16, 1.0);
        *coverage.get_mut(1, 0) = 0.2;
        let mut depth = Grid2::filled(16, 16, 3.0);
        *depth.get_mut(0, 0) = 50.0;
        *depth.get_mut(1, 0) = 0.0;
        let maps = RenderedMaps {
            depth,
            normal: gn.clone(),
            coverage,
            instance: None,
        };
        let l = render_loss(&maps, &gd, &gn, &defaults().render, 0.5).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.valid, 254);
    }

    #[test]
    fn losses_without_valid_pixels_are_empty_errors() {
        let (gd, gn) = constant(16, 16, 0.0, Vec3::z());
        let (d, n) = constant(16, 16, 1.0, Vec3::z());
        assert!(matches!(patch_loss(&d, &n, &gd, &gn, &defaults().patch), Err(Error::Empty(_))));
        let maps = RenderedMaps {
            depth: d.clone(),
            normal: n.clone(),
            coverage: Grid2::filled(16, 16, 0.0),
            instance: None,
        };
        let (gd, _) = constant(16, 16, 1.0, Vec3::z());
        assert!(matches!(render_loss(&maps, &gd, &gn, &defaults().render, 0.5), Err(Error::Empty(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (gd, gn) = constant(16, 16, 1.0, Vec3::z());
        let (d, n) = constant(8, 16, 1.0, Vec3::z());
        assert!(matches!(patch_loss(&d, &n, &gd, &gn, &defaults().patch), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pose_loss_examples() {
        let w = defaults().pose;
        let gt = RigidTransform::from_translation(Vec3::x());
        assert_eq!(pose_loss(&gt, &gt, &w).unwrap(), 0.0);
        let pred = RigidTransform::from_translation(Vec3::y());
        assert_abs_diff_eq!(pose_loss(&pred, &gt, &w).unwrap(), 21.0, epsilon = 1e-9);
    }

    #[test]
    fn pose_loss_is_sign_and_scale_aware() {
        let w = defaults().pose;
        let q = Quaternion::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.7).unwrap();
        let gt = RigidTransform::new(q, Vec3::new(1.0, 0.5, -0.2)).unwrap();
        let flipped = RigidTransform {
            rotation: Quaternion::new(-2.0 * q.w, -2.0 * q.x, -2.0 * q.y, -2.0 * q.z),
            translation: gt.translation,
        };
        assert_abs_diff_eq!(pose_loss(&flipped, &gt, &w).unwrap(), 0.0, epsilon = 1e-12);

        let direction_only = PoseWeights {
            translation: 0.0,
            rotation: 0.0,
            direction: 1.0,
        };
        let pred = RigidTransform::from_translation(Vec3::new(0.3, 1.0, 0.1));
        let a = pose_loss(&pred, &gt, &direction_only).unwrap();
        let scaled = |t: &RigidTransform, s: f64| RigidTransform {
            translation: t.translation * s,
            ..*t
        };
        let b = pose_loss(&scaled(&pred, 3.0), &scaled(&gt, 3.0), &direction_only).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        let zero = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1e-9));
        assert_eq!(pose_loss(&zero, &gt, &direction_only).unwrap(), 0.0);
    }

    fn random_maps(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (DepthMap, NormalMap) {
        let d = Grid2::from_fn(w, h, |_, _| rng.gen_range(0.5..4.0));
        let n = Grid2::from_fn(w, h, |_, _| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize());
        (d, n)
    }

    #[test]
    fn render_loss_upstream_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (gd, gn) = random_maps(&mut rng, 16, 16);
        let (d, n) = random_maps(&mut rng, 16, 16);
        let coverage = Grid2::from_fn(16, 16, |c, r| if (c + r) % 5 == 0 { 0.3 } else { 0.9 });
        let maps = RenderedMaps {
            depth: d,
            normal: n,
            coverage,
            instance: None,
        };
        let w = defaults().render;
        let base = render_loss(&maps, &gd, &gn, &w, 0.5).unwrap();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for px in 0..maps.depth.len() {
            for ch in 0..4 {
                let bump = |s: f64| {
                    let mut m = maps.clone();
                    if ch == 0 {
                        m.depth.as_mut_slice()[px] += s;
                    } else {
                        m.normal.as_mut_slice()[px][ch - 1] += s;
                    }
                    render_loss(&m, &gd, &gn, &w, 0.5).unwrap().value
                };
                let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let analytic = if ch == 0 { base.grad_depth.as_slice()[px] } else { base.grad_normal.as_slice()[px][ch - 1] };
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
                if analytic != 0.0 || numeric != 0.0 {
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn resize_takes_patch_medians() {
        let depth = Grid2::from_fn(32, 16, |c, r| 1.0 + (c / 16) as f64 + 0.001 * ((c + r) % 3) as f64);
        let normal = Grid2::from_fn(32, 16, |c, _| if c < 16 { Vec3::z() } else { Vec3::x() });
        let (d, n) = resize_targets(&depth, &normal, 16).unwrap();
        assert_eq!((d.width(), d.height()), (2, 1));
        assert_abs_diff_eq!(*d.get(0, 0), 1.001, epsilon = 1e-12);
        assert_abs_diff_eq!(*d.get(1, 0), 2.001, epsilon = 1e-12);
        assert_eq!(*n.get(1, 0), Vec3::x());

        let mut holes = depth.clone();
        for y in 0..16 {
            for x in 0..16 {
                *holes.get_mut(x, y) = 0.0;
            }
        }
        let (d, n) = resize_targets(&holes, &normal, 16).unwrap();
        assert_eq!(*d.get(0, 0), 0.0);
        assert_eq!(*n.get(0, 0), Vec3::zeros());
        assert!(resize_targets(&depth, &normal, 5).is_err());
    }

    proptest! {
        #[test]
        fn map_loss_is_non_negative_and_order_free(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (gd, gn) = random_maps(&mut rng, 8, 8);
            let (d, n) = random_maps(&mut rng, 8, 8);
            let mask = Grid2::from_fn(8, 8, |_, _| rng.gen_bool(0.8));
            prop_assume!(mask.as_slice().iter().any(|m| *m));
            let w = defaults().patch;
            let a = masked_map_loss(&d, &n, &gd, &gn, &mask, &w).unwrap();
            prop_assert!(a.value >= 0.0);
            let rev = |g: &Grid2<f64>| Grid2::from_vec(8, 8, g.as_slice().iter().rev().copied().collect()).unwrap();
            let revn = |g: &NormalMap| Grid2::from_vec(8, 8, g.as_slice().iter().rev().copied().collect()).unwrap();
            let revm = Grid2::from_vec(8, 8, mask.as_slice().iter().rev().copied().collect()).unwrap();
            let b = masked_map_loss(&rev(&d), &revn(&n), &rev(&gd), &revn(&gn), &revm, &w).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-10 * a.value.max(1e-300));
        }
    }
}
