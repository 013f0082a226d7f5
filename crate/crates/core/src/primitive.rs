//! Planar primitives, their per-view grid lattices, patched maps and the
//! gradient-threshold selection that fuses the coarse and fine lattices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, CameraIntrinsics, Quaternion, RigidTransform, Vec3};
use crate::maps::{DepthMap, Grid2, NormalMap};

/// Resolution level of a primitive lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// One primitive per 16x16 pixel patch.
    Low,
    /// One primitive per 8x8 pixel patch.
    High,
}

impl Level {
    pub fn stride(self) -> usize {
        match self {
            Level::Low => 16,
            Level::High => 8,
        }
    }
}

/// An oriented, bounded rectangle anchored on a source-view pixel.
///
/// The centre lies on the source camera ray through `(anchor_u, anchor_v)`
/// at z-depth `depth`. The orientation is expressed in the reference frame
/// `frame`; its rotated x/y axes span the rectangle and the rotated z axis is
/// the plane normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarPrimitive {
    pub anchor_u: f64,
    pub anchor_v: f64,
    pub depth: f64,
    pub orientation: Quaternion,
    pub radii: [f64; 2],
    pub source_view: usize,
    #[serde(default)]
    pub frame: usize,
}

impl PlanarPrimitive {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.anchor_u, self.anchor_v, self.depth, self.radii[0], self.radii[1]]
            .iter()
            .all(|v| v.is_finite())
            && self.orientation.is_finite();
        if !finite {
            return Err(Error::invalid("primitive has non-finite parameters"));
        }
        if !(self.depth > 0.0) {
            return Err(Error::invalid(format!("primitive depth must be positive, got {}", self.depth)));
        }
        if !(self.radii[0] > 0.0 && self.radii[1] > 0.0) {
            return Err(Error::invalid(format!("primitive radii must be positive, got {:?}", self.radii)));
        }
        self.orientation.normalized()?;
        Ok(())
    }

    /// Resolves the centre ray against the source camera so the renderer can
    /// work in the reference frame.
    pub fn place(&self, source: &CameraIntrinsics, source_pose: &RigidTransform) -> PlacedPrimitive {
        PlacedPrimitive {
            origin: source_pose.translation,
            center_ray: source_pose.rotation_matrix() * source.ray(self.anchor_u, self.anchor_v),
            depth: self.depth,
            orientation: self.orientation,
            radii: self.radii,
        }
    }
}

/// A primitive in render-ready form: `center = origin + depth * center_ray`
/// in the reference frame. Gradients with respect to a placed primitive's
/// `depth`, `orientation` and `radii` are gradients with respect to the
/// underlying [`PlanarPrimitive`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedPrimitive {
    pub origin: Vec3,
    pub center_ray: Vec3,
    pub depth: f64,
    pub orientation: Quaternion,
    pub radii: [f64; 2],
}

impl PlacedPrimitive {
    pub fn center(&self) -> Vec3 {
        self.origin + self.center_ray * self.depth
    }

    pub fn is_finite(&self) -> bool {
        self.origin.iter().chain(self.center_ray.iter()).all(|v| v.is_finite())
            && self.depth.is_finite()
            && self.orientation.is_finite()
            && self.radii.iter().all(|r| r.is_finite())
    }
}

pub fn primitive_center(p: &PlanarPrimitive, k: &CameraIntrinsics, pose_to_ref: &RigidTransform) -> Result<Vec3> {
    let local = backproject(k, p.anchor_u, p.anchor_v, p.depth)?;
    Ok(pose_to_ref.apply(&local))
}

/// In-plane axes `(V^x, V^y)` and normal `n` of a primitive.
pub fn primitive_axes(p: &PlanarPrimitive) -> Result<(Vec3, Vec3, Vec3)> {
    let r = crate::geometry::quat_to_rotation(&p.orientation)?;
    Ok((r.column(0).into_owned(), r.column(1).into_owned(), r.column(2).into_owned()))
}

/// A lattice of primitives, one per `stride x stride` patch of a source view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveGrid {
    pub level: Level,
    pub rows: usize,
    pub cols: usize,
    pub source_view: usize,
    /// Row-major, `rows * cols` entries.
    pub primitives: Vec<PlanarPrimitive>,
}

impl PrimitiveGrid {
    /// Builds a grid for `k`, calling `cell(row, col, anchor_u, anchor_v)` for
    /// the depth, orientation and radii of every cell.
    pub fn from_fn(
        level: Level,
        k: &CameraIntrinsics,
        source_view: usize,
        mut cell: impl FnMut(usize, usize, f64, f64) -> (f64, Quaternion, [f64; 2]),
    ) -> Result<Self> {
        k.validate()?;
        let stride = level.stride();
        let (rows, cols) = (k.height / stride, k.width / stride);
        let mut primitives = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            for col in 0..cols {
                let (u, v) = cell_anchor(level, row, col);
                let (depth, orientation, radii) = cell(row, col, u, v);
                let p = PlanarPrimitive {
                    anchor_u: u,
                    anchor_v: v,
                    depth,
                    orientation,
                    radii,
                    source_view,
                    frame: 0,
                };
                p.validate()?;
                primitives.push(p);
            }
        }
        Ok(PrimitiveGrid {
            level,
            rows,
            cols,
            source_view,
            primitives,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.len() != self.rows * self.cols {
            return Err(Error::invalid(format!(
                "grid has {} primitives for {}x{} cells",
                self.primitives.len(),
                self.rows,
                self.cols
            )));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        Ok(())
    }

    pub fn cell(&self, row: usize, col: usize) -> &PlanarPrimitive {
        &self.primitives[row * self.cols + col]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut PlanarPrimitive {
        &mut self.primitives[row * self.cols + col]
    }
}

/// Pixel centre of a lattice cell: `((col + 0.5) * stride, (row + 0.5) * stride)`.
pub fn cell_anchor(level: Level, row: usize, col: usize) -> (f64, f64) {
    let s = level.stride() as f64;
    ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
}

/// Per-cell depth and normal of a grid. Normals are rotated into the frame
/// of the camera with camera-to-reference pose `cam_pose`.
pub fn patched_maps(grid: &PrimitiveGrid, cam_pose: &RigidTransform) -> Result<(DepthMap, NormalMap)> {
    grid.validate()?;
    let to_cam = cam_pose.rotation_matrix().transpose();
    let depth = Grid2::from_vec(grid.cols, grid.rows, grid.primitives.iter().map(|p| p.depth).collect())?;
    let normals = grid
        .primitives
        .iter()
        .map(|p| Ok(to_cam * crate::geometry::normal_from_quat(&p.orientation)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((depth, Grid2::from_vec(grid.cols, grid.rows, normals)?))
}

/// Central-difference gradient magnitude of a normal field, replicating the
/// border: `sqrt(sum_c Gx_c^2 + Gy_c^2)`.
pub fn normal_gradient_magnitude(normals: &NormalMap) -> Grid2<f64> {
    let (w, h) = (normals.width(), normals.height());
    Grid2::from_fn(w, h, |col, row| {
        let left = normals.get(col.saturating_sub(1), row);
        let right = normals.get((col + 1).min(w - 1), row);
        let up = normals.get(col, row.saturating_sub(1));
        let down = normals.get(col, (row + 1).min(h - 1));
        let gx = (right - left) * 0.5;
        let gy = (down - up) * 0.5;
        (gx.norm_squared() + gy.norm_squared()).sqrt()
    })
}

/// Which low-resolution cells were replaced by their four high-resolution children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub rows: usize,
    pub cols: usize,
    pub refine: Vec<bool>,
    pub selected_count: usize,
}

impl SelectionMask {
    pub fn refined_count(&self) -> usize {
        self.refine.iter().filter(|r| **r).count()
    }

    pub fn is_refined(&self, row: usize, col: usize) -> bool {
        self.refine[row * self.cols + col]
    }
}

/// Stable identity of a lattice cell across re-orderings of primitive lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellRef {
    pub view: usize,
    pub level: Level,
    pub row: usize,
    pub col: usize,
}

impl CellRef {
    /// The cell's region on the high-resolution lattice, as `(row0, col0, size)`.
    pub fn high_block(&self) -> (usize, usize, usize) {
        match self.level {
            Level::Low => (2 * self.row, 2 * self.col, 2),
            Level::High => (self.row, self.col, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedPrimitive {
    pub cell: CellRef,
    pub primitive: PlanarPrimitive,
}

/// Fuses a low and a high grid: cells whose normal-gradient magnitude is at
/// least `g_th` are replaced by their four high-resolution children.
///
/// The selected list walks low cells in row-major order; a refined cell
/// contributes children `(2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1)`.
pub fn hppa_select(
    low: &PrimitiveGrid,
    high: &PrimitiveGrid,
    g_th: f64,
    cam_pose: &RigidTransform,
) -> Result<(SelectionMask, Vec<SelectedPrimitive>)> {
    if low.level != Level::Low || high.level != Level::High {
        return Err(Error::invalid("hppa_select expects a low and a high grid"));
    }
    if high.rows != 2 * low.rows || high.cols != 2 * low.cols {
        return Err(Error::invalid(format!(
            "high grid {}x{} is not twice the low grid {}x{}",
            high.rows, high.cols, low.rows, low.cols
        )));
    }
    if low.source_view != high.source_view {
        return Err(Error::invalid("low and high grids come from different views"));
    }
    if g_th.is_nan() || g_th < 0.0 {
        return Err(Error::invalid(format!("gradient threshold must be non-negative, got {g_th}")));
    }
    let (_, normals) = patched_maps(low, cam_pose)?;
    let magnitude = normal_gradient_magnitude(&normals);
    let refine: Vec<bool> = magnitude.as_slice().iter().map(|m| *m >= g_th).collect();

    let view = low.source_view;
    let mut selected = Vec::with_capacity(low.primitives.len());
    for row in 0..low.rows {
        for col in 0..low.cols {
            if refine[row * low.cols + col] {
                for (r, c) in [(2 * row, 2 * col), (2 * row + 1, 2 * col), (2 * row, 2 * col + 1), (2 * row + 1, 2 * col + 1)] {
                    selected.push(SelectedPrimitive {
                        cell: CellRef {
                            view,
                            level: Level::High,
                            row: r,
                            col: c,
                        },
                        primitive: *high.cell(r, c),
                    });
                }
            } else {
                selected.push(SelectedPrimitive {
                    cell: CellRef {
                        view,
                        level: Level::Low,
                        row,
                        col,
                    },
                    primitive: *low.cell(row, col),
                });
            }
        }
    }
    let mask = SelectionMask {
        rows: low.rows,
        cols: low.cols,
        selected_count: selected.len(),
        refine,
    };
    Ok((mask, selected))
}

/// Labels every high-resolution cell of one view with the index (into
/// `selected`) of the primitive whose patch covers it. `None` marks cells
/// covered by no selected primitive of that view.
pub fn fused_labels(selected: &[SelectedPrimitive], view: usize, high_rows: usize, high_cols: usize) -> Grid2<Option<usize>> {
    let mut labels = Grid2::filled(high_cols, high_rows, None);
    for (idx, s) in selected.iter().enumerate().filter(|(_, s)| s.cell.view == view) {
        let (r0, c0, size) = s.cell.high_block();
        for r in r0..(r0 + size).min(high_rows) {
            for c in c0..(c0 + size).min(high_cols) {
                *labels.get_mut(c, r) = Some(idx);
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normal_from_quat;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k512() -> CameraIntrinsics {
        CameraIntrinsics::centered(400.0, 512, 384).unwrap()
    }

    fn uniform_grid(level: Level, k: &CameraIntrinsics, depth: f64, q: Quaternion) -> PrimitiveGrid {
        PrimitiveGrid::from_fn(level, k, 0, |_, _, _, _| (depth, q, [0.1, 0.1])).unwrap()
    }

    fn field_grid(level: Level, k: &CameraIntrinsics, f: impl Fn(f64, f64) -> Vec3) -> PrimitiveGrid {
        PrimitiveGrid::from_fn(level, k, 0, |_, _, u, v| {
            (2.0, Quaternion::rotation_between(&Vec3::z(), &f(u, v)).unwrap(), [0.1, 0.1])
        })
        .unwrap()
    }

    #[test]
    fn primitive_center_examples() {
        let k = k512();
        let p = PlanarPrimitive {
            anchor_u: k.cx,
            anchor_v: k.cy,
            depth: 2.0,
            orientation: Quaternion::IDENTITY,
            radii: [0.1, 0.1],
            source_view: 0,
            frame: 0,
        };
        assert_eq!(primitive_center(&p, &k, &RigidTransform::IDENTITY).unwrap(), Vec3::new(0.0, 0.0, 2.0));
        let shifted = RigidTransform::from_translation(Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(primitive_center(&p, &k, &shifted).unwrap(), Vec3::new(0.0, 0.0, 1.0));
        let q = PlanarPrimitive {
            anchor_u: 17.0,
            anchor_v: 300.25,
            depth: 3.3,
            ..p
        };
        assert_abs_diff_eq!(primitive_center(&q, &k, &RigidTransform::IDENTITY).unwrap().z, 3.3, epsilon = 1e-9);
        let placed = q.place(&k, &shifted);
        assert_abs_diff_eq!(placed.center(), primitive_center(&q, &k, &shifted).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn axes_examples() {
        let mut p = PlanarPrimitive {
            anchor_u: 0.0,
            anchor_v: 0.0,
            depth: 1.0,
            orientation: Quaternion::IDENTITY,
            radii: [1.0, 1.0],
            source_view: 0,
            frame: 0,
        };
        assert_eq!(primitive_axes(&p).unwrap(), (Vec3::x(), Vec3::y(), Vec3::z()));
        p.orientation = Quaternion::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2).unwrap();
        assert_abs_diff_eq!(primitive_axes(&p).unwrap().0, Vec3::y(), epsilon = 1e-12);
        p.orientation = Quaternion::new(0.0, 0.0, 0.0, 0.0);
        assert!(primitive_axes(&p).is_err());
    }

    proptest! {
        #[test]
        fn axes_are_right_handed(w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let p = PlanarPrimitive { anchor_u: 0.0, anchor_v: 0.0, depth: 1.0, orientation: Quaternion::new(w, x, y, z), radii: [1.0, 1.0], source_view: 0, frame: 0 };
            let (vx, vy, n) = primitive_axes(&p).unwrap();
            prop_assert!(vx.dot(&n).abs() < 1e-9 && vy.dot(&n).abs() < 1e-9 && vx.dot(&vy).abs() < 1e-9);
            prop_assert!((vx.cross(&vy) - n).norm() < 1e-9);
        }
    }

    #[test]
    fn grid_shapes_at_512x384() {
        let k = k512();
        let low = uniform_grid(Level::Low, &k, 2.0, Quaternion::IDENTITY);
        let high = uniform_grid(Level::High, &k, 2.0, Quaternion::IDENTITY);
        assert_eq!(low.primitives.len(), 768);
        assert_eq!(high.primitives.len(), 3072);
        assert_eq!((low.cell(3, 5).anchor_u, low.cell(3, 5).anchor_v), (88.0, 56.0));
        let (d, n) = patched_maps(&low, &RigidTransform::IDENTITY).unwrap();
        assert_eq!((d.height(), d.width()), (24, 32));
        assert!(d.as_slice().iter().all(|v| *v == 2.0));
        assert!(n.as_slice().iter().all(|v| *v == Vec3::z()));
    }

    #[test]
    fn patched_normals_follow_render_frame() {
        let k = k512();
        let q = Quaternion::new(0.9, 0.2, -0.3, 0.1).normalized().unwrap();
        let low = uniform_grid(Level::Low, &k, 2.0, q);
        let rot = Quaternion::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.7).unwrap();
        let pose = RigidTransform::new(rot, Vec3::new(0.3, 0.0, 1.0)).unwrap();
        let (_, n0) = patched_maps(&low, &RigidTransform::IDENTITY).unwrap();
        let (_, n1) = patched_maps(&low, &pose).unwrap();
        let r = pose.rotation_matrix();
        for (a, b) in n0.as_slice().iter().zip(n1.as_slice()) {
            assert_abs_diff_eq!(r * b, *a, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_of_constant_field_is_zero() {
        let field = Grid2::filled(6, 5, Vec3::new(0.0, 0.6, 0.8));
        assert!(normal_gradient_magnitude(&field).as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_of_seam_is_local() {
        // Columns 0-1 face +z, columns 2-3 face +x.
        let field = Grid2::from_fn(4, 4, |c, _| if c < 2 { Vec3::z() } else { Vec3::x() });
        let g = normal_gradient_magnitude(&field);
        // Hand evaluation: Gx = (x - z)/2 at cols 1 and 2, zero elsewhere;
        // |x - z|^2 / 4 = 0.5.
        for r in 0..4 {
            assert_eq!(*g.get(0, r), 0.0);
            assert_abs_diff_eq!(*g.get(1, r), 0.5f64.sqrt(), epsilon = 1e-15);
            assert_abs_diff_eq!(*g.get(2, r), 0.5f64.sqrt(), epsilon = 1e-15);
            assert_eq!(*g.get(3, r), 0.0);
        }
        // Shift the seam one column: the response shifts with it.
        let shifted = Grid2::from_fn(5, 4, |c, _| if c < 3 { Vec3::z() } else { Vec3::x() });
        let gs = normal_gradient_magnitude(&shifted);
        assert_eq!(*gs.get(1, 0), 0.0);
        assert_abs_diff_eq!(*gs.get(2, 0), 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(*gs.get(3, 0), 0.5f64.sqrt(), epsilon = 1e-15);
    }

    fn wavy(u: f64, v: f64) -> Vec3 {
        Vec3::new((u * 0.02).sin() * 0.5, (v * 0.03).cos() * 0.3, -1.0).normalize()
    }

    #[test]
    fn selection_extremes() {
        let k = k512();
        let low = field_grid(Level::Low, &k, wavy);
        let high = field_grid(Level::High, &k, wavy);
        let (mask, sel) = hppa_select(&low, &high, 0.0, &RigidTransform::IDENTITY).unwrap();
        assert_eq!(mask.selected_count, 3072);
        assert_eq!(sel.len(), 3072);
        let (mask, sel) = hppa_select(&low, &high, f64::INFINITY, &RigidTransform::IDENTITY).unwrap();
        assert_eq!(mask.selected_count, 768);
        assert!(mask.refine.iter().all(|r| !r));
        assert!(sel.iter().all(|s| s.cell.level == Level::Low));
        // A smooth field never crosses a large threshold.
        let (mask, _) = hppa_select(&low, &high, 10.0, &RigidTransform::IDENTITY).unwrap();
        assert_eq!(mask.selected_count, 768);
    }

    #[test]
    fn selection_rejects_mismatched_grids() {
        let k = k512();
        let low = uniform_grid(Level::Low, &k, 2.0, Quaternion::IDENTITY);
        let k_small = CameraIntrinsics::centered(400.0, 256, 192).unwrap();
        let high = uniform_grid(Level::High, &k_small, 2.0, Quaternion::IDENTITY);
        assert!(hppa_select(&low, &high, 0.5, &RigidTransform::IDENTITY).is_err());
        let mut other_view = uniform_grid(Level::High, &k, 2.0, Quaternion::IDENTITY);
        other_view.source_view = 1;
        assert!(hppa_select(&low, &other_view, 0.5, &RigidTransform::IDENTITY).is_err());
    }

    #[test]
    fn selection_count_identity_and_monotonicity() {
        let k = k512();
        let seam = |u: f64, v: f64| if u + 0.5 * v < 300.0 { wavy(u, v) } else { Vec3::new(1.0, 0.0, -0.2).normalize() };
        let low = field_grid(Level::Low, &k, seam);
        let high = field_grid(Level::High, &k, seam);
        let mut last = usize::MAX;
        for i in 0..20 {
            let g = i as f64 * 0.05;
            let (mask, sel) = hppa_select(&low, &high, g, &RigidTransform::IDENTITY).unwrap();
            assert_eq!(mask.selected_count, 768 + 3 * mask.refined_count());
            assert_eq!(sel.len(), mask.selected_count);
            assert!(mask.selected_count <= last);
            last = mask.selected_count;
        }
    }

    #[test]
    fn selected_patches_partition_the_image() {
        let k = k512();
        let low = field_grid(Level::Low, &k, wavy);
        let high = field_grid(Level::High, &k, wavy);
        let (_, sel) = hppa_select(&low, &high, 0.012, &RigidTransform::IDENTITY).unwrap();
        let mut cover = vec![0u32; k.width * k.height];
        for s in &sel {
            let stride = s.cell.level.stride();
            for r in s.cell.row * stride..(s.cell.row + 1) * stride {
                for c in s.cell.col * stride..(s.cell.col + 1) * stride {
                    cover[r * k.width + c] += 1;
                }
            }
        }
        assert!(cover.iter().all(|c| *c == 1));
        let labels = fused_labels(&sel, 0, 48, 64);
        assert!(labels.as_slice().iter().all(|l| l.is_some()));
        // Anchors are patch centres; the normal in the selected list matches its source grid.
        for s in &sel {
            let src = if s.cell.level == Level::Low { &low } else { &high };
            assert_eq!(s.primitive, *src.cell(s.cell.row, s.cell.col));
            assert_eq!(normal_from_quat(&s.primitive.orientation).unwrap(), normal_from_quat(&src.cell(s.cell.row, s.cell.col).orientation).unwrap());
        }
    }
}
