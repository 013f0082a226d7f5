//! Per-scene fitting of primitive grids to target depth and normal maps.
//!
//! Fitting runs in two stages. The warm-up stage pulls every cell of both
//! lattices toward the resized targets with the patch loss, updating depth
//! and orientation. The refinement stage fixes the fused primitive set once
//! and minimizes the render loss over depth, orientation and radii. Both
//! stages use Adam with a cosine step-size decay; quaternions are
//! re-normalized after every step.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_jacobian, CameraIntrinsics, Mat3, Quaternion, RigidTransform, Vec3};
use crate::loss::{patch_loss, render_loss, resize_targets, LossWeights};
use crate::maps::{DepthMap, NormalMap};
use crate::primitive::{hppa_select, patched_maps, Level, PlacedPrimitive, PlanarPrimitive, PrimitiveGrid, SelectedPrimitive, SelectionMask};
use crate::splat::{render, render_backward, PrimitiveGrad, RenderParams, MIN_EXTENT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub warmup_iters: usize,
    pub refine_iters: usize,
    /// Initial step size, decayed along a cosine to `lr_final` in each stage.
    pub lr: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Step-size multiplier for radii.
    pub radius_lr_scale: f64,
    /// Weight of the patch loss kept alongside the render loss in the
    /// refine stage; 0 refines on the render loss alone.
    pub refine_patch_weight: f64,
    pub g_th: f64,
    pub weights: LossWeights,
    pub render: RenderParams,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            warmup_iters: 200,
            refine_iters: 1800,
            lr: 1e-2,
            lr_final: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            radius_lr_scale: 0.1,
            refine_patch_weight: 1.0,
            g_th: 0.5,
            weights: LossWeights::default(),
            render: RenderParams::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.lr_final, self.adam_eps].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::invalid("step sizes and adam epsilon must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("moment decays must lie in [0, 1)"));
        }
        if !(self.radius_lr_scale >= 0.0) || !(self.refine_patch_weight >= 0.0) || self.g_th.is_nan() || self.g_th < 0.0 {
            return Err(Error::invalid("radius step scale and g_th must be non-negative"));
        }
        self.weights.validate()?;
        self.render.validate()
    }
}

/// Ground truth for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FitTarget {
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-reference pose.
    pub pose: RigidTransform,
    pub depth: DepthMap,
    /// Camera-frame normals.
    pub normal: NormalMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Refine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub stage: Stage,
    /// Loss at the parameters before this iteration's update.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,stage,loss\n");
        for e in &self.entries {
            let stage = match e.stage {
                Stage::Warmup => "warmup",
                Stage::Refine => "refine",
            };
            writeln!(out, "{},{},{:e}", e.iteration, stage, e.loss).expect("writing to a String");
        }
        out
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(move |e| e.stage == stage)
    }
}

/// Fitted state of one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFit {
    pub low: PrimitiveGrid,
    pub high: PrimitiveGrid,
    pub mask: SelectionMask,
    pub selected: Vec<SelectedPrimitive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub views: Vec<ViewFit>,
    pub trace: LossTrace,
}

/// Orthonormal frame `[x, y, n]` and half-extents of a primitive covering
/// the patch `[u0, u1] x [v0, v1]` of a plane through `center` with normal `n`
/// (camera frame). The rectangle's x axis follows the image x direction on
/// the plane so neighbouring patches tile without gaps.
fn patch_footprint(k: &CameraIntrinsics, u: [f64; 2], v: [f64; 2], center: &Vec3, n: &Vec3) -> Option<(Mat3, [f64; 2])> {
    let hit = |uu: f64, vv: f64| {
        let ray = k.ray(uu, vv);
        let denom = n.dot(&ray);
        if denom.abs() < 0.05 * ray.norm() {
            return None;
        }
        let t = n.dot(center) / denom;
        (t > 0.0).then(|| ray * t)
    };
    let vm = 0.5 * (v[0] + v[1]);
    let dx = hit(u[1], vm)? - hit(u[0], vm)?;
    let dx = dx - n * n.dot(&dx);
    if dx.norm() < 1e-12 {
        return None;
    }
    let ax = dx.normalize();
    let ay = n.cross(&ax);
    let mut radii = [0.0f64; 2];
    for (uu, vv) in [(u[0], v[0]), (u[1], v[0]), (u[0], v[1]), (u[1], v[1])] {
        let d = hit(uu, vv)? - center;
        radii[0] = radii[0].max(d.dot(&ax).abs());
        radii[1] = radii[1].max(d.dot(&ay).abs());
    }
    Some((Mat3::from_columns(&[ax, ay, *n]), radii))
}

fn init_level(
    level: Level,
    depth: &DepthMap,
    normal: &NormalMap,
    k: &CameraIntrinsics,
    view: usize,
    pose: &RigidTransform,
) -> Result<PrimitiveGrid> {
    let stride = level.stride();
    let (d, n) = resize_targets(depth, normal, stride)?;
    let (cols, rows) = (d.width(), d.height());
    let valid: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).filter(|&(r, c)| *d.get(c, r) > 0.0).collect();
    if 2 * valid.len() < rows * cols {
        return Err(Error::invalid(format!(
            "only {} of {} {level:?} cells have valid ground truth",
            valid.len(),
            rows * cols
        )));
    }
    // Cells without ground truth copy the nearest valid cell (first in
    // row-major order on ties).
    let source = |r: usize, c: usize| -> (usize, usize) {
        if *d.get(c, r) > 0.0 {
            return (r, c);
        }
        *valid
            .iter()
            .min_by_key(|&&(vr, vc)| vr.abs_diff(r).pow(2) + vc.abs_diff(c).pow(2))
            .expect("at least half the cells are valid")
    };
    let r_wc = pose.rotation_matrix();
    let s = stride as f64;
    PrimitiveGrid::from_fn(level, k, view, |row, col, u, v| {
        let (sr, sc) = source(row, col);
        let depth = *d.get(sc, sr);
        let nrm = *n.get(sc, sr);
        let center = crate::geometry::backproject(k, u, v, depth).expect("positive median depth");
        let us = [col as f64 * s, (col + 1) as f64 * s];
        let vs = [row as f64 * s, (row + 1) as f64 * s];
        let (frame, radii) = patch_footprint(k, us, vs, &center, &nrm).unwrap_or_else(|| {
            let q = Quaternion::rotation_between(&Vec3::z(), &nrm).expect("unit normal");
            let r = depth * s / (2.0 * k.fx.min(k.fy));
            (q.unit_to_matrix(), [r, r])
        });
        let q = Quaternion::from_rotation_matrix(&(r_wc * frame));
        (depth, q, radii)
    })
}

/// Initial low and high grids for one view: per-patch median depth and
/// normal, with rectangles spanning each patch's footprint on its plane.
pub fn init_grids(
    depth: &DepthMap,
    normal: &NormalMap,
    k: &CameraIntrinsics,
    view: usize,
    pose: &RigidTransform,
) -> Result<(PrimitiveGrid, PrimitiveGrid)> {
    k.validate()?;
    if depth.width() != k.width || depth.height() != k.height {
        return Err(Error::invalid(format!(
            "target maps are {}x{} but the camera is {}x{}",
            depth.width(),
            depth.height(),
            k.width,
            k.height
        )));
    }
    Ok((
        init_level(Level::Low, depth, normal, k, view, pose)?,
        init_level(Level::High, depth, normal, k, view, pose)?,
    ))
}

/// Adam state over a flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &FitConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, scale: impl Fn(usize) -> f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let step = lr * scale(i) * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] -= step;
        }
    }
}

fn cosine_lr(cfg: &FitConfig, iter: usize, total: usize) -> f64 {
    if total <= 1 {
        return cfg.lr;
    }
    let progress = iter as f64 / (total - 1) as f64;
    cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

const PARAMS: usize = 7;

fn pack(prims: impl Iterator<Item = PlanarPrimitive>, out: &mut Vec<f64>) {
    out.clear();
    for p in prims {
        let o = p.orientation.to_array();
        out.extend_from_slice(&[p.depth, o[0], o[1], o[2], o[3], p.radii[0], p.radii[1]]);
    }
}

fn unpack(params: &mut [f64], p: &mut PlanarPrimitive) {
    let q = Quaternion::new(params[1], params[2], params[3], params[4])
        .normalized()
        .unwrap_or(p.orientation);
    let (depth, rx, ry) = (params[0].max(MIN_EXTENT), params[5].max(MIN_EXTENT), params[6].max(MIN_EXTENT));
    p.depth = depth;
    p.orientation = q;
    p.radii = [rx, ry];
    params.copy_from_slice(&[depth, q.w, q.x, q.y, q.z, rx, ry]);
}

/// Patch-loss value and gradient (depth, raw quaternion) for one grid.
fn grid_patch_grad(grid: &PrimitiveGrid, pose: &RigidTransform, gt: &(DepthMap, NormalMap), cfg: &FitConfig, grads: &mut [f64]) -> Result<f64> {
    let (d, n) = patched_maps(grid, pose)?;
    let l = patch_loss(&d, &n, &gt.0, &gt.1, &cfg.weights.patch)?;
    let to_cam = pose.rotation_matrix().transpose();
    for (i, p) in grid.primitives.iter().enumerate() {
        let g = &mut grads[i * PARAMS..(i + 1) * PARAMS];
        g[0] = l.grad_depth.as_slice()[i];
        let gn = to_cam.transpose() * l.grad_normal.as_slice()[i];
        let jac = rotation_jacobian(&p.orientation)?;
        for (slot, j) in jac.iter().enumerate() {
            g[1 + slot] = gn.dot(&j.column(2));
        }
        g[5] = 0.0;
        g[6] = 0.0;
    }
    Ok(l.value)
}

fn resized_targets(targets: &[FitTarget]) -> Result<Vec<[(DepthMap, NormalMap); 2]>> {
    targets
        .iter()
        .map(|t| Ok([resize_targets(&t.depth, &t.normal, Level::Low.stride())?, resize_targets(&t.depth, &t.normal, Level::High.stride())?]))
        .collect()
}

fn warmup(views: &mut [ViewFit], targets: &[FitTarget], cfg: &FitConfig, trace: &mut LossTrace) -> Result<()> {
    if cfg.warmup_iters == 0 {
        return Ok(());
    }
    let resized = resized_targets(targets)?;
    let count: usize = views.iter().map(|v| v.low.primitives.len() + v.high.primitives.len()).sum();
    let mut adam = Adam::new(count * PARAMS, cfg);
    let mut params = Vec::with_capacity(count * PARAMS);
    let mut grads = vec![0.0; count * PARAMS];
    for iter in 0..cfg.warmup_iters {
        let mut loss = 0.0;
        let mut offset = 0;
        for ((v, t), gt) in views.iter().zip(targets).zip(&resized) {
            for (grid, gt) in [(&v.low, &gt[0]), (&v.high, &gt[1])] {
                let len = grid.primitives.len() * PARAMS;
                loss += grid_patch_grad(grid, &t.pose, gt, cfg, &mut grads[offset..offset + len])?;
                offset += len;
            }
        }
        trace.entries.push(TraceEntry {
            iteration: iter,
            stage: Stage::Warmup,
            loss,
        });
        pack(views.iter().flat_map(|v| v.low.primitives.iter().chain(&v.high.primitives)).copied(), &mut params);
        // Radii carry no patch-loss signal and stay fixed.
        adam.step(&mut params, &grads, cosine_lr(cfg, iter, cfg.warmup_iters), |i| if i % PARAMS >= 5 { 0.0 } else { 1.0 });
        let mut chunks = params.chunks_mut(PARAMS);
        for v in views.iter_mut() {
            for p in v.low.primitives.iter_mut().chain(v.high.primitives.iter_mut()) {
                unpack(chunks.next().expect("one chunk per primitive"), p);
            }
        }
    }
    Ok(())
}

fn placed(v: &ViewFit, t: &FitTarget) -> Vec<PlacedPrimitive> {
    v.selected.iter().map(|s| s.primitive.place(&t.intrinsics, &t.pose)).collect()
}

/// Sum of render losses over views, with per-primitive gradients.
fn render_objective(views: &[ViewFit], targets: &[FitTarget], cfg: &FitConfig, grads: Option<&mut Vec<f64>>) -> Result<f64> {
    let mut loss = 0.0;
    let mut all = Vec::new();
    for (v, t) in views.iter().zip(targets) {
        let prims = placed(v, t);
        let maps = render(&prims, &t.intrinsics, &t.pose, &cfg.render)?;
        let l = render_loss(&maps, &t.depth, &t.normal, &cfg.weights.render, cfg.render.coverage_cutoff)?;
        loss += l.value;
        if grads.is_some() {
            let g = render_backward(&prims, &t.intrinsics, &t.pose, &cfg.render, &l.grad_depth, &l.grad_normal)?;
            all.extend(g.grads.iter().flat_map(PrimitiveGrad::as_array));
        }
    }
    if let Some(out) = grads {
        *out = all;
    }
    Ok(loss)
}

fn refine(views: &mut [ViewFit], targets: &[FitTarget], cfg: &FitConfig, trace: &mut LossTrace) -> Result<()> {
    let count: usize = views.iter().map(|v| v.selected.len()).sum();
    let mut adam = Adam::new(count * PARAMS, cfg);
    let mut params = Vec::with_capacity(count * PARAMS);
    let mut grads = Vec::with_capacity(count * PARAMS);
    let resized = if cfg.refine_patch_weight > 0.0 { resized_targets(targets)? } else { Vec::new() };
    for iter in 0..cfg.refine_iters {
        let mut loss = render_objective(views, targets, cfg, Some(&mut grads))?;
        if cfg.refine_patch_weight > 0.0 {
            loss += patch_objective(views, targets, &resized, cfg, &mut grads)?;
        }
        trace.entries.push(TraceEntry {
            iteration: cfg.warmup_iters + iter,
            stage: Stage::Refine,
            loss,
        });
        pack(views.iter().flat_map(|v| v.selected.iter().map(|s| s.primitive)), &mut params);
        let radius_scale = cfg.radius_lr_scale;
        adam.step(&mut params, &grads, cosine_lr(cfg, iter, cfg.refine_iters), |i| if i % PARAMS >= 5 { radius_scale } else { 1.0 });
        let mut chunks = params.chunks_mut(PARAMS);
        for v in views.iter_mut() {
            for s in v.selected.iter_mut() {
                unpack(chunks.next().expect("one chunk per primitive"), &mut s.primitive);
            }
        }
    }
    views.iter_mut().for_each(sync_grids);
    Ok(())
}

fn sync_grids(v: &mut ViewFit) {
    for s in &v.selected {
        let grid = match s.cell.level {
            Level::Low => &mut v.low,
            Level::High => &mut v.high,
        };
        *grid.cell_mut(s.cell.row, s.cell.col) = s.primitive;
    }
}

/// Weighted patch loss of both grids, with each selected primitive's share
/// of the gradient added to `grads` (laid out as in the refine stage).
fn patch_objective(
    views: &mut [ViewFit],
    targets: &[FitTarget],
    resized: &[[(DepthMap, NormalMap); 2]],
    cfg: &FitConfig,
    grads: &mut [f64],
) -> Result<f64> {
    let w = cfg.refine_patch_weight;
    let mut loss = 0.0;
    let mut offset = 0;
    for ((v, t), gt) in views.iter_mut().zip(targets).zip(resized) {
        sync_grids(v);
        let mut low = vec![0.0; v.low.primitives.len() * PARAMS];
        let mut high = vec![0.0; v.high.primitives.len() * PARAMS];
        loss += grid_patch_grad(&v.low, &t.pose, &gt[0], cfg, &mut low)?;
        loss += grid_patch_grad(&v.high, &t.pose, &gt[1], cfg, &mut high)?;
        for s in &v.selected {
            let (g, cols) = match s.cell.level {
                Level::Low => (&low, v.low.cols),
                Level::High => (&high, v.high.cols),
            };
            let i = (s.cell.row * cols + s.cell.col) * PARAMS;
            for (out, add) in grads[offset..offset + PARAMS].iter_mut().zip(&g[i..i + PARAMS]) {
                *out += w * add;
            }
            offset += PARAMS;
        }
    }
    Ok(w * loss)
}

/// Fits the given initial grids (one `(low, high)` pair per target view).
pub fn fit_grids(targets: &[FitTarget], init: Vec<(PrimitiveGrid, PrimitiveGrid)>, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("fitting needs at least one target view"));
    }
    if init.len() != targets.len() {
        return Err(Error::invalid(format!("{} grid pairs for {} views", init.len(), targets.len())));
    }
    let mut views = Vec::with_capacity(init.len());
    for (i, (low, high)) in init.into_iter().enumerate() {
        low.validate()?;
        high.validate()?;
        if low.source_view != i || high.source_view != i {
            return Err(Error::invalid(format!("grids for view {i} name source view {}", low.source_view)));
        }
        let (mask, selected) = hppa_select(&low, &high, cfg.g_th, &targets[i].pose)?;
        views.push(ViewFit { low, high, mask, selected });
    }
    let mut trace = LossTrace::default();
    warmup(&mut views, targets, cfg, &mut trace)?;
    if cfg.refine_iters > 0 {
        for (v, t) in views.iter_mut().zip(targets) {
            let (mask, selected) = hppa_select(&v.low, &v.high, cfg.g_th, &t.pose)?;
            v.mask = mask;
            v.selected = selected;
        }
        refine(&mut views, targets, cfg, &mut trace)?;
    }
    Ok(FitResult { views, trace })
}

/// Grids initialized from `t` and their fused selection at `g_th`.
pub fn initial_selection(t: &FitTarget, view: usize, g_th: f64) -> Result<(PrimitiveGrid, PrimitiveGrid, SelectionMask, Vec<SelectedPrimitive>)> {
    let (low, high) = init_grids(&t.depth, &t.normal, &t.intrinsics, view, &t.pose)?;
    let (mask, selected) = hppa_select(&low, &high, g_th, &t.pose)?;
    Ok((low, high, mask, selected))
}

/// Initializes grids from the targets themselves and fits them.
pub fn fit_scene(targets: &[FitTarget], cfg: &FitConfig) -> Result<FitResult> {
    let init = targets
        .iter()
        .enumerate()
        .map(|(i, t)| init_grids(&t.depth, &t.normal, &t.intrinsics, i, &t.pose))
        .collect::<Result<Vec<_>>>()?;
    fit_grids(targets, init, cfg)
}

/// Render loss of the current selection, summed over views.
pub fn render_objective_value(views: &[ViewFit], targets: &[FitTarget], cfg: &FitConfig) -> Result<f64> {
    render_objective(views, targets, cfg, None)
}

/// Soft render of a fitted view's selection from its own camera.
pub fn rendered_view(v: &ViewFit, t: &FitTarget, params: &RenderParams) -> Result<crate::splat::RenderedMaps> {
    render(&placed(v, t), &t.intrinsics, &t.pose, params)
}

/// RMSE of rendered against target depth over pixels valid in both.
pub fn depth_rmse(rendered: &DepthMap, target: &DepthMap) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, t) in rendered.as_slice().iter().zip(target.as_slice()) {
        if *r > 0.0 && *t > 0.0 {
            sum += (r - t).powi(2);
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}
