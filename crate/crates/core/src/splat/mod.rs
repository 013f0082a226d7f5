//! Differentiable splatting of planar primitives into depth, normal and
//! coverage maps.
//!
//! Every pixel casts the ray through its centre. Each primitive is
//! intersected as an infinite plane; the hit is weighted by a soft footprint
//! `alpha = sigmoid(k (1 - m))` where `m` is the Chebyshev-normalized
//! in-plane coordinate of the hit (`m = 1` on the rectangle border). The
//! front-most `max_blend_depth` hits are alpha-composited front to back.
//!
//! Work is split into 8x8 pixel tiles. Results do not depend on the number
//! of worker threads: pixels are independent in the forward pass and the
//! backward pass reduces per-tile partial gradients in tile order.

mod backward;
mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform, Vec3};
use crate::maps::{DepthMap, Grid2, IdMap, NormalMap};
use crate::primitive::PlacedPrimitive;

pub use backward::{render_backward, GradientBuffer, PrimitiveGrad};
pub use raster::{render, render_hard};

/// Upper bound accepted for [`RenderParams::max_blend_depth`].
pub const MAX_BLEND_CAPACITY: usize = 16;

/// Lower clamp applied to depth and radii inside the renderer.
pub const MIN_EXTENT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    /// Sigmoid steepness `k` of the soft rectangle edge.
    pub edge_sharpness: f64,
    /// Pixels with composited coverage below this are invalid.
    pub coverage_cutoff: f64,
    /// Number of front-most hits blended per pixel.
    pub max_blend_depth: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            edge_sharpness: 50.0,
            coverage_cutoff: 0.5,
            max_blend_depth: 8,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge_sharpness > 0.0 && self.edge_sharpness.is_finite()) {
            return Err(Error::invalid("edge sharpness must be positive"));
        }
        if !(self.coverage_cutoff > 0.0 && self.coverage_cutoff < 1.0) {
            return Err(Error::invalid("coverage cutoff must lie in (0, 1)"));
        }
        if self.max_blend_depth == 0 || self.max_blend_depth > MAX_BLEND_CAPACITY {
            return Err(Error::invalid(format!(
                "max_blend_depth must be in 1..={MAX_BLEND_CAPACITY}"
            )));
        }
        Ok(())
    }

    /// Footprint extent (in `m`) beyond which `alpha < 2e-9` and hits are dropped.
    pub(crate) fn support(&self) -> f64 {
        1.0 + 20.0 / self.edge_sharpness
    }
}

/// Output of a render. Invalid pixels carry depth 0 and a zero normal.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedMaps {
    pub depth: DepthMap,
    pub normal: NormalMap,
    pub coverage: Grid2<f64>,
    /// Winning primitive index + 1 per pixel (0 = void); hard renders only.
    pub instance: Option<IdMap>,
}

impl RenderedMaps {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }
}

/// A primitive expressed in the render camera's frame.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Prepared {
    pub center: Vec3,
    pub normal: Vec3,
    pub axis_x: Vec3,
    pub axis_y: Vec3,
    pub radius_x: f64,
    pub radius_y: f64,
    /// `normal . center`
    pub offset: f64,
}

pub(crate) fn prepare(prims: &[PlacedPrimitive], cam_pose: &RigidTransform) -> Result<Vec<Prepared>> {
    let r_wc = cam_pose.rotation_matrix();
    let to_cam = r_wc.transpose();
    prims
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if !p.is_finite() {
                return Err(Error::invalid(format!("primitive {i} has non-finite parameters")));
            }
            let rot = to_cam * p.orientation.normalized()?.unit_to_matrix();
            let depth = p.depth.max(MIN_EXTENT);
            let center = to_cam * (p.origin + p.center_ray * depth - cam_pose.translation);
            let normal: Vec3 = rot.column(2).into_owned();
            Ok(Prepared {
                center,
                normal,
                axis_x: rot.column(0).into_owned(),
                axis_y: rot.column(1).into_owned(),
                radius_x: p.radii[0].max(MIN_EXTENT),
                radius_y: p.radii[1].max(MIN_EXTENT),
                offset: normal.dot(&center),
            })
        })
        .collect()
}

pub(crate) const TILE: usize = 8;

/// Tile-binned primitive lists for one image.
pub(crate) struct Bins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl Bins {
    pub fn tile_list(&self, tx: usize, ty: usize) -> &[u32] {
        &self.lists[ty * self.tiles_x + tx]
    }
}

/// Pixel-space bounding box `[x0, x1) x [y0, y1)` of the primitive footprint
/// scaled by `extent`, or `None` when the primitive cannot be seen.
fn footprint_bbox(p: &Prepared, k: &CameraIntrinsics, extent: f64) -> Option<(usize, usize, usize, usize)> {
    let ex = p.axis_x * (p.radius_x * extent);
    let ey = p.axis_y * (p.radius_y * extent);
    let corners = [p.center + ex + ey, p.center + ex - ey, p.center - ex + ey, p.center - ex - ey];
    const NEAR: f64 = 1e-6;
    if corners.iter().all(|c| c.z <= NEAR) {
        return None;
    }
    let (w, h) = (k.width, k.height);
    if corners.iter().any(|c| c.z <= NEAR) {
        return Some((0, w, 0, h));
    }
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &corners {
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    // Pixel `i` samples `i + 0.5`; keep a one-pixel guard band.
    let lo = |x: f64, n: usize| ((x - 1.5).floor().max(0.0) as usize).min(n);
    let hi = |x: f64, n: usize| ((x + 1.5).ceil().max(0.0) as usize).min(n);
    let (x0, x1, y0, y1) = (lo(umin, w), hi(umax, w), lo(vmin, h), hi(vmax, h));
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    Some((x0, x1, y0, y1))
}

pub(crate) fn bin(prepared: &[Prepared], k: &CameraIntrinsics, extent: f64) -> Bins {
    let tiles_x = k.width.div_ceil(TILE);
    let tiles_y = k.height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in prepared.iter().enumerate() {
        if let Some((x0, x1, y0, y1)) = footprint_bbox(p, k, extent) {
            for ty in y0 / TILE..=(y1 - 1) / TILE {
                for tx in x0 / TILE..=(x1 - 1) / TILE {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
    }
    Bins { tiles_x, tiles_y, lists }
}

/// One ray/primitive intersection with everything the backward pass needs.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Hit {
    pub index: u32,
    pub t: f64,
    /// `normal . ray`
    pub denom: f64,
    pub local_x: f64,
    pub local_y: f64,
    /// `|local_x| / radius_x`, `|local_y| / radius_y`
    pub ax: f64,
    pub ay: f64,
    pub alpha: f64,
}

/// Ray `o + t d` with `o = 0` (camera centre) and `d.z = 1`, so `t` is the
/// camera-space z of the hit.
#[inline(always)]
pub(crate) fn intersect(p: &Prepared, index: u32, ray: &Vec3) -> Option<Hit> {
    let denom = p.normal.dot(ray);
    if denom.abs() <= 1e-9 * ray.norm() {
        return None;
    }
    let t = p.offset / denom;
    if t <= 0.0 {
        return None;
    }
    let delta = ray * t - p.center;
    let local_x = delta.dot(&p.axis_x);
    let local_y = delta.dot(&p.axis_y);
    Some(Hit {
        index,
        t,
        denom,
        local_x,
        local_y,
        ax: local_x.abs() / p.radius_x,
        ay: local_y.abs() / p.radius_y,
        alpha: 0.0,
    })
}

#[inline(always)]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Keeps the `cap` front-most hits ordered by `(t, index)`.
pub(crate) struct FrontHits {
    hits: [Hit; MAX_BLEND_CAPACITY],
    len: usize,
    cap: usize,
}

impl FrontHits {
    pub fn new(cap: usize) -> Self {
        FrontHits {
            hits: [Hit::default(); MAX_BLEND_CAPACITY],
            len: 0,
            cap,
        }
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }

    #[inline]
    pub fn push(&mut self, h: Hit) {
        let before = |a: &Hit, b: &Hit| a.t < b.t || (a.t == b.t && a.index < b.index);
        if self.len == self.cap {
            if !before(&h, &self.hits[self.len - 1]) {
                return;
            }
            self.len -= 1;
        }
        let mut i = self.len;
        while i > 0 && before(&h, &self.hits[i - 1]) {
            self.hits[i] = self.hits[i - 1];
            i -= 1;
        }
        self.hits[i] = h;
        self.len += 1;
    }

    pub fn as_slice(&self) -> &[Hit] {
        &self.hits[..self.len]
    }
}

/// Gathers the blended hits of one pixel.
#[inline]
pub(crate) fn gather(prepared: &[Prepared], list: &[u32], ray: &Vec3, params: &RenderParams, support: f64, out: &mut FrontHits) {
    out.clear();
    let k = params.edge_sharpness;
    for &i in list {
        if let Some(mut h) = intersect(&prepared[i as usize], i, ray) {
            let m = h.ax.max(h.ay);
            if m > support {
                continue;
            }
            h.alpha = sigmoid(k * (1.0 - m));
            out.push(h);
        }
    }
}

/// Composited quantities of one pixel.
pub(crate) struct Composite {
    pub coverage: f64,
    pub depth_sum: f64,
    pub normal_sum: Vec3,
    pub weights: [f64; MAX_BLEND_CAPACITY],
    pub transmittance: [f64; MAX_BLEND_CAPACITY],
}

/// Sign that turns a primitive normal toward the camera along this ray.
#[inline(always)]
pub(crate) fn facing_sign(denom: f64) -> f64 {
    if denom > 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[inline]
pub(crate) fn composite(prepared: &[Prepared], hits: &[Hit]) -> Composite {
    let mut c = Composite {
        coverage: 0.0,
        depth_sum: 0.0,
        normal_sum: Vec3::zeros(),
        weights: [0.0; MAX_BLEND_CAPACITY],
        transmittance: [0.0; MAX_BLEND_CAPACITY],
    };
    let mut trans = 1.0;
    for (i, h) in hits.iter().enumerate() {
        let w = h.alpha * trans;
        c.weights[i] = w;
        c.transmittance[i] = trans;
        c.coverage += w;
        c.depth_sum += w * h.t;
        c.normal_sum += prepared[h.index as usize].normal * (w * facing_sign(h.denom));
        trans *= 1.0 - h.alpha;
    }
    c
}

pub(crate) fn check_params(k: &CameraIntrinsics, params: &RenderParams) -> Result<()> {
    if k.width == 0 || k.height == 0 || !(k.fx > 0.0 && k.fy > 0.0) {
        return Err(Error::invalid("render needs positive intrinsics and image size"));
    }
    params.validate()
}

#[cfg(test)]
mod tests;
