use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bin, check_params, composite, facing_sign, gather, prepare, FrontHits, RenderParams, MIN_EXTENT, TILE};
use crate::error::{Error, Result};
use crate::geometry::{rotation_jacobian, CameraIntrinsics, Mat3, RigidTransform, Vec3};
use crate::maps::{DepthMap, NormalMap};
use crate::primitive::PlacedPrimitive;

/// Gradient of a scalar loss with respect to one primitive's parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveGrad {
    pub depth: f64,
    /// With respect to the raw `(w, x, y, z)` components.
    pub orientation: [f64; 4],
    pub radii: [f64; 2],
}

impl PrimitiveGrad {
    pub fn as_array(&self) -> [f64; 7] {
        let o = self.orientation;
        [self.depth, o[0], o[1], o[2], o[3], self.radii[0], self.radii[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBuffer {
    pub grads: Vec<PrimitiveGrad>,
}

/// Camera-space partial gradients accumulated over pixels.
#[derive(Clone, Copy, Default)]
struct LocalGrad {
    center: Vec3,
    normal: Vec3,
    axis_x: Vec3,
    axis_y: Vec3,
    radius_x: f64,
    radius_y: f64,
}

impl LocalGrad {
    fn add(&mut self, o: &LocalGrad) {
        self.center += o.center;
        self.normal += o.normal;
        self.axis_x += o.axis_x;
        self.axis_y += o.axis_y;
        self.radius_x += o.radius_x;
        self.radius_y += o.radius_y;
    }
}

/// Analytic gradient of `sum_p gd[p] * depth[p] + gn[p] . normal[p]` over
/// the maps produced by [`render`](super::render) with the same inputs.
pub fn render_backward(
    prims: &[PlacedPrimitive],
    k: &CameraIntrinsics,
    cam_pose: &RigidTransform,
    params: &RenderParams,
    grad_depth: &DepthMap,
    grad_normal: &NormalMap,
) -> Result<GradientBuffer> {
    check_params(k, params)?;
    let (w, h) = (k.width, k.height);
    for (name, gw, gh) in [("depth", grad_depth.width(), grad_depth.height()), ("normal", grad_normal.width(), grad_normal.height())] {
        if gw != w || gh != h {
            return Err(Error::invalid(format!("upstream {name} gradient is {gw}x{gh}, render is {w}x{h}")));
        }
    }
    let prepared = prepare(prims, cam_pose)?;
    let support = params.support();
    let bins = bin(&prepared, k, support);
    let sharpness = params.edge_sharpness;
    let tau = params.coverage_cutoff;

    let tiles: Vec<(usize, usize)> = (0..bins.tiles_y).flat_map(|ty| (0..bins.tiles_x).map(move |tx| (tx, ty))).collect();
    let partials: Vec<Vec<LocalGrad>> = tiles
        .par_iter()
        .map(|&(tx, ty)| {
            let list = bins.tile_list(tx, ty);
            let mut local = vec![LocalGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let mut hits = FrontHits::new(params.max_blend_depth);
            for row in ty * TILE..((ty + 1) * TILE).min(h) {
                for col in tx * TILE..((tx + 1) * TILE).min(w) {
                    let gd = *grad_depth.get(col, row);
                    let gn = *grad_normal.get(col, row);
                    if gd == 0.0 && gn == Vec3::zeros() {
                        continue;
                    }
                    let ray = k.pixel_ray(col, row);
                    gather(&prepared, list, &ray, params, support, &mut hits);
                    let hs = hits.as_slice();
                    if hs.is_empty() {
                        continue;
                    }
                    let c = composite(&prepared, hs);
                    if c.coverage < tau {
                        continue;
                    }
                    let depth = c.depth_sum / c.coverage;
                    let len = c.normal_sum.norm();
                    let gn_raw = if len > 0.0 {
                        let n = c.normal_sum / len;
                        (gn - n * n.dot(&gn)) / len
                    } else {
                        Vec3::zeros()
                    };
                    let n_hits = hs.len();
                    // dL/d(weight_i)
                    let mut g_w = [0.0; super::MAX_BLEND_CAPACITY];
                    for (i, hit) in hs.iter().enumerate() {
                        let facing = prepared[hit.index as usize].normal * facing_sign(hit.denom);
                        g_w[i] = gd * (hit.t - depth) / c.coverage + gn_raw.dot(&facing);
                    }
                    for (j, hit) in hs.iter().enumerate() {
                        let p = &prepared[hit.index as usize];
                        // weight_i = alpha_i prod_{l<i} (1 - alpha_l)
                        let mut later = 0.0;
                        let mut excl = c.transmittance[j];
                        for i in j + 1..n_hits {
                            later += g_w[i] * hs[i].alpha * excl;
                            excl *= 1.0 - hs[i].alpha;
                        }
                        let g_alpha = c.transmittance[j] * g_w[j] - later;
                        let g_m = -g_alpha * sharpness * hit.alpha * (1.0 - hit.alpha);

                        let (mut g_lx, mut g_ly) = (0.0, 0.0);
                        let slot = list.binary_search(&hit.index).expect("hit primitive is binned in this tile");
                        let acc = &mut local[slot];
                        if hit.ax >= hit.ay {
                            g_lx = g_m * hit.local_x.signum() / p.radius_x;
                            acc.radius_x -= g_m * hit.ax / p.radius_x;
                        } else {
                            g_ly = g_m * hit.local_y.signum() / p.radius_y;
                            acc.radius_y -= g_m * hit.ay / p.radius_y;
                        }
                        let g_z = gd * c.weights[j] / c.coverage;
                        let g_t = g_z + g_lx * p.axis_x.dot(&ray) + g_ly * p.axis_y.dot(&ray);
                        let delta = ray * hit.t - p.center;
                        acc.center += -p.axis_x * g_lx - p.axis_y * g_ly + p.normal * (g_t / hit.denom);
                        acc.normal += gn_raw * (c.weights[j] * facing_sign(hit.denom)) - delta * (g_t / hit.denom);
                        acc.axis_x += delta * g_lx;
                        acc.axis_y += delta * g_ly;
                    }
                }
            }
            local
        })
        .collect();

    let mut total = vec![LocalGrad::default(); prims.len()];
    for (tile, (tx, ty)) in partials.iter().zip(&tiles) {
        for (g, &i) in tile.iter().zip(bins.tile_list(*tx, *ty)) {
            total[i as usize].add(g);
        }
    }

    let r_wc = cam_pose.rotation_matrix();
    let grads = prims
        .iter()
        .zip(&total)
        .map(|(p, g)| {
            let center_ref = r_wc * g.center;
            let depth = if p.depth > MIN_EXTENT { center_ref.dot(&p.center_ray) } else { 0.0 };
            let cols = Mat3::from_columns(&[r_wc * g.axis_x, r_wc * g.axis_y, r_wc * g.normal]);
            let jac = rotation_jacobian(&p.orientation)?;
            let mut orientation = [0.0; 4];
            for (o, j) in orientation.iter_mut().zip(jac.iter()) {
                *o = j.component_mul(&cols).sum();
            }
            let rx = if p.radii[0] > MIN_EXTENT { g.radius_x } else { 0.0 };
            let ry = if p.radii[1] > MIN_EXTENT { g.radius_y } else { 0.0 };
            Ok(PrimitiveGrad {
                depth,
                orientation,
                radii: [rx, ry],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientBuffer { grads })
}
