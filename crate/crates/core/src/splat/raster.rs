use rayon::prelude::*;

use super::{bin, check_params, composite, facing_sign, gather, intersect, prepare, FrontHits, RenderParams, RenderedMaps, TILE};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, RigidTransform, Vec3};
use crate::maps::Grid2;
use crate::primitive::PlacedPrimitive;

/// Soft, differentiable render of `prims` seen from a camera with
/// camera-to-reference pose `cam_pose`.
pub fn render(prims: &[PlacedPrimitive], k: &CameraIntrinsics, cam_pose: &RigidTransform, params: &RenderParams) -> Result<RenderedMaps> {
    check_params(k, params)?;
    let prepared = prepare(prims, cam_pose)?;
    let support = params.support();
    let bins = bin(&prepared, k, support);
    let (w, h) = (k.width, k.height);
    let mut depth = vec![0.0; w * h];
    let mut normal = vec![Vec3::zeros(); w * h];
    let mut coverage = vec![0.0; w * h];
    let band = w * TILE;
    depth
        .par_chunks_mut(band)
        .zip(normal.par_chunks_mut(band))
        .zip(coverage.par_chunks_mut(band))
        .enumerate()
        .for_each(|(ty, ((depth, normal), coverage))| {
            let mut hits = FrontHits::new(params.max_blend_depth);
            let rows = depth.len() / w;
            for tx in 0..bins.tiles_x {
                let list = bins.tile_list(tx, ty);
                if list.is_empty() {
                    continue;
                }
                for lr in 0..rows {
                    let row = ty * TILE + lr;
                    for col in tx * TILE..((tx + 1) * TILE).min(w) {
                        let ray = k.pixel_ray(col, row);
                        gather(&prepared, list, &ray, params, support, &mut hits);
                        if hits.as_slice().is_empty() {
                            continue;
                        }
                        let c = composite(&prepared, hits.as_slice());
                        let px = lr * w + col;
                        coverage[px] = c.coverage;
                        if c.coverage >= params.coverage_cutoff {
                            depth[px] = c.depth_sum / c.coverage;
                            let len = c.normal_sum.norm();
                            if len > 0.0 {
                                normal[px] = c.normal_sum / len;
                            }
                        }
                    }
                }
            }
        });
    Ok(RenderedMaps {
        depth: Grid2::from_vec(w, h, depth)?,
        normal: Grid2::from_vec(w, h, normal)?,
        coverage: Grid2::from_vec(w, h, coverage)?,
        instance: None,
    })
}

/// Exact closest-hit render: the nearest primitive whose rectangle contains
/// the hit wins outright. Instance ids are primitive index + 1 (0 = void).
pub fn render_hard(prims: &[PlacedPrimitive], k: &CameraIntrinsics, cam_pose: &RigidTransform) -> Result<RenderedMaps> {
    check_params(k, &RenderParams::default())?;
    let prepared = prepare(prims, cam_pose)?;
    // Slight bbox padding; the containment test itself is exact.
    let bins = bin(&prepared, k, 1.0 + 1e-9);
    let (w, h) = (k.width, k.height);
    let mut depth = vec![0.0; w * h];
    let mut normal = vec![Vec3::zeros(); w * h];
    let mut ids = vec![0u32; w * h];
    let band = w * TILE;
    depth
        .par_chunks_mut(band)
        .zip(normal.par_chunks_mut(band))
        .zip(ids.par_chunks_mut(band))
        .enumerate()
        .for_each(|(ty, ((depth, normal), ids))| {
            let rows = depth.len() / w;
            for tx in 0..bins.tiles_x {
                let list = bins.tile_list(tx, ty);
                if list.is_empty() {
                    continue;
                }
                for lr in 0..rows {
                    let row = ty * TILE + lr;
                    for col in tx * TILE..((tx + 1) * TILE).min(w) {
                        let ray = k.pixel_ray(col, row);
                        let mut best: Option<super::Hit> = None;
                        for &i in list {
                            let Some(hit) = intersect(&prepared[i as usize], i, &ray) else {
                                continue;
                            };
                            if hit.ax > 1.0 || hit.ay > 1.0 {
                                continue;
                            }
                            if best.is_none_or(|b| hit.t < b.t || (hit.t == b.t && hit.index < b.index)) {
                                best = Some(hit);
                            }
                        }
                        if let Some(b) = best {
                            let px = lr * w + col;
                            depth[px] = b.t;
                            normal[px] = prepared[b.index as usize].normal * facing_sign(b.denom);
                            ids[px] = b.index + 1;
                        }
                    }
                }
            }
        });
    let coverage = ids.iter().map(|id| if *id > 0 { 1.0 } else { 0.0 }).collect();
    Ok(RenderedMaps {
        depth: Grid2::from_vec(w, h, depth)?,
        normal: Grid2::from_vec(w, h, normal)?,
        coverage: Grid2::from_vec(w, h, coverage)?,
        instance: Some(Grid2::from_vec(w, h, ids)?),
    })
}
