//! Finite-difference verification of [`render_backward`].
//!
//! Each random scene places one to three primitives at separated depth
//! layers (so compositing order never changes under perturbation) in front
//! of a randomly posed camera. The scalar probed is
//! `L = sum_p gd[p] depth[p] + gn[p] . normal[p]`, where the upstream maps are
//! the L1 depth-loss or normal-loss gradients against a render of a nearby
//! perturbed configuration. Upstream entries are zeroed at pixels where the render is not
//! differentiable: coverage within 0.05 of the cutoff (the valid/invalid
//! switch is a jump) and hits in the soft edge band whose two normalized
//! in-plane coordinates are within 0.01 of each other (the corner kink of
//! the Chebyshev footprint). Central differences straddling either are
//! biased regardless of the analytic gradient.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{CameraIntrinsics, Quaternion, RigidTransform, Vec3};
use crate::maps::Grid2;
use crate::primitive::PlacedPrimitive;
use crate::splat::{gather, prepare, bin, render, render_backward, FrontHits, RenderParams};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub scenes: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: RenderParams,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            scenes: 100,
            seed: 0,
            epsilon: 1e-4,
            tolerance: 1e-3,
            params: RenderParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Upstream {
    Depth,
    Normal,
}

#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    pub scene: usize,
    pub primitive: usize,
    pub parameter: &'static str,
    pub upstream: Upstream,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub scenes: usize,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<Mismatch>,
    pub passed: bool,
}

pub const PARAMETER_NAMES: [&str; 7] = ["depth", "qw", "qx", "qy", "qz", "radius_x", "radius_y"];

/// A small random scene for gradient checking.
#[derive(Clone, Debug)]
pub struct GradScene {
    pub intrinsics: CameraIntrinsics,
    pub cam_pose: RigidTransform,
    pub prims: Vec<PlacedPrimitive>,
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_scene(rng: &mut impl Rng) -> GradScene {
    let (w, h) = (48, 32);
    let f = rng.gen_range(35.0..55.0);
    let k = CameraIntrinsics::new(f, f * rng.gen_range(0.9..1.1), w as f64 / 2.0 + rng.gen_range(-2.0..2.0), h as f64 / 2.0 + rng.gen_range(-2.0..2.0), w, h)
        .expect("valid intrinsics");
    let cam_rot = Quaternion::from_axis_angle(&unit_vector(rng), rng.gen_range(0.0..20f64.to_radians())).expect("axis");
    let cam_pose = RigidTransform::new(cam_rot, Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))).expect("unit");
    let count = rng.gen_range(1..=3);
    let cam_q = cam_pose.rotation;
    let prims = (0..count)
        .map(|layer| {
            let z = 1.5 + 1.4 * layer as f64 + rng.gen_range(0.0..0.1);
            let (u, v) = (rng.gen_range(0.25..0.75) * w as f64, rng.gen_range(0.25..0.75) * h as f64);
            let center_cam = k.ray(u, v) * z;
            let tilt = rng.gen_range(0.0..30f64.to_radians());
            let spin = rng.gen_range(0.0..std::f64::consts::TAU);
            let tilt_axis = Vector3::new(spin.cos(), spin.sin(), 0.0);
            let facing = Quaternion::from_axis_angle(&Vec3::x(), std::f64::consts::PI).expect("axis");
            let tilt_q = Quaternion::from_axis_angle(&tilt_axis, tilt).expect("axis");
            let in_plane = Quaternion::from_axis_angle(&Vec3::z(), rng.gen_range(0.0..std::f64::consts::TAU)).expect("axis");
            let mut q = cam_q * tilt_q * facing * in_plane;
            // Raw quaternions of arbitrary scale and sign exercise the normalization path.
            let scale = rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            q = Quaternion::new(q.w * scale, q.x * scale, q.y * scale, q.z * scale);
            let center_ref = cam_pose.apply(&center_cam);
            let origin = center_ref + unit_vector(rng) * rng.gen_range(0.5..2.0);
            let depth = rng.gen_range(1.0..3.0);
            PlacedPrimitive {
                origin,
                center_ray: (center_ref - origin) / depth,
                depth,
                orientation: q,
                radii: [rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45)],
            }
        })
        .collect();
    GradScene { intrinsics: k, cam_pose, prims }
}

/// A nearby configuration used as the loss target.
fn perturbed(prims: &[PlacedPrimitive], rng: &mut impl Rng) -> Vec<PlacedPrimitive> {
    prims
        .iter()
        .map(|p| {
            let twist = Quaternion::from_axis_angle(&unit_vector(rng), rng.gen_range(0.0..5f64.to_radians())).expect("axis");
            PlacedPrimitive {
                depth: p.depth + rng.gen_range(-0.05..0.05),
                orientation: twist * p.orientation,
                radii: [p.radii[0] * rng.gen_range(0.9..1.1), p.radii[1] * rng.gen_range(0.9..1.1)],
                ..*p
            }
        })
        .collect()
}

fn get_param(p: &PlacedPrimitive, i: usize) -> f64 {
    match i {
        0 => p.depth,
        1..=4 => p.orientation.to_array()[i - 1],
        5 | 6 => p.radii[i - 5],
        _ => unreachable!(),
    }
}

fn set_param(p: &mut PlacedPrimitive, i: usize, value: f64) {
    match i {
        0 => p.depth = value,
        1..=4 => {
            let mut a = p.orientation.to_array();
            a[i - 1] = value;
            p.orientation = a.into();
        }
        5 | 6 => p.radii[i - 5] = value,
        _ => unreachable!(),
    }
}

const COVERAGE_MARGIN: f64 = 0.05;
const KINK_MARGIN: f64 = 0.01;

/// Pixels excluded from finite-difference probing, see the module docs.
pub fn nondifferentiable_pixels(scene: &GradScene, params: &RenderParams) -> Result<Grid2<bool>> {
    let k = &scene.intrinsics;
    let maps = render(&scene.prims, k, &scene.cam_pose, params)?;
    let prepared = prepare(&scene.prims, &scene.cam_pose)?;
    let support = params.support();
    let bins = bin(&prepared, k, support);
    let mut hits = FrontHits::new(params.max_blend_depth);
    Ok(Grid2::from_fn(k.width, k.height, |col, row| {
        if (*maps.coverage.get(col, row) - params.coverage_cutoff).abs() < COVERAGE_MARGIN {
            return true;
        }
        let list = bins.tile_list(col / crate::splat::TILE, row / crate::splat::TILE);
        gather(&prepared, list, &k.pixel_ray(col, row), params, support, &mut hits);
        hits.as_slice().iter().any(|h| {
            let m = h.ax.max(h.ay);
            (h.ax - h.ay).abs() < KINK_MARGIN && (params.edge_sharpness * (1.0 - m)).abs() < 30.0
        })
    }))
}

/// Analytic and numeric gradients of every parameter of every primitive,
/// as `(primitive, parameter, analytic, numeric)`.
pub fn check_scene(scene: &GradScene, upstream: Upstream, cfg: &GradcheckConfig, rng: &mut impl Rng) -> Result<Vec<(usize, usize, f64, f64)>> {
    let k = &scene.intrinsics;
    let params = &cfg.params;
    let excluded = nondifferentiable_pixels(scene, params)?;
    let base = render(&scene.prims, k, &scene.cam_pose, params)?;
    let target = render(&perturbed(&scene.prims, rng), k, &scene.cam_pose, params)?;
    let npix = (k.width * k.height) as f64;
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let usable = |c: usize, r: usize| !*excluded.get(c, r) && *base.depth.get(c, r) > 0.0 && *target.depth.get(c, r) > 0.0;
    // Upstream of mean |D - D_t| or of mean (|1 - N.N_t| + |N - N_t|_1).
    let gd = Grid2::from_fn(k.width, k.height, |c, r| {
        if upstream == Upstream::Depth && usable(c, r) {
            sign(base.depth.get(c, r) - target.depth.get(c, r)) / npix
        } else {
            0.0
        }
    });
    let gn = Grid2::from_fn(k.width, k.height, |c, r| {
        if upstream == Upstream::Normal && usable(c, r) {
            let (n, t) = (base.normal.get(c, r), target.normal.get(c, r));
            let cos_term = -t * sign(1.0 - n.dot(t));
            let l1_term = (n - t).map(sign);
            (cos_term + l1_term) / npix
        } else {
            Vec3::zeros()
        }
    });
    let objective = |prims: &[PlacedPrimitive]| -> Result<f64> {
        let maps = render(prims, k, &scene.cam_pose, params)?;
        let mut total = 0.0;
        for (i, (d, n)) in maps.depth.as_slice().iter().zip(maps.normal.as_slice()).enumerate() {
            total += gd.as_slice()[i] * d + gn.as_slice()[i].dot(n);
        }
        Ok(total)
    };
    let analytic = render_backward(&scene.prims, k, &scene.cam_pose, params, &gd, &gn)?;
    let mut out = Vec::new();
    for (pi, g) in analytic.grads.iter().enumerate() {
        let a = g.as_array();
        for (param, &an) in a.iter().enumerate() {
            let mut plus = scene.prims.clone();
            let mut minus = scene.prims.clone();
            let v = get_param(&scene.prims[pi], param);
            set_param(&mut plus[pi], param, v + cfg.epsilon);
            set_param(&mut minus[pi], param, v - cfg.epsilon);
            let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * cfg.epsilon);
            out.push((pi, param, an, numeric));
        }
    }
    Ok(out)
}

/// Relative error with a floor tied to the largest gradient of the same
/// scene, so parameters with (near-)zero true gradient are judged on an
/// absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checked = 0;
    let mut worst: Option<Mismatch> = None;
    for scene_idx in 0..cfg.scenes {
        let scene = random_scene(&mut rng);
        for upstream in [Upstream::Depth, Upstream::Normal] {
            let results = check_scene(&scene, upstream, cfg, &mut rng)?;
            let scale = results.iter().map(|r| r.3.abs()).fold(0.0, f64::max);
            for (prim, param, an, num) in results {
                checked += 1;
                let err = relative_error(an, num, scale);
                if worst.as_ref().is_none_or(|w| err > w.relative_error) {
                    worst = Some(Mismatch {
                        scene: scene_idx,
                        primitive: prim,
                        parameter: PARAMETER_NAMES[param],
                        upstream,
                        analytic: an,
                        numeric: num,
                        relative_error: err,
                    });
                }
            }
        }
    }
    let max_relative_error = worst.as_ref().map_or(0.0, |w| w.relative_error);
    Ok(GradcheckReport {
        scenes: cfg.scenes,
        checked,
        max_relative_error,
        passed: max_relative_error < cfg.tolerance,
        worst,
    })
}
