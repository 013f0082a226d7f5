//! Synthetic indoor scenes with exact ground-truth maps.
//!
//! A scene is an axis-aligned box room seen from the inside, optionally
//! furnished with randomly oriented rectangles. View 0 sits at the origin
//! looking down +z (image x right, y down); further views are jittered
//! copies of it. Ground truth comes from closest-hit ray casting, so every
//! valid pixel back-projects exactly onto its plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mat3, Quaternion, RigidTransform, Vec3};
use crate::maps::{DepthMap, IdMap, NormalMap};
use crate::merge::PlaneInstance;
use crate::primitive::PlacedPrimitive;
use crate::splat::render_hard;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Room corners in the frame of view 0.
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub extra_planes: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Per-axis translation range of views after the first, in metres.
    pub baseline: f64,
    /// Largest rotation of views after the first, in degrees.
    pub max_rotation_deg: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            room_min: [-2.0, -1.4, -1.0],
            room_max: [2.0, 1.2, 4.0],
            extra_planes: 0,
            views: 1,
            width: 256,
            height: 192,
            focal: 150.0,
            baseline: 0.3,
            max_rotation_deg: 10.0,
        }
    }
}

/// One rectangle of the scene: the set `n . x = offset` bounded by
/// `|(x - center) . axes[i]| <= half_extents[i]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPlane {
    /// Instance id, starting at 1.
    pub id: u32,
    pub normal: Vec3,
    pub offset: f64,
    pub center: Vec3,
    pub axes: [Vec3; 2],
    pub half_extents: [f64; 2],
}

impl SynthPlane {
    fn new(id: u32, center: Vec3, axis_x: Vec3, axis_y: Vec3, half_extents: [f64; 2]) -> Self {
        let normal = axis_x.cross(&axis_y).normalize();
        SynthPlane {
            id,
            normal,
            offset: normal.dot(&center),
            center,
            axes: [axis_x, axis_y],
            half_extents,
        }
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_extents[0] * self.half_extents[1]
    }

    /// The rectangle as a renderable primitive.
    pub fn as_primitive(&self) -> PlacedPrimitive {
        let m = Mat3::from_columns(&[self.axes[0], self.axes[1], self.normal]);
        PlacedPrimitive {
            origin: Vec3::zeros(),
            center_ray: self.center,
            depth: 1.0,
            orientation: Quaternion::from_rotation_matrix(&m),
            radii: self.half_extents,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthView {
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-reference pose; the reference is view 0.
    pub pose: RigidTransform,
    pub depth: DepthMap,
    /// Unit normals in the camera frame, facing the camera.
    pub normal: NormalMap,
    /// Plane id per pixel, 0 where no plane is hit.
    pub instance: IdMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SynthSpec,
    pub planes: Vec<SynthPlane>,
    pub views: Vec<SynthView>,
}

impl SyntheticScene {
    pub fn plane(&self, id: u32) -> Option<&SynthPlane> {
        self.planes.iter().find(|p| p.id == id)
    }

    /// Ground-truth planes in the form produced by merging, without members.
    pub fn plane_instances(&self) -> Vec<PlaneInstance> {
        self.planes
            .iter()
            .map(|p| PlaneInstance {
                id: p.id,
                members: Vec::new(),
                normal: p.normal,
                offset: p.offset,
                support: p.area(),
            })
            .collect()
    }
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if (0..3).any(|i| !(spec.room_max[i] - spec.room_min[i] > 0.0)) {
        return Err(Error::invalid(format!("room dimensions must be positive, got {:?} .. {:?}", spec.room_min, spec.room_max)));
    }
    if spec.views == 0 {
        return Err(Error::invalid("a synthetic scene needs at least one view"));
    }
    if !(spec.baseline >= 0.0 && spec.max_rotation_deg >= 0.0) {
        return Err(Error::invalid("camera jitter must be non-negative"));
    }
    Ok(())
}

fn box_faces(lo: Vec3, hi: Vec3) -> Vec<SynthPlane> {
    let mid = (lo + hi) * 0.5;
    // Tiny overlap so that no ray slips between two faces at an edge.
    let half = (hi - lo) * (0.5 * (1.0 + 1e-9));
    let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
    // Axes are ordered so that every normal points into the room.
    vec![
        SynthPlane::new(1, Vec3::new(mid.x, mid.y, hi.z), y, x, [half.y, half.x]),
        SynthPlane::new(2, Vec3::new(mid.x, hi.y, mid.z), x, z, [half.x, half.z]),
        SynthPlane::new(3, Vec3::new(mid.x, lo.y, mid.z), z, x, [half.z, half.x]),
        SynthPlane::new(4, Vec3::new(lo.x, mid.y, mid.z), y, z, [half.y, half.z]),
        SynthPlane::new(5, Vec3::new(hi.x, mid.y, mid.z), z, y, [half.z, half.y]),
        SynthPlane::new(6, Vec3::new(mid.x, mid.y, lo.z), x, y, [half.x, half.y]),
    ]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn furniture(id: u32, lo: Vec3, hi: Vec3, rng: &mut ChaCha8Rng) -> SynthPlane {
    let span = hi - lo;
    let center = Vec3::new(
        lo.x + span.x * rng.gen_range(0.25..0.75),
        lo.y + span.y * rng.gen_range(0.3..0.8),
        hi.z - span.z * rng.gen_range(0.15..0.45),
    );
    // Mostly camera-facing so that the rectangle is seen from view 0.
    let tilt = Quaternion::from_axis_angle(&unit_vector(rng), rng.gen_range(0.0..50f64.to_radians())).expect("unit axis");
    let spin = Quaternion::from_axis_angle(&Vec3::z(), rng.gen_range(0.0..std::f64::consts::TAU)).expect("unit axis");
    let r = (tilt * spin).unit_to_matrix();
    let (ax, ay) = (r.column(0).into_owned(), r.column(1).into_owned());
    // Normal toward the camera at the origin.
    let (ax, ay) = if ax.cross(&ay).dot(&center) > 0.0 { (ay, ax) } else { (ax, ay) };
    SynthPlane::new(id, center, ax, ay, [rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5)])
}

fn camera_poses(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<RigidTransform>> {
    let mut poses = vec![RigidTransform::IDENTITY];
    for _ in 1..spec.views {
        let t = Vec3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        ) * spec.baseline;
        let angle = rng.gen_range(0.0..=1.0) * spec.max_rotation_deg.to_radians();
        poses.push(RigidTransform::new(Quaternion::from_axis_angle(&unit_vector(rng), angle)?, t)?);
    }
    for (i, p) in poses.iter().enumerate() {
        let c = p.translation;
        if (0..3).any(|a| !(c[a] > spec.room_min[a] && c[a] < spec.room_max[a])) {
            return Err(Error::invalid(format!("camera {i} at {:?} lies outside the room", c.as_slice())));
        }
    }
    Ok(poses)
}

/// Builds the scene described by `spec`; identical seeds give identical scenes.
pub fn synth_scene(seed: u64, spec: &SynthSpec) -> Result<SyntheticScene> {
    validate(spec)?;
    let intrinsics = CameraIntrinsics::centered(spec.focal, spec.width, spec.height)?;
    let lo = Vec3::from(spec.room_min);
    let hi = Vec3::from(spec.room_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses = camera_poses(spec, &mut rng)?;
    let mut planes = box_faces(lo, hi);
    for i in 0..spec.extra_planes {
        planes.push(furniture(7 + i as u32, lo, hi, &mut rng));
    }
    let prims: Vec<PlacedPrimitive> = planes.iter().map(SynthPlane::as_primitive).collect();
    let views = poses
        .into_iter()
        .map(|pose| {
            let maps = render_hard(&prims, &intrinsics, &pose)?;
            let instance = maps.instance.expect("hard renders carry ids").map(|i| if *i == 0 { 0 } else { planes[*i as usize - 1].id });
            Ok(SynthView {
                intrinsics,
                pose,
                depth: maps.depth,
                normal: maps.normal,
                instance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        planes,
        views,
    })
}
