use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Quaternion;
use crate::gradcheck::random_scene;

fn camera() -> CameraIntrinsics {
    CameraIntrinsics::centered(60.0, 64, 48).unwrap()
}

/// A primitive centred at camera-space point `c`.
fn at(c: Vec3, orientation: Quaternion, radii: [f64; 2]) -> PlacedPrimitive {
    PlacedPrimitive {
        origin: Vec3::zeros(),
        center_ray: c / c.z,
        depth: c.z,
        orientation,
        radii,
    }
}

fn zero_upstream(k: &CameraIntrinsics) -> (DepthMap, NormalMap) {
    (Grid2::filled(k.width, k.height, 0.0), Grid2::filled(k.width, k.height, Vec3::zeros()))
}

fn params() -> RenderParams {
    RenderParams::default()
}

#[test]
fn covering_plane_renders_constant_depth() {
    let k = camera();
    let p = at(Vec3::new(0.0, 0.0, 2.0), Quaternion::IDENTITY, [10.0, 10.0]);
    let maps = render(&[p], &k, &RigidTransform::IDENTITY, &params()).unwrap();
    for row in 0..k.height {
        for col in 0..k.width {
            assert_abs_diff_eq!(*maps.depth.get(col, row), 2.0, epsilon = 1e-5);
            assert_abs_diff_eq!(*maps.normal.get(col, row), Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
            assert!(*maps.coverage.get(col, row) > 0.99);
        }
    }
}

#[test]
fn empty_list_is_all_invalid() {
    let k = camera();
    let maps = render(&[], &k, &RigidTransform::IDENTITY, &params()).unwrap();
    assert!(maps.depth.as_slice().iter().all(|d| *d == 0.0));
    assert!(maps.coverage.as_slice().iter().all(|c| *c == 0.0));
    assert!(maps.normal.as_slice().iter().all(|n| *n == Vec3::zeros()));
    assert!(maps.instance.is_none());
}

#[test]
fn tilted_plane_matches_ray_plane_intersection() {
    let k = camera();
    let q = Quaternion::from_axis_angle(&Vec3::x(), 30f64.to_radians()).unwrap();
    let c = Vec3::new(0.1, -0.05, 2.5);
    let p = at(c, q, [1.2, 0.9]);
    let maps = render(&[p], &k, &RigidTransform::IDENTITY, &params()).unwrap();
    let (s, co) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
    let n = Vec3::new(0.0, -s, co);
    let (vx, vy) = (Vec3::x(), Vec3::new(0.0, co, s));
    let mut interior = 0;
    for row in 0..k.height {
        for col in 0..k.width {
            let xn = (col as f64 + 0.5 - k.cx) / k.fx;
            let yn = (row as f64 + 0.5 - k.cy) / k.fy;
            let z = n.dot(&c) / (n.x * xn + n.y * yn + n.z);
            let hit = Vec3::new(xn * z, yn * z, z) - c;
            let m = (hit.dot(&vx).abs() / 1.2).max(hit.dot(&vy).abs() / 0.9);
            if m < 1.0 - 3.0 / params().edge_sharpness {
                interior += 1;
                assert_abs_diff_eq!(*maps.depth.get(col, row), z, epsilon = 1e-4);
                assert_abs_diff_eq!(*maps.normal.get(col, row), -n, epsilon = 1e-9);
            }
        }
    }
    assert!(interior > 1000);
}

#[test]
fn hard_render_covering_plane_is_exact() {
    let k = camera();
    let p = at(Vec3::new(0.0, 0.0, 2.0), Quaternion::IDENTITY, [10.0, 10.0]);
    let maps = render_hard(&[p], &k, &RigidTransform::IDENTITY).unwrap();
    assert!(maps.depth.as_slice().iter().all(|d| *d == 2.0));
    assert!(maps.instance.unwrap().as_slice().iter().all(|id| *id == 1));
}

#[test]
fn hard_render_nearer_plane_occludes() {
    let k = camera();
    // Left half of the image at z = 1, full frame at z = 2.
    let near = at(Vec3::new(-0.6, 0.0, 1.0), Quaternion::IDENTITY, [0.6, 5.0]);
    let far = at(Vec3::new(0.0, 0.0, 2.0), Quaternion::IDENTITY, [10.0, 10.0]);
    let maps = render_hard(&[far, near], &k, &RigidTransform::IDENTITY).unwrap();
    let ids = maps.instance.unwrap();
    for row in 0..k.height {
        for col in 0..k.width {
            let (want_id, want_depth) = if col < 32 { (2, 1.0) } else { (1, 2.0) };
            assert_eq!(*ids.get(col, row), want_id, "pixel {col},{row}");
            assert_abs_diff_eq!(*maps.depth.get(col, row), want_depth, epsilon = 1e-12);
        }
    }
}

#[test]
fn soft_and_hard_agree_away_from_edges() {
    let k = camera();
    let q = Quaternion::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.4).unwrap();
    let c = Vec3::new(0.05, 0.1, 2.0);
    let p = at(c, q, [0.5, 0.3]);
    let soft = render(&[p], &k, &RigidTransform::IDENTITY, &params()).unwrap();
    let hard = render_hard(&[p], &k, &RigidTransform::IDENTITY).unwrap();
    let r = quat_matrix(&q);
    let (vx, vy, n) = (r.column(0).into_owned(), r.column(1).into_owned(), r.column(2).into_owned());
    let margin = 3.0 / params().edge_sharpness;
    let mut checked = 0;
    for row in 0..k.height {
        for col in 0..k.width {
            let ray = k.pixel_ray(col, row);
            let t = n.dot(&c) / n.dot(&ray);
            let d = ray * t - c;
            let m = (d.dot(&vx).abs() / 0.5).max(d.dot(&vy).abs() / 0.3);
            if (m - 1.0).abs() > margin {
                checked += 1;
                assert!((soft.depth.get(col, row) - hard.depth.get(col, row)).abs() < 1e-3, "pixel {col},{row}");
            }
        }
    }
    assert!(checked > 2000);
}

fn quat_matrix(q: &Quaternion) -> crate::geometry::Mat3 {
    crate::geometry::quat_to_rotation(q).unwrap()
}

#[test]
fn depth_gradient_of_mean_depth_is_one() {
    let k = camera();
    let p = at(Vec3::new(0.0, 0.0, 2.0), Quaternion::IDENTITY, [10.0, 10.0]);
    let npix = (k.width * k.height) as f64;
    let gd = Grid2::filled(k.width, k.height, 1.0 / npix);
    let (_, gn) = zero_upstream(&k);
    let g = render_backward(&[p], &k, &RigidTransform::IDENTITY, &params(), &gd, &gn).unwrap();
    assert_abs_diff_eq!(g.grads[0].depth, 1.0, epsilon = 1e-6);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = random_scene(&mut rng);
    let (gd, gn) = zero_upstream(&scene.intrinsics);
    let g = render_backward(&scene.prims, &scene.intrinsics, &scene.cam_pose, &params(), &gd, &gn).unwrap();
    assert_eq!(g.grads.len(), scene.prims.len());
    assert!(g.grads.iter().all(|g| g.as_array().iter().all(|v| *v == 0.0)));
}

#[test]
fn backward_rejects_resolution_mismatch() {
    let k = camera();
    let p = at(Vec3::new(0.0, 0.0, 2.0), Quaternion::IDENTITY, [1.0, 1.0]);
    let gd = Grid2::filled(32, 48, 0.0);
    let gn = Grid2::filled(64, 48, Vec3::zeros());
    let err = render_backward(&[p], &k, &RigidTransform::IDENTITY, &params(), &gd, &gn);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn non_finite_primitive_is_rejected() {
    let k = camera();
    let mut p = at(Vec3::new(0.0, 0.0, 2.0), Quaternion::IDENTITY, [1.0, 1.0]);
    p.depth = f64::NAN;
    assert!(matches!(render(&[p], &k, &RigidTransform::IDENTITY, &params()), Err(Error::InvalidArgument(_))));
    assert!(matches!(render_hard(&[p], &k, &RigidTransform::IDENTITY), Err(Error::InvalidArgument(_))));
}

#[test]
fn primitive_behind_opaque_surface_is_hidden() {
    let k = camera();
    let front = at(Vec3::new(0.0, 0.0, 2.0), Quaternion::IDENTITY, [0.8, 0.6]);
    let tilt = Quaternion::from_axis_angle(&Vec3::y(), 0.3).unwrap();
    let behind = at(Vec3::new(0.2, 0.0, 3.5), tilt, [2.0, 2.0]);
    let alone = render(&[front], &k, &RigidTransform::IDENTITY, &params()).unwrap();
    let both = render(&[behind, front], &k, &RigidTransform::IDENTITY, &params()).unwrap();
    let mut covered = 0;
    for (i, cov) in alone.coverage.as_slice().iter().enumerate() {
        if *cov > 1.0 - 1e-9 {
            covered += 1;
            assert_abs_diff_eq!(both.depth.as_slice()[i], alone.depth.as_slice()[i], epsilon = 1e-6);
        }
    }
    assert!(covered > 500);
}

fn busy_scene() -> (CameraIntrinsics, RigidTransform, Vec<PlacedPrimitive>) {
    let k = CameraIntrinsics::centered(80.0, 96, 64).unwrap();
    let mut prims = Vec::new();
    for i in 0..12 {
        for j in 0..8 {
            let axis = Vec3::new(1.0, (i * j) as f64 * 0.1, 0.3);
            let q = Quaternion::from_axis_angle(&axis, 0.05 * (i + j) as f64).unwrap();
            let c = Vec3::new(-1.1 + 0.2 * i as f64, -0.7 + 0.2 * j as f64, 2.0 + 0.03 * (i + 2 * j) as f64);
            prims.push(at(c, q, [0.12, 0.13]));
        }
    }
    let pose = RigidTransform::new(Quaternion::from_axis_angle(&Vec3::z(), 0.05).unwrap(), Vec3::new(0.02, 0.0, -0.1)).unwrap();
    (k, pose, prims)
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (k, pose, prims) = busy_scene();
    let gd = Grid2::from_fn(k.width, k.height, |c, r| ((c * 7 + r * 3) % 11) as f64 / 100.0 - 0.05);
    let gn = Grid2::from_fn(k.width, k.height, |c, r| Vec3::new((c % 3) as f64, (r % 5) as f64, 1.0) * 1e-3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let maps = render(&prims, &k, &pose, &params()).unwrap();
            let hard = render_hard(&prims, &k, &pose).unwrap();
            let grads = render_backward(&prims, &k, &pose, &params(), &gd, &gn).unwrap();
            (maps, hard, grads)
        })
    };
    let (a, b, c) = (run(1), run(4), run(3));
    for other in [&b, &c] {
        assert_eq!(a.0, other.0);
        assert_eq!(a.1, other.1);
        let bits = |g: &GradientBuffer| g.grads.iter().flat_map(|p| p.as_array()).map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&a.2), bits(&other.2));
    }
    assert!(a.0.depth.as_slice().iter().filter(|d| **d > 0.0).count() > 1000);
}

#[test]
fn render_params_are_validated() {
    let k = camera();
    for bad in [
        RenderParams { edge_sharpness: 0.0, ..params() },
        RenderParams { coverage_cutoff: 1.0, ..params() },
        RenderParams { max_blend_depth: 0, ..params() },
        RenderParams { max_blend_depth: MAX_BLEND_CAPACITY + 1, ..params() },
    ] {
        assert!(render(&[], &k, &RigidTransform::IDENTITY, &bad).is_err());
    }
}

#[test]
fn blend_window_limits_contributions() {
    let k = camera();
    // Alternating faint layers: with a window of one only the nearest counts.
    let layers: Vec<_> = (0..4).map(|i| at(Vec3::new(0.0, 0.0, 2.0 + i as f64), Quaternion::IDENTITY, [10.0, 10.0])).collect();
    let one = RenderParams { max_blend_depth: 1, ..params() };
    let maps = render(&layers, &k, &RigidTransform::IDENTITY, &one).unwrap();
    assert!(maps.depth.as_slice().iter().all(|d| *d == 2.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn maps_respect_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng);
        let p = params();
        let maps = render(&scene.prims, &scene.intrinsics, &scene.cam_pose, &p).unwrap();
        let again = render(&scene.prims, &scene.intrinsics, &scene.cam_pose, &p).unwrap();
        prop_assert_eq!(&maps, &again);
        for i in 0..maps.depth.len() {
            let cov = maps.coverage.as_slice()[i];
            let d = maps.depth.as_slice()[i];
            let n = maps.normal.as_slice()[i];
            prop_assert!((0.0..=1.0).contains(&cov));
            if cov >= p.coverage_cutoff {
                prop_assert!(d > 0.0);
                prop_assert!((n.norm() - 1.0).abs() < 1e-6);
            } else {
                prop_assert_eq!(d, 0.0);
                prop_assert_eq!(n, Vec3::zeros());
            }
        }
        let hard = render_hard(&scene.prims, &scene.intrinsics, &scene.cam_pose).unwrap();
        let ids = hard.instance.unwrap();
        for i in 0..ids.len() {
            let id = ids.as_slice()[i];
            prop_assert!(id as usize <= scene.prims.len());
            prop_assert_eq!(id > 0, hard.depth.as_slice()[i] > 0.0);
        }
    }
}
