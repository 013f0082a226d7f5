//! Greedy merging of primitives into plane instances.
//!
//! Primitives are nodes of an adjacency graph: fused-lattice neighbours
//! within a view, and primitives of different views whose centres are closer
//! than the sum of their largest radii. Edges are visited by increasing
//! normal angle; two components are joined when their fitted planes agree
//! within the angle threshold, each centroid lies within the distance
//! threshold of the other component's plane, and every member centre stays
//! within the distance threshold of the joint refit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{plane_angle_deg, View, Vec3};
use crate::maps::IdMap;
use crate::primitive::{fused_labels, Level, PlacedPrimitive, SelectedPrimitive};
use crate::splat::render_hard;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeThresholds {
    /// Largest point-to-plane distance, in metres.
    pub distance: f64,
    /// Largest angle between plane normals, in degrees.
    pub angle_deg: f64,
}

impl Default for MergeThresholds {
    fn default() -> Self {
        MergeThresholds {
            distance: 0.1,
            angle_deg: 25.0,
        }
    }
}

impl MergeThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.distance > 0.0 && self.angle_deg > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("merge thresholds must be positive, got {self:?}")))
        }
    }
}

/// A plane `normal . x = offset` (reference frame) and the primitives on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneInstance {
    pub id: u32,
    /// Indices into the selected primitive list, ascending.
    pub members: Vec<usize>,
    pub normal: Vec3,
    pub offset: f64,
    /// Total member rectangle area in square metres.
    pub support: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    /// Sign-insensitive angle between the two normals, in degrees.
    pub angle_deg: f64,
}

/// Reference-frame geometry of one selected primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrimitiveGeometry {
    pub center: Vec3,
    pub normal: Vec3,
    pub axes: [Vec3; 2],
    pub radii: [f64; 2],
}

impl PrimitiveGeometry {
    pub fn area(&self) -> f64 {
        4.0 * self.radii[0] * self.radii[1]
    }
}

fn view_of<'a>(views: &'a [View], s: &SelectedPrimitive) -> Result<&'a View> {
    views
        .get(s.cell.view)
        .ok_or_else(|| Error::invalid(format!("primitive refers to view {} of {}", s.cell.view, views.len())))
}

pub fn placed_primitives(selected: &[SelectedPrimitive], views: &[View]) -> Result<Vec<PlacedPrimitive>> {
    selected
        .iter()
        .map(|s| {
            s.primitive.validate()?;
            let v = view_of(views, s)?;
            Ok(s.primitive.place(&v.intrinsics, &v.pose))
        })
        .collect()
}

pub fn primitive_geometry(selected: &[SelectedPrimitive], views: &[View]) -> Result<Vec<PrimitiveGeometry>> {
    placed_primitives(selected, views)?
        .iter()
        .map(|p| {
            let r = crate::geometry::quat_to_rotation(&p.orientation)?;
            Ok(PrimitiveGeometry {
                center: p.center(),
                normal: r.column(2).into_owned(),
                axes: [r.column(0).into_owned(), r.column(1).into_owned()],
                radii: p.radii,
            })
        })
        .collect()
}

fn edge(a: usize, b: usize, geo: &[PrimitiveGeometry]) -> Edge {
    let (a, b) = (a.min(b), a.max(b));
    Edge {
        a,
        b,
        angle_deg: plane_angle_deg(&geo[a].normal, &geo[b].normal),
    }
}

/// Adjacency edges, each listed once with `a < b`, sorted by `(a, b)`.
pub fn adjacency_graph(selected: &[SelectedPrimitive], views: &[View]) -> Result<Vec<Edge>> {
    let geo = primitive_geometry(selected, views)?;
    let mut pairs = Vec::new();
    for (vi, v) in views.iter().enumerate() {
        let stride = Level::High.stride();
        let (rows, cols) = (v.intrinsics.height / stride, v.intrinsics.width / stride);
        let labels = fused_labels(selected, vi, rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let Some(here) = *labels.get(c, r) else { continue };
                for (nc, nr) in [(c + 1, r), (c, r + 1)] {
                    if nc < cols && nr < rows {
                        if let Some(there) = *labels.get(nc, nr) {
                            if there != here {
                                pairs.push((here.min(there), here.max(there)));
                            }
                        }
                    }
                }
            }
        }
    }
    for i in 0..selected.len() {
        for j in i + 1..selected.len() {
            if selected[i].cell.view == selected[j].cell.view {
                continue;
            }
            let reach = geo[i].radii[0].max(geo[i].radii[1]) + geo[j].radii[0].max(geo[j].radii[1]);
            if (geo[i].center - geo[j].center).norm() <= reach {
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    Ok(pairs.into_iter().map(|(a, b)| edge(a, b, &geo)).collect())
}

struct Component {
    members: Vec<usize>,
    area: f64,
    /// Area-weighted sum of sign-aligned normals.
    normal_sum: Vec3,
    /// Area-weighted sum of centres.
    center_sum: Vec3,
}

impl Component {
    fn normal(&self) -> Vec3 {
        self.normal_sum.normalize()
    }

    fn centroid(&self) -> Vec3 {
        self.center_sum / self.area
    }

    fn offset(&self) -> f64 {
        self.normal().dot(&self.centroid())
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Joint refit of two components, or `None` when they must stay apart.
fn try_join(a: &Component, b: &Component, geo: &[PrimitiveGeometry], th: &MergeThresholds) -> Option<(Vec3, Vec3)> {
    let (na, nb) = (a.normal(), b.normal());
    if plane_angle_deg(&na, &nb) > th.angle_deg {
        return None;
    }
    if (nb.dot(&a.centroid()) - b.offset()).abs() > th.distance || (na.dot(&b.centroid()) - a.offset()).abs() > th.distance {
        return None;
    }
    let aligned = if a.normal_sum.dot(&b.normal_sum) < 0.0 { -b.normal_sum } else { b.normal_sum };
    let normal_sum = a.normal_sum + aligned;
    let center_sum = a.center_sum + b.center_sum;
    let n = normal_sum.normalize();
    let offset = n.dot(&(center_sum / (a.area + b.area)));
    let fits = a.members.iter().chain(&b.members).all(|&m| (n.dot(&geo[m].center) - offset).abs() <= th.distance);
    fits.then_some((normal_sum, center_sum))
}

/// Greedy merge. Instances are numbered from 1 in order of their smallest
/// member index; every primitive ends up in exactly one instance.
pub fn merge_planes(selected: &[SelectedPrimitive], views: &[View], edges: &[Edge], th: &MergeThresholds) -> Result<Vec<PlaneInstance>> {
    th.validate()?;
    let geo = primitive_geometry(selected, views)?;
    let n = geo.len();
    if let Some(e) = edges.iter().find(|e| e.a >= n || e.b >= n) {
        return Err(Error::invalid(format!("edge ({}, {}) names a primitive outside 0..{n}", e.a, e.b)));
    }
    let mut comps: Vec<Option<Component>> = geo
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let area = g.area();
            Some(Component {
                members: vec![i],
                area,
                normal_sum: g.normal * area,
                center_sum: g.center * area,
            })
        })
        .collect();
    let mut uf = UnionFind { parent: (0..n).collect() };
    let mut order: Vec<&Edge> = edges.iter().collect();
    // Ties are broken by cell identity so the visiting order does not
    // depend on how the primitive list is ordered.
    let key = |e: &Edge| {
        let (ca, cb) = (selected[e.a].cell, selected[e.b].cell);
        (ca.min(cb), ca.max(cb), e.a, e.b)
    };
    order.sort_by(|x, y| x.angle_deg.total_cmp(&y.angle_deg).then_with(|| key(x).cmp(&key(y))));
    for e in order {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        if ra == rb {
            continue;
        }
        let (keep, gone) = (ra.min(rb), ra.max(rb));
        let joined = try_join(comps[keep].as_ref().unwrap(), comps[gone].as_ref().unwrap(), &geo, th);
        if let Some((normal_sum, center_sum)) = joined {
            let g = comps[gone].take().unwrap();
            let k = comps[keep].as_mut().unwrap();
            k.members.extend(g.members);
            k.area += g.area;
            k.normal_sum = normal_sum;
            k.center_sum = center_sum;
            uf.parent[gone] = keep;
        }
    }
    let mut out: Vec<PlaneInstance> = comps
        .into_iter()
        .flatten()
        .map(|mut c| {
            c.members.sort_unstable();
            PlaneInstance {
                id: 0,
                normal: c.normal(),
                offset: c.offset(),
                support: c.area,
                members: c.members,
            }
        })
        .collect();
    out.sort_by_key(|p| p.members[0]);
    for (i, p) in out.iter_mut().enumerate() {
        p.id = i as u32 + 1;
    }
    Ok(out)
}

/// Per-view instance-id maps from a closest-hit render of all selected
/// primitives; 0 marks pixels covered by none.
pub fn instance_maps(instances: &[PlaneInstance], selected: &[SelectedPrimitive], views: &[View]) -> Result<Vec<IdMap>> {
    let prims = placed_primitives(selected, views)?;
    let mut owner = vec![0u32; prims.len()];
    for inst in instances {
        for &m in &inst.members {
            let slot = owner
                .get_mut(m)
                .ok_or_else(|| Error::invalid(format!("instance {} names primitive {m} of {}", inst.id, prims.len())))?;
            *slot = inst.id;
        }
    }
    views
        .iter()
        .map(|v| {
            let maps = render_hard(&prims, &v.intrinsics, &v.pose)?;
            Ok(maps.instance.expect("hard renders carry ids").map(|i| if *i == 0 { 0 } else { owner[*i as usize - 1] }))
        })
        .collect()
}

/// Stratified samples over every member rectangle, `ceil(area * density)`
/// per member, tagged with their instance id.
pub fn sample_points(
    instances: &[PlaneInstance],
    selected: &[SelectedPrimitive],
    views: &[View],
    density: f64,
    seed: u64,
) -> Result<Vec<(u32, Vec3)>> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::invalid(format!("sampling density must be positive, got {density}")));
    }
    let geo = primitive_geometry(selected, views)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for inst in instances {
        for &m in &inst.members {
            let g = geo.get(m).ok_or_else(|| Error::invalid(format!("instance {} names primitive {m}", inst.id)))?;
            out.extend(sample_rectangle(g, density, &mut rng).into_iter().map(|p| (inst.id, p)));
        }
    }
    Ok(out)
}

fn sample_rectangle(g: &PrimitiveGeometry, density: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let count = (g.area() * density).ceil() as usize;
    if count == 0 {
        return Vec::new();
    }
    let aspect = g.radii[0] / g.radii[1];
    let nx = ((count as f64 * aspect).sqrt().ceil() as usize).clamp(1, count);
    let ny = count.div_ceil(nx);
    let mut strata: Vec<usize> = (0..nx * ny).collect();
    // Partial Fisher-Yates: the first `count` strata are a uniform subset.
    for i in 0..count {
        let j = rng.gen_range(i..strata.len());
        strata.swap(i, j);
    }
    strata[..count]
        .iter()
        .map(|&s| {
            let (ix, iy) = (s % nx, s / nx);
            let u = ((ix as f64 + rng.gen::<f64>()) / nx as f64) * 2.0 - 1.0;
            let v = ((iy as f64 + rng.gen::<f64>()) / ny as f64) * 2.0 - 1.0;
            g.center + g.axes[0] * (u * g.radii[0]) + g.axes[1] * (v * g.radii[1])
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::fit::init_grids;
    use crate::geometry::{CameraIntrinsics, Quaternion, RigidTransform};
    use crate::primitive::{hppa_select, CellRef, PlanarPrimitive, PrimitiveGrid};
    use crate::synth::{synth_scene, SynthSpec};

    fn view(k: CameraIntrinsics) -> View {
        View {
            intrinsics: k,
            pose: RigidTransform::IDENTITY,
        }
    }

    fn low_selection(k: &CameraIntrinsics, f: impl Fn(usize, usize, f64, f64) -> (f64, Quaternion, [f64; 2])) -> Vec<SelectedPrimitive> {
        let low = PrimitiveGrid::from_fn(Level::Low, k, 0, f).unwrap();
        let high = PrimitiveGrid::from_fn(Level::High, k, 0, |_, _, _, _| (1.0, Quaternion::IDENTITY, [0.1, 0.1])).unwrap();
        hppa_select(&low, &high, f64::INFINITY, &RigidTransform::IDENTITY).unwrap().1
    }

    fn single(cell: CellRef, u: f64, v: f64, depth: f64, q: Quaternion, radii: [f64; 2]) -> SelectedPrimitive {
        SelectedPrimitive {
            cell,
            primitive: PlanarPrimitive {
                anchor_u: u,
                anchor_v: v,
                depth,
                orientation: q,
                radii,
                source_view: cell.view,
                frame: 0,
            },
        }
    }

    fn cell(view: usize, row: usize, col: usize) -> CellRef {
        CellRef {
            view,
            level: Level::Low,
            row,
            col,
        }
    }

    #[test]
    fn full_low_lattice_edge_count() {
        let k = CameraIntrinsics::centered(400.0, 512, 384).unwrap();
        let sel = low_selection(&k, |_, _, _, _| (2.0, Quaternion::IDENTITY, [0.04, 0.04]));
        let edges = adjacency_graph(&sel, &[view(k)]).unwrap();
        assert_eq!(edges.len(), 24 * 31 + 23 * 32);
        assert!(edges.iter().all(|e| e.a < e.b && e.angle_deg == 0.0));
    }

    #[test]
    fn refined_cells_neighbour_their_surroundings() {
        let k = CameraIntrinsics::centered(100.0, 32, 32).unwrap();
        let low = PrimitiveGrid::from_fn(Level::Low, &k, 0, |r, c, _, _| {
            let q = if r == 0 && c == 0 { Quaternion::from_axis_angle(&Vec3::x(), 1.0).unwrap() } else { Quaternion::IDENTITY };
            (2.0, q, [0.1, 0.1])
        })
        .unwrap();
        let high = PrimitiveGrid::from_fn(Level::High, &k, 0, |_, _, _, _| (2.0, Quaternion::IDENTITY, [0.05, 0.05])).unwrap();
        // Every low cell sees the rotated corner cell in its stencil.
        let (mask, sel) = hppa_select(&low, &high, 0.1, &RigidTransform::IDENTITY).unwrap();
        assert_eq!(mask.refined_count(), 3);
        assert_eq!(sel.len(), 1 + 12);
        let edges = adjacency_graph(&sel, &[view(k)]).unwrap();
        // 4x4 high lattice with one 2x2 block fused: 24 lattice edges minus the 4 inside it.
        assert_eq!(edges.len(), 20);
    }

    #[test]
    fn lone_primitive_has_no_edges() {
        let k = CameraIntrinsics::centered(100.0, 32, 32).unwrap();
        let sel = vec![single(cell(0, 0, 0), 8.0, 8.0, 2.0, Quaternion::IDENTITY, [0.1, 0.1])];
        assert!(adjacency_graph(&sel, &[view(k)]).unwrap().is_empty());
    }

    #[test]
    fn overlapping_views_share_cross_view_edges() {
        let k = CameraIntrinsics::centered(100.0, 64, 64).unwrap();
        let second = View {
            intrinsics: k,
            pose: RigidTransform::from_translation(Vec3::new(0.2, 0.0, 0.0)),
        };
        let mut sel = low_selection(&k, |_, _, _, _| (2.0, Quaternion::IDENTITY, [0.16, 0.16]));
        let other = PrimitiveGrid::from_fn(Level::Low, &k, 1, |_, _, _, _| (2.0, Quaternion::IDENTITY, [0.16, 0.16])).unwrap();
        let high = PrimitiveGrid::from_fn(Level::High, &k, 1, |_, _, _, _| (2.0, Quaternion::IDENTITY, [0.08, 0.08])).unwrap();
        sel.extend(hppa_select(&other, &high, f64::INFINITY, &second.pose).unwrap().1);
        let edges = adjacency_graph(&sel, &[view(k), second]).unwrap();
        let cross = edges.iter().filter(|e| sel[e.a].cell.view != sel[e.b].cell.view).count();
        assert!(cross >= 1);
        let instances = merge_planes(&sel, &[view(k), second], &edges, &MergeThresholds::default()).unwrap();
        assert_eq!(instances.len(), 1);
    }

    fn pair(q: Quaternion, offset: f64) -> (Vec<SelectedPrimitive>, Vec<View>) {
        let k = CameraIntrinsics::centered(100.0, 32, 16).unwrap();
        let sel = vec![
            single(cell(0, 0, 0), 8.0, 8.0, 2.0, Quaternion::IDENTITY, [0.16, 0.16]),
            single(cell(0, 0, 1), 24.0, 8.0, 2.0 + offset, q, [0.16, 0.16]),
        ];
        (sel, vec![view(k)])
    }

    #[test]
    fn coplanar_pair_merges() {
        let (sel, views) = pair(Quaternion::IDENTITY, 1e-3);
        let edges = adjacency_graph(&sel, &views).unwrap();
        assert_eq!(edges.len(), 1);
        let inst = merge_planes(&sel, &views, &edges, &MergeThresholds::default()).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].members, vec![0, 1]);
        assert_abs_diff_eq!(inst[0].normal, Vec3::z(), epsilon = 1e-12);
        assert_abs_diff_eq!(inst[0].offset, 2.0005, epsilon = 1e-12);
        assert_abs_diff_eq!(inst[0].support, 2.0 * 0.32 * 0.32, epsilon = 1e-12);
    }

    #[test]
    fn perpendicular_pair_stays_apart() {
        let (sel, views) = pair(Quaternion::from_axis_angle(&Vec3::y(), std::f64::consts::FRAC_PI_2).unwrap(), 0.0);
        let edges = adjacency_graph(&sel, &views).unwrap();
        assert_eq!(merge_planes(&sel, &views, &edges, &MergeThresholds::default()).unwrap().len(), 2);
    }

    #[test]
    fn opposite_normals_are_the_same_plane() {
        let (sel, views) = pair(Quaternion::from_axis_angle(&Vec3::x(), std::f64::consts::PI).unwrap(), 0.0);
        let edges = adjacency_graph(&sel, &views).unwrap();
        let inst = merge_planes(&sel, &views, &edges, &MergeThresholds::default()).unwrap();
        assert_eq!(inst.len(), 1);
        assert_abs_diff_eq!(inst[0].normal.dot(&Vec3::z()).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn parallel_offset_pair_stays_apart() {
        let (sel, views) = pair(Quaternion::IDENTITY, 0.3);
        let edges = adjacency_graph(&sel, &views).unwrap();
        assert_eq!(merge_planes(&sel, &views, &edges, &MergeThresholds::default()).unwrap().len(), 2);
    }

    fn box_selection(spec: &SynthSpec) -> (Vec<SelectedPrimitive>, Vec<View>, usize) {
        let scene = synth_scene(2, spec).unwrap();
        let v = &scene.views[0];
        let (low, high) = init_grids(&v.depth, &v.normal, &v.intrinsics, 0, &v.pose).unwrap();
        let (_, sel) = hppa_select(&low, &high, 0.5, &v.pose).unwrap();
        let faces: BTreeSet<u32> = v.instance.as_slice().iter().copied().filter(|i| *i > 0).collect();
        (sel, vec![View { intrinsics: v.intrinsics, pose: v.pose }], faces.len())
    }

    #[test]
    fn box_faces_become_instances() {
        let (sel, views, faces) = box_selection(&SynthSpec::default());
        assert_eq!(faces, 5);
        let edges = adjacency_graph(&sel, &views).unwrap();
        let inst = merge_planes(&sel, &views, &edges, &MergeThresholds::default()).unwrap();
        assert_eq!(inst.len(), faces, "{:?}", inst.iter().map(|i| i.members.len()).collect::<Vec<_>>());
        let covered: usize = inst.iter().map(|i| i.members.len()).sum();
        assert_eq!(covered, sel.len());
        let geo = primitive_geometry(&sel, &views).unwrap();
        for i in &inst {
            assert_abs_diff_eq!(i.normal.norm(), 1.0, epsilon = 1e-12);
            for &m in &i.members {
                assert!((i.normal.dot(&geo[m].center) - i.offset).abs() <= 0.1);
            }
        }
    }

    #[test]
    fn raising_thresholds_never_adds_instances() {
        let (sel, views, _) = box_selection(&SynthSpec {
            extra_planes: 2,
            ..SynthSpec::default()
        });
        let edges = adjacency_graph(&sel, &views).unwrap();
        let count = |d: f64, a: f64| {
            merge_planes(&sel, &views, &edges, &MergeThresholds { distance: d, angle_deg: a })
                .unwrap()
                .len()
        };
        let mut prev = usize::MAX;
        for a in [1.0, 5.0, 10.0, 25.0, 45.0, 90.0] {
            let c = count(0.1, a);
            assert!(c <= prev);
            prev = c;
        }
        let mut prev = usize::MAX;
        for d in [0.01, 0.05, 0.1, 0.3, 1.0] {
            let c = count(d, 25.0);
            assert!(c <= prev);
            prev = c;
        }
    }

    fn partition(inst: &[PlaneInstance], cells: &[CellRef]) -> BTreeSet<BTreeSet<CellRef>> {
        inst.iter().map(|i| i.members.iter().map(|&m| cells[m]).collect()).collect()
    }

    #[test]
    fn merge_ignores_primitive_order() {
        let (sel, views, _) = box_selection(&SynthSpec {
            extra_planes: 1,
            ..SynthSpec::default()
        });
        let th = MergeThresholds::default();
        let edges = adjacency_graph(&sel, &views).unwrap();
        let a = merge_planes(&sel, &views, &edges, &th).unwrap();
        let mut shuffled = sel.clone();
        shuffled.reverse();
        shuffled.rotate_left(17);
        let edges2 = adjacency_graph(&shuffled, &views).unwrap();
        let b = merge_planes(&shuffled, &views, &edges2, &th).unwrap();
        let cells = |s: &[SelectedPrimitive]| s.iter().map(|p| p.cell).collect::<Vec<_>>();
        assert_eq!(partition(&a, &cells(&sel)), partition(&b, &cells(&shuffled)));
    }

    #[test]
    fn instance_maps_cover_and_relabel() {
        let k = CameraIntrinsics::centered(40.0, 32, 16).unwrap();
        let views = [view(k)];
        let sel = vec![single(cell(0, 0, 0), 16.0, 8.0, 2.0, Quaternion::IDENTITY, [5.0, 5.0])];
        let one = vec![PlaneInstance {
            id: 1,
            members: vec![0],
            normal: Vec3::z(),
            offset: 2.0,
            support: 100.0,
        }];
        let maps = instance_maps(&one, &sel, &views).unwrap();
        assert!(maps[0].as_slice().iter().all(|i| *i == 1));
        let none = instance_maps(&[], &[], &views).unwrap();
        assert!(none[0].as_slice().iter().all(|i| *i == 0));

        let (sel, views, _) = box_selection(&SynthSpec::default());
        let edges = adjacency_graph(&sel, &views).unwrap();
        let inst = merge_planes(&sel, &views, &edges, &MergeThresholds::default()).unwrap();
        let base = instance_maps(&inst, &sel, &views).unwrap();
        let mut permuted = inst.clone();
        permuted.reverse();
        let n = permuted.len() as u32;
        for p in permuted.iter_mut() {
            p.id = n + 1 - p.id;
        }
        let other = instance_maps(&permuted, &sel, &views).unwrap();
        let relabel: Vec<u32> = base[0].as_slice().iter().map(|i| if *i == 0 { 0 } else { n + 1 - i }).collect();
        assert_eq!(relabel, other[0].as_slice());
    }

    #[test]
    fn unit_square_sampling() {
        let k = CameraIntrinsics::centered(100.0, 32, 16).unwrap();
        let views = [view(k)];
        let sel = vec![single(cell(0, 0, 0), 16.0, 8.0, 3.0, Quaternion::from_axis_angle(&Vec3::y(), 0.3).unwrap(), [0.5, 0.5])];
        let g = primitive_geometry(&sel, &views).unwrap()[0];
        let inst = vec![PlaneInstance {
            id: 4,
            members: vec![0],
            normal: g.normal,
            offset: g.normal.dot(&g.center),
            support: 1.0,
        }];
        let pts = sample_points(&inst, &sel, &views, 100.0, 9).unwrap();
        assert_eq!(pts.len(), 100);
        assert_eq!(pts, sample_points(&inst, &sel, &views, 100.0, 9).unwrap());
        for (id, p) in &pts {
            assert_eq!(*id, 4);
            assert!((g.normal.dot(p) - inst[0].offset).abs() < 1e-9);
        }
        let twice = sample_points(&inst, &sel, &views, 200.0, 9).unwrap();
        assert_eq!(twice.len(), 200);
        let mean = pts.iter().fold(Vec3::zeros(), |a, (_, p)| a + p) / pts.len() as f64;
        // Uniform on a side of length 1: per-axis sd of the mean is 1/sqrt(12 N).
        let sigma = 1.0 / (12.0 * pts.len() as f64).sqrt();
        for axis in g.axes {
            assert!((mean - g.center).dot(&axis).abs() < 3.0 * sigma);
        }
        assert!(sample_points(&inst, &sel, &views, 0.0, 1).is_err());
    }
}
