use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use planesplat::geometry::{backproject, rotation_error_deg, translation_error_m};
use planesplat::io::{self, SceneFile};
use planesplat::merge::{instance_maps, placed_primitives, sample_points};
use planesplat::metrics::{
    chamfer, depth_metrics, fscore, plane_recall, pose_accuracy, rra_rta as rra_rta_metric, seg_metrics, MetricTable, PlaneLabels,
    DEFAULT_RECALL_DEPTH_THRESHOLDS, DEFAULT_RECALL_NORMAL_THRESHOLDS, DEFAULT_ROTATION_THRESHOLDS, DEFAULT_RRA_RTA_THRESHOLDS,
    DEFAULT_TRANSLATION_THRESHOLDS,
};
use planesplat::splat::render;
use planesplat::{RigidTransform, Vec3};
use serde::Serialize;

use crate::config::Config;
use crate::pipeline::{emit, load_scene, rows_table};
use crate::{EvalDepthArgs, EvalReconArgs, EvalRecallArgs, EvalSegArgs, PosePairArgs, RraRtaArgs, UsageError};

pub fn depth(a: &EvalDepthArgs) -> anyhow::Result<()> {
    let pred = io::read_depth(&a.pred)?;
    let gt = io::read_depth(&a.gt)?;
    let m = depth_metrics(&pred, &gt, None)?;
    emit(&m, a.output.format, || m.table())
}

/// Poses from a scene file or a JSON array of `{rotation, translation}`.
fn read_poses(path: &Path) -> anyhow::Result<Vec<RigidTransform>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.is_object() {
        let scene = io::parse_scene(&text).with_context(|| format!("reading scene {}", path.display()))?;
        return Ok(scene.views.iter().map(|v| v.pose).collect());
    }
    let poses: Vec<RigidTransform> = serde_json::from_value(value).with_context(|| format!("parsing poses in {}", path.display()))?;
    poses
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let norm = p.rotation.norm();
            if (norm - 1.0).abs() > io::QUATERNION_NORM_TOLERANCE {
                anyhow::bail!("pose {i} quaternion has norm {norm}, not 1");
            }
            Ok(RigidTransform::new(p.rotation.normalized()?, p.translation)?)
        })
        .collect()
}

fn aligned_poses(pred: &Path, gt: &Path) -> anyhow::Result<(Vec<RigidTransform>, Vec<RigidTransform>)> {
    let (p, g) = (read_poses(pred)?, read_poses(gt)?);
    if p.len() != g.len() {
        anyhow::bail!("{} predicted poses for {} ground-truth poses", p.len(), g.len());
    }
    Ok((p, g))
}

pub fn pose(a: &PosePairArgs) -> anyhow::Result<()> {
    let (pred, gt) = aligned_poses(&a.pred, &a.gt)?;
    if pred.len() < 2 {
        anyhow::bail!("pose evaluation needs at least two views");
    }
    let errors = (1..pred.len())
        .map(|i| {
            let rp = pred[0].inverse().compose(&pred[i]);
            let rg = gt[0].inverse().compose(&gt[i]);
            Ok((translation_error_m(&rp.translation, &rg.translation), rotation_error_deg(&rp.rotation, &rg.rotation)?))
        })
        .collect::<planesplat::Result<Vec<_>>>()?;
    let trans = a.trans_th.clone().unwrap_or(DEFAULT_TRANSLATION_THRESHOLDS.to_vec());
    let rot = a.rot_th.clone().unwrap_or(DEFAULT_ROTATION_THRESHOLDS.to_vec());
    let m = pose_accuracy(&errors, &trans, &rot)?;
    emit(&m, a.output.format, || m.table())
}

/// Points of a scene: samples of its merged planes when it has them,
/// back-projected depth maps otherwise.
fn scene_points(path: &Path, cfg: &Config) -> anyhow::Result<Vec<Vec3>> {
    let (scene, maps) = load_scene(path)?;
    if !scene.instances.is_empty() && !scene.selected.is_empty() {
        let pts = sample_points(&scene.instances, &scene.selected, &scene.cameras(), cfg.sample_density, cfg.seed)?;
        return Ok(pts.into_iter().map(|(_, p)| p).collect());
    }
    let mut pts = Vec::new();
    for (v, m) in scene.views.iter().zip(&maps) {
        for row in (0..m.depth.height()).step_by(cfg.depth_stride) {
            for col in (0..m.depth.width()).step_by(cfg.depth_stride) {
                let d = *m.depth.get(col, row);
                if d > 0.0 && d.is_finite() {
                    let p = backproject(&v.intrinsics, col as f64 + 0.5, row as f64 + 0.5, d)?;
                    pts.push(v.pose.apply(&p));
                }
            }
        }
    }
    Ok(pts)
}

#[derive(Serialize)]
struct ReconReport {
    chamfer: f64,
    fscore: f64,
    tau: f64,
    pred_points: usize,
    gt_points: usize,
}

pub fn recon(a: &EvalReconArgs, cfg: &Config) -> anyhow::Result<()> {
    let tau = a.tau.unwrap_or(cfg.fscore_tau);
    if !(tau > 0.0) {
        return Err(UsageError(format!("--tau must be positive, got {tau}")).into());
    }
    let pred = scene_points(&a.pred, cfg)?;
    let gt = scene_points(&a.gt, cfg)?;
    let r = ReconReport {
        chamfer: chamfer(&pred, &gt)?,
        fscore: fscore(&pred, &gt, tau)?,
        tau,
        pred_points: pred.len(),
        gt_points: gt.len(),
    };
    emit(&r, a.output.format, || {
        rows_table(vec![
            ("chamfer (m)".into(), r.chamfer),
            (format!("F-score @{tau}m (%)"), r.fscore),
            ("pred points".into(), r.pred_points as f64),
            ("gt points".into(), r.gt_points as f64),
        ])
    })
}

pub fn seg(a: &EvalSegArgs) -> anyhow::Result<()> {
    let pred = io::read_ids(&a.pred)?;
    let gt = io::read_ids(&a.gt)?;
    let m = seg_metrics(&pred, &gt, !a.keep_void)?;
    emit(&m, a.output.format, || m.table())
}

fn normals(scene: &SceneFile) -> BTreeMap<u32, Vec3> {
    scene.instances.iter().map(|i| (i.id, i.normal)).collect()
}

pub fn recall(a: &EvalRecallArgs, cfg: &Config) -> anyhow::Result<()> {
    let (pred, _) = load_scene(&a.pred)?;
    let (gt, gt_maps) = load_scene(&a.gt)?;
    if a.view >= gt.views.len() || a.view >= pred.views.len() {
        return Err(UsageError(format!("view {} is not in both scenes", a.view)).into());
    }
    if pred.instances.is_empty() || pred.selected.is_empty() {
        anyhow::bail!("{} has no merged plane instances", a.pred.display());
    }
    let cameras = pred.cameras();
    let pred_ids = instance_maps(&pred.instances, &pred.selected, &cameras)?.swap_remove(a.view);
    let v = &pred.views[a.view];
    let pred_depth = render(&placed_primitives(&pred.selected, &cameras)?, &v.intrinsics, &v.pose, &cfg.fit.render)?.depth;
    let gt_view = &gt_maps[a.view];
    let gt_ids = gt_view
        .instance
        .as_ref()
        .with_context(|| format!("view {} of {} has no instance map", a.view, a.gt.display()))?;
    let (pn, gn) = (normals(&pred), normals(&gt));
    let p = PlaneLabels {
        ids: &pred_ids,
        depth: &pred_depth,
        normals: &pn,
    };
    let g = PlaneLabels {
        ids: gt_ids,
        depth: &gt_view.depth,
        normals: &gn,
    };
    let depth_th = a.depth_th.clone().unwrap_or(DEFAULT_RECALL_DEPTH_THRESHOLDS.to_vec());
    let normal_th = a.normal_th.clone().unwrap_or(DEFAULT_RECALL_NORMAL_THRESHOLDS.to_vec());
    let m = plane_recall(&p, &g, &depth_th, &normal_th)?;
    emit(&m, a.output.format, || m.table())
}

pub fn rra_rta(a: &RraRtaArgs) -> anyhow::Result<()> {
    let (pred, gt) = aligned_poses(&a.pred, &a.gt)?;
    let th = a.th.clone().unwrap_or(DEFAULT_RRA_RTA_THRESHOLDS.to_vec());
    let m = rra_rta_metric(&pred, &gt, &th)?;
    emit(&m, a.output.format, || m.table())
}
