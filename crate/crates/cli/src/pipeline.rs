use std::path::{Path, PathBuf};

use anyhow::Context;
use planesplat::fit::{fit_grids, initial_selection, FitTarget};
use planesplat::io::{self, GridPair, SceneFile, ViewEntry, ViewMaps};
use planesplat::merge::{adjacency_graph, instance_maps, merge_planes, placed_primitives};
use planesplat::metrics::MetricTable;
use planesplat::primitive::hppa_select;
use planesplat::splat::{render as soft_render, render_hard};
use planesplat::synth::{synth_scene, SynthSpec};
use planesplat::SelectionMask;
use serde::Serialize;

use crate::config::Config;
use crate::{FitArgs, Format, MergeArgs, RenderArgs, RenderMode, SelectArgs, SynthArgs, UsageError};

pub fn emit<T: Serialize>(value: &T, format: Format, table: impl FnOnce() -> String) -> anyhow::Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
        Format::Table => print!("{}", table()),
    }
    Ok(())
}

/// Aligned `key value` rows for a flat report.
pub fn rows_table(rows: Vec<(String, f64)>) -> String {
    struct Rows(Vec<(String, f64)>);
    impl MetricTable for Rows {
        fn rows(&self) -> Vec<(String, f64)> {
            self.0.clone()
        }
    }
    Rows(rows).table()
}

pub fn load_scene(path: &Path) -> anyhow::Result<(SceneFile, Vec<ViewMaps>)> {
    let scene = io::read_scene(path).with_context(|| format!("reading scene {}", path.display()))?;
    let maps = io::load_view_maps(path, &scene)?;
    Ok((scene, maps))
}

fn targets(scene: &SceneFile, maps: &[ViewMaps]) -> Vec<FitTarget> {
    scene
        .views
        .iter()
        .zip(maps)
        .map(|(v, m)| FitTarget {
            intrinsics: v.intrinsics,
            pose: v.pose,
            depth: m.depth.clone(),
            normal: m.normal.clone(),
        })
        .collect()
}

/// Re-expresses a map path of `from` (relative to its scene file) for a
/// scene file written at `to`: relative when the map sits below the new
/// scene's directory, absolute otherwise.
fn rebase(from: &Path, to: &Path, rel: &Path) -> anyhow::Result<PathBuf> {
    let abs = from.parent().unwrap_or(Path::new("")).join(rel);
    let abs = abs.canonicalize().with_context(|| format!("locating {}", abs.display()))?;
    let dir = to.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let dir = dir.canonicalize()?;
    Ok(abs.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(abs))
}

fn rebased_scene(scene: &SceneFile, from: &Path, to: &Path) -> anyhow::Result<SceneFile> {
    let mut out = scene.clone();
    for v in &mut out.views {
        v.depth = rebase(from, to, &v.depth)?;
        v.normal = rebase(from, to, &v.normal)?;
        if let Some(i) = &v.instance {
            v.instance = Some(rebase(from, to, i)?);
        }
    }
    Ok(out)
}

/// Fills in `scene.selected` when it is empty, from its grids if present
/// and from grids initialized on the maps otherwise.
fn ensure_selection(scene: &mut SceneFile, maps: &[ViewMaps], g_th: f64) -> anyhow::Result<Vec<SelectionMask>> {
    if !scene.selected.is_empty() {
        return Ok(Vec::new());
    }
    let mut masks = Vec::new();
    if scene.grids.is_empty() {
        for (i, t) in targets(scene, maps).iter().enumerate() {
            let (low, high, mask, selected) = initial_selection(t, i, g_th)?;
            scene.grids.push(GridPair { low, high });
            scene.selected.extend(selected);
            masks.push(mask);
        }
    } else {
        if scene.grids.len() != scene.views.len() {
            anyhow::bail!("scene has {} grid pairs for {} views", scene.grids.len(), scene.views.len());
        }
        for (g, v) in scene.grids.iter().zip(&scene.views) {
            let (mask, selected) = hppa_select(&g.low, &g.high, g_th, &v.pose)?;
            scene.selected.extend(selected);
            masks.push(mask);
        }
    }
    Ok(masks)
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing room spec {}", p.display()))?,
        None => SynthSpec::default(),
    };
    spec.views = a.views.unwrap_or(spec.views);
    spec.extra_planes = a.extra_planes.unwrap_or(spec.extra_planes);
    spec.width = a.width.unwrap_or(spec.width);
    spec.height = a.height.unwrap_or(spec.height);
    spec.focal = a.focal.unwrap_or(spec.focal);
    let scene = synth_scene(a.seed, &spec)?;
    let mut entries = Vec::new();
    for (i, v) in scene.views.iter().enumerate() {
        let names = [format!("view{i}_depth.pfm"), format!("view{i}_normal.pfm"), format!("view{i}_instance.pgm")];
        io::write_depth(&a.out.join(&names[0]), &v.depth)?;
        io::write_normal(&a.out.join(&names[1]), &v.normal)?;
        io::write_ids(&a.out.join(&names[2]), &v.instance)?;
        let [depth, normal, instance] = names.map(PathBuf::from);
        entries.push(ViewEntry {
            intrinsics: v.intrinsics,
            pose: v.pose,
            depth,
            normal,
            instance: Some(instance),
        });
    }
    let mut file = SceneFile::new(entries);
    file.instances = scene.plane_instances();
    let path = a.out.join("scene.json");
    io::write_scene(&path, &file)?;
    println!("{}", path.display());
    Ok(())
}

pub fn render(a: &RenderArgs, cfg: &Config) -> anyhow::Result<()> {
    let (mut scene, maps) = load_scene(&a.scene)?;
    if a.view >= scene.views.len() {
        return Err(UsageError(format!("view {} out of range; the scene has {}", a.view, scene.views.len())).into());
    }
    if scene.selected.is_empty() && scene.grids.is_empty() {
        anyhow::bail!("scene has neither grids nor selected primitives to render");
    }
    ensure_selection(&mut scene, &maps, a.g_th.unwrap_or(cfg.fit.g_th))?;
    let prims = placed_primitives(&scene.selected, &scene.cameras())?;
    let v = &scene.views[a.view];
    let out = match a.mode {
        RenderMode::Soft => soft_render(&prims, &v.intrinsics, &v.pose, &cfg.fit.render)?,
        RenderMode::Hard => render_hard(&prims, &v.intrinsics, &v.pose)?,
    };
    io::write_depth(&a.out.join("depth.pfm"), &out.depth)?;
    io::write_normal(&a.out.join("normal.pfm"), &out.normal)?;
    if let Some(ids) = &out.instance {
        io::write_ids(&a.out.join("ids.pgm"), ids)?;
    }
    println!("{}", a.out.display());
    Ok(())
}

pub fn fit(a: &FitArgs, cfg: &Config) -> anyhow::Result<()> {
    let (scene, maps) = load_scene(&a.scene)?;
    let mut fc = cfg.fit;
    fc.warmup_iters = a.warmup_iters.unwrap_or(fc.warmup_iters);
    fc.refine_iters = a.refine_iters.unwrap_or(fc.refine_iters);
    fc.lr = a.lr.unwrap_or(fc.lr);
    fc.g_th = a.g_th.unwrap_or(fc.g_th);
    fc.validate().map_err(|e| UsageError(e.to_string()))?;
    let t = targets(&scene, &maps);
    let init = if scene.grids.is_empty() {
        t.iter()
            .enumerate()
            .map(|(i, t)| planesplat::fit::init_grids(&t.depth, &t.normal, &t.intrinsics, i, &t.pose))
            .collect::<planesplat::Result<Vec<_>>>()?
    } else {
        scene.grids.iter().map(|g| (g.low.clone(), g.high.clone())).collect()
    };
    let result = fit_grids(&t, init, &fc)?;
    let mut out = rebased_scene(&scene, &a.scene, &a.out)?;
    out.grids = result.views.iter().map(|v| GridPair { low: v.low.clone(), high: v.high.clone() }).collect();
    out.selected = result.views.iter().flat_map(|v| v.selected.iter().copied()).collect();
    out.instances.clear();
    io::write_scene(&a.out, &out)?;
    let trace = a.trace.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.out.with_file_name(format!("{stem}_loss.csv"))
    });
    std::fs::write(&trace, result.trace.to_csv()).with_context(|| format!("writing {}", trace.display()))?;
    let last = result.trace.entries.last().map_or(f64::NAN, |e| e.loss);
    println!("{} primitives, final loss {last:e}", out.selected.len());
    Ok(())
}

#[derive(Serialize)]
struct SelectReport {
    g_th: f64,
    selected_count: usize,
    views: Vec<ViewSelection>,
}

#[derive(Serialize)]
struct ViewSelection {
    view: usize,
    refined_cells: usize,
    selected_count: usize,
}

pub fn select(a: &SelectArgs, cfg: &Config) -> anyhow::Result<()> {
    let (mut scene, maps) = load_scene(&a.scene)?;
    let g_th = a.g_th.unwrap_or(cfg.fit.g_th);
    if g_th.is_nan() || g_th < 0.0 {
        return Err(UsageError(format!("--g-th must be non-negative, got {g_th}")).into());
    }
    scene.selected.clear();
    scene.instances.clear();
    let masks = ensure_selection(&mut scene, &maps, g_th)?;
    let report = SelectReport {
        g_th,
        selected_count: scene.selected.len(),
        views: masks
            .iter()
            .enumerate()
            .map(|(view, m)| ViewSelection {
                view,
                refined_cells: m.refined_count(),
                selected_count: m.selected_count,
            })
            .collect(),
    };
    if let Some(out) = &a.out {
        let file = rebased_scene(&scene, &a.scene, out)?;
        io::write_scene(out, &file)?;
    }
    emit(&report, a.output.format, || {
        let mut rows = vec![("g_th".to_string(), g_th), ("selected".to_string(), report.selected_count as f64)];
        for v in &report.views {
            rows.push((format!("view {} refined", v.view), v.refined_cells as f64));
            rows.push((format!("view {} selected", v.view), v.selected_count as f64));
        }
        rows_table(rows)
    })
}

#[derive(Serialize)]
struct MergeReport {
    instances: usize,
    primitives: usize,
    id_maps: Vec<PathBuf>,
}

pub fn merge(a: &MergeArgs, cfg: &Config) -> anyhow::Result<()> {
    let (mut scene, maps) = load_scene(&a.scene)?;
    let mut th = cfg.merge;
    th.distance = a.dist.unwrap_or(th.distance);
    th.angle_deg = a.angle.unwrap_or(th.angle_deg);
    th.validate().map_err(|e| UsageError(e.to_string()))?;
    ensure_selection(&mut scene, &maps, a.g_th.unwrap_or(cfg.fit.g_th))?;
    let cameras = scene.cameras();
    let edges = adjacency_graph(&scene.selected, &cameras)?;
    let instances = merge_planes(&scene.selected, &cameras, &edges, &th)?;
    let id_maps = instance_maps(&instances, &scene.selected, &cameras)?;
    let mut out = rebased_scene(&scene, &a.scene, &a.out)?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut written = Vec::new();
    for (i, m) in id_maps.iter().enumerate() {
        let name = PathBuf::from(format!("{stem}_view{i}_planes.pgm"));
        io::write_ids(&a.out.with_file_name(&name), m)?;
        out.views[i].instance = Some(name.clone());
        written.push(name);
    }
    out.instances = instances;
    io::write_scene(&a.out, &out)?;
    let report = MergeReport {
        instances: out.instances.len(),
        primitives: out.selected.len(),
        id_maps: written,
    };
    emit(&report, a.output.format, || {
        rows_table(vec![
            ("instances".to_string(), report.instances as f64),
            ("primitives".to_string(), report.primitives as f64),
        ])
    })
}
