use std::time::Instant;

use planesplat::fit::{initial_selection, FitTarget};
use planesplat::gradcheck::{self, GradcheckConfig};
use planesplat::merge::placed_primitives;
use planesplat::splat::render;
use planesplat::synth::{synth_scene, SynthSpec};
use planesplat::View;
use serde::Serialize;

use crate::config::Config;
use crate::pipeline::{emit, rows_table};
use crate::{BenchArgs, GradcheckArgs, UsageError};

#[derive(Serialize)]
struct BenchReport {
    primitives: usize,
    width: usize,
    height: usize,
    iterations: usize,
    threads: usize,
    mean_ms: f64,
    min_ms: f64,
    fps: f64,
}

/// Times soft renders of the synthetic box initialized from its own ground
/// truth, with `g_th = 0` selecting every fine cell.
pub fn bench(a: &BenchArgs, cfg: &Config) -> anyhow::Result<()> {
    if a.iters == 0 {
        return Err(UsageError("--iters must be positive".into()).into());
    }
    let spec = SynthSpec {
        width: a.width,
        height: a.height,
        focal: a.width as f64 * 150.0 / 256.0,
        ..SynthSpec::default()
    };
    let scene = synth_scene(cfg.seed, &spec)?;
    let v = &scene.views[0];
    let target = FitTarget {
        intrinsics: v.intrinsics,
        pose: v.pose,
        depth: v.depth.clone(),
        normal: v.normal.clone(),
    };
    let (_, _, _, selected) = initial_selection(&target, 0, a.g_th)?;
    let view = View {
        intrinsics: v.intrinsics,
        pose: v.pose,
    };
    let prims = placed_primitives(&selected, &[view])?;
    render(&prims, &v.intrinsics, &v.pose, &cfg.fit.render)?;
    let mut times = Vec::with_capacity(a.iters);
    for _ in 0..a.iters {
        let t = Instant::now();
        render(&prims, &v.intrinsics, &v.pose, &cfg.fit.render)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    let r = BenchReport {
        primitives: prims.len(),
        width: a.width,
        height: a.height,
        iterations: a.iters,
        threads: rayon::current_num_threads(),
        mean_ms,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        fps: 1e3 / mean_ms,
    };
    emit(&r, a.output.format, || {
        rows_table(vec![
            ("primitives".into(), r.primitives as f64),
            ("threads".into(), r.threads as f64),
            ("mean (ms)".into(), r.mean_ms),
            ("min (ms)".into(), r.min_ms),
            ("frames per second".into(), r.fps),
        ])
    })
}

pub fn gradcheck(a: &GradcheckArgs, cfg: &Config) -> anyhow::Result<()> {
    let gc = GradcheckConfig {
        scenes: a.scenes,
        seed: a.seed,
        params: cfg.fit.render,
        ..GradcheckConfig::default()
    };
    let t = Instant::now();
    let report = gradcheck::run(&gc)?;
    let secs = t.elapsed().as_secs_f64();
    emit(&report, a.output.format, || {
        rows_table(vec![
            ("scenes".into(), report.scenes as f64),
            ("checked".into(), report.checked as f64),
            ("max relative error".into(), report.max_relative_error),
            ("seconds".into(), secs),
        ])
    })
}
