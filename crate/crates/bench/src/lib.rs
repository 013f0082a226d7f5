//! Shared fixtures for the criterion benchmarks in `benches/`.

use planesplat::fit::{initial_selection, FitTarget};
use planesplat::merge::placed_primitives;
use planesplat::synth::{synth_scene, SynthSpec};
use planesplat::{PlacedPrimitive, SelectedPrimitive, View};

/// The synthetic box seen by one camera, with primitives initialized from
/// its ground truth.
pub struct Fixture {
    pub target: FitTarget,
    pub view: View,
    pub selected: Vec<SelectedPrimitive>,
    pub placed: Vec<PlacedPrimitive>,
}

/// `g_th = 0` selects every fine cell: 3072 primitives at 512x384.
pub fn box_fixture(width: usize, height: usize, g_th: f64) -> Fixture {
    let spec = SynthSpec {
        width,
        height,
        focal: width as f64 * 150.0 / 256.0,
        ..SynthSpec::default()
    };
    let scene = synth_scene(0, &spec).expect("valid synthetic spec");
    let v = &scene.views[0];
    let target = FitTarget {
        intrinsics: v.intrinsics,
        pose: v.pose,
        depth: v.depth.clone(),
        normal: v.normal.clone(),
    };
    let (_, _, _, selected) = initial_selection(&target, 0, g_th).expect("box ground truth is valid");
    let view = View {
        intrinsics: v.intrinsics,
        pose: v.pose,
    };
    let placed = placed_primitives(&selected, &[view]).expect("primitives name view 0");
    Fixture {
        target,
        view,
        selected,
        placed,
    }
}
