//! Differentiable planar-primitive splatting for metric indoor geometry.
//!
//! The crate covers the whole geometric pipeline: planar primitives and
//! their two-level lattices ([`primitive`]), soft and hard splatting with
//! analytic gradients ([`splat`]), the patch/render/pose objectives
//! ([`loss`]), per-scene fitting and synthetic scenes ([`fit`], [`synth`]),
//! greedy plane merging ([`merge`]), evaluation metrics ([`metrics`]) and
//! the on-disk formats ([`io`]).

pub mod error;
pub mod fit;
pub mod geometry;
pub mod io;
pub mod maps;
pub mod merge;
pub mod metrics;
pub mod primitive;
pub mod gradcheck;
pub mod loss;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Quaternion, RigidTransform, Vec3, View};
pub use maps::{DepthMap, Grid2, IdMap, NormalMap};
pub use primitive::{Level, PlacedPrimitive, PlanarPrimitive, PrimitiveGrid, SelectedPrimitive, SelectionMask};
pub use loss::{LossWeights, MapLoss};
pub use splat::{RenderParams, RenderedMaps};
