//! Cycle-level simulator of a GPU ray-tracing unit with a tree traversal
//! prefetcher.
//!
//! The pipeline: [`scene`] produces triangles and rays, [`bvh`] builds a flat
//! byte-addressed 6-ary BVH, [`rtunit`] traverses it per thread, [`prefetch`]
//! watches stack events and emits node prefetches, [`memhier`] times every
//! 32B access through L1, L2 and DRAM, and [`metrics`] turns the counters into
//! accuracy, coverage, efficiency and MPKI. [`sim`] ties them together in the
//! cycle loop; [`config`] and [`report`] handle inputs and outputs.

pub mod bvh;
pub mod config;
pub mod error;
pub mod intersect;
pub mod math;
pub mod memhier;
pub mod metrics;
pub mod prefetch;
pub mod report;
pub mod rtunit;
pub mod scene;
pub mod sim;

pub use bvh::{Aabb, BvhNode, FlatBvh, TreeSpec};
pub use config::{parse_config, parse_config_str, SceneSource, SimConfig};
pub use error::{Error, Result};
pub use intersect::HitRecord;
pub use math::Vec3;
pub use metrics::{Level, StatsLedger};
pub use prefetch::{Arbitration, Intensity, PrefetchPolicy};
pub use report::{run_pair, run_sweep, SweepAxis};
pub use rtunit::{RtUnitConfig, StackEvent, TraversalOrder};
pub use scene::{Ray, Triangle};
pub use sim::{run_experiment, run_with_bvh, HitBuffer, RunOptions, RunOutput};
