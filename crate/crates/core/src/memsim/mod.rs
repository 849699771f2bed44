//! Tiling planner and cost model for an L1 scratchpad fed from L2 by a
//! double-buffered DMA.
//!
//! A layer step is lowered to a grouped matrix product ([`workload`]), cut
//! into tiles whose working set fits half of L1 ([`plan`]), and costed with a
//! table of kernel efficiencies ([`efficiency`], [`cost`]). [`exec`] runs the
//! real kernels tile by tile to check the plan against untiled execution, and
//! [`report`] derives memory, lifetime and comparison figures.

pub mod cost;
pub mod efficiency;
pub mod exec;
pub mod hierarchy;
pub mod plan;
pub mod report;
pub mod workload;

pub use cost::{
    bandwidth_sweep, simulate, simulate_steps, sweep_csv, sweet_spot, CostReport, StepCost,
    SweepPoint,
};
pub use efficiency::{KernelEfficiencyTable, KernelKind, Origin, Step};
pub use exec::{execute_tiled, StepOutput};
pub use hierarchy::{Duplex, HierarchyConfig};
pub use plan::{plan_tiles, Tile, TilePlan};
pub use report::{compare_targets, report_lifetime, report_memory, Lifetime, MemoryBreakdown};
pub use workload::{LayerStep, SimLayer, Workload};
