//! Symbolic kernel generation: lowering ops to loop nests, tiling with
//! boundary guards, proving guards away per residue class of the dynamic
//! extent, and dispatching to the right variant at runtime.

pub mod affine;
pub mod dispatch;
pub mod kernel;
pub mod lower;
pub mod tile;
pub mod tune;

pub use dispatch::{build_dispatch, Dispatch, NativeKernel, Selected};
pub use kernel::{
    alloc_buffers, count_boundary_checks, render, run_kernel, ExecStats, KBuf, KData, KExpr, KOp,
    KStmt, KernelBuf, KernelIR, Schedule, TiledAxis,
};
pub use lower::lower_to_kernel;
pub use tile::{
    apply_schedule, simplify_bounds, specialize_residues, subst_kernel, DispatchTable,
};
pub use tune::{default_top_k, measured_cost, tune_symbolic, CROSS_SHAPES, TUNE_SYM_VALUE};
