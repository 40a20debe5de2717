//! Compiler and register-based bytecode VM for tensor programs whose shapes
//! may be partially unknown until runtime.
//!
//! The pipeline takes a textual module through type inference with gradual
//! (`?`) dimensions, dimension refinement, elementwise fusion, explicit memory
//! planning, device placement, and residue-specialized kernel generation, and
//! finally emits a serializable executable for the VM in [`vm`].
//! [`ir::eval_ref`] is the reference evaluator every stage is checked against.

pub mod codegen;
pub mod devplace;
pub mod error;
pub mod ir;
pub mod memplan;
pub mod ops;
pub mod pipeline;
pub mod shapefn;
pub mod typesys;
pub mod unify;
pub mod vm;
