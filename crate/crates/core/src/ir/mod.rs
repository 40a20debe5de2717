//! Program representation: types, the expression tree, concrete syntax
//! (parse and print), and the reference evaluator.

pub mod eval;
pub mod expr;
pub mod parse;
pub mod print;
pub mod types;

pub use eval::{eval_ref, eval_ref_instrumented, pure_close, EvalStats, PureValue, Value};
pub use expr::{
    alpha_eq, free_vars, used_names, walk_expr, walk_module, AdtDef, AttrValue, Attrs, CompositeArg,
    CompositeDef, CompositeMember, Expr, ExprId, FnDef, MatchArm, Module, NodeRef, Param,
    ScalarData, ShapeArg, Stage, TensorLiteral,
};
pub use parse::parse_module;
pub use print::print_module;
pub use types::{DType, Device, Dim, TensorType, Type};
