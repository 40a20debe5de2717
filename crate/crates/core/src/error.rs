//! Error types shared across the compiler and VM.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("parse error at {line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("type error: {msg}{}", ctx_suffix(.context))]
pub struct TypeError {
    pub msg: String,
    /// Printed form of the offending expression, when available.
    pub context: Option<String>,
}

fn ctx_suffix(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" in `{c}`"),
        None => String::new(),
    }
}

impl TypeError {
    pub fn new(msg: impl Into<String>) -> Self {
        TypeError { msg: msg.into(), context: None }
    }

    /// Attaches surrounding context, keeping the innermost one on nesting.
    pub fn with_context(mut self, ctx: impl Into<String>) -> Self {
        if self.context.is_none() {
            self.context = Some(ctx.into());
        }
        self
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVar(String),
    #[error("unknown operator `{0}`")]
    UnknownOp(String),
    #[error("shape mismatch in `{op}`: {msg}")]
    ShapeMismatch { op: String, msg: String },
    #[error("arange step must be nonzero")]
    ZeroStep,
    #[error("take index {index} out of range for axis extent {extent}")]
    IndexOutOfRange { index: i64, extent: usize },
    #[error("no match arm for constructor tag {0}")]
    NoMatchArm(u32),
    #[error("condition is not a scalar")]
    NonScalarCondition,
    #[error("argument count mismatch for `{0}`")]
    ArityMismatch(String),
    #[error("argument {index} does not fit parameter type: {msg}")]
    ArgType { index: usize, msg: String },
    #[error("read of poisoned bytes in storage block {block} at offset {offset}")]
    PoisonedRead { block: usize, offset: usize },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PlaceError {
    #[error("device contradiction: {a} (from {a_src}) vs {b} (from {b_src})")]
    Contradiction { a: String, a_src: String, b: String, b_src: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CodegenError {
    #[error("operator `{0}` has no kernel lowering")]
    NotLowerable(String),
    #[error("unsupported kernel signature for `{op}`: {msg}")]
    BadSignature { op: String, msg: String },
    #[error("schedule search space is empty")]
    EmptySpace,
    #[error("requested top-{k} but only {found} candidates were evaluated")]
    NotEnoughCandidates { k: usize, found: usize },
    #[error("kernel is tiled by {got} on that axis, expected {expected}")]
    TileMismatch { expected: u32, got: u32 },
    #[error("dispatch extent must be positive, got {0}")]
    BadExtent(i64),
    #[error("kernel execution failed: {0}")]
    Exec(String),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange { what: &'static str, index: u64, limit: u64 },
    #[error("invalid {what} code {code}")]
    BadCode { what: &'static str, code: u64 },
    #[error("jump target {target} outside function of length {len}")]
    BadJumpTarget { target: i64, len: usize },
    #[error("unregistered primitive `{0}` referenced by executable")]
    UnknownPrimitive(String),
    #[error("trailing garbage after executable")]
    TrailingBytes,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum VmError {
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("primitive `{0}` is already registered")]
    DuplicateKernel(String),
    #[error("read of register {0} before any write")]
    EmptyRegister(u32),
    #[error("register {reg} exceeds declared frame size {size}")]
    RegisterOverflow { reg: u32, size: u32 },
    #[error("operand has wrong object kind: expected {expected}")]
    WrongKind { expected: &'static str },
    #[error("storage block {0} used after free")]
    UseAfterFree(u64),
    #[error("double free of storage block {0}")]
    DoubleFree(u64),
    #[error("tensor region {offset}+{len} exceeds storage of {size} bytes")]
    StorageOverflow { offset: usize, len: usize, size: usize },
    #[error("tensor on {found} where {expected} was required")]
    WrongDevice { expected: String, found: String },
    #[error("runtime shape check failed in `{op}`: {msg}")]
    ShapeCheck { op: String, msg: String },
    #[error("reshape of {elems} elements to shape with {new_elems}")]
    BadReshape { elems: usize, new_elems: usize },
    #[error("main takes {expected} arguments, got {got}")]
    BadArgCount { expected: usize, got: usize },
    #[error("primitive `{0}` failed: {1}")]
    Primitive(String, String),
    #[error("kernel dispatch: extent {extent} invalid for tile {tile}")]
    BadExtent { extent: i64, tile: u32 },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Place(#[from] PlaceError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Other(String),
}
