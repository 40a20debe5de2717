//! Expression tree and module structure.
//!
//! Programs start as pure operator calls over tensors. Memory planning
//! rewrites them into the explicit forms (`alloc_storage`, `alloc_tensor`,
//! `invoke_mut`, `kill`, shape functions, device copies) that later stages
//! and the VM compiler consume; both shapes share this one tree.

use crate::error::TypeError;
use crate::ir::types::{DType, Device, TensorType, Type};
use crate::typesys::{SymDimTable, TypeMap};
use indexmap::IndexMap;
use std::collections::BTreeMap;
use std::fmt;

/// Pre-order index of a node within its module; see [`walk_module`].
pub type ExprId = u32;

#[derive(Debug, Clone, PartialEq)]
pub enum ScalarData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl ScalarData {
    pub fn len(&self) -> usize {
        match self {
            ScalarData::F32(v) => v.len(),
            ScalarData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            ScalarData::F32(_) => DType::F32,
            ScalarData::I64(_) => DType::I64,
        }
    }
}

/// A concrete tensor value: shape plus row-major scalar data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorLiteral {
    pub shape: Vec<usize>,
    pub data: ScalarData,
}

impl TensorLiteral {
    pub fn new(shape: Vec<usize>, data: ScalarData) -> Result<TensorLiteral, TypeError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TypeError::new("tensor dimensions must be at least 1"));
        }
        let elems: usize = shape.iter().product();
        if elems != data.len() {
            return Err(TypeError::new(format!(
                "literal has {} elements but shape {:?} needs {}",
                data.len(),
                shape,
                elems
            )));
        }
        Ok(TensorLiteral { shape, data })
    }

    pub fn scalar_i64(v: i64) -> TensorLiteral {
        TensorLiteral { shape: Vec::new(), data: ScalarData::I64(vec![v]) }
    }

    pub fn scalar_f32(v: f32) -> TensorLiteral {
        TensorLiteral { shape: Vec::new(), data: ScalarData::F32(vec![v]) }
    }

    pub fn vector_i64(v: Vec<i64>) -> TensorLiteral {
        TensorLiteral { shape: vec![v.len()], data: ScalarData::I64(v) }
    }

    pub fn vector_f32(v: Vec<f32>) -> TensorLiteral {
        TensorLiteral { shape: vec![v.len()], data: ScalarData::F32(v) }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn scalar_i64_value(&self) -> Option<i64> {
        match &self.data {
            ScalarData::I64(v) if self.shape.is_empty() => Some(v[0]),
            _ => None,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn ty(&self) -> TensorType {
        TensorType::statics(&self.shape.iter().map(|&d| d as u64).collect::<Vec<_>>(), self.dtype())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttrValue {
    Int(i64),
    Shape(Vec<u64>),
    Dtype(DType),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(i) => write!(f, "{i}"),
            AttrValue::Shape(s) => {
                write!(f, "(")?;
                for (i, d) in s.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{d}")?;
                }
                write!(f, ")")
            }
            AttrValue::Dtype(d) => write!(f, "{d}"),
        }
    }
}

/// Attribute map of a call; ordered so printing is deterministic and a key
/// can appear only once.
pub type Attrs = BTreeMap<String, AttrValue>;

pub fn attr_int(attrs: &Attrs, key: &str) -> Option<i64> {
    match attrs.get(key) {
        Some(AttrValue::Int(i)) => Some(*i),
        _ => None,
    }
}

pub fn attr_shape<'a>(attrs: &'a Attrs, key: &str) -> Option<&'a [u64]> {
    match attrs.get(key) {
        Some(AttrValue::Shape(s)) => Some(s),
        _ => None,
    }
}

pub fn attr_dtype(attrs: &Attrs, key: &str) -> Option<DType> {
    match attrs.get(key) {
        Some(AttrValue::Dtype(d)) => Some(*d),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub ty: Type,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchArm {
    pub ctor: String,
    pub binders: Vec<String>,
    pub body: Expr,
}

/// Shape operand of `alloc_tensor` / `reshape_tensor`: either immediate
/// extents or a reference to an `i64` shape tensor computed at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeArg {
    Imm(Vec<u64>),
    Ref(Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(String),
    Constant(TensorLiteral),
    /// Call of a named operator, module function, or composite.
    Call { op: String, args: Vec<Expr>, attrs: Attrs },
    /// Call of a first-class function value (compiles to `InvokeClosure`).
    Apply { callee: Box<Expr>, args: Vec<Expr> },
    Let { name: String, ty: Option<Type>, value: Box<Expr>, body: Box<Expr> },
    If { cond: Box<Expr>, then_body: Box<Expr>, else_body: Box<Expr> },
    Closure { params: Vec<Param>, ret: Type, body: Box<Expr> },
    Tuple(Vec<Expr>),
    Proj { tuple: Box<Expr>, index: usize },
    Construct { ctor: String, args: Vec<Expr> },
    Match { scrutinee: Box<Expr>, arms: Vec<MatchArm> },

    // Explicit memory and placement forms.
    InvokeMut { op: String, inputs: Vec<Expr>, outputs: Vec<Expr>, attrs: Attrs },
    AllocStorage { size: Box<Expr>, align: u64, device: Option<Device> },
    AllocTensor { storage: Box<Expr>, offset: u64, shape: ShapeArg, dtype: DType },
    Kill(Box<Expr>),
    ShapeOf(Box<Expr>),
    InvokeShapeFunc { op: String, inputs: Vec<Expr>, outputs: Vec<Expr>, attrs: Attrs },
    DeviceCopy { value: Box<Expr>, src: Device, dst: Device },
    ReshapeTensor { tensor: Box<Expr>, shape: ShapeArg },
}

impl Expr {
    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn call(op: &str, args: Vec<Expr>) -> Expr {
        Expr::Call { op: op.to_string(), args, attrs: Attrs::new() }
    }

    pub fn call_attrs(op: &str, args: Vec<Expr>, attrs: Attrs) -> Expr {
        Expr::Call { op: op.to_string(), args, attrs }
    }

    pub fn let_(name: &str, value: Expr, body: Expr) -> Expr {
        Expr::Let { name: name.to_string(), ty: None, value: Box::new(value), body: Box::new(body) }
    }

    /// Statement-position expression: `e;` is a let binding the unused `_`.
    pub fn stmt(value: Expr, body: Expr) -> Expr {
        Expr::let_("_", value, body)
    }

    /// Children in the fixed order used by pre-order numbering; every
    /// traversal in the crate must agree with this order.
    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Var(_) | Expr::Constant(_) => Vec::new(),
            Expr::Call { args, .. } | Expr::Construct { args, .. } | Expr::Tuple(args) => {
                args.iter().collect()
            }
            Expr::Apply { callee, args } => {
                std::iter::once(&**callee).chain(args.iter()).collect()
            }
            Expr::Let { value, body, .. } => vec![value, body],
            Expr::If { cond, then_body, else_body } => vec![cond, then_body, else_body],
            Expr::Closure { body, .. } => vec![body],
            Expr::Proj { tuple, .. } => vec![tuple],
            Expr::Match { scrutinee, arms } => {
                std::iter::once(&**scrutinee).chain(arms.iter().map(|a| &a.body)).collect()
            }
            Expr::InvokeMut { inputs, outputs, .. } | Expr::InvokeShapeFunc { inputs, outputs, .. } => {
                inputs.iter().chain(outputs.iter()).collect()
            }
            Expr::AllocStorage { size, .. } => vec![size],
            Expr::AllocTensor { storage, shape, .. } => match shape {
                ShapeArg::Ref(e) => vec![storage, e],
                ShapeArg::Imm(_) => vec![storage],
            },
            Expr::Kill(e) | Expr::ShapeOf(e) => vec![e],
            Expr::DeviceCopy { value, .. } => vec![value],
            Expr::ReshapeTensor { tensor, shape } => match shape {
                ShapeArg::Ref(e) => vec![tensor, e],
                ShapeArg::Imm(_) => vec![tensor],
            },
        }
    }

    /// Number of nodes in this subtree, matching pre-order id spans.
    pub fn node_count(&self) -> u32 {
        1 + self.children().iter().map(|c| c.node_count()).sum::<u32>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnDef {
    pub name: String,
    pub params: Vec<Param>,
    pub ret: Type,
    pub body: Expr,
}

/// Constructor of an algebraic data type: field types are tensor types or
/// the open `adt` kind for recursive positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AdtDef {
    pub name: String,
    pub fields: Vec<Type>,
}

impl AdtDef {
    pub fn arity(&self) -> usize {
        self.fields.len()
    }
}

/// Argument wiring of one member of a fused composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositeArg {
    /// External input of the composite.
    Input(usize),
    /// Output of an earlier member.
    Member(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeMember {
    pub op: String,
    pub attrs: Attrs,
    pub args: Vec<CompositeArg>,
}

/// A fused chain of elementwise operators; the last member produces the
/// composite's output.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeDef {
    pub n_inputs: usize,
    pub members: Vec<CompositeMember>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Frontend,
    Typed,
    Fused,
    MemPlanned,
    Placed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Frontend => "frontend",
            Stage::Typed => "typed",
            Stage::Fused => "fused",
            Stage::MemPlanned => "memplanned",
            Stage::Placed => "placed",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub functions: IndexMap<String, FnDef>,
    pub adts: IndexMap<String, AdtDef>,
    pub composites: IndexMap<String, CompositeDef>,
    pub stage: Stage,
    /// Types per pre-order node id; populated by `infer_types`.
    pub types: Option<TypeMap>,
    /// Symbolic-dimension classes per node axis; populated by
    /// `refine_and_unify_dims`.
    pub sym_dims: Option<SymDimTable>,
}

impl Module {
    pub fn new() -> Module {
        Module {
            functions: IndexMap::new(),
            adts: IndexMap::new(),
            composites: IndexMap::new(),
            stage: Stage::Frontend,
            types: None,
            sym_dims: None,
        }
    }

    pub fn add_fn(&mut self, f: FnDef) {
        self.functions.insert(f.name.clone(), f);
    }

    pub fn main(&self) -> Option<&FnDef> {
        self.functions.get("main")
    }

    pub fn ctor_tag(&self, ctor: &str) -> Option<u32> {
        self.adts.get_index_of(ctor).map(|i| i as u32)
    }
}

impl Default for Module {
    fn default() -> Self {
        Module::new()
    }
}

/// A node handed to [`walk_module`]: top-level function parameters get ids
/// ahead of their body so refinement and placement can address them.
#[derive(Debug, Clone, Copy)]
pub enum NodeRef<'a> {
    Param { fn_name: &'a str, index: usize, param: &'a Param },
    Expr(&'a Expr),
}

pub fn walk_expr<'a>(e: &'a Expr, next: &mut ExprId, f: &mut dyn FnMut(ExprId, &'a Expr)) {
    f(*next, e);
    *next += 1;
    for c in e.children() {
        walk_expr(c, next, f);
    }
}

/// Pre-order walk assigning every parameter and expression a stable id.
pub fn walk_module<'a>(m: &'a Module, f: &mut dyn FnMut(ExprId, NodeRef<'a>)) {
    let mut next: ExprId = 0;
    for (fn_name, func) in &m.functions {
        for (index, param) in func.params.iter().enumerate() {
            f(next, NodeRef::Param { fn_name, index, param });
            next += 1;
        }
        walk_expr(&func.body, &mut next, &mut |id, e| f(id, NodeRef::Expr(e)));
    }
}

/// Free variables of `e` in first-occurrence order. Callee names of `Call`
/// are operator or module-level names, not variables, and are excluded;
/// first-class function values are referenced through `Apply`.
pub fn free_vars(e: &Expr) -> Vec<String> {
    let mut bound: Vec<String> = Vec::new();
    let mut out: Vec<String> = Vec::new();
    fv(e, &mut bound, &mut out);
    out
}

fn fv(e: &Expr, bound: &mut Vec<String>, out: &mut Vec<String>) {
    match e {
        Expr::Var(name) => {
            if !bound.iter().any(|b| b == name) && !out.iter().any(|o| o == name) {
                out.push(name.clone());
            }
        }
        Expr::Let { name, value, body, .. } => {
            fv(value, bound, out);
            bound.push(name.clone());
            fv(body, bound, out);
            bound.pop();
        }
        Expr::Closure { params, body, .. } => {
            let depth = bound.len();
            bound.extend(params.iter().map(|p| p.name.clone()));
            fv(body, bound, out);
            bound.truncate(depth);
        }
        Expr::Match { scrutinee, arms } => {
            fv(scrutinee, bound, out);
            for arm in arms {
                let depth = bound.len();
                bound.extend(arm.binders.iter().cloned());
                fv(&arm.body, bound, out);
                bound.truncate(depth);
            }
        }
        _ => {
            for c in e.children() {
                fv(c, bound, out);
            }
        }
    }
}

/// Collects every identifier used anywhere in the module, for fresh-name
/// generation in passes.
pub fn used_names(m: &Module) -> std::collections::HashSet<String> {
    let mut names = std::collections::HashSet::new();
    for (fn_name, func) in &m.functions {
        names.insert(fn_name.clone());
        for p in &func.params {
            names.insert(p.name.clone());
        }
        collect_names(&func.body, &mut names);
    }
    for ctor in m.adts.keys() {
        names.insert(ctor.clone());
    }
    names
}

fn collect_names(e: &Expr, out: &mut std::collections::HashSet<String>) {
    match e {
        Expr::Var(n) => {
            out.insert(n.clone());
        }
        Expr::Let { name, .. } => {
            out.insert(name.clone());
        }
        Expr::Closure { params, .. } => {
            out.extend(params.iter().map(|p| p.name.clone()));
        }
        Expr::Match { arms, .. } => {
            for a in arms {
                out.extend(a.binders.iter().cloned());
            }
        }
        _ => {}
    }
    for c in e.children() {
        collect_names(c, out);
    }
}

/// Structural equality up to renaming of local binders. Function, operator,
/// and constructor names must match exactly.
pub fn alpha_eq(a: &Module, b: &Module) -> bool {
    if a.functions.len() != b.functions.len() || a.adts != b.adts || a.stage != b.stage {
        return false;
    }
    if a.composites != b.composites {
        return false;
    }
    for ((na, fa), (nb, fb)) in a.functions.iter().zip(b.functions.iter()) {
        if na != nb || fa.ret != fb.ret || fa.params.len() != fb.params.len() {
            return false;
        }
        let mut env: Vec<(String, String)> = Vec::new();
        for (pa, pb) in fa.params.iter().zip(fb.params.iter()) {
            if pa.ty != pb.ty {
                return false;
            }
            env.push((pa.name.clone(), pb.name.clone()));
        }
        if !alpha_eq_expr(&fa.body, &fb.body, &mut env) {
            return false;
        }
    }
    true
}

fn lookup_alpha(env: &[(String, String)], a: &str) -> Option<String> {
    env.iter().rev().find(|(x, _)| x == a).map(|(_, y)| y.clone())
}

fn alpha_eq_expr(a: &Expr, b: &Expr, env: &mut Vec<(String, String)>) -> bool {
    match (a, b) {
        (Expr::Var(x), Expr::Var(y)) => match lookup_alpha(env, x) {
            Some(mapped) => mapped == *y,
            None => x == y,
        },
        (Expr::Constant(x), Expr::Constant(y)) => x == y,
        (
            Expr::Call { op: oa, args: aa, attrs: ta },
            Expr::Call { op: ob, args: ab, attrs: tb },
        ) => {
            oa == ob
                && ta == tb
                && aa.len() == ab.len()
                && aa.iter().zip(ab).all(|(x, y)| alpha_eq_expr(x, y, env))
        }
        (Expr::Apply { callee: ca, args: aa }, Expr::Apply { callee: cb, args: ab }) => {
            alpha_eq_expr(ca, cb, env)
                && aa.len() == ab.len()
                && aa.iter().zip(ab).all(|(x, y)| alpha_eq_expr(x, y, env))
        }
        (
            Expr::Let { name: na, ty: ta, value: va, body: ba },
            Expr::Let { name: nb, ty: tb, value: vb, body: bb },
        ) => {
            if ta != tb || !alpha_eq_expr(va, vb, env) {
                return false;
            }
            env.push((na.clone(), nb.clone()));
            let r = alpha_eq_expr(ba, bb, env);
            env.pop();
            r
        }
        (
            Expr::If { cond: ca, then_body: ta, else_body: ea },
            Expr::If { cond: cb, then_body: tb, else_body: eb },
        ) => {
            alpha_eq_expr(ca, cb, env) && alpha_eq_expr(ta, tb, env) && alpha_eq_expr(ea, eb, env)
        }
        (
            Expr::Closure { params: pa, ret: ra, body: ba },
            Expr::Closure { params: pb, ret: rb, body: bb },
        ) => {
            if ra != rb || pa.len() != pb.len() {
                return false;
            }
            if pa.iter().zip(pb.iter()).any(|(x, y)| x.ty != y.ty) {
                return false;
            }
            let depth = env.len();
            for (x, y) in pa.iter().zip(pb.iter()) {
                env.push((x.name.clone(), y.name.clone()));
            }
            let r = alpha_eq_expr(ba, bb, env);
            env.truncate(depth);
            r
        }
        (Expr::Tuple(xa), Expr::Tuple(xb)) => {
            xa.len() == xb.len() && xa.iter().zip(xb).all(|(x, y)| alpha_eq_expr(x, y, env))
        }
        (Expr::Proj { tuple: ta, index: ia }, Expr::Proj { tuple: tb, index: ib }) => {
            ia == ib && alpha_eq_expr(ta, tb, env)
        }
        (Expr::Construct { ctor: ca, args: aa }, Expr::Construct { ctor: cb, args: ab }) => {
            ca == cb && aa.len() == ab.len() && aa.iter().zip(ab).all(|(x, y)| alpha_eq_expr(x, y, env))
        }
        (Expr::Match { scrutinee: sa, arms: aa }, Expr::Match { scrutinee: sb, arms: ab }) => {
            if !alpha_eq_expr(sa, sb, env) || aa.len() != ab.len() {
                return false;
            }
            aa.iter().zip(ab).all(|(x, y)| {
                if x.ctor != y.ctor || x.binders.len() != y.binders.len() {
                    return false;
                }
                let depth = env.len();
                for (bx, by) in x.binders.iter().zip(y.binders.iter()) {
                    env.push((bx.clone(), by.clone()));
                }
                let r = alpha_eq_expr(&x.body, &y.body, env);
                env.truncate(depth);
                r
            })
        }
        (
            Expr::InvokeMut { op: oa, inputs: ia, outputs: xa, attrs: ta },
            Expr::InvokeMut { op: ob, inputs: ib, outputs: xb, attrs: tb },
        )
        | (
            Expr::InvokeShapeFunc { op: oa, inputs: ia, outputs: xa, attrs: ta },
            Expr::InvokeShapeFunc { op: ob, inputs: ib, outputs: xb, attrs: tb },
        ) => {
            oa == ob
                && ta == tb
                && ia.len() == ib.len()
                && xa.len() == xb.len()
                && ia.iter().zip(ib).all(|(x, y)| alpha_eq_expr(x, y, env))
                && xa.iter().zip(xb).all(|(x, y)| alpha_eq_expr(x, y, env))
        }
        (
            Expr::AllocStorage { size: sa, align: aa, device: da },
            Expr::AllocStorage { size: sb, align: ab, device: db },
        ) => aa == ab && da == db && alpha_eq_expr(sa, sb, env),
        (
            Expr::AllocTensor { storage: sa, offset: oa, shape: ha, dtype: da },
            Expr::AllocTensor { storage: sb, offset: ob, shape: hb, dtype: db },
        ) => {
            oa == ob
                && da == db
                && alpha_eq_expr(sa, sb, env)
                && alpha_eq_shape(ha, hb, env)
        }
        (Expr::Kill(xa), Expr::Kill(xb)) | (Expr::ShapeOf(xa), Expr::ShapeOf(xb)) => {
            alpha_eq_expr(xa, xb, env)
        }
        (
            Expr::DeviceCopy { value: va, src: sa, dst: da },
            Expr::DeviceCopy { value: vb, src: sb, dst: db },
        ) => sa == sb && da == db && alpha_eq_expr(va, vb, env),
        (
            Expr::ReshapeTensor { tensor: ta, shape: ha },
            Expr::ReshapeTensor { tensor: tb, shape: hb },
        ) => alpha_eq_expr(ta, tb, env) && alpha_eq_shape(ha, hb, env),
        _ => false,
    }
}

fn alpha_eq_shape(a: &ShapeArg, b: &ShapeArg, env: &mut Vec<(String, String)>) -> bool {
    match (a, b) {
        (ShapeArg::Imm(x), ShapeArg::Imm(y)) => x == y,
        (ShapeArg::Ref(x), ShapeArg::Ref(y)) => alpha_eq_expr(x, y, env),
        _ => false,
    }
}

/// Structural checks that do not need type inference: closed variable
/// references, resolvable call targets, constructor arities, and stage
/// consistency of explicit memory forms.
pub fn well_formed(m: &Module) -> Result<(), TypeError> {
    for func in m.functions.values() {
        let mut scope: Vec<String> = func.params.iter().map(|p| p.name.clone()).collect();
        wf_expr(m, &func.body, &mut scope)?;
    }
    Ok(())
}

fn wf_expr(m: &Module, e: &Expr, scope: &mut Vec<String>) -> Result<(), TypeError> {
    let explicit_ok = m.stage >= Stage::MemPlanned;
    match e {
        Expr::Var(name) => {
            if name == "_" {
                return Err(TypeError::new("`_` cannot be referenced"));
            }
            if !scope.iter().any(|s| s == name) {
                return Err(TypeError::new(format!("unbound variable `{name}`")));
            }
        }
        Expr::Call { op, args, .. } => {
            let known = m.functions.contains_key(op)
                || m.composites.contains_key(op)
                || crate::ops::is_builtin(op);
            if !known {
                return Err(TypeError::new(format!("unknown operator `{op}`")));
            }
            if crate::ops::is_builtin(op) && m.stage >= Stage::MemPlanned {
                return Err(TypeError::new(format!(
                    "implicit call of `{op}` in a memory-planned module"
                )));
            }
            for a in args {
                wf_expr(m, a, scope)?;
            }
        }
        Expr::Let { name, value, body, .. } => {
            wf_expr(m, value, scope)?;
            scope.push(name.clone());
            wf_expr(m, body, scope)?;
            scope.pop();
        }
        Expr::Closure { params, body, .. } => {
            let depth = scope.len();
            scope.extend(params.iter().map(|p| p.name.clone()));
            wf_expr(m, body, scope)?;
            scope.truncate(depth);
        }
        Expr::Construct { ctor, args } => {
            let def = m
                .adts
                .get(ctor)
                .ok_or_else(|| TypeError::new(format!("unknown constructor `{ctor}`")))?;
            if def.arity() != args.len() {
                return Err(TypeError::new(format!(
                    "constructor `{ctor}` takes {} fields, got {}",
                    def.arity(),
                    args.len()
                )));
            }
            for a in args {
                wf_expr(m, a, scope)?;
            }
        }
        Expr::Match { scrutinee, arms } => {
            if arms.is_empty() {
                return Err(TypeError::new("match must have at least one arm"));
            }
            wf_expr(m, scrutinee, scope)?;
            for arm in arms {
                let def = m
                    .adts
                    .get(&arm.ctor)
                    .ok_or_else(|| TypeError::new(format!("unknown constructor `{}`", arm.ctor)))?;
                if def.arity() != arm.binders.len() {
                    return Err(TypeError::new(format!(
                        "pattern `{}` binds {} fields, constructor has {}",
                        arm.ctor,
                        arm.binders.len(),
                        def.arity()
                    )));
                }
                let depth = scope.len();
                scope.extend(arm.binders.iter().cloned());
                wf_expr(m, &arm.body, scope)?;
                scope.truncate(depth);
            }
        }
        Expr::InvokeMut { .. }
        | Expr::AllocStorage { .. }
        | Expr::AllocTensor { .. }
        | Expr::Kill(_)
        | Expr::ShapeOf(_)
        | Expr::InvokeShapeFunc { .. }
        | Expr::DeviceCopy { .. }
        | Expr::ReshapeTensor { .. }
            if !explicit_ok =>
        {
            return Err(TypeError::new(format!(
                "explicit memory form in stage `{}`",
                m.stage
            )));
        }
        _ => {}
    }
    if !matches!(
        e,
        Expr::Var(_)
            | Expr::Call { .. }
            | Expr::Let { .. }
            | Expr::Closure { .. }
            | Expr::Construct { .. }
            | Expr::Match { .. }
    ) {
        for c in e.children() {
            wf_expr(m, c, scope)?;
        }
    }
    Ok(())
}
