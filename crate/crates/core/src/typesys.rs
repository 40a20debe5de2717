//! Gradual shape typing.
//!
//! Dimensions are `Static(d)` or the unknown `?`. Inference computes a type
//! for every node under a consistency relation ([`compatible`]) that lets
//! `?` stand in for any extent in either direction; checks that cannot be
//! decided statically are deferred to runtime shape functions. Refinement
//! ([`refine_and_unify_dims`]) then runs union-find over dimension sites to
//! replace `?` that is forced static by context, and names the surviving
//! unknowns with symbolic-dimension classes used by kernel specialization.

use crate::error::TypeError;
use crate::ir::expr::{
    attr_int, walk_module, Attrs, Expr, ExprId, Module, NodeRef, Param, ShapeArg,
};
use crate::ir::types::{DType, Dim, TensorType, Type};
use crate::unify::{BindConflict, UnionFind};
use std::collections::HashMap;

/// Broadcast of two dimensions. With `?` against a static extent greater
/// than one the result is that extent: the unknown side must match it or be
/// one at runtime, and both cases broadcast to the static extent. `?`
/// against one stays unknown.
pub fn broadcast_rel(a: Dim, b: Dim) -> Result<Dim, TypeError> {
    Ok(match (a, b) {
        (Dim::Static(x), Dim::Static(y)) => {
            if x == y {
                Dim::Static(x)
            } else if x == 1 {
                Dim::Static(y)
            } else if y == 1 {
                Dim::Static(x)
            } else {
                return Err(TypeError::new(format!("cannot broadcast {x} vs {y}")));
            }
        }
        (Dim::Any, Dim::Static(1)) | (Dim::Static(1), Dim::Any) | (Dim::Any, Dim::Any) => Dim::Any,
        (Dim::Any, Dim::Static(d)) | (Dim::Static(d), Dim::Any) => Dim::Static(d),
    })
}

/// Two dimensions are consistent when they are equal or either is unknown.
pub fn dim_consistent(a: Dim, b: Dim) -> bool {
    matches!((a, b), (Dim::Any, _) | (_, Dim::Any)) || a == b
}

/// Consistent sub-shaping used at binding sites: `actual` may flow where
/// `expected` is declared. Unknown dimensions are consistent with anything
/// in both directions; the static-to-unknown direction is plain widening,
/// the reverse is a gradual cast checked at runtime. Function parameters
/// are invariant, results covariant.
pub fn compatible(actual: &Type, expected: &Type) -> bool {
    match (actual, expected) {
        (Type::Tensor(a), Type::Tensor(b)) => {
            a.dtype == b.dtype
                && a.rank() == b.rank()
                && a.dims.iter().zip(&b.dims).all(|(&x, &y)| dim_consistent(x, y))
        }
        (Type::Tuple(a), Type::Tuple(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| compatible(x, y))
        }
        (Type::Adt, Type::Adt) => true,
        (Type::Storage, Type::Storage) => true,
        (Type::Fn { params: pa, ret: ra }, Type::Fn { params: pb, ret: rb }) => {
            pa == pb && compatible(ra, rb)
        }
        _ => false,
    }
}

/// Least upper bound of the types produced by `if` branches or `match`
/// arms: equal dimensions are kept, diverging ones widen to `?`.
pub fn join(a: &Type, b: &Type) -> Result<Type, TypeError> {
    match (a, b) {
        (Type::Tensor(x), Type::Tensor(y)) => {
            if x.dtype != y.dtype || x.rank() != y.rank() {
                return Err(TypeError::new(format!("cannot join `{a}` with `{b}`")));
            }
            let dims = x
                .dims
                .iter()
                .zip(&y.dims)
                .map(|(&p, &q)| if p == q { p } else { Dim::Any })
                .collect();
            Ok(Type::Tensor(TensorType { dims, dtype: x.dtype }))
        }
        (Type::Tuple(x), Type::Tuple(y)) if x.len() == y.len() => {
            let elems: Result<Vec<Type>, TypeError> =
                x.iter().zip(y).map(|(p, q)| join(p, q)).collect();
            Ok(Type::Tuple(elems?))
        }
        (Type::Adt, Type::Adt) => Ok(Type::Adt),
        (Type::Storage, Type::Storage) => Ok(Type::Storage),
        (Type::Fn { .. }, Type::Fn { .. }) if a == b => Ok(a.clone()),
        _ => Err(TypeError::new(format!("cannot join `{a}` with `{b}`"))),
    }
}

/// Types per pre-order node id (parameters included), see
/// [`crate::ir::expr::walk_module`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TypeMap {
    types: Vec<Option<Type>>,
}

impl TypeMap {
    pub fn new() -> TypeMap {
        TypeMap::default()
    }

    pub fn set(&mut self, id: ExprId, ty: Type) {
        let i = id as usize;
        if self.types.len() <= i {
            self.types.resize(i + 1, None);
        }
        self.types[i] = Some(ty);
    }

    pub fn get(&self, id: ExprId) -> Option<&Type> {
        self.types.get(id as usize).and_then(|t| t.as_ref())
    }

    /// Type of a node that inference is known to have visited.
    pub fn expect(&self, id: ExprId) -> &Type {
        self.get(id).expect("node was typed")
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

pub type SymDimId = u32;

/// Names the dimensions still unknown after refinement: every tensor-typed
/// node axis whose dimension is `?` belongs to exactly one class, and axes
/// forced equal by dataflow share a class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SymDimTable {
    pub classes: HashMap<(ExprId, usize), SymDimId>,
    pub n_classes: u32,
}

impl SymDimTable {
    pub fn class_of(&self, id: ExprId, axis: usize) -> Option<SymDimId> {
        self.classes.get(&(id, axis)).copied()
    }
}

// ---------------------------------------------------------------------------
// Inference.
// ---------------------------------------------------------------------------

struct Infer<'m> {
    m: &'m Module,
    map: TypeMap,
    next: ExprId,
}

type Env = Vec<(String, Type)>;

fn env_lookup(env: &Env, name: &str) -> Option<Type> {
    env.iter().rev().find(|(n, _)| n == name).map(|(_, t)| t.clone())
}

impl Infer<'_> {
    fn expr(&mut self, e: &Expr, env: &mut Env) -> Result<Type, TypeError> {
        let id = self.next;
        self.next += 1;
        let ty = self.expr_inner(e, env)?;
        self.map.set(id, ty.clone());
        Ok(ty)
    }

    fn tensor_arg(&mut self, e: &Expr, env: &mut Env, what: &str) -> Result<TensorType, TypeError> {
        match self.expr(e, env)? {
            Type::Tensor(t) => Ok(t),
            other => Err(TypeError::new(format!("{what} must be a tensor, got `{other}`"))),
        }
    }

    fn expr_inner(&mut self, e: &Expr, env: &mut Env) -> Result<Type, TypeError> {
        match e {
            Expr::Var(name) => env_lookup(env, name)
                .ok_or_else(|| TypeError::new(format!("unbound variable `{name}`"))),
            Expr::Constant(lit) => Ok(Type::Tensor(lit.ty())),
            Expr::Call { op, args, attrs } => {
                let arg_tys: Vec<Type> =
                    args.iter().map(|a| self.expr(a, env)).collect::<Result<_, _>>()?;
                self.call_type(op, &arg_tys, attrs)
                    .map_err(|err| err.with_context(format!("in call of `{op}`")))
            }
            Expr::Apply { callee, args } => {
                let cty = self.expr(callee, env)?;
                let arg_tys: Vec<Type> =
                    args.iter().map(|a| self.expr(a, env)).collect::<Result<_, _>>()?;
                let Type::Fn { params, ret } = cty else {
                    return Err(TypeError::new(format!("cannot apply non-function `{cty}`")));
                };
                if params.len() != arg_tys.len() {
                    return Err(TypeError::new(format!(
                        "function takes {} arguments, got {}",
                        params.len(),
                        arg_tys.len()
                    )));
                }
                for (i, (a, p)) in arg_tys.iter().zip(&params).enumerate() {
                    if !compatible(a, p) {
                        return Err(TypeError::new(format!(
                            "argument {i} has type `{a}`, expected `{p}`"
                        )));
                    }
                }
                Ok(*ret)
            }
            Expr::Let { name, ty, value, body } => {
                let vt = self.expr(value, env)?;
                let bound = match ty {
                    Some(ann) => {
                        if !compatible(&vt, ann) {
                            return Err(TypeError::new(format!(
                                "`{name}` is annotated `{ann}` but bound to `{vt}`"
                            )));
                        }
                        ann.clone()
                    }
                    None => vt,
                };
                if name != "_" {
                    env.push((name.clone(), bound));
                }
                let bt = self.expr(body, env);
                if name != "_" {
                    env.pop();
                }
                bt
            }
            Expr::If { cond, then_body, else_body } => {
                let ct = self.expr(cond, env)?;
                let ok = matches!(&ct, Type::Tensor(t) if t.rank() == 0 && t.dtype == DType::I64);
                if !ok {
                    return Err(TypeError::new(format!(
                        "if condition must be `Tensor<(), i64>`, got `{ct}`"
                    )));
                }
                let tt = self.expr(then_body, env)?;
                let et = self.expr(else_body, env)?;
                join(&tt, &et).map_err(|err| err.with_context("branches of `if`".to_string()))
            }
            Expr::Closure { params, ret, body } => {
                let depth = env.len();
                env.extend(params.iter().map(|p| (p.name.clone(), p.ty.clone())));
                let bt = self.expr(body, env)?;
                env.truncate(depth);
                if !compatible(&bt, ret) {
                    return Err(TypeError::new(format!(
                        "closure body has type `{bt}`, declared `{ret}`"
                    )));
                }
                Ok(Type::Fn {
                    params: params.iter().map(|p| p.ty.clone()).collect(),
                    ret: Box::new(ret.clone()),
                })
            }
            Expr::Tuple(elems) => {
                let tys: Vec<Type> =
                    elems.iter().map(|x| self.expr(x, env)).collect::<Result<_, _>>()?;
                Ok(Type::Tuple(tys))
            }
            Expr::Proj { tuple, index } => {
                let tt = self.expr(tuple, env)?;
                let Type::Tuple(elems) = tt else {
                    return Err(TypeError::new(format!("cannot project from `{tt}`")));
                };
                elems.get(*index).cloned().ok_or_else(|| {
                    TypeError::new(format!("tuple has {} elements, no field {index}", elems.len()))
                })
            }
            Expr::Construct { ctor, args } => {
                let def = self
                    .m
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
                for (i, (a, f)) in args.iter().zip(&def.fields).enumerate() {
                    let at = self.expr(a, env)?;
                    if !compatible(&at, f) {
                        return Err(TypeError::new(format!(
                            "field {i} of `{ctor}` has type `{at}`, expected `{f}`"
                        )));
                    }
                }
                Ok(Type::Adt)
            }
            Expr::Match { scrutinee, arms } => {
                let st = self.expr(scrutinee, env)?;
                if st != Type::Adt {
                    return Err(TypeError::new(format!("cannot match on `{st}`")));
                }
                let mut out: Option<Type> = None;
                for arm in arms {
                    let def = self.m.adts.get(&arm.ctor).ok_or_else(|| {
                        TypeError::new(format!("unknown constructor `{}`", arm.ctor))
                    })?;
                    if def.arity() != arm.binders.len() {
                        return Err(TypeError::new(format!(
                            "pattern `{}` binds {} fields, constructor has {}",
                            arm.ctor,
                            arm.binders.len(),
                            def.arity()
                        )));
                    }
                    let depth = env.len();
                    for (b, f) in arm.binders.iter().zip(&def.fields) {
                        if b != "_" {
                            env.push((b.clone(), f.clone()));
                        }
                    }
                    let at = self.expr(&arm.body, env)?;
                    env.truncate(depth);
                    out = Some(match out {
                        None => at,
                        Some(prev) => join(&prev, &at)
                            .map_err(|err| err.with_context("arms of `match`".to_string()))?,
                    });
                }
                out.ok_or_else(|| TypeError::new("match must have at least one arm"))
            }
            Expr::InvokeMut { op, inputs, outputs, attrs } => {
                for (i, x) in inputs.iter().enumerate() {
                    self.tensor_arg(x, env, &format!("input {i} of `invoke_mut`"))?;
                }
                for (i, x) in outputs.iter().enumerate() {
                    self.tensor_arg(x, env, &format!("output {i} of `invoke_mut`"))?;
                }
                let n_out = if self.m.composites.contains_key(op) {
                    1
                } else if crate::ops::is_builtin(op) {
                    crate::ops::output_count(op)
                } else {
                    return Err(TypeError::new(format!("unknown kernel `{op}`")));
                };
                let _ = attrs;
                if outputs.len() != n_out {
                    return Err(TypeError::new(format!(
                        "`{op}` writes {n_out} outputs, got {}",
                        outputs.len()
                    )));
                }
                Ok(Type::unit())
            }
            Expr::AllocStorage { size, .. } => {
                let st = self.tensor_arg(size, env, "storage size")?;
                if st.rank() != 0 || st.dtype != DType::I64 {
                    return Err(TypeError::new("storage size must be `Tensor<(), i64>`"));
                }
                Ok(Type::Storage)
            }
            Expr::AllocTensor { storage, shape, dtype, .. } => {
                let st = self.expr(storage, env)?;
                if st != Type::Storage {
                    return Err(TypeError::new(format!("cannot view `{st}` as a tensor")));
                }
                let dims = match shape {
                    ShapeArg::Imm(ds) => ds.iter().map(|&d| Dim::Static(d)).collect(),
                    ShapeArg::Ref(s) => {
                        let rank = self.shape_ref_rank(s, env)?;
                        vec![Dim::Any; rank]
                    }
                };
                Ok(Type::Tensor(TensorType::new(dims, *dtype)?))
            }
            Expr::Kill(x) => {
                self.tensor_arg(x, env, "`kill` argument")?;
                Ok(Type::unit())
            }
            Expr::ShapeOf(x) => {
                let t = self.tensor_arg(x, env, "`shape_of` argument")?;
                if t.rank() == 0 {
                    return Err(TypeError::new("`shape_of` needs rank at least 1"));
                }
                Ok(Type::Tensor(TensorType::statics(&[t.rank() as u64], DType::I64)))
            }
            Expr::InvokeShapeFunc { op, inputs, outputs, .. } => {
                if !crate::ops::is_builtin(op) && !self.m.composites.contains_key(op) {
                    return Err(TypeError::new(format!("unknown shape function `{op}`")));
                }
                for (i, x) in inputs.iter().enumerate() {
                    self.tensor_arg(x, env, &format!("input {i} of shape function"))?;
                }
                for (i, x) in outputs.iter().enumerate() {
                    let t = self.tensor_arg(x, env, &format!("output {i} of shape function"))?;
                    if t.rank() != 1 || t.dtype != DType::I64 || !t.is_fully_static() {
                        return Err(TypeError::new(
                            "shape function outputs must be static i64 vectors",
                        ));
                    }
                }
                Ok(Type::unit())
            }
            Expr::DeviceCopy { value, .. } => {
                let t = self.tensor_arg(value, env, "`device_copy` argument")?;
                Ok(Type::Tensor(t))
            }
            Expr::ReshapeTensor { tensor, shape } => {
                let t = self.tensor_arg(tensor, env, "`reshape_tensor` argument")?;
                let dims: Vec<Dim> = match shape {
                    ShapeArg::Imm(ds) => {
                        let out = TensorType::new(
                            ds.iter().map(|&d| Dim::Static(d)).collect(),
                            t.dtype,
                        )?;
                        if let (Some(n), Some(m)) = (t.num_elements(), out.num_elements()) {
                            if n != m {
                                return Err(TypeError::new(format!(
                                    "cannot reshape {n} elements into {m}"
                                )));
                            }
                        }
                        out.dims
                    }
                    ShapeArg::Ref(s) => {
                        let rank = self.shape_ref_rank(s, env)?;
                        vec![Dim::Any; rank]
                    }
                };
                Ok(Type::Tensor(TensorType { dims, dtype: t.dtype }))
            }
        }
    }

    /// A runtime shape operand must be a static-length i64 vector; its
    /// length is the rank of the tensor it describes.
    fn shape_ref_rank(&mut self, s: &Expr, env: &mut Env) -> Result<usize, TypeError> {
        let t = self.tensor_arg(s, env, "shape operand")?;
        if t.rank() != 1 || t.dtype != DType::I64 {
            return Err(TypeError::new("shape operand must be an i64 vector"));
        }
        match t.dims[0] {
            Dim::Static(k) => Ok(k as usize),
            Dim::Any => Err(TypeError::new("shape operand must have a static length")),
        }
    }

    fn call_type(&self, op: &str, args: &[Type], attrs: &Attrs) -> Result<Type, TypeError> {
        if let Some(f) = self.m.functions.get(op) {
            if f.params.len() != args.len() {
                return Err(TypeError::new(format!(
                    "`{op}` takes {} arguments, got {}",
                    f.params.len(),
                    args.len()
                )));
            }
            for (i, (a, p)) in args.iter().zip(&f.params).enumerate() {
                if !compatible(a, &p.ty) {
                    return Err(TypeError::new(format!(
                        "argument {i} has type `{a}`, expected `{}`",
                        p.ty
                    )));
                }
            }
            return Ok(f.ret.clone());
        }
        if let Some(def) = self.m.composites.get(op) {
            return crate::ops::composite_type_rel(def, args);
        }
        crate::ops::type_rel(op, args, attrs)
    }
}

/// Assigns a type to every node and records the result in `module.types`.
/// Runs at any stage; call again after passes that change the tree.
pub fn infer_types(m: &mut Module) -> Result<(), TypeError> {
    let mut inf = Infer { m, map: TypeMap::new(), next: 0 };
    for func in inf.m.functions.values() {
        let mut env: Env = Vec::new();
        for p in &func.params {
            inf.map.set(inf.next, p.ty.clone());
            inf.next += 1;
            env.push((p.name.clone(), p.ty.clone()));
        }
        let bt = inf
            .expr(&func.body, &mut env)
            .map_err(|e| e.with_context(format!("in function `{}`", func.name)))?;
        if !compatible(&bt, &func.ret) {
            return Err(TypeError::new(format!(
                "`{}` returns `{bt}`, declared `{}`",
                func.name, func.ret
            )));
        }
    }
    let map = inf.map;
    m.types = Some(map);
    m.sym_dims = None;
    Ok(())
}

// ---------------------------------------------------------------------------
// Refinement.
// ---------------------------------------------------------------------------

/// Dimension sites of one tensor value: the declared dims plus a union-find
/// index per axis.
#[derive(Debug, Clone)]
struct TSite {
    dims: Vec<Dim>,
    idx: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Binding {
    /// Bound to a node with a pre-order id (let values, parameters).
    Node(ExprId),
    /// Bound to synthetic sites without a node id (closure parameters,
    /// match binders); `None` when the bound value is not a tensor.
    Synth(Option<TSite>),
}

struct Refiner<'m> {
    m: &'m Module,
    types: &'m TypeMap,
    uf: UnionFind<u64>,
    site: HashMap<(ExprId, usize), usize>,
    exprs: HashMap<ExprId, &'m Expr>,
    next: ExprId,
}

fn conflict(err: BindConflict<u64>) -> TypeError {
    TypeError::new(format!(
        "dimension conflict: {} (from {}) vs {} (from {})",
        err.a, err.a_src, err.b, err.b_src
    ))
}

impl<'m> Refiner<'m> {
    fn new(m: &'m Module, types: &'m TypeMap) -> Result<Refiner<'m>, TypeError> {
        let mut r = Refiner {
            m,
            types,
            uf: UnionFind::new(),
            site: HashMap::new(),
            exprs: HashMap::new(),
            next: 0,
        };
        let mut pending: Vec<(ExprId, usize, u64, String)> = Vec::new();
        walk_module(m, &mut |id, node| {
            if let NodeRef::Expr(e) = node {
                r.exprs.insert(id, e);
            }
            if let Some(Type::Tensor(t)) = types.get(id) {
                for (axis, d) in t.dims.iter().enumerate() {
                    let idx = r.uf.fresh();
                    r.site.insert((id, axis), idx);
                    if let Dim::Static(v) = d {
                        pending.push((id, axis, *v, format!("node {id} axis {axis}")));
                    }
                }
            }
        });
        for (id, axis, v, src) in pending {
            let idx = r.site[&(id, axis)];
            r.uf.bind(idx, v, &src).map_err(conflict)?;
        }
        Ok(r)
    }

    fn tsite(&mut self, id: ExprId) -> Option<TSite> {
        match self.types.get(id) {
            Some(Type::Tensor(t)) => {
                let idx = (0..t.rank()).map(|axis| self.site[&(id, axis)]).collect();
                Some(TSite { dims: t.dims.clone(), idx })
            }
            _ => None,
        }
    }

    fn synth_site(&mut self, ty: &Type, src: &str) -> Result<Option<TSite>, TypeError> {
        let Type::Tensor(t) = ty else { return Ok(None) };
        let mut idx = Vec::with_capacity(t.rank());
        for d in &t.dims {
            let i = self.uf.fresh();
            if let Dim::Static(v) = d {
                self.uf.bind(i, *v, src).map_err(conflict)?;
            }
            idx.push(i);
        }
        Ok(Some(TSite { dims: t.dims.clone(), idx }))
    }

    fn unite(&mut self, a: usize, b: usize) -> Result<(), TypeError> {
        self.uf.union(a, b).map(|_| ()).map_err(conflict)
    }

    fn unify_sites(&mut self, a: &TSite, b: &TSite) -> Result<(), TypeError> {
        for (&x, &y) in a.idx.iter().zip(&b.idx) {
            self.unite(x, y)?;
        }
        Ok(())
    }

    /// Per-operator equalities between input and output dimensions. Only
    /// equalities the semantics force are added; broadcasting against a
    /// possible extent of one never is.
    fn op_edges(
        &mut self,
        op: &str,
        attrs: &Attrs,
        inputs: &[Option<TSite>],
        out: &TSite,
        padded: bool,
    ) -> Result<(), TypeError> {
        match op {
            "add" | "multiply" | "less" => {
                let (Some(a), Some(b)) = (&inputs[0], &inputs[1]) else { return Ok(()) };
                let (a, b) = (a.clone(), b.clone());
                let rank = out.idx.len();
                for i in 0..rank {
                    let ax = if i + a.idx.len() >= rank { Some(i + a.idx.len() - rank) } else { None };
                    let bx = if i + b.idx.len() >= rank { Some(i + b.idx.len() - rank) } else { None };
                    let da = ax.map(|x| a.dims[x]);
                    let db = bx.map(|x| b.dims[x]);
                    if da.is_none() || da == Some(Dim::Static(1)) {
                        if let Some(x) = bx {
                            self.unite(out.idx[i], b.idx[x])?;
                        }
                    } else if db.is_none() || db == Some(Dim::Static(1)) {
                        if let Some(x) = ax {
                            self.unite(out.idx[i], a.idx[x])?;
                        }
                    } else if let (Some(x), Some(y)) = (ax, bx) {
                        if self.uf.same(a.idx[x], b.idx[y]) {
                            self.unite(out.idx[i], a.idx[x])?;
                        }
                    }
                }
            }
            "dense" => {
                if let (Some(a), Some(b)) = (inputs[0].clone(), inputs[1].clone()) {
                    self.unite(a.idx[0], out.idx[0])?;
                    self.unite(b.idx[1], out.idx[1])?;
                    self.unite(a.idx[1], b.idx[0])?;
                }
            }
            "concat" => {
                let axis = attr_int(attrs, "axis").unwrap_or(0) as usize;
                for t in inputs.iter().flatten() {
                    for ax in 0..t.idx.len() {
                        if ax != axis || inputs.len() == 1 {
                            self.unite(t.idx[ax], out.idx[ax])?;
                        }
                    }
                }
            }
            "take" => {
                let axis = attr_int(attrs, "axis").unwrap_or(0) as usize;
                if let (Some(data), Some(ix)) = (inputs[0].clone(), inputs[1].clone()) {
                    for ax in 0..axis {
                        self.unite(data.idx[ax], out.idx[ax])?;
                    }
                    for (k, &i) in ix.idx.iter().enumerate() {
                        self.unite(i, out.idx[axis + k])?;
                    }
                    for ax in axis + 1..data.idx.len() {
                        self.unite(data.idx[ax], out.idx[ax + ix.idx.len() - 1])?;
                    }
                }
            }
            "unique" => {
                // The padded kernel output spans the upper bound, which is the
                // input extent; the pure value is the sliced true length.
                if padded {
                    if let Some(a) = inputs[0].clone() {
                        self.unite(a.idx[0], out.idx[0])?;
                    }
                }
            }
            // arange output length and reshape/bytes outputs carry no
            // equalities with input dims.
            _ => {}
        }
        Ok(())
    }

    /// Expands a composite call member by member with synthetic sites for
    /// intermediate results.
    fn composite_edges(
        &mut self,
        name: &str,
        inputs: &[Option<TSite>],
        input_tys: &[Type],
        out: &TSite,
    ) -> Result<(), TypeError> {
        let def = &self.m.composites[name];
        let mut member_sites: Vec<Option<TSite>> = Vec::new();
        let mut member_tys: Vec<Type> = Vec::new();
        for member in &def.members {
            let arg_sites: Vec<Option<TSite>> = member
                .args
                .iter()
                .map(|a| match a {
                    crate::ir::expr::CompositeArg::Input(i) => inputs[*i].clone(),
                    crate::ir::expr::CompositeArg::Member(i) => member_sites[*i].clone(),
                })
                .collect();
            let arg_tys: Vec<Type> = member
                .args
                .iter()
                .map(|a| match a {
                    crate::ir::expr::CompositeArg::Input(i) => input_tys[*i].clone(),
                    crate::ir::expr::CompositeArg::Member(i) => member_tys[*i].clone(),
                })
                .collect();
            let out_ty = crate::ops::type_rel(&member.op, &arg_tys, &member.attrs)?;
            let site = self.synth_site(&out_ty, &format!("member of `{name}`"))?;
            if let Some(s) = &site {
                self.op_edges(&member.op, &member.attrs, &arg_sites, s, false)?;
            }
            member_sites.push(site);
            member_tys.push(out_ty);
        }
        if let Some(Some(last)) = member_sites.last().cloned() {
            self.unify_sites(&last, out)?;
        }
        Ok(())
    }

    /// Walks in the same pre-order as id assignment, adding edges. Returns
    /// the id of `e`.
    fn walk(&mut self, e: &'m Expr, env: &mut Vec<(String, Binding)>) -> Result<ExprId, TypeError> {
        let id = self.next;
        self.next += 1;
        match e {
            Expr::Var(name) => {
                let binding = env.iter().rev().find(|(n, _)| n == name).map(|(_, b)| b.clone());
                if let (Some(here), Some(b)) = (self.tsite(id), binding) {
                    match b {
                        Binding::Node(bid) => {
                            if let Some(there) = self.tsite(bid) {
                                self.unify_sites(&here, &there)?;
                            }
                        }
                        Binding::Synth(Some(there)) => self.unify_sites(&here, &there)?,
                        Binding::Synth(None) => {}
                    }
                }
            }
            Expr::Constant(_) => {}
            Expr::Call { op, args, attrs } => {
                let mut arg_ids = Vec::with_capacity(args.len());
                for a in args {
                    arg_ids.push(self.walk(a, env)?);
                }
                self.call_edges(op, attrs, &arg_ids, id, false)?;
            }
            Expr::Apply { callee, args } => {
                self.walk(callee, env)?;
                for a in args {
                    self.walk(a, env)?;
                }
            }
            Expr::Let { name, ty, value, body } => {
                let vid = self.walk(value, env)?;
                if let Some(Type::Tensor(ann)) = ty {
                    if let Some(vs) = self.tsite(vid) {
                        for (axis, d) in ann.dims.iter().enumerate() {
                            if let Dim::Static(v) = d {
                                self.uf
                                    .bind(vs.idx[axis], *v, &format!("annotation on `{name}`"))
                                    .map_err(conflict)?;
                            }
                        }
                    }
                }
                if name != "_" {
                    env.push((name.clone(), Binding::Node(vid)));
                }
                let bid = self.walk(body, env)?;
                if name != "_" {
                    env.pop();
                }
                if let (Some(here), Some(there)) = (self.tsite(id), self.tsite(bid)) {
                    self.unify_sites(&here, &there)?;
                }
            }
            Expr::If { cond, then_body, else_body } => {
                // Branch results only join; their dims are not forced equal.
                self.walk(cond, env)?;
                self.walk(then_body, env)?;
                self.walk(else_body, env)?;
            }
            Expr::Closure { params, body, .. } => {
                let depth = env.len();
                for p in params {
                    let site = self.synth_site(&p.ty, &format!("closure parameter `{}`", p.name))?;
                    env.push((p.name.clone(), Binding::Synth(site)));
                }
                self.walk(body, env)?;
                env.truncate(depth);
            }
            Expr::Tuple(elems) => {
                for x in elems {
                    self.walk(x, env)?;
                }
            }
            Expr::Proj { tuple, index } => {
                let tid = self.walk(tuple, env)?;
                if let Some(elem_id) = self.tuple_elem_id(tid, *index, env) {
                    if let (Some(here), Some(there)) = (self.tsite(id), self.tsite(elem_id)) {
                        self.unify_sites(&here, &there)?;
                    }
                }
            }
            Expr::Construct { ctor, args } => {
                let fields = self.m.adts.get(ctor).map(|d| d.fields.clone()).unwrap_or_default();
                for (a, f) in args.iter().zip(&fields) {
                    let aid = self.walk(a, env)?;
                    if let (Some(site), Type::Tensor(ft)) = (self.tsite(aid), f) {
                        for (axis, d) in ft.dims.iter().enumerate() {
                            if let Dim::Static(v) = d {
                                self.uf
                                    .bind(site.idx[axis], *v, &format!("field of `{ctor}`"))
                                    .map_err(conflict)?;
                            }
                        }
                    }
                }
            }
            Expr::Match { scrutinee, arms } => {
                self.walk(scrutinee, env)?;
                for arm in arms {
                    let fields = self
                        .m
                        .adts
                        .get(&arm.ctor)
                        .map(|d| d.fields.clone())
                        .unwrap_or_default();
                    let depth = env.len();
                    for (b, f) in arm.binders.iter().zip(&fields) {
                        if b != "_" {
                            let site = self.synth_site(f, &format!("pattern `{}`", arm.ctor))?;
                            env.push((b.clone(), Binding::Synth(site)));
                        }
                    }
                    self.walk(&arm.body, env)?;
                    env.truncate(depth);
                }
            }
            Expr::InvokeMut { op, inputs, outputs, attrs } => {
                let mut in_ids = Vec::with_capacity(inputs.len());
                for x in inputs {
                    in_ids.push(self.walk(x, env)?);
                }
                let mut out_ids = Vec::with_capacity(outputs.len());
                for x in outputs {
                    out_ids.push(self.walk(x, env)?);
                }
                self.invoke_edges(op, attrs, &in_ids, out_ids[0], true)?;
            }
            Expr::AllocStorage { size, .. } => {
                self.walk(size, env)?;
            }
            Expr::AllocTensor { storage, shape, .. } => {
                self.walk(storage, env)?;
                if let ShapeArg::Ref(s) = shape {
                    self.walk(s, env)?;
                }
            }
            Expr::Kill(x) | Expr::ShapeOf(x) => {
                self.walk(x, env)?;
            }
            Expr::InvokeShapeFunc { inputs, outputs, .. } => {
                for x in inputs {
                    self.walk(x, env)?;
                }
                for x in outputs {
                    self.walk(x, env)?;
                }
            }
            Expr::DeviceCopy { value, .. } => {
                let vid = self.walk(value, env)?;
                if let (Some(here), Some(there)) = (self.tsite(id), self.tsite(vid)) {
                    self.unify_sites(&here, &there)?;
                }
            }
            Expr::ReshapeTensor { tensor, shape } => {
                self.walk(tensor, env)?;
                if let ShapeArg::Ref(s) = shape {
                    self.walk(s, env)?;
                }
            }
        }
        Ok(id)
    }

    fn call_edges(
        &mut self,
        op: &str,
        attrs: &Attrs,
        arg_ids: &[ExprId],
        out_id: ExprId,
        padded: bool,
    ) -> Result<(), TypeError> {
        // Module functions bound by their signatures: no cross-function
        // unification, so one callee serves call sites with unrelated shapes.
        if self.m.functions.contains_key(op) {
            return Ok(());
        }
        let inputs: Vec<Option<TSite>> = arg_ids.iter().map(|&i| self.tsite(i)).collect();
        let Some(out) = self.tsite(out_id) else { return Ok(()) };
        if self.m.composites.contains_key(op) {
            let input_tys: Vec<Type> =
                arg_ids.iter().map(|&i| self.types.expect(i).clone()).collect();
            return self.composite_edges(op, &inputs, &input_tys, &out);
        }
        self.op_edges(op, attrs, &inputs, &out, padded)
    }

    fn invoke_edges(
        &mut self,
        op: &str,
        attrs: &Attrs,
        in_ids: &[ExprId],
        out_id: ExprId,
        padded: bool,
    ) -> Result<(), TypeError> {
        self.call_edges(op, attrs, in_ids, out_id, padded)
    }

    /// Resolves the element node of a projected tuple when the tuple is a
    /// literal, directly or through one variable binding.
    fn tuple_elem_id(
        &mut self,
        tuple_id: ExprId,
        index: usize,
        env: &[(String, Binding)],
    ) -> Option<ExprId> {
        let mut id = tuple_id;
        let mut expr = *self.exprs.get(&id)?;
        if let Expr::Var(name) = expr {
            let b = env.iter().rev().find(|(n, _)| n == name).map(|(_, b)| b.clone())?;
            match b {
                Binding::Node(bid) => {
                    id = bid;
                    expr = *self.exprs.get(&id)?;
                }
                Binding::Synth(_) => return None,
            }
        }
        if let Expr::Tuple(elems) = expr {
            if index < elems.len() {
                let mut elem = id + 1;
                for x in &elems[..index] {
                    elem += x.node_count();
                }
                return Some(elem);
            }
        }
        None
    }
}

/// Union-find refinement over dimension sites: replaces `?` dims that
/// context forces static and assigns a symbolic class to each remaining
/// unknown. Results go to `module.types` (refined) and `module.sym_dims`.
pub fn refine_and_unify_dims(m: &mut Module) -> Result<(), TypeError> {
    if m.types.is_none() {
        infer_types(m)?;
    }
    let types = m.types.clone().expect("typed");
    let (new_types, table) = {
        let mut r = Refiner::new(m, &types)?;
        for func in m.functions.values() {
            let mut env: Vec<(String, Binding)> = Vec::new();
            for p in &func.params {
                env.push((p.name.clone(), Binding::Node(r.next)));
                r.next += 1;
            }
            r.walk(&func.body, &mut env)?;
        }
        let mut new_types = types.clone();
        let mut table = SymDimTable::default();
        let mut class_ids: HashMap<usize, SymDimId> = HashMap::new();
        let mut order: Vec<ExprId> = Vec::new();
        walk_module(m, &mut |id, _| order.push(id));
        for id in order {
            if let Some(Type::Tensor(t)) = types.get(id) {
                let mut dims = t.dims.clone();
                for (axis, dim) in dims.iter_mut().enumerate() {
                    let idx = r.site[&(id, axis)];
                    match r.uf.bound(idx) {
                        Some(v) => *dim = Dim::Static(v),
                        None => {
                            let root = r.uf.find(idx);
                            let n = table.n_classes;
                            let cid = *class_ids.entry(root).or_insert_with(|| {
                                table.n_classes += 1;
                                n
                            });
                            table.classes.insert((id, axis), cid);
                        }
                    }
                }
                new_types.set(id, Type::Tensor(TensorType { dims, dtype: t.dtype }));
            }
        }
        (new_types, table)
    };
    m.types = Some(new_types);
    m.sym_dims = Some(table);
    Ok(())
}

/// Declared parameter list helper used by callers that need the param node
/// ids of a function: ids are assigned in definition order, parameters
/// first.
pub fn param_ids(m: &Module, fn_name: &str) -> Option<(ExprId, Vec<Param>)> {
    let mut next: ExprId = 0;
    for (name, func) in &m.functions {
        if name == fn_name {
            return Some((next, func.params.clone()));
        }
        next += func.params.len() as u32 + func.body.node_count();
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::expr::{FnDef, TensorLiteral};

    fn dim_s(d: u64) -> Dim {
        Dim::Static(d)
    }

    #[test]
    fn broadcast_rel_core_cases() {
        assert_eq!(broadcast_rel(dim_s(3), dim_s(3)).unwrap(), dim_s(3));
        assert_eq!(broadcast_rel(dim_s(1), dim_s(7)).unwrap(), dim_s(7));
        assert_eq!(broadcast_rel(dim_s(7), dim_s(1)).unwrap(), dim_s(7));
        assert!(broadcast_rel(dim_s(3), dim_s(4)).is_err());
        assert_eq!(broadcast_rel(Dim::Any, dim_s(1)).unwrap(), Dim::Any);
        assert_eq!(broadcast_rel(dim_s(1), Dim::Any).unwrap(), Dim::Any);
        assert_eq!(broadcast_rel(Dim::Any, dim_s(4)).unwrap(), dim_s(4));
        assert_eq!(broadcast_rel(dim_s(4), Dim::Any).unwrap(), dim_s(4));
        assert_eq!(broadcast_rel(Dim::Any, Dim::Any).unwrap(), Dim::Any);
    }

    #[test]
    fn compatible_is_gradual_both_ways() {
        let s = Type::Tensor(TensorType::statics(&[10], DType::F32));
        let d = Type::Tensor(TensorType { dims: vec![Dim::Any], dtype: DType::F32 });
        assert!(compatible(&s, &d));
        assert!(compatible(&d, &s));
        let other = Type::Tensor(TensorType::statics(&[11], DType::F32));
        assert!(!compatible(&s, &other));
        let rank2 = Type::Tensor(TensorType::statics(&[10, 1], DType::F32));
        assert!(!compatible(&s, &rank2));
    }

    #[test]
    fn join_widens_only_diverging_axes() {
        let a = Type::Tensor(TensorType::statics(&[3, 5], DType::F32));
        let b = Type::Tensor(TensorType { dims: vec![dim_s(3), dim_s(6)], dtype: DType::F32 });
        let j = join(&a, &b).unwrap();
        assert_eq!(
            j,
            Type::Tensor(TensorType { dims: vec![dim_s(3), Dim::Any], dtype: DType::F32 })
        );
    }

    fn any2(dtype: DType) -> Type {
        Type::Tensor(TensorType { dims: vec![Dim::Any, Dim::Any], dtype })
    }

    #[test]
    fn infer_types_dense_chain() {
        let mut m = Module::new();
        let w = TensorLiteral::new(vec![4, 5], ScalarVec::f32(20)).unwrap();
        m.add_fn(FnDef {
            name: "main".into(),
            params: vec![Param {
                name: "x".into(),
                ty: Type::Tensor(TensorType { dims: vec![Dim::Any, dim_s(4)], dtype: DType::F32 }),
            }],
            ret: any2(DType::F32),
            body: Expr::call("dense", vec![Expr::var("x"), Expr::Constant(w)]),
        });
        infer_types(&mut m).unwrap();
        let types = m.types.as_ref().unwrap();
        // ids: 0 = x param, 1 = call, 2 = var x, 3 = constant.
        assert_eq!(
            types.expect(1),
            &Type::Tensor(TensorType { dims: vec![Dim::Any, dim_s(5)], dtype: DType::F32 })
        );
    }

    #[test]
    fn infer_rejects_static_mismatch() {
        let mut m = Module::new();
        let a = TensorLiteral::new(vec![3], ScalarVec::f32(3)).unwrap();
        let b = TensorLiteral::new(vec![4], ScalarVec::f32(4)).unwrap();
        m.add_fn(FnDef {
            name: "main".into(),
            params: vec![],
            ret: Type::Tensor(TensorType { dims: vec![Dim::Any], dtype: DType::F32 }),
            body: Expr::call("add", vec![Expr::Constant(a), Expr::Constant(b)]),
        });
        assert!(infer_types(&mut m).is_err());
    }

    #[test]
    fn refine_recovers_false_dynamic_dim() {
        // p is declared dynamic but annotated static further down; uses of
        // the annotation refine the whole class.
        let mut m = Module::new();
        m.add_fn(FnDef {
            name: "main".into(),
            params: vec![Param {
                name: "p".into(),
                ty: Type::Tensor(TensorType { dims: vec![Dim::Any], dtype: DType::F32 }),
            }],
            ret: Type::Tensor(TensorType { dims: vec![Dim::Any], dtype: DType::F32 }),
            body: Expr::Let {
                name: "q".into(),
                ty: Some(Type::Tensor(TensorType::statics(&[10], DType::F32))),
                value: Box::new(Expr::var("p")),
                body: Box::new(Expr::call("add", vec![Expr::var("q"), Expr::var("q")])),
            },
        });
        refine_and_unify_dims(&mut m).unwrap();
        let types = m.types.as_ref().unwrap();
        // ids: 0 = p, 1 = let, 2 = var p (value), 3 = add, 4/5 = vars q.
        assert_eq!(types.expect(0), &Type::Tensor(TensorType::statics(&[10], DType::F32)));
        assert_eq!(types.expect(3), &Type::Tensor(TensorType::statics(&[10], DType::F32)));
        assert_eq!(m.sym_dims.as_ref().unwrap().n_classes, 0);
    }

    #[test]
    fn refine_tracks_symbolic_class_through_dense() {
        let mut m = Module::new();
        let w = TensorLiteral::new(vec![4, 4], ScalarVec::f32(16)).unwrap();
        m.add_fn(FnDef {
            name: "main".into(),
            params: vec![Param {
                name: "x".into(),
                ty: Type::Tensor(TensorType { dims: vec![Dim::Any, dim_s(4)], dtype: DType::F32 }),
            }],
            ret: any2(DType::F32),
            body: Expr::call(
                "dense",
                vec![
                    Expr::call("dense", vec![Expr::var("x"), Expr::Constant(w.clone())]),
                    Expr::Constant(w),
                ],
            ),
        });
        refine_and_unify_dims(&mut m).unwrap();
        let syms = m.sym_dims.as_ref().unwrap();
        assert_eq!(syms.n_classes, 1);
        // Row dim of the parameter (id 0) and of both dense results (ids 1
        // and 2) all share one class.
        let c = syms.class_of(0, 0).unwrap();
        assert_eq!(syms.class_of(1, 0), Some(c));
        assert_eq!(syms.class_of(2, 0), Some(c));
    }

    #[test]
    fn refine_reports_contradictions() {
        let mut m = Module::new();
        let w3 = TensorLiteral::new(vec![3, 5], ScalarVec::f32(15)).unwrap();
        let w4 = TensorLiteral::new(vec![4, 5], ScalarVec::f32(20)).unwrap();
        m.add_fn(FnDef {
            name: "main".into(),
            params: vec![Param {
                name: "p".into(),
                ty: any2(DType::F32),
            }],
            ret: any2(DType::F32),
            body: Expr::Let {
                name: "a".into(),
                ty: None,
                value: Box::new(Expr::call("dense", vec![Expr::var("p"), Expr::Constant(w3)])),
                body: Box::new(Expr::call("dense", vec![Expr::var("p"), Expr::Constant(w4)])),
            },
        });
        let err = refine_and_unify_dims(&mut m).unwrap_err();
        assert!(err.to_string().contains("conflict"), "{err}");
    }

    /// Test helper for bulk literal data.
    struct ScalarVec;
    impl ScalarVec {
        fn f32(n: usize) -> crate::ir::expr::ScalarData {
            crate::ir::expr::ScalarData::F32((0..n).map(|i| i as f32).collect())
        }
    }
}
