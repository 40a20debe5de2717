//! Memory planning: rewrites every operator call into explicit storage and
//! tensor allocations around `invoke_mut`, inserts `kill` statements after
//! last uses, and coalesces storage blocks with disjoint lifetimes.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::TypeError;
use crate::ir::expr::used_names;
use crate::ir::{
    free_vars, AttrValue, Attrs, DType, Device, Dim, Expr, MatchArm, Module, ShapeArg, Stage,
    TensorLiteral, TensorType, Type,
};
use crate::ops::{self, ShapeMode};
use crate::typesys;

pub const DEFAULT_ALIGN: u64 = 64;

type Stmt = (String, Option<Type>, Expr);

fn split_lets(e: Expr) -> (Vec<Stmt>, Expr) {
    let mut stmts = Vec::new();
    let mut cur = e;
    loop {
        match cur {
            Expr::Let { name, ty, value, body } => {
                stmts.push((name, ty, *value));
                cur = *body;
            }
            other => return (stmts, other),
        }
    }
}

fn join_lets(stmts: Vec<Stmt>, tail: Expr) -> Expr {
    let mut e = tail;
    for (name, ty, value) in stmts.into_iter().rev() {
        e = Expr::Let { name, ty, value: Box::new(value), body: Box::new(e) };
    }
    e
}

/// Operator namespace: module functions shadow composites and builtins.
struct OpEnv {
    fns: HashSet<String>,
    comps: HashSet<String>,
}

impl OpEnv {
    fn new(m: &Module) -> OpEnv {
        OpEnv {
            fns: m.functions.keys().cloned().collect(),
            comps: m.composites.keys().cloned().collect(),
        }
    }

    fn op_call<'e>(&self, e: &'e Expr) -> Option<(&'e str, &'e [Expr], &'e Attrs)> {
        if let Expr::Call { op, args, attrs } = e {
            if !self.fns.contains(op.as_str())
                && (self.comps.contains(op.as_str()) || ops::is_builtin(op))
            {
                return Some((op, args, attrs));
            }
        }
        None
    }
}

struct Namer {
    used: HashSet<String>,
    next: u32,
}

impl Namer {
    fn new(m: &Module) -> Namer {
        Namer { used: used_names(m), next: 0 }
    }

    /// Smallest index for which every produced name is unused; reserves them.
    fn reserve(&mut self, make: impl Fn(u32) -> Vec<String>) -> Vec<String> {
        loop {
            self.next += 1;
            let names = make(self.next);
            if names.iter().all(|n| !self.used.contains(n)) {
                for n in &names {
                    self.used.insert(n.clone());
                }
                return names;
            }
        }
    }

    fn fresh(&mut self, prefix: &str) -> String {
        self.reserve(|n| vec![format!("{prefix}{n}")]).pop().unwrap()
    }
}

/// Replaces free occurrences of `from` with `to`.
fn rename_var(e: &mut Expr, from: &str, to: &str) {
    match e {
        Expr::Var(n) => {
            if n == from {
                *n = to.to_string();
            }
        }
        Expr::Constant(_) => {}
        Expr::Let { name, value, body, .. } => {
            rename_var(value, from, to);
            if name != from {
                rename_var(body, from, to);
            }
        }
        Expr::Closure { params, body, .. } => {
            if params.iter().all(|p| p.name != from) {
                rename_var(body, from, to);
            }
        }
        Expr::Match { scrutinee, arms } => {
            rename_var(scrutinee, from, to);
            for arm in arms {
                if arm.binders.iter().all(|b| b != from) {
                    rename_var(&mut arm.body, from, to);
                }
            }
        }
        Expr::Call { args, .. } | Expr::Construct { args, .. } | Expr::Tuple(args) => {
            for a in args {
                rename_var(a, from, to);
            }
        }
        Expr::Apply { callee, args } => {
            rename_var(callee, from, to);
            for a in args {
                rename_var(a, from, to);
            }
        }
        Expr::If { cond, then_body, else_body } => {
            rename_var(cond, from, to);
            rename_var(then_body, from, to);
            rename_var(else_body, from, to);
        }
        Expr::Proj { tuple, .. } => rename_var(tuple, from, to),
        Expr::InvokeMut { inputs, outputs, .. } | Expr::InvokeShapeFunc { inputs, outputs, .. } => {
            for x in inputs.iter_mut().chain(outputs.iter_mut()) {
                rename_var(x, from, to);
            }
        }
        Expr::AllocStorage { size, .. } => rename_var(size, from, to),
        Expr::AllocTensor { storage, shape, .. } => {
            rename_var(storage, from, to);
            if let ShapeArg::Ref(s) = shape {
                rename_var(s, from, to);
            }
        }
        Expr::ReshapeTensor { tensor, shape } => {
            rename_var(tensor, from, to);
            if let ShapeArg::Ref(s) = shape {
                rename_var(s, from, to);
            }
        }
        Expr::Kill(x) | Expr::ShapeOf(x) => rename_var(x, from, to),
        Expr::DeviceCopy { value, .. } => rename_var(value, from, to),
    }
}

fn is_atom(e: &Expr) -> bool {
    matches!(e, Expr::Var(_) | Expr::Constant(_))
}

/// Normalization: every operator call becomes a direct statement value whose
/// arguments are variables or constants, so allocation bundles can replace
/// statements one for one.
struct Anf<'a> {
    env: &'a OpEnv,
    namer: &'a mut Namer,
}

impl Anf<'_> {
    fn context(&mut self, e: Expr) -> Expr {
        let (stmts, tail) = split_lets(e);
        let mut out: Vec<Stmt> = Vec::new();
        for (name, ty, value) in stmts {
            let v = self.value(value, &mut out);
            out.push((name, ty, v));
        }
        let mut tail = self.value(tail, &mut out);
        if self.env.op_call(&tail).is_some() {
            let n = self.namer.fresh("t");
            out.push((n.clone(), None, tail));
            tail = Expr::var(&n);
        }
        join_lets(out, tail)
    }

    fn value(&mut self, e: Expr, pre: &mut Vec<Stmt>) -> Expr {
        match e {
            Expr::Var(_) | Expr::Constant(_) => e,
            Expr::Call { op, args, attrs } => {
                let args = args.into_iter().map(|a| self.atom(a, pre)).collect();
                Expr::Call { op, args, attrs }
            }
            Expr::Apply { callee, args } => Expr::Apply {
                callee: Box::new(self.atom(*callee, pre)),
                args: args.into_iter().map(|a| self.atom(a, pre)).collect(),
            },
            Expr::Let { .. } => {
                // A block in value position: splice its statements into the
                // enclosing context under fresh names.
                let (stmts, mut tail) = split_lets(e);
                let mut renames: Vec<(String, String)> = Vec::new();
                for (name, ty, mut value) in stmts {
                    for (from, to) in &renames {
                        rename_var(&mut value, from, to);
                    }
                    let v = self.value(value, pre);
                    if name == "_" {
                        pre.push(("_".into(), ty, v));
                    } else {
                        let fresh = self.namer.fresh("t");
                        renames.push((name, fresh.clone()));
                        pre.push((fresh, ty, v));
                    }
                }
                for (from, to) in &renames {
                    rename_var(&mut tail, from, to);
                }
                self.value(tail, pre)
            }
            Expr::If { cond, then_body, else_body } => Expr::If {
                cond: Box::new(self.atom(*cond, pre)),
                then_body: Box::new(self.context(*then_body)),
                else_body: Box::new(self.context(*else_body)),
            },
            Expr::Match { scrutinee, arms } => Expr::Match {
                scrutinee: Box::new(self.atom(*scrutinee, pre)),
                arms: arms
                    .into_iter()
                    .map(|a| MatchArm {
                        ctor: a.ctor,
                        binders: a.binders,
                        body: self.context(a.body),
                    })
                    .collect(),
            },
            Expr::Closure { params, ret, body } => {
                Expr::Closure { params, ret, body: Box::new(self.context(*body)) }
            }
            Expr::Tuple(args) => {
                Expr::Tuple(args.into_iter().map(|a| self.atom(a, pre)).collect())
            }
            Expr::Proj { tuple, index } => {
                Expr::Proj { tuple: Box::new(self.atom(*tuple, pre)), index }
            }
            Expr::Construct { ctor, args } => Expr::Construct {
                ctor,
                args: args.into_iter().map(|a| self.atom(a, pre)).collect(),
            },
            Expr::InvokeMut { op, inputs, outputs, attrs } => Expr::InvokeMut {
                op,
                inputs: inputs.into_iter().map(|a| self.atom(a, pre)).collect(),
                outputs: outputs.into_iter().map(|a| self.atom(a, pre)).collect(),
                attrs,
            },
            Expr::InvokeShapeFunc { op, inputs, outputs, attrs } => Expr::InvokeShapeFunc {
                op,
                inputs: inputs.into_iter().map(|a| self.atom(a, pre)).collect(),
                outputs: outputs.into_iter().map(|a| self.atom(a, pre)).collect(),
                attrs,
            },
            Expr::AllocStorage { size, align, device } => Expr::AllocStorage {
                size: Box::new(self.atom(*size, pre)),
                align,
                device,
            },
            Expr::AllocTensor { storage, offset, shape, dtype } => Expr::AllocTensor {
                storage: Box::new(self.atom(*storage, pre)),
                offset,
                shape: self.shape_arg(shape, pre),
                dtype,
            },
            Expr::ReshapeTensor { tensor, shape } => Expr::ReshapeTensor {
                tensor: Box::new(self.atom(*tensor, pre)),
                shape: self.shape_arg(shape, pre),
            },
            Expr::Kill(x) => Expr::Kill(Box::new(self.atom(*x, pre))),
            Expr::ShapeOf(x) => Expr::ShapeOf(Box::new(self.atom(*x, pre))),
            Expr::DeviceCopy { value, src, dst } => Expr::DeviceCopy {
                value: Box::new(self.atom(*value, pre)),
                src,
                dst,
            },
        }
    }

    fn shape_arg(&mut self, s: ShapeArg, pre: &mut Vec<Stmt>) -> ShapeArg {
        match s {
            ShapeArg::Imm(d) => ShapeArg::Imm(d),
            ShapeArg::Ref(e) => ShapeArg::Ref(Box::new(self.atom(*e, pre))),
        }
    }

    fn atom(&mut self, e: Expr, pre: &mut Vec<Stmt>) -> Expr {
        if is_atom(&e) {
            return e;
        }
        let v = self.value(e, pre);
        if is_atom(&v) {
            return v;
        }
        let n = self.namer.fresh("t");
        pre.push((n.clone(), None, v));
        Expr::var(&n)
    }
}

fn static_dims(t: &TensorType) -> Option<Vec<u64>> {
    t.dims
        .iter()
        .map(|d| match d {
            Dim::Static(n) => Some(*n),
            Dim::Any => None,
        })
        .collect()
}

fn tensor_bytes(dims: &[u64], dtype: DType) -> i64 {
    dims.iter().product::<u64>() as i64 * dtype.size_bytes() as i64
}

fn const_i64(n: i64) -> Expr {
    Expr::Constant(TensorLiteral::scalar_i64(n))
}

/// Destination types written by `invoke_mut` for one operator call; `unique`
/// writes a capacity-padded buffer plus a rank-one true-shape tensor.
fn invoke_output_tys(op: &str, arg_tys: &[Type], value_ty: &TensorType) -> Vec<TensorType> {
    if op == "unique" {
        let Type::Tensor(in_t) = &arg_tys[0] else {
            panic!("unique takes a tensor");
        };
        vec![
            in_t.clone(),
            TensorType { dims: vec![Dim::Static(1)], dtype: DType::I64 },
        ]
    } else {
        vec![value_ty.clone()]
    }
}

/// Rewrites operator-call statements into allocation bundles, consuming
/// pre-order node ids in lockstep with the traversal of the input tree.
struct Manifester<'a> {
    env: &'a OpEnv,
    types: &'a typesys::TypeMap,
    align: u64,
    namer: &'a mut Namer,
    next: u32,
}

impl Manifester<'_> {
    fn go(&mut self, e: &Expr) -> Expr {
        self.next += 1;
        match e {
            Expr::Var(_) | Expr::Constant(_) => e.clone(),
            Expr::Let { name, ty, value, body } => {
                let call_id = self.next;
                if let Some((op, args, attrs)) = self.env.op_call(value) {
                    let out_ty = self.types.get(call_id).cloned();
                    self.next += value.node_count();
                    let bundle = self.bundle(name, ty.clone(), op, args, attrs, out_ty, call_id);
                    let body = self.go(body);
                    join_lets(bundle, body)
                } else {
                    let value = Box::new(self.go(value));
                    let body = Box::new(self.go(body));
                    Expr::Let { name: name.clone(), ty: ty.clone(), value, body }
                }
            }
            Expr::Call { op, args, attrs } => Expr::Call {
                op: op.clone(),
                args: args.iter().map(|a| self.go(a)).collect(),
                attrs: attrs.clone(),
            },
            Expr::Apply { callee, args } => Expr::Apply {
                callee: Box::new(self.go(callee)),
                args: args.iter().map(|a| self.go(a)).collect(),
            },
            Expr::If { cond, then_body, else_body } => Expr::If {
                cond: Box::new(self.go(cond)),
                then_body: Box::new(self.go(then_body)),
                else_body: Box::new(self.go(else_body)),
            },
            Expr::Match { scrutinee, arms } => Expr::Match {
                scrutinee: Box::new(self.go(scrutinee)),
                arms: arms
                    .iter()
                    .map(|a| MatchArm {
                        ctor: a.ctor.clone(),
                        binders: a.binders.clone(),
                        body: self.go(&a.body),
                    })
                    .collect(),
            },
            Expr::Closure { params, ret, body } => Expr::Closure {
                params: params.clone(),
                ret: ret.clone(),
                body: Box::new(self.go(body)),
            },
            Expr::Tuple(args) => Expr::Tuple(args.iter().map(|a| self.go(a)).collect()),
            Expr::Proj { tuple, index } => {
                Expr::Proj { tuple: Box::new(self.go(tuple)), index: *index }
            }
            Expr::Construct { ctor, args } => Expr::Construct {
                ctor: ctor.clone(),
                args: args.iter().map(|a| self.go(a)).collect(),
            },
            Expr::InvokeMut { op, inputs, outputs, attrs } => Expr::InvokeMut {
                op: op.clone(),
                inputs: inputs.iter().map(|a| self.go(a)).collect(),
                outputs: outputs.iter().map(|a| self.go(a)).collect(),
                attrs: attrs.clone(),
            },
            Expr::InvokeShapeFunc { op, inputs, outputs, attrs } => Expr::InvokeShapeFunc {
                op: op.clone(),
                inputs: inputs.iter().map(|a| self.go(a)).collect(),
                outputs: outputs.iter().map(|a| self.go(a)).collect(),
                attrs: attrs.clone(),
            },
            Expr::AllocStorage { size, align, device } => Expr::AllocStorage {
                size: Box::new(self.go(size)),
                align: *align,
                device: *device,
            },
            Expr::AllocTensor { storage, offset, shape, dtype } => Expr::AllocTensor {
                storage: Box::new(self.go(storage)),
                offset: *offset,
                shape: self.go_shape(shape),
                dtype: *dtype,
            },
            Expr::ReshapeTensor { tensor, shape } => Expr::ReshapeTensor {
                tensor: Box::new(self.go(tensor)),
                shape: self.go_shape(shape),
            },
            Expr::Kill(x) => Expr::Kill(Box::new(self.go(x))),
            Expr::ShapeOf(x) => Expr::ShapeOf(Box::new(self.go(x))),
            Expr::DeviceCopy { value, src, dst } => Expr::DeviceCopy {
                value: Box::new(self.go(value)),
                src: *src,
                dst: *dst,
            },
        }
    }

    fn go_shape(&mut self, s: &ShapeArg) -> ShapeArg {
        match s {
            ShapeArg::Imm(d) => ShapeArg::Imm(d.clone()),
            ShapeArg::Ref(e) => ShapeArg::Ref(Box::new(self.go(e))),
        }
    }

    /// Explicit allocation statements replacing `let binder = op(args)`.
    fn bundle(
        &mut self,
        binder: &str,
        ann: Option<Type>,
        op: &str,
        args: &[Expr],
        attrs: &Attrs,
        out_ty: Option<Type>,
        call_id: u32,
    ) -> Vec<Stmt> {
        let Some(Type::Tensor(value_ty)) = out_ty else {
            panic!("operator `{op}` has no tensor type at node {call_id}");
        };
        let arg_tys: Vec<Type> = (0..args.len())
            .map(|i| {
                debug_assert!(is_atom(&args[i]));
                self.types.get(call_id + 1 + i as u32).cloned().expect("typed argument")
            })
            .collect();
        let out_tys = invoke_output_tys(op, &arg_tys, &value_ty);
        let nouts = out_tys.len();
        let dynamic = out_tys.iter().any(|t| t.dims.contains(&Dim::Any));
        let suffix = |p: &str, n: u32, j: usize| {
            if nouts == 1 {
                format!("{p}{n}")
            } else {
                format!("{p}{n}_{j}")
            }
        };
        let mut stmts: Vec<Stmt> = Vec::new();

        // The user binder names the value tensor directly except for
        // `unique`, whose value is a re-view sliced by the true shape.
        let value_is_view = op == "unique";
        let named = |j: usize| !value_is_view && j == 0 && binder != "_";

        if !dynamic {
            let dims: Vec<Vec<u64>> =
                out_tys.iter().map(|t| static_dims(t).expect("static dims")).collect();
            let names = self.namer.reserve(|n| {
                let mut v = Vec::new();
                for j in 0..nouts {
                    v.push(suffix("buf", n, j));
                    if !named(j) {
                        v.push(suffix("out", n, j));
                    }
                }
                v
            });
            let mut it = names.into_iter();
            let mut bufs = Vec::new();
            let mut outs = Vec::new();
            for (j, t) in out_tys.iter().enumerate() {
                let buf = it.next().unwrap();
                let out = if named(j) { binder.to_string() } else { it.next().unwrap() };
                stmts.push((
                    buf.clone(),
                    None,
                    Expr::AllocStorage {
                        size: Box::new(const_i64(tensor_bytes(&dims[j], t.dtype))),
                        align: self.align,
                        device: None,
                    },
                ));
                stmts.push((
                    out.clone(),
                    if named(j) { ann.clone() } else { None },
                    Expr::AllocTensor {
                        storage: Box::new(Expr::var(&buf)),
                        offset: 0,
                        shape: ShapeArg::Imm(dims[j].clone()),
                        dtype: t.dtype,
                    },
                ));
                bufs.push(buf);
                outs.push(out);
            }
            stmts.push((
                "_".into(),
                None,
                Expr::InvokeMut {
                    op: op.to_string(),
                    inputs: args.to_vec(),
                    outputs: outs.iter().map(|o| Expr::var(o)).collect(),
                    attrs: attrs.clone(),
                },
            ));
            if value_is_view && binder != "_" {
                stmts.push((
                    binder.to_string(),
                    ann,
                    Expr::AllocTensor {
                        storage: Box::new(Expr::var(&bufs[0])),
                        offset: 0,
                        shape: ShapeArg::Ref(Box::new(Expr::var(&outs[1]))),
                        dtype: value_ty.dtype,
                    },
                ));
            }
            return stmts;
        }

        // Dynamic outputs: allocation is driven by the shape function.
        let mode = ops::lookup(op).map(|d| d.mode).unwrap_or(ShapeMode::DataIndependent);
        let mut sf_attrs = attrs.clone();
        let mut sf_inputs: Vec<Expr> = Vec::new();
        let mut pre: Vec<Stmt> = Vec::new();
        if mode == ShapeMode::DataDependent {
            sf_inputs = args.to_vec();
        } else {
            for (i, a) in args.iter().enumerate() {
                let Type::Tensor(at) = &arg_tys[i] else {
                    panic!("operator `{op}` takes tensors");
                };
                match static_dims(at) {
                    Some(dims) => {
                        sf_attrs.insert(format!("static{i}"), AttrValue::Shape(dims));
                    }
                    None => {
                        let sh = self.namer.fresh("sh");
                        pre.push((sh.clone(), None, Expr::ShapeOf(Box::new(a.clone()))));
                        sf_inputs.push(Expr::var(&sh));
                    }
                }
            }
        }
        stmts.extend(pre);
        let names = self.namer.reserve(|n| {
            let mut v = Vec::new();
            for j in 0..nouts {
                for p in ["sb", "so", "bb", "nb", "buf"] {
                    v.push(suffix(p, n, j));
                }
                if !named(j) {
                    v.push(suffix("out", n, j));
                }
            }
            v
        });
        let mut it = names.into_iter();
        let mut per_out: Vec<(String, String, String, String, String, String)> = Vec::new();
        for (j, t) in out_tys.iter().enumerate() {
            let rank = t.dims.len();
            assert!(rank > 0, "dynamic outputs have rank >= 1");
            let sb = it.next().unwrap();
            let so = it.next().unwrap();
            let bb = it.next().unwrap();
            let nb = it.next().unwrap();
            let buf = it.next().unwrap();
            let out = if named(j) { binder.to_string() } else { it.next().unwrap() };
            stmts.push((
                sb.clone(),
                None,
                Expr::AllocStorage {
                    size: Box::new(const_i64(rank as i64 * DType::I64.size_bytes() as i64)),
                    align: self.align,
                    device: Some(Device::Cpu),
                },
            ));
            stmts.push((
                so.clone(),
                None,
                Expr::AllocTensor {
                    storage: Box::new(Expr::var(&sb)),
                    offset: 0,
                    shape: ShapeArg::Imm(vec![rank as u64]),
                    dtype: DType::I64,
                },
            ));
            per_out.push((sb, so, bb, nb, buf, out));
        }
        stmts.push((
            "_".into(),
            None,
            Expr::InvokeShapeFunc {
                op: op.to_string(),
                inputs: sf_inputs,
                outputs: per_out.iter().map(|p| Expr::var(&p.1)).collect(),
                attrs: sf_attrs,
            },
        ));
        for (j, t) in out_tys.iter().enumerate() {
            let (_, so, bb, nb, buf, out) = &per_out[j];
            let mut battrs = Attrs::new();
            battrs.insert("dtype".into(), AttrValue::Dtype(t.dtype));
            stmts.push((
                bb.clone(),
                None,
                Expr::AllocStorage {
                    size: Box::new(const_i64(DType::I64.size_bytes() as i64)),
                    align: self.align,
                    device: Some(Device::Cpu),
                },
            ));
            stmts.push((
                nb.clone(),
                None,
                Expr::AllocTensor {
                    storage: Box::new(Expr::var(bb)),
                    offset: 0,
                    shape: ShapeArg::Imm(Vec::new()),
                    dtype: DType::I64,
                },
            ));
            stmts.push((
                "_".into(),
                None,
                Expr::InvokeMut {
                    op: "bytes".into(),
                    inputs: vec![Expr::var(so)],
                    outputs: vec![Expr::var(nb)],
                    attrs: battrs,
                },
            ));
            stmts.push((
                buf.clone(),
                None,
                Expr::AllocStorage {
                    size: Box::new(Expr::var(nb)),
                    align: self.align,
                    device: None,
                },
            ));
            stmts.push((
                out.clone(),
                if named(j) { ann.clone() } else { None },
                Expr::AllocTensor {
                    storage: Box::new(Expr::var(buf)),
                    offset: 0,
                    shape: ShapeArg::Ref(Box::new(Expr::var(so))),
                    dtype: t.dtype,
                },
            ));
        }
        stmts.push((
            "_".into(),
            None,
            Expr::InvokeMut {
                op: op.to_string(),
                inputs: args.to_vec(),
                outputs: per_out.iter().map(|p| Expr::var(&p.5)).collect(),
                attrs: attrs.clone(),
            },
        ));
        if value_is_view && binder != "_" {
            stmts.push((
                binder.to_string(),
                ann,
                Expr::AllocTensor {
                    storage: Box::new(Expr::var(&per_out[0].4)),
                    offset: 0,
                    shape: ShapeArg::Ref(Box::new(Expr::var(&per_out[1].5))),
                    dtype: value_ty.dtype,
                },
            ));
        }
        stmts
    }
}

/// Rewrites every operator call into explicit `alloc_storage`,
/// `alloc_tensor`, and `invoke_mut` statements. Dynamic result extents are
/// produced by `invoke_shape_func` into CPU-resident shape tensors that then
/// drive the data allocation. Idempotent on already-planned modules.
pub fn manifest_alloc(m: &Module, align: u64) -> Result<Module, TypeError> {
    let env = OpEnv::new(m);
    let mut anf = m.clone();
    anf.types = None;
    anf.sym_dims = None;
    let fn_names: Vec<String> = anf.functions.keys().cloned().collect();
    {
        let mut namer = Namer::new(&anf);
        for name in &fn_names {
            let body = anf.functions.get(name).unwrap().body.clone();
            let mut a = Anf { env: &env, namer: &mut namer };
            anf.functions.get_mut(name).unwrap().body = a.context(body);
        }
    }
    typesys::refine_and_unify_dims(&mut anf)?;
    let types = anf.types.clone().expect("typed");
    let mut out = anf.clone();
    out.types = None;
    out.sym_dims = None;
    out.stage = Stage::MemPlanned;
    let mut namer = Namer::new(&anf);
    let mut man = Manifester { env: &env, types: &types, align, namer: &mut namer, next: 0 };
    for name in &fn_names {
        man.next += anf.functions.get(name).unwrap().params.len() as u32;
        let body = man.go(&anf.functions.get(name).unwrap().body);
        out.functions.get_mut(name).unwrap().body = body;
    }
    Ok(out)
}

/// Checks that no operator call remains outside `invoke_mut` and that every
/// invoke destination is a named, explicitly allocated tensor.
pub fn no_implicit_allocs(m: &Module) -> Result<(), TypeError> {
    let env = OpEnv::new(m);
    for func in m.functions.values() {
        let mut err = None;
        visit(&func.body, &mut |e| {
            if err.is_some() {
                return;
            }
            if let Some((op, ..)) = env.op_call(e) {
                err = Some(format!("implicit `{op}` call remains in `{}`", func.name));
            }
            if let Expr::InvokeMut { op, outputs, .. } | Expr::InvokeShapeFunc { op, outputs, .. } =
                e
            {
                if outputs.iter().any(|o| !matches!(o, Expr::Var(_))) {
                    err = Some(format!("`{op}` writes to an unnamed destination"));
                }
            }
        });
        if let Some(msg) = err {
            return Err(TypeError::new(msg));
        }
    }
    Ok(())
}

fn visit<'e>(e: &'e Expr, f: &mut impl FnMut(&'e Expr)) {
    f(e);
    for c in e.children() {
        visit(c, f);
    }
}

// ---------------------------------------------------------------------------
// Kill insertion

#[derive(Default, Clone)]
struct UseInfo {
    last: Option<usize>,
    escapes: bool,
    killed: bool,
}

/// Records each free-variable occurrence of a statement value. Reads that
/// cannot retain a reference (invoke operands, shape reads, scalar reads)
/// keep a binding killable; any other occurrence marks it as escaping.
fn scan_uses(e: &Expr, idx: usize, hidden: &mut Vec<String>, f: &mut dyn FnMut(&str, bool, usize)) {
    let read = |x: &Expr, hidden: &mut Vec<String>, f: &mut dyn FnMut(&str, bool, usize)| {
        if let Expr::Var(n) = x {
            if !hidden.iter().any(|h| h == n) {
                f(n, true, idx);
            }
        } else {
            scan_uses(x, idx, hidden, f);
        }
    };
    match e {
        Expr::Var(n) => {
            if !hidden.iter().any(|h| h == n) {
                f(n, false, idx);
            }
        }
        Expr::Constant(_) => {}
        Expr::Let { name, value, body, .. } => {
            scan_uses(value, idx, hidden, f);
            hidden.push(name.clone());
            scan_uses(body, idx, hidden, f);
            hidden.pop();
        }
        Expr::Closure { params, body, .. } => {
            let depth = hidden.len();
            hidden.extend(params.iter().map(|p| p.name.clone()));
            // Captured values outlive this frame's statement order.
            scan_uses(body, idx, hidden, &mut |n, _, i| f(n, false, i));
            hidden.truncate(depth);
        }
        Expr::Match { scrutinee, arms } => {
            read(scrutinee, hidden, f);
            for arm in arms {
                let depth = hidden.len();
                hidden.extend(arm.binders.iter().cloned());
                scan_uses(&arm.body, idx, hidden, f);
                hidden.truncate(depth);
            }
        }
        Expr::If { cond, then_body, else_body } => {
            read(cond, hidden, f);
            scan_uses(then_body, idx, hidden, f);
            scan_uses(else_body, idx, hidden, f);
        }
        Expr::InvokeMut { inputs, outputs, .. } | Expr::InvokeShapeFunc { inputs, outputs, .. } => {
            for x in inputs.iter().chain(outputs) {
                read(x, hidden, f);
            }
        }
        Expr::AllocStorage { size, .. } => read(size, hidden, f),
        Expr::AllocTensor { storage, shape, .. } => {
            read(storage, hidden, f);
            if let ShapeArg::Ref(s) = shape {
                read(s, hidden, f);
            }
        }
        Expr::ReshapeTensor { tensor, shape } => {
            read(tensor, hidden, f);
            if let ShapeArg::Ref(s) = shape {
                read(s, hidden, f);
            }
        }
        Expr::Kill(x) | Expr::ShapeOf(x) => read(x, hidden, f),
        Expr::DeviceCopy { value, .. } => read(value, hidden, f),
        Expr::Call { args, .. } | Expr::Construct { args, .. } | Expr::Tuple(args) => {
            for a in args {
                scan_uses(a, idx, hidden, f);
            }
        }
        Expr::Apply { callee, args } => {
            scan_uses(callee, idx, hidden, f);
            for a in args {
                scan_uses(a, idx, hidden, f);
            }
        }
        Expr::Proj { tuple, .. } => scan_uses(tuple, idx, hidden, f),
    }
}

/// Inserts `kill` statements after the last use of each non-escaping tensor
/// binding. Tensors sharing one storage block are released together after
/// the group's last use. Parameters are owned, and therefore killable, only
/// in `main`.
pub fn insert_kills(m: &Module) -> Module {
    let mut out = m.clone();
    let fn_names: Vec<String> = out.functions.keys().cloned().collect();
    for name in &fn_names {
        let func = out.functions.get(name).unwrap();
        let owned: Vec<String> = if name == "main" {
            func.params
                .iter()
                .filter(|p| matches!(p.ty, Type::Tensor(_)))
                .map(|p| p.name.clone())
                .collect()
        } else {
            Vec::new()
        };
        let body = kills_ctx(func.body.clone(), &owned);
        out.functions.get_mut(name).unwrap().body = body;
    }
    out
}

fn kills_nested(e: Expr) -> Expr {
    match e {
        Expr::If { cond, then_body, else_body } => Expr::If {
            cond,
            then_body: Box::new(kills_ctx(*then_body, &[])),
            else_body: Box::new(kills_ctx(*else_body, &[])),
        },
        Expr::Match { scrutinee, arms } => Expr::Match {
            scrutinee,
            arms: arms
                .into_iter()
                .map(|a| MatchArm {
                    ctor: a.ctor,
                    binders: a.binders,
                    body: kills_ctx(a.body, &[]),
                })
                .collect(),
        },
        Expr::Closure { params, ret, body } => {
            Expr::Closure { params, ret, body: Box::new(kills_ctx(*body, &[])) }
        }
        other => other,
    }
}

fn kills_ctx(e: Expr, owned_params: &[String]) -> Expr {
    let (stmts, tail) = split_lets(e);
    let stmts: Vec<Stmt> =
        stmts.into_iter().map(|(n, ty, v)| (n, ty, kills_nested(v))).collect();
    let n_stmts = stmts.len();

    let mut binders: HashMap<String, usize> = HashMap::new();
    let mut dup: HashSet<String> = HashSet::new();
    for (name, _, _) in &stmts {
        if name != "_" && binders.insert(name.clone(), 0).is_some() {
            dup.insert(name.clone());
        }
    }

    let mut uses: HashMap<String, UseInfo> = HashMap::new();
    let record = |name: &str, consuming: bool, idx: usize, uses: &mut HashMap<String, UseInfo>| {
        let u = uses.entry(name.to_string()).or_default();
        u.last = Some(u.last.map_or(idx, |l| l.max(idx)));
        u.escapes |= !consuming;
    };
    for (idx, (_, _, value)) in stmts.iter().enumerate() {
        if let Expr::Kill(x) = value {
            if let Expr::Var(n) = &**x {
                uses.entry(n.clone()).or_default().killed = true;
            }
        }
        scan_uses(value, idx, &mut Vec::new(), &mut |n, c, i| record(n, c, i, &mut uses));
    }
    scan_uses(&tail, n_stmts, &mut Vec::new(), &mut |n, _, i| record(n, false, i, &mut uses));

    // Alias groups keyed by root storage: tensors placed on one block are
    // freed together once all of them are dead.
    struct Group {
        members: Vec<(usize, String)>,
        storage: Option<String>,
    }
    let mut groups: Vec<Group> = Vec::new();
    let mut key_of: HashMap<String, usize> = HashMap::new();
    for p in owned_params {
        key_of.insert(p.clone(), groups.len());
        groups.push(Group { members: vec![(0, p.clone())], storage: None });
    }
    for (idx, (name, _, value)) in stmts.iter().enumerate() {
        if name == "_" || dup.contains(name) {
            continue;
        }
        match value {
            Expr::AllocTensor { storage: s, .. } => {
                if let Expr::Var(sv) = &**s {
                    if dup.contains(sv) {
                        continue;
                    }
                    let gi = *key_of.entry(format!("storage:{sv}")).or_insert_with(|| {
                        groups.push(Group { members: Vec::new(), storage: Some(sv.clone()) });
                        groups.len() - 1
                    });
                    groups[gi].members.push((idx, name.clone()));
                    key_of.insert(name.clone(), gi);
                }
            }
            Expr::ReshapeTensor { tensor: t, .. } => {
                if let Expr::Var(tv) = &**t {
                    if let Some(&gi) = key_of.get(tv) {
                        groups[gi].members.push((idx, name.clone()));
                        key_of.insert(name.clone(), gi);
                    }
                }
            }
            Expr::DeviceCopy { .. } => {
                key_of.insert(name.clone(), groups.len());
                groups.push(Group { members: vec![(idx, name.clone())], storage: None });
            }
            _ => {}
        }
    }

    let mut kills_at: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for g in &groups {
        if g.members.is_empty() {
            continue;
        }
        let mut ok = true;
        let mut pos = 0usize;
        for (def, name) in &g.members {
            pos = pos.max(*def);
            match uses.get(name) {
                Some(u) => {
                    ok &= !u.escapes && !u.killed;
                    pos = pos.max(u.last.unwrap_or(*def));
                }
                None => {}
            }
        }
        if let Some(sv) = &g.storage {
            if let Some(u) = uses.get(sv) {
                ok &= !u.escapes;
                pos = pos.max(u.last.unwrap_or(0));
            }
        }
        if ok && pos < n_stmts {
            let entry = kills_at.entry(pos).or_default();
            for (_, name) in &g.members {
                entry.push(name.clone());
            }
        }
    }

    let mut out: Vec<Stmt> = Vec::new();
    for (idx, stmt) in stmts.into_iter().enumerate() {
        out.push(stmt);
        if let Some(names) = kills_at.get(&idx) {
            for n in names {
                out.push(("_".into(), None, Expr::Kill(Box::new(Expr::var(n)))));
            }
        }
    }
    join_lets(out, tail)
}

// ---------------------------------------------------------------------------
// Storage coalescing

#[derive(Debug, Clone)]
struct BlockInfo {
    stmt: usize,
    name: String,
    size: u64,
    align: u64,
    device: Option<Device>,
    lo: usize,
    hi: usize,
    dynamic: bool,
}

fn context_blocks(stmts: &[Stmt], tail: &Expr) -> Vec<BlockInfo> {
    let mut dup: HashSet<String> = HashSet::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (name, _, _) in stmts {
        if name != "_" && !seen.insert(name.clone()) {
            dup.insert(name.clone());
        }
    }
    let mut blocks: Vec<BlockInfo> = Vec::new();
    let mut of_storage: HashMap<String, usize> = HashMap::new();
    let mut alias: HashMap<String, usize> = HashMap::new();
    for (idx, (name, _, value)) in stmts.iter().enumerate() {
        match value {
            Expr::AllocStorage { size, align, device } => {
                if name == "_" || dup.contains(name) {
                    continue;
                }
                let (sz, dynamic) = match &**size {
                    Expr::Constant(lit) => match lit.scalar_i64_value() {
                        Some(v) if v > 0 => (v as u64, false),
                        _ => (0, true),
                    },
                    _ => (0, true),
                };
                of_storage.insert(name.clone(), blocks.len());
                blocks.push(BlockInfo {
                    stmt: idx,
                    name: name.clone(),
                    size: sz,
                    align: *align,
                    device: *device,
                    lo: idx,
                    hi: idx,
                    dynamic,
                });
            }
            Expr::AllocTensor { storage, .. } => {
                if let Expr::Var(sv) = &**storage {
                    if let Some(&b) = of_storage.get(sv) {
                        if name != "_" && !dup.contains(name) {
                            alias.insert(name.clone(), b);
                        }
                    }
                }
            }
            Expr::ReshapeTensor { tensor, .. } => {
                if let Expr::Var(tv) = &**tensor {
                    if let Some(&b) = alias.get(tv) {
                        if name != "_" && !dup.contains(name) {
                            alias.insert(name.clone(), b);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    let touch = |names: Vec<String>, idx: usize, blocks: &mut Vec<BlockInfo>| {
        for n in names {
            if let Some(&b) = of_storage.get(&n).or_else(|| alias.get(&n)) {
                blocks[b].hi = blocks[b].hi.max(idx);
            }
        }
    };
    for (idx, (_, _, value)) in stmts.iter().enumerate() {
        touch(free_vars(value), idx, &mut blocks);
    }
    touch(free_vars(tail), stmts.len(), &mut blocks);
    blocks
}

/// Merges same-device static storage blocks whose live ranges do not
/// overlap: greedy first-fit over blocks ordered by decreasing size, ties in
/// definition order; a merged block takes the largest member size.
pub fn coalesce_storage(m: &Module) -> Module {
    let mut out = m.clone();
    let fn_names: Vec<String> = out.functions.keys().cloned().collect();
    for name in &fn_names {
        let body = coalesce_ctx(out.functions.get(name).unwrap().body.clone());
        out.functions.get_mut(name).unwrap().body = body;
    }
    out
}

fn coalesce_nested(e: Expr) -> Expr {
    match e {
        Expr::If { cond, then_body, else_body } => Expr::If {
            cond,
            then_body: Box::new(coalesce_ctx(*then_body)),
            else_body: Box::new(coalesce_ctx(*else_body)),
        },
        Expr::Match { scrutinee, arms } => Expr::Match {
            scrutinee,
            arms: arms
                .into_iter()
                .map(|a| MatchArm { ctor: a.ctor, binders: a.binders, body: coalesce_ctx(a.body) })
                .collect(),
        },
        Expr::Closure { params, ret, body } => {
            Expr::Closure { params, ret, body: Box::new(coalesce_ctx(*body)) }
        }
        other => other,
    }
}

fn coalesce_ctx(e: Expr) -> Expr {
    let (stmts, tail) = split_lets(e);
    let mut stmts: Vec<Stmt> =
        stmts.into_iter().map(|(n, ty, v)| (n, ty, coalesce_nested(v))).collect();
    let mut tail = tail;
    let blocks = context_blocks(&stmts, &tail);

    let mut candidates: Vec<usize> = (0..blocks.len()).filter(|&b| !blocks[b].dynamic).collect();
    candidates.sort_by(|&a, &b| {
        blocks[b].size.cmp(&blocks[a].size).then(blocks[a].stmt.cmp(&blocks[b].stmt))
    });
    let overlap = |a: &BlockInfo, b: &BlockInfo| a.lo <= b.hi && b.lo <= a.hi;
    let mut colors: Vec<Vec<usize>> = Vec::new();
    for &b in &candidates {
        let fit = colors.iter_mut().find(|members| {
            blocks[members[0]].device == blocks[b].device
                && members.iter().all(|&o| !overlap(&blocks[o], &blocks[b]))
        });
        match fit {
            Some(members) => members.push(b),
            None => colors.push(vec![b]),
        }
    }

    let mut remove: HashSet<usize> = HashSet::new();
    let mut renames: Vec<(String, String)> = Vec::new();
    let mut resize: HashMap<usize, (u64, u64)> = HashMap::new();
    for members in &colors {
        if members.len() < 2 {
            continue;
        }
        let rep = *members.iter().min_by_key(|&&b| blocks[b].stmt).unwrap();
        let size = members.iter().map(|&b| blocks[b].size).max().unwrap();
        let align = members.iter().map(|&b| blocks[b].align).max().unwrap();
        resize.insert(blocks[rep].stmt, (size, align));
        for &b in members {
            if b != rep {
                remove.insert(blocks[b].stmt);
                renames.push((blocks[b].name.clone(), blocks[rep].name.clone()));
            }
        }
    }
    if remove.is_empty() && resize.is_empty() {
        return join_lets(stmts, tail);
    }
    for (idx, (_, _, value)) in stmts.iter_mut().enumerate() {
        if let Some(&(size, align)) = resize.get(&idx) {
            if let Expr::AllocStorage { size: s, align: a, .. } = value {
                *s = Box::new(const_i64(size as i64));
                *a = align;
            }
        }
    }
    let mut out: Vec<Stmt> = Vec::new();
    for (idx, stmt) in stmts.into_iter().enumerate() {
        if !remove.contains(&idx) {
            out.push(stmt);
        }
    }
    for (from, to) in &renames {
        for (_, _, value) in &mut out {
            rename_var(value, from, to);
        }
        rename_var(&mut tail, from, to);
    }
    join_lets(out, tail)
}

// ---------------------------------------------------------------------------
// Reporting

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemReport {
    pub static_blocks: usize,
    pub static_bytes: u64,
    pub dynamic_blocks: usize,
    /// Largest sum of simultaneously live static block sizes; nested
    /// contexts are measured independently and the maximum is reported.
    pub peak_live_bytes: u64,
}

pub fn mem_report(m: &Module) -> MemReport {
    let mut r = MemReport::default();
    for func in m.functions.values() {
        report_ctx(&func.body, &mut r);
    }
    r
}

fn report_ctx(e: &Expr, r: &mut MemReport) {
    let (stmts, tail) = split_lets(e.clone());
    for (_, _, v) in &stmts {
        match v {
            Expr::If { then_body, else_body, .. } => {
                report_ctx(then_body, r);
                report_ctx(else_body, r);
            }
            Expr::Match { arms, .. } => {
                for a in arms {
                    report_ctx(&a.body, r);
                }
            }
            Expr::Closure { body, .. } => report_ctx(body, r),
            _ => {}
        }
    }
    let blocks = context_blocks(&stmts, &tail);
    let mut peak = 0u64;
    for idx in 0..=stmts.len() {
        let live: u64 = blocks
            .iter()
            .filter(|b| !b.dynamic && b.lo <= idx && idx <= b.hi)
            .map(|b| b.size)
            .sum();
        peak = peak.max(live);
    }
    r.peak_live_bytes = r.peak_live_bytes.max(peak);
    for b in &blocks {
        if b.dynamic {
            r.dynamic_blocks += 1;
        } else {
            r.static_blocks += 1;
            r.static_bytes += b.size;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::expr::well_formed;
    use crate::ir::{
        alpha_eq, eval_ref, eval_ref_instrumented, parse_module, print_module, pure_close,
        PureValue,
    };
    use rand::{Rng, SeedableRng};

    fn f32s(v: Vec<f32>) -> TensorLiteral {
        TensorLiteral::vector_f32(v)
    }

    fn roundtrips(m: &Module) {
        let text = print_module(m);
        let back = parse_module(&text).unwrap();
        assert!(alpha_eq(&back, m), "not a fixed point:\n{text}");
    }

    #[test]
    fn manifests_the_flat_worked_example() {
        let src = r#"// stage: fused

fn main(t1 : Tensor<(10), f32>, t2 : Tensor<(10), f32>) -> Tensor<(10), f32> {
  let out1 = add(t1, t2);
  out1
}
"#;
        let m = parse_module(src).unwrap();
        let mp = manifest_alloc(&m, 64).unwrap();
        assert_eq!(mp.stage, Stage::MemPlanned);
        let text = print_module(&mp);
        assert!(text.contains("let buf1 = alloc_storage(40,64,?);"), "{text}");
        assert!(text.contains("let out1 = alloc_tensor(buf1,0,(10),f32);"), "{text}");
        assert!(text.contains("invoke_mut(add, (t1, t2), (out1));"), "{text}");
        no_implicit_allocs(&mp).unwrap();
        well_formed(&mp).unwrap();
        roundtrips(&mp);

        let killed = insert_kills(&mp);
        let kt = print_module(&killed);
        let inv = kt.find("invoke_mut(add").unwrap();
        let k1 = kt.find("kill(t1);").unwrap();
        let k2 = kt.find("kill(t2);").unwrap();
        assert!(inv < k1 && k1 < k2, "{kt}");
        assert!(!kt.contains("kill(out1)"), "{kt}");

        let a = f32s((0..10).map(|i| i as f32).collect());
        let b = f32s((0..10).map(|i| (i * 3) as f32).collect());
        let want = eval_ref(&m, &[a.clone(), b.clone()]).unwrap();
        let (got, stats) = eval_ref_instrumented(&killed, &[a, b]).unwrap();
        assert!(pure_close(&want, &got, 0.0));
        assert_eq!(stats.allocs, 1);
        assert_eq!(stats.alloc_bytes, 40);
    }

    #[test]
    fn manifest_is_idempotent() {
        let src = r#"// stage: fused

fn main(a : Tensor<(2, 3), f32>, w : Tensor<(3, 4), f32>) -> Tensor<(2, 4), f32> {
  let h = dense(a, w);
  let s = add(h, h);
  s
}
"#;
        let m = parse_module(src).unwrap();
        let m1 = manifest_alloc(&m, 64).unwrap();
        let m2 = manifest_alloc(&m1, 64).unwrap();
        assert!(alpha_eq(&m1, &m2), "{}", print_module(&m2));
        let k1 = insert_kills(&m1);
        assert!(alpha_eq(&insert_kills(&k1), &k1));
        let c1 = coalesce_storage(&k1);
        assert!(alpha_eq(&coalesce_storage(&c1), &c1));
        assert!(alpha_eq(&manifest_alloc(&c1, 64).unwrap(), &c1));
        roundtrips(&c1);
    }

    #[test]
    fn dynamic_concat_allocates_from_the_shape_function() {
        let src = r#"// stage: fused

fn main(a : Tensor<(?), f32>, b : Tensor<(3), f32>) -> Tensor<(?), f32> {
  let c = concat(a, b, axis=0);
  c
}
"#;
        let m = parse_module(src).unwrap();
        let mp = manifest_alloc(&m, 64).unwrap();
        let text = print_module(&mp);
        assert!(text.contains("shape_of(a)"), "{text}");
        assert!(!text.contains("shape_of(b)"), "{text}");
        assert!(text.contains("invoke_shape_func(concat, "), "{text}");
        assert!(text.contains("static1=(3)"), "{text}");
        assert!(text.contains("invoke_mut(bytes, "), "{text}");
        no_implicit_allocs(&mp).unwrap();
        well_formed(&mp).unwrap();
        roundtrips(&mp);

        let killed = insert_kills(&mp);
        let a = f32s(vec![1.0, 2.0, 3.0, 4.0]);
        let b = f32s(vec![9.0, 8.0, 7.0]);
        let want = eval_ref(&m, &[a.clone(), b.clone()]).unwrap();
        let (got, stats) = eval_ref_instrumented(&killed, &[a, b]).unwrap();
        assert!(pure_close(&want, &got, 0.0));
        assert_eq!(stats.allocs, 3);
        assert_eq!(stats.alloc_bytes, 8 + 8 + 28);
        assert_eq!(stats.invokes, 2);

        // shape blocks stay CPU-resident and apart from data blocks
        let merged = coalesce_storage(&killed);
        assert!(alpha_eq(&merged, &killed));
    }

    #[test]
    fn unique_value_is_a_true_shape_view() {
        let src = r#"// stage: fused

fn main(v : Tensor<(6), i64>) -> Tensor<(?), i64> {
  let u = unique(v);
  u
}
"#;
        let m = parse_module(src).unwrap();
        let mp = manifest_alloc(&m, 64).unwrap();
        let text = print_module(&mp);
        assert!(text.contains("alloc_storage(48,64,?)"), "{text}");
        assert!(text.contains("alloc_storage(8,64,?)"), "{text}");
        assert!(text.contains("invoke_mut(unique, (v), (out1_0, out1_1));"), "{text}");
        assert!(text.contains("let u = alloc_tensor(buf1_0,0,out1_1,i64);"), "{text}");
        no_implicit_allocs(&mp).unwrap();
        roundtrips(&mp);

        let killed = insert_kills(&mp);
        let kt = print_module(&killed);
        assert!(kt.contains("kill(v);"), "{kt}");
        assert!(kt.contains("kill(out1_1);"), "{kt}");
        assert!(!kt.contains("kill(out1_0)"), "{kt}");
        assert!(!kt.contains("kill(u)"), "{kt}");

        let input = TensorLiteral::vector_i64(vec![5, 3, 5, 1, 3, 9]);
        let want = eval_ref(&m, &[input.clone()]).unwrap();
        let (got, stats) = eval_ref_instrumented(&killed, &[input]).unwrap();
        assert!(pure_close(&want, &got, 0.0));
        let PureValue::Tensor(t) = &got else { panic!("tensor result") };
        assert_eq!(t.shape, vec![4]);
        assert_eq!(stats.allocs, 2);
        assert_eq!(stats.alloc_bytes, 56);
    }

    #[test]
    fn kills_respect_escapes_branches_and_calls() {
        let src = r#"// stage: memplanned

fn helper(x : Tensor<(4), f32>) -> Tensor<(4), f32> {
  let bufh = alloc_storage(16,64,?);
  let h = alloc_tensor(bufh,0,(4),f32);
  invoke_mut(multiply, (x, x), (h));
  h
}

fn main(p : Tensor<(), i64>, a : Tensor<(4), f32>) -> Tensor<(4), f32> {
  let buf1 = alloc_storage(16,64,?);
  let x = alloc_tensor(buf1,0,(4),f32);
  invoke_mut(multiply, (a, a), (x));
  let buf2 = alloc_storage(16,64,?);
  let y = alloc_tensor(buf2,0,(4),f32);
  invoke_mut(add, (a, x), (y));
  let buf3 = alloc_storage(16,64,?);
  let z = alloc_tensor(buf3,0,(4),f32);
  invoke_mut(add, (x, y), (z));
  let q = helper(a);
  let r = if (p) { x } else { y };
  let tp = (r, q);
  tp.0
}
"#;
        let m = parse_module(src).unwrap();
        let killed = insert_kills(&m);
        let kt = print_module(&killed);
        // the dead temporary is released right after it is written
        assert!(kt.contains("kill(z);"), "{kt}");
        // branch results and tuple members stay live
        assert!(!kt.contains("kill(x)"), "{kt}");
        assert!(!kt.contains("kill(y)"), "{kt}");
        // a escapes into a call that may retain an alias
        assert!(!kt.contains("kill(a)"), "{kt}");
        // helper's parameter is borrowed and its result escapes
        assert!(!kt.contains("kill(h)"), "{kt}");
        assert!(alpha_eq(&insert_kills(&killed), &killed));
        roundtrips(&killed);

        for (p, want) in [(1i64, [1.0f32, 4.0, 9.0, 16.0]), (0, [2.0, 6.0, 12.0, 20.0])] {
            let got = eval_ref_instrumented(
                &killed,
                &[TensorLiteral::scalar_i64(p), f32s(vec![1.0, 2.0, 3.0, 4.0])],
            )
            .unwrap()
            .0;
            let expect = PureValue::Tensor(f32s(want.to_vec()));
            assert!(pure_close(&expect, &got, 0.0));
        }
    }

    #[test]
    fn chain_storage_coalesces_like_intervals() {
        for n in [4usize, 16] {
            let mut body = String::new();
            let mut prev = "x0".to_string();
            for i in 1..=n {
                body.push_str(&format!("  let x{i} = add({prev}, {prev});\n"));
                prev = format!("x{i}");
            }
            let src = format!(
                "// stage: fused\n\nfn main(x0 : Tensor<(8), f32>) -> Tensor<(8), f32> {{\n{body}  {prev}\n}}\n"
            );
            let m = parse_module(&src).unwrap();
            let planned = insert_kills(&manifest_alloc(&m, 64).unwrap());
            let merged = coalesce_storage(&planned);
            let before = mem_report(&planned);
            let after = mem_report(&merged);
            assert_eq!(before.static_blocks, n);
            assert_eq!(before.peak_live_bytes, 64);
            // interval graphs are perfect: the optimum is the peak live count
            assert_eq!(after.static_blocks, (before.peak_live_bytes / 32) as usize);
            assert_eq!(after.static_bytes, 64);
            assert!(after.static_bytes >= before.peak_live_bytes);
            roundtrips(&merged);

            let input = f32s(vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);
            let want = eval_ref(&m, &[input.clone()]).unwrap();
            let (got, stats) = eval_ref_instrumented(&merged, &[input]).unwrap();
            assert!(pure_close(&want, &got, 1e-4));
            assert_eq!(stats.allocs, 2);
        }
    }

    #[test]
    fn scalar_ops_allocate_rank_zero_tensors() {
        let src = r#"// stage: fused

fn main(n : Tensor<(), i64>) -> Tensor<(), i64> {
  let one = const(1);
  let m = add(n, one);
  m
}
"#;
        let m = parse_module(src).unwrap();
        let mp = manifest_alloc(&m, 64).unwrap();
        let text = print_module(&mp);
        assert!(text.contains("alloc_storage(8,64,?)"), "{text}");
        assert!(text.contains("alloc_tensor(buf1,0,(),i64)"), "{text}");
        no_implicit_allocs(&mp).unwrap();
        roundtrips(&mp);
        let (got, stats) =
            eval_ref_instrumented(&insert_kills(&mp), &[TensorLiteral::scalar_i64(41)]).unwrap();
        assert!(pure_close(&PureValue::Tensor(TensorLiteral::scalar_i64(42)), &got, 0.0));
        assert_eq!(stats.allocs, 1);
    }

    #[test]
    fn branch_local_allocations_stay_inside_their_arm() {
        let src = r#"// stage: fused

fn main(p : Tensor<(), i64>, a : Tensor<(4), f32>) -> Tensor<(4), f32> {
  let r = if (p) { add(a, a) } else { multiply(a, a) };
  r
}
"#;
        let m = parse_module(src).unwrap();
        let planned = insert_kills(&manifest_alloc(&m, 64).unwrap());
        let text = print_module(&planned);
        // each arm allocates its own result and must not kill it
        assert!(!text.contains("kill(t"), "{text}");
        no_implicit_allocs(&planned).unwrap();
        well_formed(&planned).unwrap();
        roundtrips(&planned);
        for p in [0i64, 1] {
            let inputs = [TensorLiteral::scalar_i64(p), f32s(vec![1.0, 2.0, 3.0, 4.0])];
            let want = eval_ref(&m, &inputs).unwrap();
            let got = eval_ref_instrumented(&planned, &inputs).unwrap().0;
            assert!(pure_close(&want, &got, 0.0));
        }
    }

    #[test]
    fn random_elementwise_programs_survive_planning() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let n_stmts = rng.gen_range(1..=7);
            let mut names = vec!["a".to_string(), "b".to_string()];
            let mut body = String::new();
            for i in 0..n_stmts {
                let op = if rng.gen_bool(0.5) { "add" } else { "multiply" };
                let l = names[rng.gen_range(0..names.len())].clone();
                let r = names[rng.gen_range(0..names.len())].clone();
                body.push_str(&format!("  let v{i} = {op}({l}, {r});\n"));
                names.push(format!("v{i}"));
            }
            let tail = names[rng.gen_range(2..names.len())].clone();
            let src = format!(
                "// stage: fused\n\nfn main(a : Tensor<(4), f32>, b : Tensor<(4), f32>) -> Tensor<(4), f32> {{\n{body}  {tail}\n}}\n"
            );
            let m = parse_module(&src).unwrap();
            let planned = coalesce_storage(&insert_kills(&manifest_alloc(&m, 64).unwrap()));
            no_implicit_allocs(&planned).unwrap();
            let a = f32s((0..4).map(|i| (i + case) as f32 * 0.25).collect());
            let b = f32s((0..4).map(|i| (i * i) as f32 - 1.5).collect());
            let want = eval_ref(&m, &[a.clone(), b.clone()]).unwrap();
            let got = eval_ref_instrumented(&planned, &[a, b]).unwrap().0;
            assert!(pure_close(&want, &got, 1e-3), "case {case}:\n{src}");
        }
    }
}
