//! Device placement: every expression joins a device domain, domains are
//! unified by hard rules (kernel operands, storage chains, shape machinery
//! on the CPU), and conflicting value flows are reconciled by inserting
//! `device_copy` statements, one per value and destination device.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::error::PlaceError;
use crate::ir::expr::used_names;
use crate::ir::{Device, Expr, ExprId, MatchArm, Module, ShapeArg, Stage, Type};
use crate::unify::{BindConflict, UnionFind};

pub const DEFAULT_TARGET: Device = Device::Dev(0);

#[derive(Debug, Clone, Copy, Default)]
pub struct PlacementOptions {
    /// Pin the result of `main` to the CPU so the host always receives a
    /// readable tensor; off by default so a fully static program can live
    /// entirely on the target device.
    pub cpu_return: bool,
}

/// A variable read tied to its binding's node. Invoke outputs and kill
/// arguments are not edges: outputs are hard-unified with their binding
/// (copying a write target would discard the write) and kills are
/// device-neutral.
struct Edge {
    occ: usize,
    def: usize,
    copyable: bool,
    name: String,
}

struct Binding {
    name: String,
    node: usize,
    copyable: bool,
    /// Field roots when the bound value is a tuple literal, so projections
    /// alias the member device.
    fields: Option<Vec<usize>>,
}

struct Analyzer<'m> {
    m: &'m Module,
    uf: UnionFind<Device>,
    next: usize,
    soft: Vec<(usize, usize)>,
    edges: Vec<Edge>,
    /// Nodes allocated for match binders and closure parameters, in
    /// discovery order, so a later traversal can replay them.
    extra: Vec<usize>,
    sigs: HashMap<String, (Vec<usize>, usize)>,
}

fn conflict(e: BindConflict<Device>) -> PlaceError {
    PlaceError::Contradiction {
        a: e.a.to_string(),
        a_src: e.a_src,
        b: e.b.to_string(),
        b_src: e.b_src,
    }
}

fn copyable_value(value: &Expr, env: &[Binding]) -> bool {
    match value {
        Expr::AllocTensor { .. }
        | Expr::ReshapeTensor { .. }
        | Expr::DeviceCopy { .. }
        | Expr::Constant(_)
        | Expr::ShapeOf(_) => true,
        Expr::Var(n) => env.iter().rev().find(|b| b.name == *n).is_some_and(|b| b.copyable),
        _ => false,
    }
}

fn tuple_fields(value: &Expr, vid: usize) -> Option<Vec<usize>> {
    if let Expr::Tuple(args) = value {
        let mut ids = Vec::new();
        let mut at = vid + 1;
        for a in args {
            ids.push(at);
            at += a.node_count() as usize;
        }
        Some(ids)
    } else {
        None
    }
}

impl Analyzer<'_> {
    fn bind(&mut self, node: usize, d: Device, src: &str) -> Result<(), PlaceError> {
        self.uf.bind(node, d, src).map_err(conflict)
    }

    fn union(&mut self, a: usize, b: usize) -> Result<(), PlaceError> {
        self.uf.union(a, b).map(|_| ()).map_err(conflict)
    }

    fn fresh_binder(&mut self, env: &mut Vec<Binding>, name: &str, copyable: bool) {
        let node = self.uf.fresh();
        self.extra.push(node);
        env.push(Binding { name: name.to_string(), node, copyable, fields: None });
    }

    fn def_of(env: &[Binding], name: &str) -> Option<usize> {
        env.iter().rev().find(|b| b.name == name).map(|b| b.node)
    }

    /// Walks invoke operands; `writes` pins each named operand to its
    /// binding so the kernel writes land where the value was defined.
    fn operand(&mut self, node: usize, x: &Expr, env: &mut Vec<Binding>, writes: bool) -> Result<(), PlaceError> {
        let r = self.walk(x, env)?;
        self.union(node, r)?;
        if writes {
            if let Expr::Var(name) = x {
                if let Some(def) = Self::def_of(env, name) {
                    self.union(r, def)?;
                }
            }
        }
        Ok(())
    }

    fn walk(&mut self, e: &Expr, env: &mut Vec<Binding>) -> Result<usize, PlaceError> {
        let my = self.next;
        self.next += 1;
        match e {
            Expr::Var(name) => {
                if let Some(b) = env.iter().rev().find(|b| b.name == *name) {
                    self.edges.push(Edge {
                        occ: my,
                        def: b.node,
                        copyable: b.copyable,
                        name: name.clone(),
                    });
                    if b.copyable {
                        self.soft.push((my, b.node));
                    } else {
                        self.union(my, b.node)?;
                    }
                }
            }
            Expr::Constant(_) => {}
            Expr::Let { name, value, body, .. } => {
                let vid = self.walk(value, env)?;
                let copyable = copyable_value(value, env);
                let fields = tuple_fields(value, vid);
                env.push(Binding { name: name.clone(), node: vid, copyable, fields });
                let bid = self.walk(body, env)?;
                env.pop();
                self.union(my, bid)?;
            }
            Expr::Call { op, args, .. } => {
                let mut roots = Vec::new();
                for a in args {
                    roots.push(self.walk(a, env)?);
                }
                if let Some((params, ret)) = self.sigs.get(op).cloned() {
                    for (r, p) in roots.iter().zip(params) {
                        self.union(*r, p)?;
                    }
                    self.union(my, ret)?;
                } else {
                    // An implicit operator call runs as one kernel domain.
                    for r in roots {
                        self.union(my, r)?;
                    }
                }
            }
            Expr::Apply { callee, args } => {
                self.walk(callee, env)?;
                for a in args {
                    self.walk(a, env)?;
                }
            }
            Expr::If { cond, then_body, else_body } => {
                self.walk(cond, env)?;
                let t = self.walk(then_body, env)?;
                let e2 = self.walk(else_body, env)?;
                self.union(my, t)?;
                self.union(my, e2)?;
            }
            Expr::Match { scrutinee, arms } => {
                self.walk(scrutinee, env)?;
                for arm in arms {
                    let depth = env.len();
                    let fields = self.m.adts.get(&arm.ctor).map(|d| d.fields.clone());
                    for (i, b) in arm.binders.iter().enumerate() {
                        let copyable = fields
                            .as_ref()
                            .and_then(|f| f.get(i))
                            .is_some_and(|t| matches!(t, Type::Tensor(_)));
                        self.fresh_binder(env, b, copyable);
                    }
                    let aid = self.walk(&arm.body, env)?;
                    env.truncate(depth);
                    self.union(my, aid)?;
                }
            }
            Expr::Closure { params, body, .. } => {
                let depth = env.len();
                for p in params {
                    let copyable = matches!(p.ty, Type::Tensor(_));
                    self.fresh_binder(env, &p.name, copyable);
                }
                self.walk(body, env)?;
                env.truncate(depth);
            }
            Expr::Tuple(args) | Expr::Construct { args, .. } => {
                for a in args {
                    self.walk(a, env)?;
                }
            }
            Expr::Proj { tuple, index } => {
                let field = if let Expr::Var(n) = &**tuple {
                    env.iter()
                        .rev()
                        .find(|b| b.name == *n)
                        .and_then(|b| b.fields.as_ref())
                        .and_then(|f| f.get(*index as usize))
                        .copied()
                } else {
                    None
                };
                self.walk(tuple, env)?;
                if let Some(f) = field {
                    self.union(my, f)?;
                }
            }
            Expr::InvokeMut { inputs, outputs, .. } => {
                for x in inputs {
                    self.operand(my, x, env, false)?;
                }
                for x in outputs {
                    self.operand(my, x, env, true)?;
                }
            }
            Expr::InvokeShapeFunc { op, inputs, outputs, .. } => {
                self.bind(my, Device::Cpu, &format!("shape function of `{op}`"))?;
                for x in inputs {
                    self.operand(my, x, env, false)?;
                }
                for x in outputs {
                    self.operand(my, x, env, true)?;
                }
            }
            Expr::ShapeOf(x) => {
                self.walk(x, env)?;
                self.bind(my, Device::Cpu, "shape_of result")?;
            }
            Expr::AllocStorage { size, device, .. } => {
                self.walk(size, env)?;
                if let Some(d) = device {
                    self.bind(my, *d, "declared storage device")?;
                }
            }
            Expr::AllocTensor { storage, shape, .. } => {
                let s = self.walk(storage, env)?;
                self.union(my, s)?;
                if let ShapeArg::Ref(r) = shape {
                    self.walk(r, env)?;
                }
            }
            Expr::ReshapeTensor { tensor, shape } => {
                let t = self.walk(tensor, env)?;
                self.union(my, t)?;
                if let ShapeArg::Ref(r) = shape {
                    self.walk(r, env)?;
                }
            }
            Expr::Kill(x) => {
                // Kills free a value wherever it lives; consume the ids
                // without constraining any domain.
                if matches!(**x, Expr::Var(_)) {
                    self.next += 1;
                } else {
                    self.walk(x, env)?;
                }
            }
            Expr::DeviceCopy { value, src, dst } => {
                let r = self.walk(value, env)?;
                self.bind(r, *src, "device_copy source")?;
                self.bind(my, *dst, "device_copy destination")?;
            }
        }
        Ok(my)
    }
}

struct Analysis {
    devices: HashMap<usize, Device>,
    n_expr: usize,
    extra: Vec<usize>,
    edges: Vec<Edge>,
}

fn run_analyzer(m: &Module) -> Result<Analyzer<'_>, PlaceError> {
    let mut n: usize = 0;
    let mut sigs = HashMap::new();
    for (name, f) in &m.functions {
        let params: Vec<usize> = (n..n + f.params.len()).collect();
        let ret = n + f.params.len();
        sigs.insert(name.clone(), (params, ret));
        n += f.params.len() + f.body.node_count() as usize;
    }
    let mut a = Analyzer {
        m,
        uf: UnionFind::new(),
        next: 0,
        soft: Vec::new(),
        edges: Vec::new(),
        extra: Vec::new(),
        sigs,
    };
    a.uf.ensure(n);
    for f in m.functions.values() {
        let mut env: Vec<Binding> = Vec::new();
        for p in &f.params {
            let node = a.next;
            a.next += 1;
            env.push(Binding {
                name: p.name.clone(),
                node,
                copyable: matches!(p.ty, Type::Tensor(_)),
                fields: None,
            });
        }
        a.walk(&f.body, &mut env)?;
    }
    debug_assert_eq!(a.next, n);
    Ok(a)
}

fn analyze_full(m: &Module, target: Device) -> Result<Analysis, PlaceError> {
    let mut a = run_analyzer(m)?;
    let n_expr = a.next;
    let soft = std::mem::take(&mut a.soft);
    for (occ, def) in soft {
        a.uf.union_if_compatible(occ, def);
    }
    let total = a.uf.len();
    let mut devices = HashMap::new();
    for id in 0..total {
        devices.insert(id, a.uf.bound(id).unwrap_or(target));
    }
    Ok(Analysis { devices, n_expr, extra: a.extra, edges: a.edges })
}

/// Device assigned to every parameter and expression node, in pre-order
/// module numbering; unconstrained domains fall to `target`.
pub fn analyze_placement(
    m: &Module,
    target: Device,
) -> Result<HashMap<ExprId, Device>, PlaceError> {
    let a = analyze_full(m, target)?;
    Ok((0..a.n_expr).map(|i| (i as ExprId, a.devices[&i])).collect())
}

/// Checks a placed module: the constraint rules must hold and every value
/// must be read on the device it was defined on.
pub fn validate_placement(m: &Module, target: Device) -> Result<(), PlaceError> {
    let a = analyze_full(m, target)?;
    for e in &a.edges {
        let (od, dd) = (a.devices[&e.occ], a.devices[&e.def]);
        if od != dd {
            return Err(PlaceError::Contradiction {
                a: dd.to_string(),
                a_src: format!("definition of `{}`", e.name),
                b: od.to_string(),
                b_src: format!("use of `{}` without a device copy", e.name),
            });
        }
    }
    Ok(())
}

fn fresh_name(used: &mut HashSet<String>, base: String) -> String {
    if used.insert(base.clone()) {
        return base;
    }
    let mut i = 2;
    loop {
        let name = format!("{base}_{i}");
        if used.insert(name.clone()) {
            return name;
        }
        i += 1;
    }
}

struct RwBind {
    name: String,
    node: usize,
    /// Preassigned copy names per destination device that reads this value.
    copies: BTreeMap<Device, String>,
    emitted: BTreeSet<Device>,
}

type Stmt = (String, Option<Type>, Expr);

struct Rewriter<'a> {
    devices: &'a HashMap<usize, Device>,
    /// Mismatched read occurrence -> device it is read on.
    mismatch: &'a HashMap<usize, Device>,
    /// Binding node -> mismatched (occurrence, device) pairs, for deciding
    /// where a copy statement must be emitted.
    needed_occs: &'a HashMap<usize, Vec<(usize, Device)>>,
    needed_devs: &'a HashMap<usize, BTreeSet<Device>>,
    extra: &'a [usize],
    extra_pos: usize,
    used: HashSet<String>,
    next: usize,
}

impl Rewriter<'_> {
    fn dev(&self, node: usize) -> Device {
        self.devices[&node]
    }

    fn push_binding(&mut self, scope: &mut Vec<RwBind>, name: &str, node: usize) {
        let mut copies = BTreeMap::new();
        if let Some(devs) = self.needed_devs.get(&node) {
            for d in devs {
                let cname = fresh_name(&mut self.used, format!("{name}_{d}"));
                copies.insert(*d, cname);
            }
        }
        scope.push(RwBind { name: name.to_string(), node, copies, emitted: BTreeSet::new() });
    }

    /// Emits the copy statements every binding in scope needs before the
    /// original-id span `lo..hi` executes. A copy lands right before the
    /// first statement that reads the value on another device, which keeps
    /// it after the invoke that fills the value in.
    fn emit_copies_for_span(&mut self, lo: usize, hi: usize, scope: &mut Vec<RwBind>, stmts: &mut Vec<Stmt>) {
        for i in 0..scope.len() {
            let (node, pending): (usize, Vec<Device>) = {
                let b = &scope[i];
                let pending = b
                    .copies
                    .keys()
                    .filter(|d| !b.emitted.contains(d))
                    .copied()
                    .collect();
                (b.node, pending)
            };
            for d in pending {
                let hit = self
                    .needed_occs
                    .get(&node)
                    .is_some_and(|v| v.iter().any(|&(occ, od)| od == d && occ >= lo && occ < hi));
                if hit {
                    let b = &mut scope[i];
                    b.emitted.insert(d);
                    let cname = b.copies[&d].clone();
                    let src = self.devices[&node];
                    stmts.push((
                        cname,
                        None,
                        Expr::DeviceCopy { value: Box::new(Expr::var(&b.name)), src, dst: d },
                    ));
                }
            }
        }
    }

    /// Rewrites one let chain, emitting copy statements into it.
    fn go_body(&mut self, e: &Expr, scope: &mut Vec<RwBind>) -> Expr {
        let depth = scope.len();
        let mut stmts: Vec<Stmt> = Vec::new();
        let mut cur = e;
        while let Expr::Let { name, ty, value, body } = cur {
            self.next += 1;
            let lo = self.next;
            let hi = lo + value.node_count() as usize;
            self.emit_copies_for_span(lo, hi, scope, &mut stmts);
            let v2 = self.go_value(value, scope);
            self.push_binding(scope, name, lo);
            stmts.push((name.clone(), ty.clone(), v2));
            cur = body;
        }
        let lo = self.next;
        let hi = lo + cur.node_count() as usize;
        self.emit_copies_for_span(lo, hi, scope, &mut stmts);
        let mut out = self.go_value(cur, scope);
        scope.truncate(depth);
        for (name, ty, value) in stmts.into_iter().rev() {
            out = Expr::Let { name, ty, value: Box::new(value), body: Box::new(out) };
        }
        out
    }

    fn go_value(&mut self, e: &Expr, scope: &mut Vec<RwBind>) -> Expr {
        if matches!(e, Expr::Let { .. }) {
            return self.go_body(e, scope);
        }
        let my = self.next;
        self.next += 1;
        match e {
            Expr::Var(name) => {
                if let Some(od) = self.mismatch.get(&my) {
                    let b = scope
                        .iter()
                        .rev()
                        .find(|b| b.name == *name)
                        .expect("mismatched read of an unbound name");
                    return Expr::var(&b.copies[od]);
                }
                e.clone()
            }
            Expr::Constant(_) => e.clone(),
            Expr::Let { .. } => unreachable!(),
            Expr::Call { op, args, attrs } => Expr::Call {
                op: op.clone(),
                args: args.iter().map(|a| self.go_value(a, scope)).collect(),
                attrs: attrs.clone(),
            },
            Expr::Apply { callee, args } => Expr::Apply {
                callee: Box::new(self.go_value(callee, scope)),
                args: args.iter().map(|a| self.go_value(a, scope)).collect(),
            },
            Expr::If { cond, then_body, else_body } => Expr::If {
                cond: Box::new(self.go_value(cond, scope)),
                then_body: Box::new(self.go_body(then_body, scope)),
                else_body: Box::new(self.go_body(else_body, scope)),
            },
            Expr::Match { scrutinee, arms } => {
                let scrutinee = Box::new(self.go_value(scrutinee, scope));
                let arms = arms
                    .iter()
                    .map(|arm| {
                        let depth = scope.len();
                        for b in &arm.binders {
                            let node = self.extra[self.extra_pos];
                            self.extra_pos += 1;
                            self.push_binding(scope, b, node);
                        }
                        let body = self.go_body(&arm.body, scope);
                        scope.truncate(depth);
                        MatchArm { ctor: arm.ctor.clone(), binders: arm.binders.clone(), body }
                    })
                    .collect();
                Expr::Match { scrutinee, arms }
            }
            Expr::Closure { params, ret, body } => {
                let depth = scope.len();
                for p in params {
                    let node = self.extra[self.extra_pos];
                    self.extra_pos += 1;
                    self.push_binding(scope, &p.name, node);
                }
                let body2 = self.go_body(body, scope);
                scope.truncate(depth);
                Expr::Closure { params: params.clone(), ret: ret.clone(), body: Box::new(body2) }
            }
            Expr::Tuple(args) => Expr::Tuple(args.iter().map(|a| self.go_value(a, scope)).collect()),
            Expr::Proj { tuple, index } => Expr::Proj {
                tuple: Box::new(self.go_value(tuple, scope)),
                index: *index,
            },
            Expr::Construct { ctor, args } => Expr::Construct {
                ctor: ctor.clone(),
                args: args.iter().map(|a| self.go_value(a, scope)).collect(),
            },
            Expr::InvokeMut { op, inputs, outputs, attrs } => Expr::InvokeMut {
                op: op.clone(),
                inputs: inputs.iter().map(|a| self.go_value(a, scope)).collect(),
                outputs: outputs.iter().map(|a| self.go_value(a, scope)).collect(),
                attrs: attrs.clone(),
            },
            Expr::InvokeShapeFunc { op, inputs, outputs, attrs } => Expr::InvokeShapeFunc {
                op: op.clone(),
                inputs: inputs.iter().map(|a| self.go_value(a, scope)).collect(),
                outputs: outputs.iter().map(|a| self.go_value(a, scope)).collect(),
                attrs: attrs.clone(),
            },
            Expr::AllocStorage { size, align, .. } => Expr::AllocStorage {
                size: Box::new(self.go_value(size, scope)),
                align: *align,
                device: Some(self.dev(my)),
            },
            Expr::AllocTensor { storage, offset, shape, dtype } => Expr::AllocTensor {
                storage: Box::new(self.go_value(storage, scope)),
                offset: *offset,
                shape: self.go_shape(shape, scope),
                dtype: *dtype,
            },
            Expr::ReshapeTensor { tensor, shape } => Expr::ReshapeTensor {
                tensor: Box::new(self.go_value(tensor, scope)),
                shape: self.go_shape(shape, scope),
            },
            Expr::Kill(x) => Expr::Kill(Box::new(self.go_value(x, scope))),
            Expr::ShapeOf(x) => Expr::ShapeOf(Box::new(self.go_value(x, scope))),
            Expr::DeviceCopy { value, src, dst } => Expr::DeviceCopy {
                value: Box::new(self.go_value(value, scope)),
                src: *src,
                dst: *dst,
            },
        }
    }

    fn go_shape(&mut self, s: &ShapeArg, scope: &mut Vec<RwBind>) -> ShapeArg {
        match s {
            ShapeArg::Imm(d) => ShapeArg::Imm(d.clone()),
            ShapeArg::Ref(e) => ShapeArg::Ref(Box::new(self.go_value(e, scope))),
        }
    }
}

pub fn insert_device_copies(m: &Module, target: Device) -> Result<Module, PlaceError> {
    insert_device_copies_opts(m, target, PlacementOptions::default())
}

/// Places the module on `target`, makes every storage device explicit, and
/// inserts one `device_copy` per (value, destination) pair where a value is
/// read away from its definition device. The result is staged `placed`.
pub fn insert_device_copies_opts(
    m: &Module,
    target: Device,
    opts: PlacementOptions,
) -> Result<Module, PlaceError> {
    let analysis = analyze_full(m, target)?;
    let mut mismatch: HashMap<usize, Device> = HashMap::new();
    let mut needed_occs: HashMap<usize, Vec<(usize, Device)>> = HashMap::new();
    let mut needed_devs: HashMap<usize, BTreeSet<Device>> = HashMap::new();
    for e in &analysis.edges {
        let (od, dd) = (analysis.devices[&e.occ], analysis.devices[&e.def]);
        if od != dd {
            if !e.copyable {
                return Err(PlaceError::Contradiction {
                    a: dd.to_string(),
                    a_src: format!("definition of `{}`", e.name),
                    b: od.to_string(),
                    b_src: format!("use of `{}`, which is not a copyable tensor", e.name),
                });
            }
            mismatch.insert(e.occ, od);
            needed_occs.entry(e.def).or_default().push((e.occ, od));
            needed_devs.entry(e.def).or_default().insert(od);
        }
    }
    let mut out = m.clone();
    out.types = None;
    out.sym_dims = None;
    out.stage = Stage::Placed;
    let mut rw = Rewriter {
        devices: &analysis.devices,
        mismatch: &mismatch,
        needed_occs: &needed_occs,
        needed_devs: &needed_devs,
        extra: &analysis.extra,
        extra_pos: 0,
        used: used_names(m),
        next: 0,
    };
    let fn_names: Vec<String> = out.functions.keys().cloned().collect();
    for name in &fn_names {
        let func = m.functions.get(name).unwrap();
        let mut scope: Vec<RwBind> = Vec::new();
        for p in &func.params {
            let node = rw.next;
            rw.next += 1;
            rw.push_binding(&mut scope, &p.name, node);
        }
        let body = rw.go_body(&func.body, &mut scope);
        out.functions.get_mut(name).unwrap().body = body;
    }
    let mut used = rw.used;
    if opts.cpu_return {
        let mut at = 0usize;
        for (name, f) in &m.functions {
            if name == "main" {
                let src = analysis.devices[&(at + f.params.len())];
                if src != Device::Cpu {
                    let func = out.functions.get_mut("main").unwrap();
                    let body = std::mem::replace(&mut func.body, Expr::Tuple(vec![]));
                    func.body = host_return(body, src, &mut used);
                }
                break;
            }
            at += f.params.len() + f.body.node_count() as usize;
        }
    }
    Ok(out)
}

/// Appends a copy of `main`'s result back to the host after the data work
/// has been placed; placement already left the rest of the chain on the
/// target device.
fn host_return(e: Expr, src: Device, used: &mut HashSet<String>) -> Expr {
    match e {
        Expr::Let { name, ty, value, body } => Expr::Let {
            name,
            ty,
            value,
            body: Box::new(host_return(*body, src, used)),
        },
        Expr::Var(name) => {
            let cname = fresh_name(used, format!("{name}_{}", Device::Cpu));
            Expr::Let {
                name: cname.clone(),
                ty: None,
                value: Box::new(Expr::DeviceCopy {
                    value: Box::new(Expr::var(&name)),
                    src,
                    dst: Device::Cpu,
                }),
                body: Box::new(Expr::var(&cname)),
            }
        }
        other => {
            let vname = fresh_name(used, "ret1".into());
            let cname = fresh_name(used, format!("{vname}_{}", Device::Cpu));
            Expr::Let {
                name: vname.clone(),
                ty: None,
                value: Box::new(other),
                body: Box::new(Expr::Let {
                    name: cname.clone(),
                    ty: None,
                    value: Box::new(Expr::DeviceCopy {
                        value: Box::new(Expr::var(&vname)),
                        src,
                        dst: Device::Cpu,
                    }),
                    body: Box::new(Expr::var(&cname)),
                }),
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CopyReport {
    pub copies: usize,
    /// (src, dst, count) per ordered device pair, sorted.
    pub pairs: Vec<(Device, Device, usize)>,
}

pub fn copy_report(m: &Module) -> CopyReport {
    let mut by_pair: BTreeMap<(Device, Device), usize> = BTreeMap::new();
    let mut copies = 0;
    for f in m.functions.values() {
        count_copies(&f.body, &mut copies, &mut by_pair);
    }
    CopyReport {
        copies,
        pairs: by_pair.into_iter().map(|((s, d), n)| (s, d, n)).collect(),
    }
}

fn count_copies(e: &Expr, copies: &mut usize, by_pair: &mut BTreeMap<(Device, Device), usize>) {
    if let Expr::DeviceCopy { src, dst, .. } = e {
        *copies += 1;
        *by_pair.entry((*src, *dst)).or_default() += 1;
    }
    for c in e.children() {
        count_copies(c, copies, by_pair);
    }
}

/// Either a device forced by the hard constraints or a choice index into
/// the free domains of the brute-force search.
enum BfSlot {
    Fixed(Device),
    Free(usize),
}

/// Exhaustive minimum copy count over all placements of the unconstrained
/// device domains, for modules whose free-domain count stays enumerable.
/// Copies are counted once per (binding, destination device) pair.
pub fn min_copies_bruteforce(m: &Module, target: Device, max_free: u32) -> Option<usize> {
    let mut a = run_analyzer(m).ok()?;
    let edges: Vec<(usize, usize, bool)> =
        a.edges.iter().map(|e| (e.occ, e.def, e.copyable)).collect();
    let mut root_index: HashMap<usize, usize> = HashMap::new();
    let mut slot = |uf: &mut UnionFind<Device>, node: usize| -> BfSlot {
        let r = uf.find(node);
        match uf.bound(r) {
            Some(d) => BfSlot::Fixed(d),
            None => {
                let n = root_index.len();
                BfSlot::Free(*root_index.entry(r).or_insert(n))
            }
        }
    };
    let resolved: Vec<(BfSlot, BfSlot, usize, bool)> = edges
        .iter()
        .map(|&(occ, def, copyable)| {
            (slot(&mut a.uf, occ), slot(&mut a.uf, def), def, copyable)
        })
        .collect();
    let n = root_index.len();
    if n as u32 > max_free {
        return None;
    }
    let choices = [Device::Cpu, target];
    let mut best: Option<usize> = None;
    for mask in 0..(1u64 << n) {
        let device_of = |s: &BfSlot| match s {
            BfSlot::Fixed(d) => *d,
            BfSlot::Free(i) => choices[((mask >> i) & 1) as usize],
        };
        let mut pairs: BTreeSet<(usize, Device)> = BTreeSet::new();
        let mut valid = true;
        for (occ_s, def_s, def, copyable) in &resolved {
            let od = device_of(occ_s);
            let dd = device_of(def_s);
            if od != dd {
                if !copyable {
                    valid = false;
                    break;
                }
                pairs.insert((*def, od));
            }
        }
        if valid {
            best = Some(best.map_or(pairs.len(), |b| b.min(pairs.len())));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::expr::well_formed;
    use crate::ir::{
        alpha_eq, eval_ref, eval_ref_instrumented, parse_module, print_module, pure_close,
        walk_module, NodeRef, TensorLiteral,
    };
    use crate::memplan::{coalesce_storage, insert_kills, manifest_alloc};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DEV: Device = Device::Dev(0);

    fn f32s(v: Vec<f32>) -> TensorLiteral {
        TensorLiteral::vector_f32(v)
    }

    fn roundtrips(m: &Module) {
        let text = print_module(m);
        let back = parse_module(&text).unwrap();
        assert!(alpha_eq(&back, m), "not a fixed point:\n{text}");
    }

    #[test]
    fn shape_paths_stay_on_cpu_and_data_on_the_target() {
        let src = r#"// stage: fused

fn main(a : Tensor<(?), f32>, b : Tensor<(3), f32>) -> Tensor<(?), f32> {
  let c = concat(a, b, axis=0);
  c
}
"#;
        let m = parse_module(src).unwrap();
        let killed = insert_kills(&manifest_alloc(&m, 64).unwrap());

        let map = analyze_placement(&killed, DEV).unwrap();
        let mut shape_of = None;
        let mut shape_func = None;
        let mut bytes_inv = None;
        let mut concat_inv = None;
        walk_module(&killed, &mut |id, node| {
            if let NodeRef::Expr(e) = node {
                match e {
                    Expr::ShapeOf(_) => shape_of = Some(map[&id]),
                    Expr::InvokeShapeFunc { .. } => shape_func = Some(map[&id]),
                    Expr::InvokeMut { op, .. } if op == "bytes" => bytes_inv = Some(map[&id]),
                    Expr::InvokeMut { op, .. } if op == "concat" => concat_inv = Some(map[&id]),
                    _ => {}
                }
            }
        });
        assert_eq!(shape_of, Some(Device::Cpu));
        assert_eq!(shape_func, Some(Device::Cpu));
        assert_eq!(bytes_inv, Some(Device::Cpu));
        assert_eq!(concat_inv, Some(DEV));

        let placed = insert_device_copies(&killed, DEV).unwrap();
        assert_eq!(placed.stage, Stage::Placed);
        let text = print_module(&placed);
        // shape tensor and byte-count blocks on the host, data block on dev0
        assert_eq!(text.matches(",cpu)").count(), 2, "{text}");
        assert_eq!(text.matches(",dev0)").count(), 1, "{text}");
        assert_eq!(text.matches(",?)").count(), 0, "{text}");
        assert_eq!(copy_report(&placed).copies, 0);
        assert_eq!(min_copies_bruteforce(&killed, DEV, 16), Some(0));
        validate_placement(&placed, DEV).unwrap();
        well_formed(&placed).unwrap();
        roundtrips(&placed);

        let a = f32s(vec![1.0, 2.0, 3.0, 4.0]);
        let b = f32s(vec![9.0, 8.0, 7.0]);
        let want = eval_ref(&m, &[a.clone(), b.clone()]).unwrap();
        let got = eval_ref(&placed, &[a.clone(), b.clone()]).unwrap();
        assert!(pure_close(&want, &got, 0.0));

        // an all-CPU target keeps everything on one device
        let host = insert_device_copies(&killed, Device::Cpu).unwrap();
        let htext = print_module(&host);
        assert!(!htext.contains("dev0"), "{htext}");
        assert_eq!(copy_report(&host).copies, 0);
        assert!(pure_close(&want, &eval_ref(&host, &[a, b]).unwrap(), 0.0));
    }

    #[test]
    fn copies_are_inserted_once_per_value_and_destination() {
        let src = r#"// stage: memplanned

fn main(x : Tensor<(4), f32>) -> Tensor<(4), f32> {
  let bc = alloc_storage(16,64,cpu);
  let c = alloc_tensor(bc,0,(4),f32);
  invoke_mut(add, (x, x), (c));
  let bd = alloc_storage(16,64,dev0);
  let d = alloc_tensor(bd,0,(4),f32);
  invoke_mut(add, (x, x), (d));
  let be = alloc_storage(16,64,dev0);
  let e = alloc_tensor(be,0,(4),f32);
  invoke_mut(multiply, (c, d), (e));
  e
}
"#;
        let m = parse_module(src).unwrap();
        let x = f32s(vec![1.0, 2.0, 3.0, 4.0]);

        // unplaced, the third invoke mixes devices
        let err = eval_ref(&m, &[x.clone()]).unwrap_err();
        assert!(err.to_string().contains("mixes operands"), "{err}");

        let placed = insert_device_copies(&m, DEV).unwrap();
        let text = print_module(&placed);
        assert_eq!(text.matches("let x_dev0 = device_copy(x, cpu, dev0);").count(), 1, "{text}");
        assert_eq!(text.matches("let c_dev0 = device_copy(c, cpu, dev0);").count(), 1, "{text}");
        assert!(text.contains("invoke_mut(add, (x_dev0, x_dev0), (d));"), "{text}");
        assert!(text.contains("invoke_mut(multiply, (c_dev0, d), (e));"), "{text}");
        // each copy lands after the write that fills its source in
        let write_c = text.find("invoke_mut(add, (x, x), (c));").unwrap();
        let copy_c = text.find("let c_dev0").unwrap();
        assert!(write_c < copy_c, "{text}");

        let report = copy_report(&placed);
        assert_eq!(report.copies, 2);
        assert_eq!(report.pairs, vec![(Device::Cpu, DEV, 2)]);
        assert_eq!(min_copies_bruteforce(&m, DEV, 16), Some(2));
        validate_placement(&placed, DEV).unwrap();
        roundtrips(&placed);

        let (got, stats) = eval_ref_instrumented(&placed, &[x]).unwrap();
        assert!(pure_close(
            &crate::ir::PureValue::Tensor(f32s(vec![4.0, 16.0, 36.0, 64.0])),
            &got,
            0.0
        ));
        assert_eq!(stats.copies, 2);
    }

    #[test]
    fn contradictions_report_both_sources() {
        let src = r#"// stage: memplanned

fn main(v : Tensor<(4), f32>) -> Tensor<(1), i64> {
  let sb = alloc_storage(8,64,dev0);
  let so = alloc_tensor(sb,0,(1),i64);
  invoke_shape_func(concat, (v), (so), axis=0);
  so
}
"#;
        let m = parse_module(src).unwrap();
        let err = insert_device_copies(&m, DEV).unwrap_err();
        let PlaceError::Contradiction { a, a_src, b, b_src } = err;
        let mut sides = vec![(a.as_str(), a_src.as_str()), (b.as_str(), b_src.as_str())];
        sides.sort();
        assert_eq!(
            sides,
            vec![
                ("cpu", "shape function of `concat`"),
                ("dev0", "declared storage device"),
            ]
        );
        assert!(analyze_placement(&m, DEV).is_err());
    }

    #[test]
    fn unbound_values_follow_the_target() {
        let src = r#"// stage: fused

fn main(x : Tensor<(4), f32>) -> Tensor<(4), f32> {
  let y = add(x, x);
  let z = add(y, y);
  z
}
"#;
        let m = parse_module(src).unwrap();
        let planned = coalesce_storage(&insert_kills(&manifest_alloc(&m, 64).unwrap()));
        let placed = insert_device_copies(&planned, DEV).unwrap();
        let text = print_module(&placed);
        assert_eq!(text.matches(",dev0)").count(), text.matches("alloc_storage(").count());
        assert!(!text.contains("cpu"), "{text}");
        assert_eq!(copy_report(&placed).copies, 0);
        validate_placement(&placed, DEV).unwrap();
        assert!(alpha_eq(&insert_device_copies(&planned, DEV).unwrap(), &placed));

        let x = f32s(vec![1.0, 2.0, 3.0, 4.0]);
        let want = eval_ref(&m, &[x.clone()]).unwrap();
        assert!(pure_close(&want, &eval_ref(&placed, &[x.clone()]).unwrap(), 0.0));

        // opting in to a host-visible result costs exactly one copy at the end
        let opts = PlacementOptions { cpu_return: true };
        let hosted = insert_device_copies_opts(&planned, DEV, opts).unwrap();
        let htext = print_module(&hosted);
        assert!(htext.contains("let z_cpu = device_copy(z, dev0, cpu);"), "{htext}");
        assert!(htext.trim_end().ends_with("z_cpu\n}"), "{htext}");
        assert_eq!(copy_report(&hosted).copies, 1);
        assert_eq!(
            htext.matches(",dev0)").count(),
            htext.matches("alloc_storage(").count()
        );
        validate_placement(&hosted, DEV).unwrap();
        let (got, stats) = eval_ref_instrumented(&hosted, &[x]).unwrap();
        assert!(pure_close(&want, &got, 0.0));
        assert_eq!(stats.copies, 1);
    }

    #[test]
    fn random_small_graphs_match_the_bruteforce_minimum() {
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let steps = rng.gen_range(2..6);
            let mut avail: Vec<String> = vec!["p0".into(), "p1".into()];
            let mut body = String::new();
            let mut neutral = String::new();
            for i in 0..steps {
                let dev = match rng.gen_range(0..4) {
                    0 => "cpu",
                    1 => "dev0",
                    _ => "?",
                };
                let op = if rng.gen_bool(0.5) { "add" } else { "multiply" };
                let lhs = avail[rng.gen_range(0..avail.len())].clone();
                let rhs = avail[rng.gen_range(0..avail.len())].clone();
                let view = format!("  let t{i} = alloc_tensor(b{i},0,(4),f32);\n");
                body.push_str(&format!("  let b{i} = alloc_storage(16,64,{dev});\n"));
                body.push_str(&view);
                neutral.push_str(&format!("  let b{i} = alloc_storage(16,64,?);\n"));
                neutral.push_str(&view);
                let inv = format!("  invoke_mut({op}, ({lhs}, {rhs}), (t{i}));\n");
                body.push_str(&inv);
                neutral.push_str(&inv);
                avail.push(format!("t{i}"));
                if rng.gen_bool(0.3) {
                    let base = avail[rng.gen_range(0..avail.len())].clone();
                    let line = format!("  let r{i} = reshape_tensor({base},(4));\n");
                    body.push_str(&line);
                    neutral.push_str(&line);
                    avail.push(format!("r{i}"));
                }
            }
            let tail = avail.last().unwrap().clone();
            let wrap = |b: &str| {
                format!(
                    "// stage: memplanned\n\nfn main(p0 : Tensor<(4), f32>, p1 : Tensor<(4), f32>) -> Tensor<(4), f32> {{\n{b}  {tail}\n}}\n"
                )
            };
            let m = parse_module(&wrap(&body)).unwrap();
            let reference = parse_module(&wrap(&neutral)).unwrap();

            let placed = insert_device_copies(&m, DEV).unwrap();
            validate_placement(&placed, DEV).unwrap();
            let copies = copy_report(&placed).copies;
            let best = min_copies_bruteforce(&m, DEV, 20).unwrap();
            assert_eq!(copies, best, "seed {seed}:\n{}", print_module(&placed));

            let p0 = f32s(vec![1.0, 2.0, 3.0, 4.0]);
            let p1 = f32s(vec![0.5, 1.5, 2.5, 3.5]);
            let want = eval_ref(&reference, &[p0.clone(), p1.clone()])
                .unwrap_or_else(|e| panic!("seed {seed}: {e}\n{}", print_module(&reference)));
            let got = eval_ref(&placed, &[p0, p1])
                .unwrap_or_else(|e| panic!("seed {seed}: {e}\n{}", print_module(&placed)));
            assert!(pure_close(&want, &got, 0.0), "seed {seed}");
        }
    }
}
