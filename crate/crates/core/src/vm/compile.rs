//! Lowers a placed module to bytecode: let-bindings become registers,
//! branches become `GetTag`/`If`/`Goto`, `invoke_mut` becomes `InvokePacked`,
//! and `kill` becomes `FreeTensor` plus a `FreeStorage` once the last tensor
//! of a block dies.

use std::collections::BTreeMap;

use crate::error::VmError;
use crate::ir::expr::{free_vars, Expr, Module, ShapeArg, Stage, TensorLiteral};
use crate::ops;
use crate::vm::exe::{AdtMeta, Executable, Instr, PrimDecl, VMFunction, TUPLE_TAG};
use crate::vm::interp::{attrs_encode, composite_encode};

/// Maps operator names to externally registered primitive names (dispatch
/// tables and custom kernels); everything else resolves to built-ins.
pub type PrimOverrides = BTreeMap<String, String>;

pub fn compile_to_executable(m: &Module, overrides: &PrimOverrides) -> Result<Executable, VmError> {
    if m.stage != Stage::Placed {
        return Err(VmError::Other(format!(
            "compilation expects a placed module, got stage `{}`",
            m.stage
        )));
    }
    let mut c = Compiler {
        m,
        overrides,
        constants: Vec::new(),
        prims: Vec::new(),
        fn_names: m.functions.keys().cloned().collect(),
        out: Vec::new(),
        pending: Vec::new(),
    };
    c.out.resize(c.fn_names.len(), None);
    for (idx, (name, def)) in m.functions.iter().enumerate() {
        let params: Vec<String> = def.params.iter().map(|p| p.name.clone()).collect();
        c.compile_fn(idx, name.clone(), &params, &def.body)?;
    }
    while let Some(job) = c.pending.pop() {
        c.compile_fn(job.index, job.name, &job.params, &job.body)?;
    }
    let functions = c
        .out
        .into_iter()
        .map(|f| f.expect("every reserved function slot is compiled"))
        .collect();
    Ok(Executable {
        version: crate::vm::exe::FORMAT_VERSION,
        constants: c.constants,
        functions,
        primitives: c.prims,
        adts: m
            .adts
            .iter()
            .map(|(name, def)| AdtMeta { ctor: name.clone(), fields: def.arity() as u32 })
            .collect(),
    })
}

struct Lambda {
    index: usize,
    name: String,
    params: Vec<String>,
    body: Expr,
}

struct Compiler<'m> {
    m: &'m Module,
    overrides: &'m PrimOverrides,
    constants: Vec<TensorLiteral>,
    prims: Vec<PrimDecl>,
    fn_names: Vec<String>,
    out: Vec<Option<VMFunction>>,
    pending: Vec<Lambda>,
}

/// What a binding names, for kill lowering: tensors remember the register of
/// the storage block they view.
#[derive(Clone, Copy, PartialEq)]
enum BindKind {
    Plain,
    Storage,
    Tensor { root: u32 },
}

struct EnvEntry {
    name: String,
    reg: u32,
    kind: BindKind,
}

struct FnCtx {
    code: Vec<Instr>,
    next_reg: u32,
    env: Vec<EnvEntry>,
    /// Per kill site in traversal order: emit `FreeStorage` here.
    free_plan: Vec<bool>,
    kill_idx: usize,
    lambda_count: usize,
    fn_name: String,
}

impl FnCtx {
    fn fresh(&mut self) -> Result<u32, VmError> {
        let r = self.next_reg;
        self.next_reg = self
            .next_reg
            .checked_add(1)
            .ok_or(VmError::RegisterOverflow { reg: u32::MAX, size: u32::MAX })?;
        Ok(r)
    }

    fn lookup(&self, name: &str) -> Option<&EnvEntry> {
        self.env.iter().rev().find(|e| e.name == name)
    }

    fn emit(&mut self, i: Instr) -> usize {
        self.code.push(i);
        self.code.len() - 1
    }
}

impl<'m> Compiler<'m> {
    fn compile_fn(
        &mut self,
        index: usize,
        name: String,
        params: &[String],
        body: &Expr,
    ) -> Result<(), VmError> {
        let mut cx = FnCtx {
            code: Vec::new(),
            next_reg: params.len() as u32,
            env: params
                .iter()
                .enumerate()
                .map(|(i, p)| EnvEntry { name: p.clone(), reg: i as u32, kind: BindKind::Plain })
                .collect(),
            free_plan: kill_plan(body),
            kill_idx: 0,
            lambda_count: 0,
            fn_name: name.clone(),
        };
        let result = self.expr(body, &mut cx)?;
        cx.emit(Instr::Ret { src: result });
        self.out[index] = Some(VMFunction {
            name,
            n_regs: cx.next_reg,
            n_params: params.len() as u32,
            code: cx.code,
        });
        Ok(())
    }

    fn pool(&mut self, lit: &TensorLiteral) -> u32 {
        match self.constants.iter().position(|c| c == lit) {
            Some(i) => i as u32,
            None => {
                self.constants.push(lit.clone());
                (self.constants.len() - 1) as u32
            }
        }
    }

    fn prim(&mut self, name: String, arity: u32, outputs: u32) -> Result<u32, VmError> {
        if let Some(i) = self.prims.iter().position(|p| p.name == name) {
            let p = &self.prims[i];
            if p.arity != arity || p.outputs != outputs {
                return Err(VmError::Other(format!(
                    "primitive `{name}` used with {arity} inputs and {outputs} outputs but \
                     declared with {} and {}",
                    p.arity, p.outputs
                )));
            }
            return Ok(i as u32);
        }
        self.prims.push(PrimDecl { name, arity, outputs });
        Ok((self.prims.len() - 1) as u32)
    }

    fn unit(&mut self, cx: &mut FnCtx) -> Result<u32, VmError> {
        let r = cx.fresh()?;
        cx.emit(Instr::AllocADT { dst: r, tag: TUPLE_TAG, fields: Vec::new() });
        Ok(r)
    }

    fn expr(&mut self, e: &Expr, cx: &mut FnCtx) -> Result<u32, VmError> {
        match e {
            Expr::Var(name) => cx
                .lookup(name)
                .map(|e| e.reg)
                .ok_or_else(|| VmError::Other(format!("unbound variable `{name}`"))),
            Expr::Constant(lit) => {
                let dst = cx.fresh()?;
                match lit.scalar_i64_value() {
                    Some(v) if lit.shape.is_empty() => {
                        cx.emit(Instr::LoadConsti { dst, value: v });
                    }
                    _ => {
                        let idx = self.pool(lit);
                        cx.emit(Instr::LoadConst { dst, idx });
                    }
                }
                Ok(dst)
            }
            Expr::Call { op, args, .. } => {
                let Some(fidx) = self.fn_names.iter().position(|n| n == op) else {
                    return Err(VmError::Other(format!(
                        "call to `{op}` survived memory planning; only module functions may be \
                         called directly"
                    )));
                };
                let mut regs = Vec::with_capacity(args.len());
                for a in args {
                    regs.push(self.expr(a, cx)?);
                }
                let dst = cx.fresh()?;
                cx.emit(Instr::Invoke { dst, func: fidx as u32, args: regs });
                Ok(dst)
            }
            Expr::Apply { callee, args } => {
                let creg = self.expr(callee, cx)?;
                let mut regs = Vec::with_capacity(args.len());
                for a in args {
                    regs.push(self.expr(a, cx)?);
                }
                let dst = cx.fresh()?;
                cx.emit(Instr::InvokeClosure { dst, closure: creg, args: regs });
                Ok(dst)
            }
            Expr::Let { name, value, body, .. } => {
                let vreg = self.expr(value, cx)?;
                let kind = self.bind_kind(value, cx);
                let depth = cx.env.len();
                if name != "_" {
                    cx.env.push(EnvEntry { name: name.clone(), reg: vreg, kind });
                }
                let out = self.expr(body, cx)?;
                cx.env.truncate(depth);
                Ok(out)
            }
            Expr::If { cond, then_body, else_body } => {
                let creg = self.expr(cond, cx)?;
                let res = cx.fresh()?;
                let if_pc = cx.emit(Instr::If { cond: creg, t_off: 1, f_off: 0 });
                let treg = self.expr(then_body, cx)?;
                cx.emit(Instr::Move { dst: res, src: treg });
                let goto_pc = cx.emit(Instr::Goto { off: 0 });
                let else_start = cx.code.len();
                let ereg = self.expr(else_body, cx)?;
                cx.emit(Instr::Move { dst: res, src: ereg });
                let end = cx.code.len();
                patch_if(&mut cx.code[if_pc], 1, (else_start - if_pc) as i32);
                cx.code[goto_pc] = Instr::Goto { off: (end - goto_pc) as i32 };
                Ok(res)
            }
            Expr::Match { scrutinee, arms } => self.compile_match(scrutinee, arms, cx),
            Expr::Closure { params, body, .. } => {
                let captured: Vec<String> = free_vars(e)
                    .into_iter()
                    .filter(|v| cx.lookup(v).is_some())
                    .collect();
                let mut regs = Vec::with_capacity(captured.len());
                for c in &captured {
                    regs.push(cx.lookup(c).expect("captured vars are bound").reg);
                }
                let index = self.out.len();
                self.out.push(None);
                let name = format!("{}.lambda{}", cx.fn_name, cx.lambda_count);
                cx.lambda_count += 1;
                self.fn_names.push(name.clone());
                let mut lifted_params = captured;
                lifted_params.extend(params.iter().map(|p| p.name.clone()));
                self.pending.push(Lambda {
                    index,
                    name,
                    params: lifted_params,
                    body: (**body).clone(),
                });
                let dst = cx.fresh()?;
                cx.emit(Instr::AllocClosure { dst, func: index as u32, captured: regs });
                Ok(dst)
            }
            Expr::Tuple(elems) => {
                let mut regs = Vec::with_capacity(elems.len());
                for e in elems {
                    regs.push(self.expr(e, cx)?);
                }
                let dst = cx.fresh()?;
                cx.emit(Instr::AllocADT { dst, tag: TUPLE_TAG, fields: regs });
                Ok(dst)
            }
            Expr::Proj { tuple, index } => {
                let treg = self.expr(tuple, cx)?;
                let dst = cx.fresh()?;
                cx.emit(Instr::GetField { dst, obj: treg, index: *index as u32 });
                Ok(dst)
            }
            Expr::Construct { ctor, args } => {
                let tag = self
                    .m
                    .ctor_tag(ctor)
                    .ok_or_else(|| VmError::Other(format!("unknown constructor `{ctor}`")))?;
                let mut regs = Vec::with_capacity(args.len());
                for a in args {
                    regs.push(self.expr(a, cx)?);
                }
                let dst = cx.fresh()?;
                cx.emit(Instr::AllocADT { dst, tag, fields: regs });
                Ok(dst)
            }
            Expr::InvokeMut { op, inputs, outputs, attrs } => {
                let name = if let Some(n) = self.overrides.get(op) {
                    n.clone()
                } else if let Some(def) = self.m.composites.get(op) {
                    format!("composite:{}", composite_encode(def))
                } else if ops::is_builtin(op) {
                    with_attrs(format!("op:{op}"), attrs_encode(attrs))
                } else {
                    return Err(VmError::Other(format!("no primitive registered for `{op}`")));
                };
                self.packed(name, inputs, outputs, cx)
            }
            Expr::InvokeShapeFunc { op, inputs, outputs, attrs } => {
                let name = if let Some(def) = self.m.composites.get(op) {
                    with_attrs(
                        format!("shape_composite:{}", composite_encode(def)),
                        attrs_encode(attrs),
                    )
                } else if ops::is_builtin(op) {
                    with_attrs(format!("shape:{op}"), attrs_encode(attrs))
                } else {
                    return Err(VmError::Other(format!("no shape function known for `{op}`")));
                };
                self.packed(name, inputs, outputs, cx)
            }
            Expr::AllocStorage { size, align, device } => {
                let Some(device) = device else {
                    return Err(VmError::Other(
                        "storage has no device; placement must run before compilation".into(),
                    ));
                };
                let sreg = self.expr(size, cx)?;
                let dst = cx.fresh()?;
                cx.emit(Instr::AllocStorage {
                    dst,
                    size: sreg,
                    align: *align,
                    device: device.code(),
                });
                Ok(dst)
            }
            Expr::AllocTensor { storage, offset, shape, dtype } => {
                let sreg = self.expr(storage, cx)?;
                let dst = cx.fresh()?;
                match shape {
                    ShapeArg::Imm(dims) => {
                        cx.emit(Instr::AllocTensor {
                            dst,
                            storage: sreg,
                            offset: *offset,
                            shape: dims.clone(),
                            dtype: *dtype,
                        });
                    }
                    ShapeArg::Ref(e) => {
                        let shape_reg = self.expr(e, cx)?;
                        cx.emit(Instr::AllocTensorReg {
                            dst,
                            storage: sreg,
                            offset: *offset,
                            shape: shape_reg,
                            dtype: *dtype,
                        });
                    }
                }
                Ok(dst)
            }
            Expr::Kill(x) => {
                let Expr::Var(name) = x.as_ref() else {
                    return Err(VmError::Other("kill expects a variable".into()));
                };
                let entry = cx
                    .lookup(name)
                    .ok_or_else(|| VmError::Other(format!("kill of unbound `{name}`")))?;
                let (reg, kind) = (entry.reg, entry.kind);
                let last = cx.free_plan.get(cx.kill_idx).copied().unwrap_or(false);
                cx.kill_idx += 1;
                match kind {
                    BindKind::Storage => {
                        cx.emit(Instr::FreeStorage { storage: reg });
                    }
                    BindKind::Tensor { root } => {
                        cx.emit(Instr::FreeTensor { tensor: reg });
                        if last {
                            cx.emit(Instr::FreeStorage { storage: root });
                        }
                    }
                    BindKind::Plain => {
                        cx.emit(Instr::FreeTensor { tensor: reg });
                    }
                }
                self.unit(cx)
            }
            Expr::ShapeOf(x) => {
                let src = self.expr(x, cx)?;
                let dst = cx.fresh()?;
                cx.emit(Instr::ShapeOf { dst, src });
                Ok(dst)
            }
            Expr::DeviceCopy { value, src, dst: dst_dev } => {
                let vreg = self.expr(value, cx)?;
                let dst = cx.fresh()?;
                cx.emit(Instr::DeviceCopy {
                    dst,
                    src: vreg,
                    src_dev: src.code(),
                    dst_dev: dst_dev.code(),
                });
                Ok(dst)
            }
            Expr::ReshapeTensor { tensor, shape } => {
                let treg = self.expr(tensor, cx)?;
                let sreg = match shape {
                    ShapeArg::Imm(dims) => {
                        let lit = TensorLiteral::vector_i64(dims.iter().map(|&d| d as i64).collect());
                        let idx = self.pool(&lit);
                        let r = cx.fresh()?;
                        cx.emit(Instr::LoadConst { dst: r, idx });
                        r
                    }
                    ShapeArg::Ref(e) => self.expr(e, cx)?,
                };
                let dst = cx.fresh()?;
                cx.emit(Instr::ReshapeTensor { dst, tensor: treg, shape: sreg });
                Ok(dst)
            }
        }
    }

    fn packed(
        &mut self,
        name: String,
        inputs: &[Expr],
        outputs: &[Expr],
        cx: &mut FnCtx,
    ) -> Result<u32, VmError> {
        let prim = self.prim(name, inputs.len() as u32, outputs.len() as u32)?;
        let mut regs = Vec::with_capacity(inputs.len() + outputs.len());
        for a in inputs.iter().chain(outputs) {
            regs.push(self.expr(a, cx)?);
        }
        cx.emit(Instr::InvokePacked { prim, args: regs });
        self.unit(cx)
    }

    /// A two-constructor match compiles to exactly one `GetTag` and one `If`;
    /// a missing arm becomes a `Fatal` trap.
    fn compile_match(
        &mut self,
        scrutinee: &Expr,
        arms: &[crate::ir::expr::MatchArm],
        cx: &mut FnCtx,
    ) -> Result<u32, VmError> {
        let sreg = self.expr(scrutinee, cx)?;
        let mut tagged = Vec::with_capacity(arms.len());
        for arm in arms {
            let tag = self
                .m
                .ctor_tag(&arm.ctor)
                .ok_or_else(|| VmError::Other(format!("unknown constructor `{}`", arm.ctor)))?;
            if tag > 1 {
                return Err(VmError::Other(
                    "match lowering supports ADTs with at most two constructors".into(),
                ));
            }
            tagged.push((tag, arm));
        }
        if self.m.adts.len() == 1 {
            let (_, arm) = tagged
                .first()
                .ok_or_else(|| VmError::Other("match has no arms".into()))?;
            return self.compile_arm_body(sreg, arm, cx);
        }
        let arm0 = tagged.iter().find(|(t, _)| *t == 0).map(|(_, a)| *a);
        let arm1 = tagged.iter().find(|(t, _)| *t == 1).map(|(_, a)| *a);
        let tag_reg = cx.fresh()?;
        cx.emit(Instr::GetTag { dst: tag_reg, obj: sreg });
        let res = cx.fresh()?;
        let if_pc = cx.emit(Instr::If { cond: tag_reg, t_off: 0, f_off: 1 });
        // false branch (tag 0) falls through; true branch (tag 1) jumps ahead
        let mut goto_pc = None;
        match arm0 {
            Some(arm) => {
                let r = self.compile_arm_body(sreg, arm, cx)?;
                cx.emit(Instr::Move { dst: res, src: r });
                goto_pc = Some(cx.emit(Instr::Goto { off: 0 }));
            }
            None => {
                cx.emit(Instr::Fatal { msg: "no arm for constructor tag 0".into() });
            }
        }
        let arm1_start = cx.code.len();
        match arm1 {
            Some(arm) => {
                let r = self.compile_arm_body(sreg, arm, cx)?;
                cx.emit(Instr::Move { dst: res, src: r });
            }
            None => {
                cx.emit(Instr::Fatal { msg: "no arm for constructor tag 1".into() });
            }
        }
        let end = cx.code.len();
        patch_if(&mut cx.code[if_pc], (arm1_start - if_pc) as i32, 1);
        if let Some(pc) = goto_pc {
            cx.code[pc] = Instr::Goto { off: (end - pc) as i32 };
        }
        Ok(res)
    }

    fn compile_arm_body(
        &mut self,
        sreg: u32,
        arm: &crate::ir::expr::MatchArm,
        cx: &mut FnCtx,
    ) -> Result<u32, VmError> {
        let depth = cx.env.len();
        for (i, binder) in arm.binders.iter().enumerate() {
            if binder == "_" {
                continue;
            }
            let dst = cx.fresh()?;
            cx.emit(Instr::GetField { dst, obj: sreg, index: i as u32 });
            cx.env.push(EnvEntry { name: binder.clone(), reg: dst, kind: BindKind::Plain });
        }
        let out = self.expr(&arm.body, cx)?;
        cx.env.truncate(depth);
        Ok(out)
    }

    fn bind_kind(&self, value: &Expr, cx: &FnCtx) -> BindKind {
        match value {
            Expr::AllocStorage { .. } => BindKind::Storage,
            Expr::AllocTensor { storage, .. } => match storage.as_ref() {
                Expr::Var(s) => match cx.lookup(s) {
                    Some(e) if e.kind == BindKind::Storage => BindKind::Tensor { root: e.reg },
                    _ => BindKind::Plain,
                },
                _ => BindKind::Plain,
            },
            Expr::ReshapeTensor { tensor, .. } => match tensor.as_ref() {
                Expr::Var(t) => cx.lookup(t).map(|e| e.kind).unwrap_or(BindKind::Plain),
                _ => BindKind::Plain,
            },
            Expr::Var(x) => cx.lookup(x).map(|e| e.kind).unwrap_or(BindKind::Plain),
            _ => BindKind::Plain,
        }
    }
}

fn with_attrs(base: String, attrs: String) -> String {
    if attrs.is_empty() {
        base
    } else {
        format!("{base}?{attrs}")
    }
}

fn patch_if(i: &mut Instr, t: i32, f: i32) {
    if let Instr::If { t_off, f_off, .. } = i {
        *t_off = t;
        *f_off = f;
    }
}

// ---------------------------------------------------------------------------
// Kill planning

#[derive(Clone, Copy)]
enum ScanKind {
    Storage(usize),
    Tensor(usize),
    Plain,
}

/// Walks the body in compile order and marks, for each `kill` site, whether
/// it is the last kill of a tensor viewing its storage block, so the compiler
/// can free the block right there.
fn kill_plan(body: &Expr) -> Vec<bool> {
    let mut scan = Scan { serial: 0, env: Vec::new(), kills: Vec::new() };
    scan.walk(body);
    let mut last: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, root) in scan.kills.iter().enumerate() {
        if let Some(r) = root {
            last.insert(*r, i);
        }
    }
    scan.kills
        .iter()
        .enumerate()
        .map(|(i, root)| root.map(|r| last[&r] == i).unwrap_or(false))
        .collect()
}

struct Scan {
    serial: usize,
    env: Vec<(String, ScanKind)>,
    kills: Vec<Option<usize>>,
}

impl Scan {
    fn lookup(&self, name: &str) -> Option<ScanKind> {
        self.env.iter().rev().find(|(n, _)| n == name).map(|(_, k)| *k)
    }

    fn walk(&mut self, e: &Expr) {
        match e {
            Expr::Let { name, value, body, .. } => {
                self.walk(value);
                let kind = match value.as_ref() {
                    Expr::AllocStorage { .. } => {
                        self.serial += 1;
                        ScanKind::Storage(self.serial)
                    }
                    Expr::AllocTensor { storage, .. } => match storage.as_ref() {
                        Expr::Var(s) => match self.lookup(s) {
                            Some(ScanKind::Storage(id)) => ScanKind::Tensor(id),
                            _ => ScanKind::Plain,
                        },
                        _ => ScanKind::Plain,
                    },
                    Expr::ReshapeTensor { tensor, .. } => match tensor.as_ref() {
                        Expr::Var(t) => self.lookup(t).unwrap_or(ScanKind::Plain),
                        _ => ScanKind::Plain,
                    },
                    Expr::Var(x) => self.lookup(x).unwrap_or(ScanKind::Plain),
                    _ => ScanKind::Plain,
                };
                let depth = self.env.len();
                if name != "_" {
                    self.env.push((name.clone(), kind));
                }
                self.walk(body);
                self.env.truncate(depth);
            }
            Expr::Kill(x) => {
                let root = match x.as_ref() {
                    Expr::Var(t) => match self.lookup(t) {
                        Some(ScanKind::Tensor(id)) => Some(id),
                        _ => None,
                    },
                    _ => None,
                };
                self.kills.push(root);
            }
            Expr::Match { scrutinee, arms } => {
                self.walk(scrutinee);
                for arm in arms {
                    let depth = self.env.len();
                    for b in &arm.binders {
                        if b != "_" {
                            self.env.push((b.clone(), ScanKind::Plain));
                        }
                    }
                    self.walk(&arm.body);
                    self.env.truncate(depth);
                }
            }
            Expr::Closure { params, body, .. } => {
                let depth = self.env.len();
                for p in params {
                    self.env.push((p.name.clone(), ScanKind::Plain));
                }
                self.walk(body);
                self.env.truncate(depth);
            }
            _ => {
                for child in e.children() {
                    self.walk(child);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::expr::ScalarData;
    use crate::ir::types::Device;
    use crate::vm::exe::Instr;
    use crate::vm::testutil::placed;

    fn ops_of(exe: &Executable, f: usize) -> Vec<&'static str> {
        exe.functions[f].code.iter().map(|i| i.opcode_name()).collect()
    }

    fn lowered(src: &str) -> Executable {
        let m = placed(src, Device::Cpu);
        compile_to_executable(&m, &PrimOverrides::new()).unwrap()
    }

    #[test]
    fn worked_add_lowers_to_a_straight_line() {
        let exe = lowered(
            "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
               add(a, b)\n\
             }",
        );
        let ops = ops_of(&exe, 0);
        for banned in ["If", "Goto", "Move"] {
            assert!(!ops.contains(&banned), "straight-line code must not contain {banned}");
        }
        let order: Vec<&str> = ops
            .iter()
            .copied()
            .filter(|o| matches!(*o, "AllocStorage" | "AllocTensor" | "InvokePacked" | "Ret"))
            .collect();
        assert_eq!(order, ["AllocStorage", "AllocTensor", "InvokePacked", "Ret"]);
        assert_eq!(ops.iter().filter(|o| **o == "AllocStorage").count(), 1);
        let names: Vec<&str> = exe.primitives.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["op:add"]);
    }

    #[test]
    fn two_ctor_match_lowers_to_one_tag_read_and_one_branch() {
        let exe = lowered(
            "data Leaf(Tensor<(2), f32>);\n\
             data Node(adt, adt);\n\
             fn total(t: adt) -> Tensor<(2), f32> {\n\
             match (t) {\n\
             Leaf(v) => { v },\n\
             Node(l, r) => { add(total(l), total(r)) },\n\
             }\n\
             }\n\
             fn main(x: Tensor<(2), f32>) -> Tensor<(2), f32> {\n\
             total(Node(Leaf(x), Leaf(x)))\n\
             }",
        );
        let fi = exe.func_index("total").unwrap() as usize;
        let ops = ops_of(&exe, fi);
        assert_eq!(ops.iter().filter(|o| **o == "GetTag").count(), 1);
        assert_eq!(ops.iter().filter(|o| **o == "If").count(), 1);
    }

    #[test]
    fn kills_lower_to_frees_with_storage_released_at_last_kill() {
        let exe = lowered(
            "fn main(a: Tensor<(4), i64>, b: Tensor<(4), i64>) -> Tensor<(4), i64> {\n\
               let c = add(a, b);\n\
               let d = add(c, c);\n\
               d\n\
             }",
        );
        let code = &exe.functions[0].code;
        let frees: Vec<usize> = code
            .iter()
            .enumerate()
            .filter_map(|(i, ins)| matches!(ins, Instr::FreeTensor { .. }).then_some(i))
            .collect();
        assert_eq!(frees.len(), 3, "kills for a, b and c");
        let storage_frees: Vec<usize> = code
            .iter()
            .enumerate()
            .filter_map(|(i, ins)| matches!(ins, Instr::FreeStorage { .. }).then_some(i))
            .collect();
        assert_eq!(storage_frees.len(), 1, "only c's storage dies; d escapes");
        assert_eq!(
            storage_frees[0],
            frees[2] + 1,
            "storage release follows the last view kill on it"
        );
        let allocs = code.iter().filter(|i| matches!(i, Instr::AllocStorage { .. })).count();
        assert_eq!(allocs, 2);
    }

    #[test]
    fn identical_immediate_shapes_share_one_pooled_constant() {
        let exe = lowered(
            "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>) -> Tensor<(2, 2), f32> {\n\
               let x = reshape_tensor(a, (2, 2));\n\
               let y = reshape_tensor(b, (2, 2));\n\
               add(x, y)\n\
             }",
        );
        let shape_consts = exe
            .constants
            .iter()
            .filter(|c| c.shape == vec![2] && c.data == ScalarData::I64(vec![2, 2]))
            .count();
        assert_eq!(shape_consts, 1, "equal shape vectors must be pooled once");
    }

    #[test]
    fn overrides_reroute_primitive_names() {
        let m = placed(
            "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
               add(a, b)\n\
             }",
            Device::Cpu,
        );
        let mut ov = PrimOverrides::new();
        ov.insert("add".into(), "kernel:add.v8".into());
        let exe = compile_to_executable(&m, &ov).unwrap();
        let names: Vec<&str> = exe.primitives.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["kernel:add.v8"]);
    }

    #[test]
    fn closures_are_lifted_into_named_functions() {
        let exe = lowered(
            "fn main(x: Tensor<(2), f32>) -> Tensor<(2), f32> {\n\
             let twice = fn(v: Tensor<(2), f32>) -> Tensor<(2), f32> {\n\
             add(v, v)\n\
             };\n\
             twice(x)\n\
             }",
        );
        assert!(exe.func_index("main.lambda0").is_some(), "lambda must be lifted");
        let main_ops = ops_of(&exe, exe.func_index("main").unwrap() as usize);
        assert!(main_ops.contains(&"AllocClosure"));
        assert!(main_ops.contains(&"InvokeClosure"));
    }

}
