//! Register-machine interpreter: frame stack, refcounted storage arenas, a
//! primitive registry, and per-opcode execution counters.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{LoadError, VmError};
use crate::ir::eval::PureValue;
use crate::ir::expr::{AttrValue, Attrs, CompositeArg, CompositeDef, CompositeMember, ScalarData, TensorLiteral};
use crate::ir::types::{DType, Device};
use crate::ops;
use crate::shapefn;
use crate::vm::exe::{Executable, Instr, PrimDecl, OPCODE_COUNT, TUPLE_TAG};
use crate::vm::serial::validate;

/// Largest single storage block a program may allocate (2 GiB); crafted
/// bytecode must fail cleanly instead of exhausting the host.
const MAX_BLOCK: i64 = 1 << 31;

const MAX_FRAMES: usize = 10_000;

// ---------------------------------------------------------------------------
// Objects

#[derive(Debug, Clone, PartialEq)]
pub enum TensorBack {
    /// Read-only view of a constant-pool entry.
    Pool(u32),
    /// View into an allocated storage block.
    Block { id: u64, offset: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub back: TensorBack,
}

impl VmTensor {
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.elems() * self.dtype.size_bytes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VMObject {
    Scalar(i64),
    Tensor(VmTensor),
    Storage(u64),
    Adt { tag: u32, fields: Vec<VMObject> },
    Closure { func: u32, captured: Vec<VMObject> },
}

/// The unit value: an empty tuple.
pub fn unit() -> VMObject {
    VMObject::Adt { tag: TUPLE_TAG, fields: Vec::new() }
}

// ---------------------------------------------------------------------------
// Instrumented storage arenas

struct Block {
    bytes: Vec<u8>,
    device: Option<Device>,
    refs: u32,
}

/// All storage blocks, across every device arena, with live-byte accounting.
/// Freed slots stay `None` so double frees and dangling views are detected
/// instead of aliasing fresh allocations.
#[derive(Default)]
pub struct Memory {
    blocks: Vec<Option<Block>>,
    pub live_bytes: u64,
    pub live_blocks: u64,
    pub peak_live_bytes: u64,
    pub total_allocs: u64,
    pub total_alloc_bytes: u64,
    pub frees: u64,
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    fn alloc(&mut self, len: usize, device: Option<Device>) -> u64 {
        let id = self.blocks.len() as u64;
        self.blocks.push(Some(Block { bytes: vec![0; len], device, refs: 1 }));
        self.live_bytes += len as u64;
        self.live_blocks += 1;
        self.peak_live_bytes = self.peak_live_bytes.max(self.live_bytes);
        self.total_allocs += 1;
        self.total_alloc_bytes += len as u64;
        id
    }

    fn get(&self, id: u64) -> Result<&Block, VmError> {
        self.blocks
            .get(id as usize)
            .and_then(|b| b.as_ref())
            .ok_or(VmError::UseAfterFree(id))
    }

    fn get_mut(&mut self, id: u64) -> Result<&mut Block, VmError> {
        self.blocks
            .get_mut(id as usize)
            .and_then(|b| b.as_mut())
            .ok_or(VmError::UseAfterFree(id))
    }

    fn retain_block(&mut self, id: u64) -> Result<(), VmError> {
        self.get_mut(id)?.refs += 1;
        Ok(())
    }

    fn release_block(&mut self, id: u64) {
        let Some(slot) = self.blocks.get_mut(id as usize) else { return };
        let Some(block) = slot.as_mut() else { return };
        block.refs -= 1;
        if block.refs == 0 {
            self.drop_block(id);
        }
    }

    fn drop_block(&mut self, id: u64) {
        if let Some(block) = self.blocks[id as usize].take() {
            self.live_bytes -= block.bytes.len() as u64;
            self.live_blocks -= 1;
            self.frees += 1;
        }
    }

    fn force_free(&mut self, id: u64) -> Result<(), VmError> {
        match self.blocks.get_mut(id as usize) {
            Some(slot) if slot.is_some() => {
                self.drop_block(id);
                Ok(())
            }
            _ => Err(VmError::DoubleFree(id)),
        }
    }

    /// Takes one reference on every storage block the object can reach.
    fn retain(&mut self, obj: &VMObject) -> Result<(), VmError> {
        match obj {
            VMObject::Scalar(_) => Ok(()),
            VMObject::Tensor(t) => match &t.back {
                TensorBack::Pool(_) => Ok(()),
                TensorBack::Block { id, .. } => self.retain_block(*id),
            },
            VMObject::Storage(id) => self.retain_block(*id),
            VMObject::Adt { fields, .. } => {
                fields.iter().try_for_each(|f| self.retain(f))
            }
            VMObject::Closure { captured, .. } => {
                captured.iter().try_for_each(|c| self.retain(c))
            }
        }
    }

    /// Drops references; blocks free themselves when the count reaches zero.
    /// Already-freed blocks are skipped, so releasing after an explicit
    /// `FreeStorage` stays quiet while genuine reads still fail.
    fn release(&mut self, obj: &VMObject) {
        match obj {
            VMObject::Scalar(_) => {}
            VMObject::Tensor(t) => {
                if let TensorBack::Block { id, .. } = &t.back {
                    self.release_block(*id);
                }
            }
            VMObject::Storage(id) => self.release_block(*id),
            VMObject::Adt { fields, .. } => fields.iter().for_each(|f| self.release(f)),
            VMObject::Closure { captured, .. } => {
                captured.iter().for_each(|c| self.release(c))
            }
        }
    }

    fn read(&self, id: u64, offset: usize, len: usize) -> Result<&[u8], VmError> {
        let block = self.get(id)?;
        if offset + len > block.bytes.len() {
            return Err(VmError::StorageOverflow { offset, len, size: block.bytes.len() });
        }
        Ok(&block.bytes[offset..offset + len])
    }

    fn write(&mut self, id: u64, offset: usize, data: &[u8]) -> Result<(), VmError> {
        let block = self.get_mut(id)?;
        if offset + data.len() > block.bytes.len() {
            return Err(VmError::StorageOverflow {
                offset,
                len: data.len(),
                size: block.bytes.len(),
            });
        }
        block.bytes[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }

    fn device_of(&self, id: u64) -> Result<Option<Device>, VmError> {
        Ok(self.get(id)?.device)
    }
}

// ---------------------------------------------------------------------------
// Literal marshalling

fn lit_bytes(lit: &TensorLiteral) -> Vec<u8> {
    match &lit.data {
        ScalarData::F32(xs) => xs.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ScalarData::I64(xs) => xs.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn lit_from_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> TensorLiteral {
    let data = match dtype {
        DType::F32 => ScalarData::F32(
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::I64 => ScalarData::I64(
            bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
    };
    TensorLiteral { shape, data }
}

/// Decodes a rank-1 int64 tensor into concrete dimensions.
fn shape_from_literal(lit: &TensorLiteral, op: &str) -> Result<Vec<usize>, VmError> {
    let ScalarData::I64(vals) = &lit.data else {
        return Err(VmError::ShapeCheck { op: op.into(), msg: "shape tensor must be int64".into() });
    };
    if lit.shape.len() != 1 {
        return Err(VmError::ShapeCheck {
            op: op.into(),
            msg: format!("shape tensor must be rank 1, got rank {}", lit.shape.len()),
        });
    }
    vals.iter()
        .map(|&v| {
            if v >= 1 {
                Ok(v as usize)
            } else {
                Err(VmError::ShapeCheck {
                    op: op.into(),
                    msg: format!("dimension {v} must be at least 1"),
                })
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Primitive registry

/// A primitive gets input literals plus the destination shapes and returns
/// one literal per output, which the VM writes into the destination views.
pub type PrimFn =
    Arc<dyn Fn(&[TensorLiteral], &[Vec<usize>]) -> Result<Vec<TensorLiteral>, VmError> + Send + Sync>;

struct PrimEntry {
    arity: u32,
    outputs: u32,
    f: PrimFn,
}

/// Runtime kernel table. Executable primitives with `op:`, `shape:` or
/// `composite:` name forms resolve to built-in implementations; anything else
/// must be registered here before `Vm::new`.
#[derive(Default)]
pub struct Registry {
    user: BTreeMap<String, PrimEntry>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn register_primitive(
        &mut self,
        name: &str,
        arity: u32,
        outputs: u32,
        f: PrimFn,
    ) -> Result<(), VmError> {
        if self.user.contains_key(name) {
            return Err(VmError::DuplicateKernel(name.into()));
        }
        self.user.insert(name.into(), PrimEntry { arity, outputs, f });
        Ok(())
    }

    fn resolve(&self, decl: &PrimDecl) -> Result<PrimFn, LoadError> {
        if let Some(entry) = self.user.get(&decl.name) {
            if entry.arity != decl.arity || entry.outputs != decl.outputs {
                return Err(LoadError::BadCode {
                    what: "registered primitive signature",
                    code: decl.arity as u64,
                });
            }
            return Ok(entry.f.clone());
        }
        builtin_prim(decl).ok_or_else(|| LoadError::UnknownPrimitive(decl.name.clone()))
    }
}

/// Builds the implementation for a built-in primitive name:
/// `op:{op}?{attrs}`, `shape:{op}?{attrs}`, `composite:{desc}` or
/// `shape_composite:{desc}?{attrs}`.
fn builtin_prim(decl: &PrimDecl) -> Option<PrimFn> {
    let (kind, rest) = decl.name.split_once(':')?;
    let (body, attrs) = match rest.rsplit_once('?') {
        Some((b, a)) => (b, attrs_decode(a)?),
        None => (rest, Attrs::new()),
    };
    match kind {
        "op" => {
            if !ops::is_builtin(body) {
                return None;
            }
            let op = body.to_string();
            Some(Arc::new(move |ins, out_shapes| {
                ops::ref_eval_mut(&op, ins, &attrs, out_shapes)
                    .map_err(|e| VmError::Primitive(op.clone(), e.to_string()))
            }))
        }
        "shape" => {
            if !ops::is_builtin(body) {
                return None;
            }
            Some(shape_prim(ShapeTarget::Op(body.to_string()), attrs))
        }
        "composite" => {
            let def = composite_decode(body)?;
            Some(Arc::new(move |ins, _out_shapes| {
                ops::composite_ref_eval(&def, ins)
                    .map(|out| vec![out])
                    .map_err(|e| VmError::Primitive("composite".into(), e.to_string()))
            }))
        }
        "shape_composite" => {
            let def = composite_decode(body)?;
            Some(shape_prim(ShapeTarget::Composite(def), attrs))
        }
        _ => None,
    }
}

enum ShapeTarget {
    Op(String),
    Composite(CompositeDef),
}

enum OwnedInput {
    Shape(Vec<usize>),
    Value(TensorLiteral),
}

/// Shape-function primitive: splices `static{i}` attribute shapes between the
/// runtime inputs, then evaluates the shape relation and emits one rank-1
/// int64 tensor per output shape.
fn shape_prim(target: ShapeTarget, attrs: Attrs) -> PrimFn {
    let name = match &target {
        ShapeTarget::Op(op) => format!("shape:{op}"),
        ShapeTarget::Composite(_) => "shape:composite".to_string(),
    };
    let data_dependent = match &target {
        ShapeTarget::Op(op) => shapefn::mode(op) == Some(ops::ShapeMode::DataDependent),
        ShapeTarget::Composite(_) => false,
    };
    Arc::new(move |ins, _out_shapes| {
        let statics = attrs.keys().filter(|k| k.starts_with("static")).count();
        let total = ins.len() + statics;
        let mut owned = Vec::with_capacity(total);
        let mut next = 0usize;
        for i in 0..total {
            if let Some(AttrValue::Shape(dims)) = attrs.get(&format!("static{i}")) {
                owned.push(OwnedInput::Shape(dims.iter().map(|&d| d as usize).collect()));
            } else {
                let lit = ins.get(next).ok_or_else(|| {
                    VmError::Primitive(name.clone(), "missing runtime shape input".into())
                })?;
                next += 1;
                if data_dependent {
                    owned.push(OwnedInput::Value(lit.clone()));
                } else {
                    owned.push(OwnedInput::Shape(shape_from_literal(lit, &name)?));
                }
            }
        }
        let shapes = match &target {
            ShapeTarget::Op(op) => {
                let refs: Vec<ops::ShapeInput<'_>> = owned
                    .iter()
                    .map(|o| match o {
                        OwnedInput::Shape(s) => ops::ShapeInput::Shape(s),
                        OwnedInput::Value(v) => ops::ShapeInput::Value(v),
                    })
                    .collect();
                ops::shape_fn(op, &refs, &attrs)
                    .map_err(|e| VmError::Primitive(name.clone(), e.to_string()))?
            }
            ShapeTarget::Composite(def) => {
                let dims: Vec<Vec<usize>> = owned
                    .into_iter()
                    .map(|o| match o {
                        OwnedInput::Shape(s) => s,
                        OwnedInput::Value(v) => v.shape,
                    })
                    .collect();
                vec![ops::composite_shape_fn(def, &dims)
                    .map_err(|e| VmError::Primitive(name.clone(), e.to_string()))?]
            }
        };
        shapes
            .into_iter()
            .map(|s| {
                if s.is_empty() {
                    return Err(VmError::ShapeCheck {
                        op: name.clone(),
                        msg: "shape function produced a rank-0 result".into(),
                    });
                }
                Ok(TensorLiteral::vector_i64(s.iter().map(|&d| d as i64).collect()))
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Primitive name encoding

/// Canonical attribute suffix: `key=value` pairs joined by `&`, keys sorted.
pub fn attrs_encode(attrs: &Attrs) -> String {
    let parts: Vec<String> = attrs
        .iter()
        .map(|(k, v)| {
            let val = match v {
                AttrValue::Int(i) => i.to_string(),
                AttrValue::Dtype(d) => format!("@{d}"),
                AttrValue::Shape(dims) => {
                    let ds: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
                    format!("({})", ds.join(","))
                }
            };
            format!("{k}={val}")
        })
        .collect();
    parts.join("&")
}

fn attrs_decode(s: &str) -> Option<Attrs> {
    let mut attrs = Attrs::new();
    if s.is_empty() {
        return Some(attrs);
    }
    for pair in s.split('&') {
        let (k, v) = pair.split_once('=')?;
        let val = if let Some(body) = v.strip_prefix('(').and_then(|v| v.strip_suffix(')')) {
            let dims: Option<Vec<u64>> =
                body.split(',').filter(|p| !p.is_empty()).map(|p| p.parse().ok()).collect();
            AttrValue::Shape(dims?)
        } else if let Some(d) = v.strip_prefix('@') {
            match d {
                "f32" => AttrValue::Dtype(DType::F32),
                "i64" => AttrValue::Dtype(DType::I64),
                _ => return None,
            }
        } else {
            AttrValue::Int(v.parse().ok()?)
        };
        attrs.insert(k.to_string(), val);
    }
    Some(attrs)
}

/// Canonical composite descriptor: `{n_inputs}|op(args);op(args)` where an
/// argument is `i{k}` for an external input or `m{k}` for a member output.
pub fn composite_encode(def: &CompositeDef) -> String {
    let members: Vec<String> = def
        .members
        .iter()
        .map(|m| {
            let args: Vec<String> = m
                .args
                .iter()
                .map(|a| match a {
                    CompositeArg::Input(i) => format!("i{i}"),
                    CompositeArg::Member(i) => format!("m{i}"),
                })
                .collect();
            let attrs = if m.attrs.is_empty() {
                String::new()
            } else {
                format!("[{}]", attrs_encode(&m.attrs))
            };
            format!("{}{attrs}({})", m.op, args.join(","))
        })
        .collect();
    format!("{}|{}", def.n_inputs, members.join(";"))
}

fn composite_decode(s: &str) -> Option<CompositeDef> {
    let (n, rest) = s.split_once('|')?;
    let n_inputs: usize = n.parse().ok()?;
    let mut members = Vec::new();
    for part in rest.split(';') {
        let open = part.find('(')?;
        let body = part.get(open + 1..part.len().checked_sub(1)?)?;
        if !part.ends_with(')') {
            return None;
        }
        let head = &part[..open];
        let (op, attrs) = match head.split_once('[') {
            Some((op, a)) => (op, attrs_decode(a.strip_suffix(']')?)?),
            None => (head, Attrs::new()),
        };
        let mut args = Vec::new();
        for a in body.split(',').filter(|p| !p.is_empty()) {
            let idx: usize = a.get(1..)?.parse().ok()?;
            match &a[..1] {
                "i" => {
                    if idx >= n_inputs {
                        return None;
                    }
                    args.push(CompositeArg::Input(idx));
                }
                "m" => {
                    if idx >= members.len() {
                        return None;
                    }
                    args.push(CompositeArg::Member(idx));
                }
                _ => return None,
            }
        }
        members.push(CompositeMember { op: op.to_string(), attrs, args });
    }
    if members.is_empty() {
        return None;
    }
    Some(CompositeDef { n_inputs, members })
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Debug, Clone, PartialEq)]
pub struct VmStats {
    pub copies: u64,
    pub copy_bytes: u64,
    pub packed_calls: u64,
    pub opcodes: [u64; OPCODE_COUNT],
}

impl Default for VmStats {
    fn default() -> Self {
        VmStats { copies: 0, copy_bytes: 0, packed_calls: 0, opcodes: [0; OPCODE_COUNT] }
    }
}

impl VmStats {
    /// How many distinct opcodes have executed at least once.
    pub fn opcodes_covered(&self) -> usize {
        self.opcodes.iter().filter(|&&c| c > 0).count()
    }

    pub fn merge(&mut self, other: &VmStats) {
        self.copies += other.copies;
        self.copy_bytes += other.copy_bytes;
        self.packed_calls += other.packed_calls;
        for (a, b) in self.opcodes.iter_mut().zip(other.opcodes.iter()) {
            *a += b;
        }
    }
}

struct Frame {
    func: usize,
    pc: usize,
    regs: Vec<Option<VMObject>>,
    ret_reg: u32,
}

impl Frame {
    fn new(func: usize, n_regs: u32, args: Vec<VMObject>, ret_reg: u32) -> Frame {
        let mut regs: Vec<Option<VMObject>> = Vec::with_capacity(n_regs as usize);
        regs.extend(args.into_iter().map(Some));
        regs.resize_with(n_regs as usize, || None);
        Frame { func, pc: 0, regs, ret_reg }
    }
}

pub struct Vm<'e> {
    exe: &'e Executable,
    prims: Vec<PrimFn>,
    pub mem: Memory,
    pub stats: VmStats,
}

impl<'e> Vm<'e> {
    /// Validates the executable and resolves every primitive up front.
    pub fn new(exe: &'e Executable, registry: &Registry) -> Result<Vm<'e>, LoadError> {
        validate(exe)?;
        let prims =
            exe.primitives.iter().map(|d| registry.resolve(d)).collect::<Result<Vec<_>, _>>()?;
        Ok(Vm { exe, prims, mem: Memory::new(), stats: VmStats::default() })
    }

    /// Stages a literal into a fresh host block (no device). The returned
    /// object owns one reference; pass it to `run` or `release` it.
    pub fn literal_arg(&mut self, lit: &TensorLiteral) -> VMObject {
        let bytes = lit_bytes(lit);
        let id = self.mem.alloc(bytes.len(), None);
        self.mem.write(id, 0, &bytes).expect("fresh block fits its own bytes");
        VMObject::Tensor(VmTensor {
            dtype: lit.data.dtype(),
            shape: lit.shape.clone(),
            back: TensorBack::Block { id, offset: 0 },
        })
    }

    pub fn live_bytes(&self) -> u64 {
        self.mem.live_bytes
    }

    /// Drops the caller's reference on a result object.
    pub fn release(&mut self, obj: &VMObject) {
        self.mem.release(obj);
    }

    pub fn run_main(&mut self, args: Vec<VMObject>) -> Result<VMObject, VmError> {
        self.run("main", args)
    }

    pub fn run(&mut self, fn_name: &str, args: Vec<VMObject>) -> Result<VMObject, VmError> {
        let Some(fidx) = self.exe.func_index(fn_name) else {
            for a in &args {
                self.mem.release(a);
            }
            return Err(VmError::Other(format!("executable has no function `{fn_name}`")));
        };
        let f = &self.exe.functions[fidx as usize];
        if args.len() != f.n_params as usize {
            let got = args.len();
            for a in &args {
                self.mem.release(a);
            }
            return Err(VmError::BadArgCount { expected: f.n_params as usize, got });
        }
        let mut frames = vec![Frame::new(fidx as usize, f.n_regs, args, 0)];
        let result = self.exec(&mut frames);
        for frame in frames.drain(..) {
            for obj in frame.regs.into_iter().flatten() {
                self.mem.release(&obj);
            }
        }
        result
    }

    fn exec(&mut self, frames: &mut Vec<Frame>) -> Result<VMObject, VmError> {
        let exe = self.exe;
        loop {
            let depth = frames.len();
            let frame = frames.last_mut().expect("at least one frame");
            let func = &exe.functions[frame.func];
            let Some(instr) = func.code.get(frame.pc) else {
                return Err(VmError::Other(format!(
                    "pc ran past the end of `{}`",
                    func.name
                )));
            };
            self.stats.opcodes[instr.opcode() as usize] += 1;
            match instr {
                Instr::Move { dst, src } => {
                    let obj = get(frame, *src)?.clone();
                    self.mem.retain(&obj)?;
                    set_reg(&mut self.mem, frame, *dst, obj)?;
                }
                Instr::Ret { src } => {
                    let slot = frame.regs.get_mut(*src as usize).ok_or(
                        VmError::RegisterOverflow { reg: *src, size: func.n_regs },
                    )?;
                    let result = slot.take().ok_or(VmError::EmptyRegister(*src))?;
                    let done = frames.pop().expect("current frame");
                    for obj in done.regs.into_iter().flatten() {
                        self.mem.release(&obj);
                    }
                    match frames.last_mut() {
                        None => return Ok(result),
                        Some(caller) => {
                            set_reg(&mut self.mem, caller, done.ret_reg, result)?;
                            continue;
                        }
                    }
                }
                Instr::If { cond, t_off, f_off } => {
                    let v = self.read_scalar(get(frame, *cond)?)?;
                    let off = if v != 0 { *t_off } else { *f_off };
                    frame.pc = (frame.pc as i64 + off as i64) as usize;
                    continue;
                }
                Instr::Goto { off } => {
                    frame.pc = (frame.pc as i64 + *off as i64) as usize;
                    continue;
                }
                Instr::LoadConst { dst, idx } => {
                    let lit = &exe.constants[*idx as usize];
                    let obj = VMObject::Tensor(VmTensor {
                        dtype: lit.data.dtype(),
                        shape: lit.shape.clone(),
                        back: TensorBack::Pool(*idx),
                    });
                    set_reg(&mut self.mem, frame, *dst, obj)?;
                }
                Instr::LoadConsti { dst, value } => {
                    set_reg(&mut self.mem, frame, *dst, VMObject::Scalar(*value))?;
                }
                Instr::AllocStorage { dst, size, device, .. } => {
                    let n = self.read_scalar(get(frame, *size)?)?;
                    if n <= 0 || n > MAX_BLOCK {
                        return Err(VmError::Other(format!(
                            "storage size must be in 1..={MAX_BLOCK}, got {n}"
                        )));
                    }
                    let id = self.mem.alloc(n as usize, Some(Device::from_code(*device)));
                    set_reg(&mut self.mem, frame, *dst, VMObject::Storage(id))?;
                }
                Instr::AllocTensor { dst, storage, offset, shape, dtype } => {
                    let dims: Vec<usize> = shape.iter().map(|&d| d as usize).collect();
                    let obj = self.tensor_view(get(frame, *storage)?, *offset, dims, *dtype)?;
                    set_reg(&mut self.mem, frame, *dst, obj)?;
                }
                Instr::AllocTensorReg { dst, storage, offset, shape, dtype } => {
                    let shape_lit = self.to_literal(get(frame, *shape)?)?;
                    let dims = shape_from_literal(&shape_lit, "alloc_tensor")?;
                    let obj = self.tensor_view(get(frame, *storage)?, *offset, dims, *dtype)?;
                    set_reg(&mut self.mem, frame, *dst, obj)?;
                }
                Instr::AllocADT { dst, tag, fields } => {
                    let mut vals = Vec::with_capacity(fields.len());
                    for &r in fields {
                        let v = get(frame, r)?.clone();
                        self.mem.retain(&v)?;
                        vals.push(v);
                    }
                    set_reg(&mut self.mem, frame, *dst, VMObject::Adt { tag: *tag, fields: vals })?;
                }
                Instr::AllocClosure { dst, func: fidx, captured } => {
                    let mut vals = Vec::with_capacity(captured.len());
                    for &r in captured {
                        let v = get(frame, r)?.clone();
                        self.mem.retain(&v)?;
                        vals.push(v);
                    }
                    let obj = VMObject::Closure { func: *fidx, captured: vals };
                    set_reg(&mut self.mem, frame, *dst, obj)?;
                }
                Instr::FreeStorage { storage } => {
                    let VMObject::Storage(id) = get(frame, *storage)? else {
                        return Err(VmError::WrongKind { expected: "storage" });
                    };
                    self.mem.force_free(*id)?;
                    set_reg(&mut self.mem, frame, *storage, unit())?;
                }
                Instr::FreeTensor { tensor } => {
                    match get(frame, *tensor)? {
                        VMObject::Tensor(t) => {
                            if let TensorBack::Pool(_) = t.back {
                                return Err(VmError::WrongKind { expected: "freeable tensor" });
                            }
                        }
                        _ => return Err(VmError::WrongKind { expected: "tensor" }),
                    }
                    set_reg(&mut self.mem, frame, *tensor, unit())?;
                }
                Instr::Invoke { dst, func: fidx, args } => {
                    if depth >= MAX_FRAMES {
                        return Err(VmError::Other("call depth exceeded".into()));
                    }
                    let mut vals = Vec::with_capacity(args.len());
                    for &r in args {
                        let v = get(frame, r)?.clone();
                        self.mem.retain(&v)?;
                        vals.push(v);
                    }
                    frame.pc += 1;
                    let callee = &exe.functions[*fidx as usize];
                    frames.push(Frame::new(*fidx as usize, callee.n_regs, vals, *dst));
                    continue;
                }
                Instr::InvokeClosure { dst, closure, args } => {
                    if depth >= MAX_FRAMES {
                        return Err(VmError::Other("call depth exceeded".into()));
                    }
                    let VMObject::Closure { func: fidx, captured } = get(frame, *closure)?.clone()
                    else {
                        return Err(VmError::WrongKind { expected: "closure" });
                    };
                    let callee = exe
                        .functions
                        .get(fidx as usize)
                        .ok_or_else(|| VmError::Other("closure function out of range".into()))?;
                    if captured.len() + args.len() != callee.n_params as usize {
                        return Err(VmError::BadArgCount {
                            expected: callee.n_params as usize,
                            got: captured.len() + args.len(),
                        });
                    }
                    let mut vals = Vec::with_capacity(callee.n_params as usize);
                    for c in captured {
                        self.mem.retain(&c)?;
                        vals.push(c);
                    }
                    for &r in args {
                        let v = get(frame, r)?.clone();
                        self.mem.retain(&v)?;
                        vals.push(v);
                    }
                    frame.pc += 1;
                    frames.push(Frame::new(fidx as usize, callee.n_regs, vals, *dst));
                    continue;
                }
                Instr::InvokePacked { prim, args } => {
                    self.invoke_packed(frame, *prim, args)?;
                }
                Instr::GetField { dst, obj, index } => {
                    let VMObject::Adt { fields, .. } = get(frame, *obj)? else {
                        return Err(VmError::WrongKind { expected: "constructor value" });
                    };
                    let v = fields
                        .get(*index as usize)
                        .ok_or_else(|| {
                            VmError::Other(format!(
                                "field {index} out of range for a {}-field constructor",
                                fields.len()
                            ))
                        })?
                        .clone();
                    self.mem.retain(&v)?;
                    set_reg(&mut self.mem, frame, *dst, v)?;
                }
                Instr::GetTag { dst, obj } => {
                    let VMObject::Adt { tag, .. } = get(frame, *obj)? else {
                        return Err(VmError::WrongKind { expected: "constructor value" });
                    };
                    let tag = *tag as i64;
                    set_reg(&mut self.mem, frame, *dst, VMObject::Scalar(tag))?;
                }
                Instr::DeviceCopy { dst, src, src_dev, dst_dev } => {
                    let VMObject::Tensor(t) = get(frame, *src)?.clone() else {
                        return Err(VmError::WrongKind { expected: "tensor" });
                    };
                    let expected = Device::from_code(*src_dev);
                    if let Some(found) = self.tensor_device(&t)? {
                        if found != expected {
                            return Err(VmError::WrongDevice {
                                expected: expected.to_string(),
                                found: found.to_string(),
                            });
                        }
                    }
                    let bytes = self.tensor_bytes(&t)?;
                    let id = self.mem.alloc(bytes.len(), Some(Device::from_code(*dst_dev)));
                    self.mem.write(id, 0, &bytes)?;
                    self.stats.copies += 1;
                    self.stats.copy_bytes += bytes.len() as u64;
                    let obj = VMObject::Tensor(VmTensor {
                        dtype: t.dtype,
                        shape: t.shape,
                        back: TensorBack::Block { id, offset: 0 },
                    });
                    set_reg(&mut self.mem, frame, *dst, obj)?;
                }
                Instr::ShapeOf { dst, src } => {
                    let VMObject::Tensor(t) = get(frame, *src)? else {
                        return Err(VmError::WrongKind { expected: "tensor" });
                    };
                    if t.shape.is_empty() {
                        return Err(VmError::ShapeCheck {
                            op: "shape_of".into(),
                            msg: "rank-0 tensor has no shape vector".into(),
                        });
                    }
                    let dims: Vec<i64> = t.shape.iter().map(|&d| d as i64).collect();
                    let rank = dims.len();
                    let bytes: Vec<u8> = dims.iter().flat_map(|d| d.to_le_bytes()).collect();
                    let id = self.mem.alloc(bytes.len(), Some(Device::Cpu));
                    self.mem.write(id, 0, &bytes)?;
                    let obj = VMObject::Tensor(VmTensor {
                        dtype: DType::I64,
                        shape: vec![rank],
                        back: TensorBack::Block { id, offset: 0 },
                    });
                    set_reg(&mut self.mem, frame, *dst, obj)?;
                }
                Instr::ReshapeTensor { dst, tensor, shape } => {
                    let shape_lit = self.to_literal(get(frame, *shape)?)?;
                    let dims = shape_from_literal(&shape_lit, "reshape")?;
                    let VMObject::Tensor(t) = get(frame, *tensor)?.clone() else {
                        return Err(VmError::WrongKind { expected: "tensor" });
                    };
                    let new_elems: usize = dims.iter().product();
                    if new_elems != t.elems() {
                        return Err(VmError::BadReshape { elems: t.elems(), new_elems });
                    }
                    let obj = VMObject::Tensor(VmTensor { dtype: t.dtype, shape: dims, back: t.back });
                    self.mem.retain(&obj)?;
                    set_reg(&mut self.mem, frame, *dst, obj)?;
                }
                Instr::Fatal { msg } => return Err(VmError::Fatal(msg.clone())),
            }
            frames.last_mut().expect("frame").pc += 1;
        }
    }

    fn invoke_packed(&mut self, frame: &mut Frame, prim: u32, args: &[u32]) -> Result<(), VmError> {
        let decl = &self.exe.primitives[prim as usize];
        let arity = decl.arity as usize;
        let mut operands = Vec::with_capacity(args.len());
        for &r in args {
            operands.push(get(frame, r)?.clone());
        }
        // Mirror of the reference device rule: every tensor operand that has a
        // device annotation must agree; host-staged operands are neutral.
        let mut seen: Option<Device> = None;
        for obj in &operands {
            if let VMObject::Tensor(t) = obj {
                if let Some(d) = self.tensor_device(t)? {
                    match seen {
                        None => seen = Some(d),
                        Some(prev) if prev != d => {
                            return Err(VmError::WrongDevice {
                                expected: prev.to_string(),
                                found: d.to_string(),
                            })
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        let mut in_lits = Vec::with_capacity(arity);
        for obj in &operands[..arity] {
            in_lits.push(self.to_literal(obj)?);
        }
        let mut views = Vec::with_capacity(args.len() - arity);
        for obj in &operands[arity..] {
            match obj {
                VMObject::Tensor(t) => match t.back {
                    TensorBack::Block { .. } => views.push(t.clone()),
                    TensorBack::Pool(_) => {
                        return Err(VmError::WrongKind { expected: "writable output tensor" })
                    }
                },
                _ => return Err(VmError::WrongKind { expected: "output tensor" }),
            }
        }
        let out_shapes: Vec<Vec<usize>> = views.iter().map(|v| v.shape.clone()).collect();
        let f = self.prims[prim as usize].clone();
        let results = f(&in_lits, &out_shapes)?;
        if results.len() != views.len() {
            return Err(VmError::Primitive(
                decl.name.clone(),
                format!("produced {} outputs, expected {}", results.len(), views.len()),
            ));
        }
        for (view, lit) in views.iter().zip(results.iter()) {
            self.write_literal(view, lit)?;
        }
        self.stats.packed_calls += 1;
        Ok(())
    }

    fn tensor_view(
        &mut self,
        storage: &VMObject,
        offset: u64,
        dims: Vec<usize>,
        dtype: DType,
    ) -> Result<VMObject, VmError> {
        let VMObject::Storage(id) = storage else {
            return Err(VmError::WrongKind { expected: "storage" });
        };
        if dims.iter().any(|&d| d == 0) {
            return Err(VmError::ShapeCheck {
                op: "alloc_tensor".into(),
                msg: "dimensions must be at least 1".into(),
            });
        }
        let elems = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            VmError::ShapeCheck { op: "alloc_tensor".into(), msg: "element count overflow".into() }
        })?;
        let len = elems * dtype.size_bytes();
        let offset = offset as usize;
        let size = self.mem.get(*id)?.bytes.len();
        if offset + len > size {
            return Err(VmError::StorageOverflow { offset, len, size });
        }
        self.mem.retain_block(*id)?;
        Ok(VMObject::Tensor(VmTensor {
            dtype,
            shape: dims,
            back: TensorBack::Block { id: *id, offset },
        }))
    }

    fn tensor_device(&self, t: &VmTensor) -> Result<Option<Device>, VmError> {
        match &t.back {
            TensorBack::Pool(_) => Ok(None),
            TensorBack::Block { id, .. } => self.mem.device_of(*id),
        }
    }

    fn tensor_bytes(&self, t: &VmTensor) -> Result<Vec<u8>, VmError> {
        match &t.back {
            TensorBack::Pool(k) => Ok(lit_bytes(&self.exe.constants[*k as usize])),
            TensorBack::Block { id, offset } => {
                Ok(self.mem.read(*id, *offset, t.byte_len())?.to_vec())
            }
        }
    }

    /// Reads any tensor-like operand into a literal; scalars become rank-0
    /// int64 tensors.
    pub fn to_literal(&self, obj: &VMObject) -> Result<TensorLiteral, VmError> {
        match obj {
            VMObject::Scalar(v) => Ok(TensorLiteral::scalar_i64(*v)),
            VMObject::Tensor(t) => match &t.back {
                TensorBack::Pool(k) => {
                    let c = &self.exe.constants[*k as usize];
                    Ok(TensorLiteral { shape: t.shape.clone(), data: c.data.clone() })
                }
                TensorBack::Block { id, offset } => {
                    let bytes = self.mem.read(*id, *offset, t.byte_len())?;
                    Ok(lit_from_bytes(t.dtype, t.shape.clone(), bytes))
                }
            },
            _ => Err(VmError::WrongKind { expected: "tensor" }),
        }
    }

    fn write_literal(&mut self, view: &VmTensor, lit: &TensorLiteral) -> Result<(), VmError> {
        if lit.shape != view.shape || lit.data.dtype() != view.dtype {
            return Err(VmError::ShapeCheck {
                op: "invoke".into(),
                msg: format!(
                    "result {:?} {} does not fit destination {:?} {}",
                    lit.shape,
                    lit.data.dtype(),
                    view.shape,
                    view.dtype
                ),
            });
        }
        let TensorBack::Block { id, offset } = view.back else {
            return Err(VmError::WrongKind { expected: "writable tensor" });
        };
        self.mem.write(id, offset, &lit_bytes(lit))
    }

    fn read_scalar(&self, obj: &VMObject) -> Result<i64, VmError> {
        match obj {
            VMObject::Scalar(v) => Ok(*v),
            VMObject::Tensor(t) if t.shape.is_empty() && t.dtype == DType::I64 => {
                self.to_literal(obj)?.scalar_i64_value().ok_or(VmError::WrongKind {
                    expected: "rank-0 int64 scalar",
                })
            }
            _ => Err(VmError::WrongKind { expected: "rank-0 int64 scalar" }),
        }
    }

    /// Detaches a result into a pure value for comparison with the reference
    /// evaluator.
    pub fn to_pure(&self, obj: &VMObject) -> Result<PureValue, VmError> {
        match obj {
            VMObject::Scalar(v) => Ok(PureValue::Tensor(TensorLiteral::scalar_i64(*v))),
            VMObject::Tensor(_) => Ok(PureValue::Tensor(self.to_literal(obj)?)),
            VMObject::Adt { tag, fields } if *tag == TUPLE_TAG => Ok(PureValue::Tuple(
                fields.iter().map(|f| self.to_pure(f)).collect::<Result<_, _>>()?,
            )),
            VMObject::Adt { tag, fields } => {
                let meta = self
                    .exe
                    .adts
                    .get(*tag as usize)
                    .ok_or_else(|| VmError::Other(format!("constructor tag {tag} unknown")))?;
                Ok(PureValue::Adt {
                    ctor: meta.ctor.clone(),
                    fields: fields.iter().map(|f| self.to_pure(f)).collect::<Result<_, _>>()?,
                })
            }
            VMObject::Storage(_) => Err(VmError::WrongKind { expected: "first-class value" }),
            VMObject::Closure { .. } => Err(VmError::WrongKind { expected: "first-order value" }),
        }
    }
}

fn get<'f>(frame: &'f Frame, idx: u32) -> Result<&'f VMObject, VmError> {
    frame
        .regs
        .get(idx as usize)
        .ok_or(VmError::RegisterOverflow { reg: idx, size: frame.regs.len() as u32 })?
        .as_ref()
        .ok_or(VmError::EmptyRegister(idx))
}

/// Stores `obj` (whose reference the caller transfers) and releases whatever
/// the register held before.
fn set_reg(mem: &mut Memory, frame: &mut Frame, idx: u32, obj: VMObject) -> Result<(), VmError> {
    let size = frame.regs.len() as u32;
    let slot = frame
        .regs
        .get_mut(idx as usize)
        .ok_or(VmError::RegisterOverflow { reg: idx, size })?;
    let old = slot.replace(obj);
    if let Some(o) = old {
        mem.release(&o);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::eval::{eval_ref, pure_close, PureValue};
    use crate::ir::expr::ScalarData;
    use crate::ir::parse::parse_module;
    use crate::vm::compile::compile_to_executable;
    use crate::vm::exe::{
        AdtMeta, Executable, Instr, PrimDecl, VMFunction, FORMAT_VERSION, OPCODE_NAMES,
    };
    use crate::vm::testutil::{placed, run_vm, run_vm_with};
    use std::collections::BTreeMap;

    fn f32s(v: Vec<f32>) -> TensorLiteral {
        TensorLiteral { shape: vec![v.len()], data: ScalarData::F32(v) }
    }

    fn executed(stats: &VmStats, name: &str) -> u64 {
        let i = OPCODE_NAMES.iter().position(|n| *n == name).unwrap();
        stats.opcodes[i]
    }

    #[test]
    fn straight_line_add_matches_the_reference() {
        let src = "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
                   add(a, b)\n\
                   }";
        let a = f32s(vec![1.0, 2.0, 3.0, 4.0]);
        let b = f32s(vec![0.5, -1.5, 2.5, -3.5]);
        let want = eval_ref(&parse_module(src).unwrap(), &[a.clone(), b.clone()]).unwrap();
        let (got, stats) = run_vm(&placed(src, Device::Cpu), &[a, b]);
        assert!(pure_close(&want, &got, 0.0));
        assert_eq!(stats.packed_calls, 1);
    }

    #[test]
    fn scalar_condition_selects_a_branch() {
        let src = "fn main(a: Tensor<(), i64>, b: Tensor<(), i64>) -> Tensor<(?), i64> {\n\
                   if (less(a, b)) {\n\
                   arange(0, 3, 1)\n\
                   } else {\n\
                   arange(0, 5, 1)\n\
                   }\n\
                   }";
        let m = placed(src, Device::Cpu);
        let lo = TensorLiteral::scalar_i64(1);
        let hi = TensorLiteral::scalar_i64(2);
        let (got, stats) = run_vm(&m, &[lo.clone(), hi.clone()]);
        assert_eq!(got, PureValue::Tensor(TensorLiteral::vector_i64(vec![0, 1, 2])));
        assert!(executed(&stats, "If") >= 1);
        let (got, _) = run_vm(&m, &[hi, lo]);
        assert_eq!(got, PureValue::Tensor(TensorLiteral::vector_i64(vec![0, 1, 2, 3, 4])));
    }

    #[test]
    fn dynamic_concat_sizes_its_output_from_the_shape_function() {
        let src = "// stage: fused\n\
                   fn main(a : Tensor<(?), f32>, b : Tensor<(3), f32>) -> Tensor<(?), f32> {\n\
                   let c = concat(a, b, axis=0);\n\
                   c\n\
                   }";
        let a = f32s(vec![1.0, 2.0, 3.0, 4.0]);
        let b = f32s(vec![9.0, 8.0, 7.0]);
        let want = eval_ref(&parse_module(src).unwrap(), &[a.clone(), b.clone()]).unwrap();
        let (got, stats) = run_vm(&placed(src, Device::Cpu), &[a, b]);
        assert!(pure_close(&want, &got, 0.0));
        assert!(executed(&stats, "ShapeOf") >= 1, "dynamic dims come from shape_of");
        assert!(executed(&stats, "AllocTensorReg") >= 1, "output extent is a runtime value");
    }

    #[test]
    fn recursion_closures_and_match_run_as_compiled_code() {
        let src = "data Leaf(Tensor<(2), f32>);\n\
                   data Node(adt, adt);\n\
                   fn total(t: adt) -> Tensor<(2), f32> {\n\
                   match (t) {\n\
                   Leaf(v) => { v },\n\
                   Node(l, r) => { add(total(l), total(r)) },\n\
                   }\n\
                   }\n\
                   fn main(x: Tensor<(2), f32>) -> Tensor<(2), f32> {\n\
                   let twice = fn(v: Tensor<(2), f32>) -> Tensor<(2), f32> {\n\
                   add(v, v)\n\
                   };\n\
                   total(Node(Node(Leaf(x), Leaf(twice(x))), Leaf(x)))\n\
                   }";
        let x = f32s(vec![1.0, 10.0]);
        let want = eval_ref(&parse_module(src).unwrap(), &[x.clone()]).unwrap();
        let (got, stats) = run_vm(&placed(src, Device::Cpu), &[x]);
        assert!(pure_close(&want, &got, 0.0));
        for op in ["Invoke", "InvokeClosure", "AllocClosure", "AllocADT", "GetTag", "GetField", "If"] {
            assert!(executed(&stats, op) >= 1, "{op} should have run");
        }
    }

    #[test]
    fn placed_module_copies_exactly_where_the_plan_says() {
        let src = "// stage: memplanned\n\
                   fn main(x : Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
                   let bc = alloc_storage(16,64,cpu);\n\
                   let c = alloc_tensor(bc,0,(4),f32);\n\
                   invoke_mut(add, (x, x), (c));\n\
                   let bd = alloc_storage(16,64,dev0);\n\
                   let d = alloc_tensor(bd,0,(4),f32);\n\
                   invoke_mut(add, (x, x), (d));\n\
                   let be = alloc_storage(16,64,dev0);\n\
                   let e = alloc_tensor(be,0,(4),f32);\n\
                   invoke_mut(multiply, (c, d), (e));\n\
                   e\n\
                   }";
        let m = placed(src, Device::Dev(0));
        let x = f32s(vec![1.0, 2.0, 3.0, 4.0]);
        let want = eval_ref(&m, &[x.clone()]).unwrap();
        let (got, stats) = run_vm(&m, &[x]);
        assert!(pure_close(&want, &got, 0.0));
        assert_eq!(stats.copies, 2, "one copy of x and one of c onto dev0");
    }

    #[test]
    fn missing_match_arm_traps_without_leaking() {
        let src = "// stage: typed\n\
                   data A(Tensor<(2), i64>);\n\
                   data B(Tensor<(2), i64>);\n\
                   fn main(x: Tensor<(2), i64>) -> Tensor<(2), i64> {\n\
                   match (B(x)) {\n\
                   A(v) => { v },\n\
                   }\n\
                   }";
        let m = placed(src, Device::Cpu);
        let exe = compile_to_executable(&m, &BTreeMap::new()).unwrap();
        let reg = Registry::new();
        let mut vm = Vm::new(&exe, &reg).unwrap();
        let arg = vm.literal_arg(&TensorLiteral::vector_i64(vec![5, 6]));
        let err = vm.run_main(vec![arg]).unwrap_err();
        assert!(matches!(&err, VmError::Fatal(msg) if msg.contains("tag 1")), "{err}");
        assert_eq!(vm.live_bytes(), 0, "trap path must still return storage");
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let noop: PrimFn =
            std::sync::Arc::new(|_ins: &[TensorLiteral], _outs: &[Vec<usize>]| Ok(vec![]));
        let mut reg = Registry::new();
        reg.register_primitive("mykernel:add", 2, 1, noop.clone()).unwrap();
        let err = reg.register_primitive("mykernel:add", 2, 1, noop).unwrap_err();
        assert!(matches!(err, VmError::DuplicateKernel(ref n) if n == "mykernel:add"), "{err}");
    }

    #[test]
    fn unknown_primitive_fails_at_load_not_at_run() {
        let exe = Executable {
            version: FORMAT_VERSION,
            constants: vec![],
            functions: vec![VMFunction {
                name: "main".into(),
                n_regs: 1,
                n_params: 0,
                code: vec![Instr::Ret { src: 0 }],
            }],
            primitives: vec![PrimDecl { name: "kernel:missing".into(), arity: 1, outputs: 1 }],
            adts: vec![],
        };
        let reg = Registry::new();
        let Err(err) = Vm::new(&exe, &reg) else { panic!("load should fail") };
        assert_eq!(err, LoadError::UnknownPrimitive("kernel:missing".into()));
    }

    #[test]
    fn registered_kernels_take_over_an_op() {
        let src = "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
                   add(a, b)\n\
                   }";
        let m = placed(src, Device::Cpu);
        let mut ov = BTreeMap::new();
        ov.insert("add".to_string(), "mykernel:add4".to_string());
        let mut reg = Registry::new();
        let f: PrimFn = std::sync::Arc::new(|ins: &[TensorLiteral], outs: &[Vec<usize>]| {
            let (ScalarData::F32(a), ScalarData::F32(b)) = (&ins[0].data, &ins[1].data) else {
                return Err(VmError::Primitive("mykernel:add4".into(), "dtype".into()));
            };
            let data: Vec<f32> = a.iter().zip(b).map(|(x, y)| x + y).collect();
            Ok(vec![TensorLiteral { shape: outs[0].clone(), data: ScalarData::F32(data) }])
        });
        reg.register_primitive("mykernel:add4", 2, 1, f).unwrap();
        let a = f32s(vec![1.0, 2.0, 3.0, 4.0]);
        let b = f32s(vec![10.0, 20.0, 30.0, 40.0]);
        let (got, stats) = run_vm_with(&m, &[a, b], &ov, &reg);
        assert_eq!(got, PureValue::Tensor(f32s(vec![11.0, 22.0, 33.0, 44.0])));
        assert_eq!(stats.packed_calls, 1);
    }

    fn raw_main(n_regs: u32, code: Vec<Instr>) -> Executable {
        Executable {
            version: FORMAT_VERSION,
            constants: vec![],
            functions: vec![VMFunction { name: "main".into(), n_regs, n_params: 0, code }],
            primitives: vec![],
            adts: vec![AdtMeta { ctor: "X".into(), fields: 0 }],
        }
    }

    #[test]
    fn freeing_twice_is_a_distinct_error() {
        let exe = raw_main(
            3,
            vec![
                Instr::LoadConsti { dst: 0, value: 8 },
                Instr::AllocStorage { dst: 1, size: 0, align: 8, device: 0 },
                Instr::Move { dst: 2, src: 1 },
                Instr::FreeStorage { storage: 1 },
                Instr::FreeStorage { storage: 2 },
                Instr::Ret { src: 0 },
            ],
        );
        let reg = Registry::new();
        let mut vm = Vm::new(&exe, &reg).unwrap();
        let err = vm.run_main(vec![]).unwrap_err();
        assert!(matches!(err, VmError::DoubleFree(_)), "{err}");
        assert_eq!(vm.live_bytes(), 0);
    }

    #[test]
    fn viewing_freed_storage_is_a_distinct_error() {
        let exe = raw_main(
            4,
            vec![
                Instr::LoadConsti { dst: 0, value: 16 },
                Instr::AllocStorage { dst: 1, size: 0, align: 8, device: 0 },
                Instr::Move { dst: 3, src: 1 },
                Instr::FreeStorage { storage: 1 },
                Instr::AllocTensor {
                    dst: 2,
                    storage: 3,
                    offset: 0,
                    shape: vec![2],
                    dtype: DType::I64,
                },
                Instr::Ret { src: 2 },
            ],
        );
        let reg = Registry::new();
        let mut vm = Vm::new(&exe, &reg).unwrap();
        let err = vm.run_main(vec![]).unwrap_err();
        assert!(matches!(err, VmError::UseAfterFree(_)), "{err}");
        assert_eq!(vm.live_bytes(), 0);
    }

    #[test]
    fn reading_an_unwritten_register_is_a_distinct_error() {
        let exe = raw_main(2, vec![Instr::Ret { src: 1 }]);
        let reg = Registry::new();
        let mut vm = Vm::new(&exe, &reg).unwrap();
        let err = vm.run_main(vec![]).unwrap_err();
        assert_eq!(err, VmError::EmptyRegister(1));
    }

    #[test]
    fn attr_encoding_is_canonical_and_reversible() {
        let mut attrs = Attrs::new();
        attrs.insert("axis".into(), AttrValue::Int(0));
        attrs.insert("dtype".into(), AttrValue::Dtype(DType::F32));
        attrs.insert("static1".into(), AttrValue::Shape(vec![3]));
        let enc = attrs_encode(&attrs);
        assert_eq!(attrs_decode(&enc).unwrap(), attrs);
        assert_eq!(enc, attrs_encode(&attrs_decode(&enc).unwrap()));
    }
}
