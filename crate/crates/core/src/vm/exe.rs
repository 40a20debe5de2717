//! Executable container: bytecode instructions, constant pool, function and
//! primitive tables, ADT metadata.

use std::fmt::Write as _;

use crate::ir::expr::TensorLiteral;
use crate::ir::types::{DType, Device};

/// Constructor tag reserved for tuples; real ADT tags index `Executable::adts`.
pub const TUPLE_TAG: u32 = u32::MAX;

/// Current serialization format version.
pub const FORMAT_VERSION: u32 = 1;

/// Magic bytes opening every serialized executable.
pub const MAGIC: [u8; 4] = *b"NMBL";

/// One bytecode instruction. Registers are frame-local `u32` indices; jump
/// offsets are relative to the pc of the branching instruction.
#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    Move { dst: u32, src: u32 },
    Ret { src: u32 },
    If { cond: u32, t_off: i32, f_off: i32 },
    Goto { off: i32 },
    LoadConst { dst: u32, idx: u32 },
    LoadConsti { dst: u32, value: i64 },
    AllocStorage { dst: u32, size: u32, align: u64, device: u8 },
    AllocTensor { dst: u32, storage: u32, offset: u64, shape: Vec<u64>, dtype: DType },
    AllocTensorReg { dst: u32, storage: u32, offset: u64, shape: u32, dtype: DType },
    AllocADT { dst: u32, tag: u32, fields: Vec<u32> },
    AllocClosure { dst: u32, func: u32, captured: Vec<u32> },
    FreeStorage { storage: u32 },
    FreeTensor { tensor: u32 },
    Invoke { dst: u32, func: u32, args: Vec<u32> },
    InvokeClosure { dst: u32, closure: u32, args: Vec<u32> },
    InvokePacked { prim: u32, args: Vec<u32> },
    GetField { dst: u32, obj: u32, index: u32 },
    GetTag { dst: u32, obj: u32 },
    DeviceCopy { dst: u32, src: u32, src_dev: u8, dst_dev: u8 },
    ShapeOf { dst: u32, src: u32 },
    ReshapeTensor { dst: u32, tensor: u32, shape: u32 },
    Fatal { msg: String },
}

/// Total number of distinct opcodes.
pub const OPCODE_COUNT: usize = 22;

impl Instr {
    pub fn opcode(&self) -> u8 {
        match self {
            Instr::Move { .. } => 0,
            Instr::Ret { .. } => 1,
            Instr::If { .. } => 2,
            Instr::Goto { .. } => 3,
            Instr::LoadConst { .. } => 4,
            Instr::LoadConsti { .. } => 5,
            Instr::AllocStorage { .. } => 6,
            Instr::AllocTensor { .. } => 7,
            Instr::AllocTensorReg { .. } => 8,
            Instr::AllocADT { .. } => 9,
            Instr::AllocClosure { .. } => 10,
            Instr::FreeStorage { .. } => 11,
            Instr::FreeTensor { .. } => 12,
            Instr::Invoke { .. } => 13,
            Instr::InvokeClosure { .. } => 14,
            Instr::InvokePacked { .. } => 15,
            Instr::GetField { .. } => 16,
            Instr::GetTag { .. } => 17,
            Instr::DeviceCopy { .. } => 18,
            Instr::ShapeOf { .. } => 19,
            Instr::ReshapeTensor { .. } => 20,
            Instr::Fatal { .. } => 21,
        }
    }

    pub fn opcode_name(&self) -> &'static str {
        OPCODE_NAMES[self.opcode() as usize]
    }
}

pub const OPCODE_NAMES: [&str; OPCODE_COUNT] = [
    "Move",
    "Ret",
    "If",
    "Goto",
    "LoadConst",
    "LoadConsti",
    "AllocStorage",
    "AllocTensor",
    "AllocTensorReg",
    "AllocADT",
    "AllocClosure",
    "FreeStorage",
    "FreeTensor",
    "Invoke",
    "InvokeClosure",
    "InvokePacked",
    "GetField",
    "GetTag",
    "DeviceCopy",
    "ShapeOf",
    "ReshapeTensor",
    "Fatal",
];

#[derive(Debug, Clone, PartialEq)]
pub struct VMFunction {
    pub name: String,
    pub n_regs: u32,
    pub n_params: u32,
    pub code: Vec<Instr>,
}

/// Declared kernel or intrinsic: `arity` inputs are followed by `outputs`
/// destination tensors in the packed argument list.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimDecl {
    pub name: String,
    pub arity: u32,
    pub outputs: u32,
}

/// Constructor metadata; the tag of a constructor is its table index.
#[derive(Debug, Clone, PartialEq)]
pub struct AdtMeta {
    pub ctor: String,
    pub fields: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Executable {
    pub version: u32,
    pub constants: Vec<TensorLiteral>,
    pub functions: Vec<VMFunction>,
    pub primitives: Vec<PrimDecl>,
    pub adts: Vec<AdtMeta>,
}

impl Executable {
    pub fn new() -> Executable {
        Executable {
            version: FORMAT_VERSION,
            constants: Vec::new(),
            functions: Vec::new(),
            primitives: Vec::new(),
            adts: Vec::new(),
        }
    }

    pub fn func_index(&self, name: &str) -> Option<u32> {
        self.functions.iter().position(|f| f.name == name).map(|i| i as u32)
    }
}

impl Default for Executable {
    fn default() -> Self {
        Executable::new()
    }
}

fn regs(list: &[u32]) -> String {
    let parts: Vec<String> = list.iter().map(|r| format!("r{r}")).collect();
    parts.join(", ")
}

fn dev(code: u8) -> Device {
    Device::from_code(code)
}

/// Renders one instruction in the `pc: OPCODE operands` form.
pub fn disasm_instr(pc: usize, i: &Instr) -> String {
    let body = match i {
        Instr::Move { dst, src } => format!("r{dst}, r{src}"),
        Instr::Ret { src } => format!("r{src}"),
        Instr::If { cond, t_off, f_off } => format!("r{cond}, {t_off:+}, {f_off:+}"),
        Instr::Goto { off } => format!("{off:+}"),
        Instr::LoadConst { dst, idx } => format!("r{dst}, const[{idx}]"),
        Instr::LoadConsti { dst, value } => format!("r{dst}, {value}"),
        Instr::AllocStorage { dst, size, align, device } => {
            format!("r{dst}, size=r{size}, align={align}, device={}", dev(*device))
        }
        Instr::AllocTensor { dst, storage, offset, shape, dtype } => {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("r{dst}, r{storage}, offset={offset}, shape=({}), {dtype}", dims.join(", "))
        }
        Instr::AllocTensorReg { dst, storage, offset, shape, dtype } => {
            format!("r{dst}, r{storage}, offset={offset}, shape=r{shape}, {dtype}")
        }
        Instr::AllocADT { dst, tag, fields } => {
            let t = if *tag == TUPLE_TAG { "tuple".to_string() } else { tag.to_string() };
            format!("r{dst}, tag={t}, [{}]", regs(fields))
        }
        Instr::AllocClosure { dst, func, captured } => {
            format!("r{dst}, fn[{func}], [{}]", regs(captured))
        }
        Instr::FreeStorage { storage } => format!("r{storage}"),
        Instr::FreeTensor { tensor } => format!("r{tensor}"),
        Instr::Invoke { dst, func, args } => format!("r{dst}, fn[{func}], [{}]", regs(args)),
        Instr::InvokeClosure { dst, closure, args } => {
            format!("r{dst}, r{closure}, [{}]", regs(args))
        }
        Instr::InvokePacked { prim, args } => format!("prim[{prim}], [{}]", regs(args)),
        Instr::GetField { dst, obj, index } => format!("r{dst}, r{obj}, {index}"),
        Instr::GetTag { dst, obj } => format!("r{dst}, r{obj}"),
        Instr::DeviceCopy { dst, src, src_dev, dst_dev } => {
            format!("r{dst}, r{src}, {} -> {}", dev(*src_dev), dev(*dst_dev))
        }
        Instr::ShapeOf { dst, src } => format!("r{dst}, r{src}"),
        Instr::ReshapeTensor { dst, tensor, shape } => format!("r{dst}, r{tensor}, shape=r{shape}"),
        Instr::Fatal { msg } => format!("{msg:?}"),
    };
    format!("{pc}: {} {body}", i.opcode_name())
}

/// Human-readable listing of a whole executable.
pub fn disasm(e: &Executable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version {}", e.version);
    for (i, c) in e.constants.iter().enumerate() {
        let dims: Vec<String> = c.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "const[{i}]: {} ({})", c.data.dtype(), dims.join(", "));
    }
    for (i, p) in e.primitives.iter().enumerate() {
        let _ = writeln!(out, "prim[{i}]: {} arity={} outputs={}", p.name, p.arity, p.outputs);
    }
    for (tag, a) in e.adts.iter().enumerate() {
        let _ = writeln!(out, "adt[{tag}]: {} fields={}", a.ctor, a.fields);
    }
    for (i, f) in e.functions.iter().enumerate() {
        let _ = writeln!(out, "fn[{i}] {}(params={}, regs={})", f.name, f.n_params, f.n_regs);
        for (pc, instr) in f.code.iter().enumerate() {
            let _ = writeln!(out, "  {}", disasm_instr(pc, instr));
        }
    }
    out
}
