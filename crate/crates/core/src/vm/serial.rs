//! Binary format: magic, version, then length-prefixed sections for
//! constants, functions, primitives and ADT metadata. Decoding is total on
//! arbitrary bytes: every read is bounds-checked and every count is capped by
//! the remaining input before anything is allocated.

use crate::error::LoadError;
use crate::ir::expr::{ScalarData, TensorLiteral};
use crate::ir::types::DType;
use crate::vm::exe::{
    AdtMeta, Executable, Instr, PrimDecl, VMFunction, FORMAT_VERSION, MAGIC, TUPLE_TAG,
};

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::I64 => 1,
    }
}

fn dtype_from(code: u8) -> Result<DType, LoadError> {
    match code {
        0 => Ok(DType::F32),
        1 => Ok(DType::I64),
        c => Err(LoadError::BadCode { what: "dtype", code: c as u64 }),
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn reg_list(&mut self, rs: &[u32]) {
        self.u32(rs.len() as u32);
        for &r in rs {
            self.u32(r);
        }
    }
}

fn write_instr(w: &mut Writer, i: &Instr) {
    w.u8(i.opcode());
    match i {
        Instr::Move { dst, src } => {
            w.u32(*dst);
            w.u32(*src);
        }
        Instr::Ret { src } => w.u32(*src),
        Instr::If { cond, t_off, f_off } => {
            w.u32(*cond);
            w.i32(*t_off);
            w.i32(*f_off);
        }
        Instr::Goto { off } => w.i32(*off),
        Instr::LoadConst { dst, idx } => {
            w.u32(*dst);
            w.u32(*idx);
        }
        Instr::LoadConsti { dst, value } => {
            w.u32(*dst);
            w.i64(*value);
        }
        Instr::AllocStorage { dst, size, align, device } => {
            w.u32(*dst);
            w.u32(*size);
            w.u64(*align);
            w.u8(*device);
        }
        Instr::AllocTensor { dst, storage, offset, shape, dtype } => {
            w.u32(*dst);
            w.u32(*storage);
            w.u64(*offset);
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u64(d);
            }
            w.u8(dtype_code(*dtype));
        }
        Instr::AllocTensorReg { dst, storage, offset, shape, dtype } => {
            w.u32(*dst);
            w.u32(*storage);
            w.u64(*offset);
            w.u32(*shape);
            w.u8(dtype_code(*dtype));
        }
        Instr::AllocADT { dst, tag, fields } => {
            w.u32(*dst);
            w.u32(*tag);
            w.reg_list(fields);
        }
        Instr::AllocClosure { dst, func, captured } => {
            w.u32(*dst);
            w.u32(*func);
            w.reg_list(captured);
        }
        Instr::FreeStorage { storage } => w.u32(*storage),
        Instr::FreeTensor { tensor } => w.u32(*tensor),
        Instr::Invoke { dst, func, args } => {
            w.u32(*dst);
            w.u32(*func);
            w.reg_list(args);
        }
        Instr::InvokeClosure { dst, closure, args } => {
            w.u32(*dst);
            w.u32(*closure);
            w.reg_list(args);
        }
        Instr::InvokePacked { prim, args } => {
            w.u32(*prim);
            w.reg_list(args);
        }
        Instr::GetField { dst, obj, index } => {
            w.u32(*dst);
            w.u32(*obj);
            w.u32(*index);
        }
        Instr::GetTag { dst, obj } => {
            w.u32(*dst);
            w.u32(*obj);
        }
        Instr::DeviceCopy { dst, src, src_dev, dst_dev } => {
            w.u32(*dst);
            w.u32(*src);
            w.u8(*src_dev);
            w.u8(*dst_dev);
        }
        Instr::ShapeOf { dst, src } => {
            w.u32(*dst);
            w.u32(*src);
        }
        Instr::ReshapeTensor { dst, tensor, shape } => {
            w.u32(*dst);
            w.u32(*tensor);
            w.u32(*shape);
        }
        Instr::Fatal { msg } => w.str(msg),
    }
}

pub fn serialize(e: &Executable) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.u32(e.version);

    w.u32(e.constants.len() as u32);
    for c in &e.constants {
        w.u8(dtype_code(c.data.dtype()));
        w.u32(c.shape.len() as u32);
        for &d in &c.shape {
            w.u64(d as u64);
        }
        match &c.data {
            ScalarData::F32(xs) => {
                for &x in xs {
                    w.buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            ScalarData::I64(xs) => {
                for &x in xs {
                    w.i64(x);
                }
            }
        }
    }

    w.u32(e.functions.len() as u32);
    for f in &e.functions {
        w.str(&f.name);
        w.u32(f.n_regs);
        w.u32(f.n_params);
        w.u32(f.code.len() as u32);
        for i in &f.code {
            write_instr(&mut w, i);
        }
    }

    w.u32(e.primitives.len() as u32);
    for p in &e.primitives {
        w.str(&p.name);
        w.u32(p.arity);
        w.u32(p.outputs);
    }

    w.u32(e.adts.len() as u32);
    for a in &e.adts {
        w.str(&a.ctor);
        w.u32(a.fields);
    }

    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], LoadError> {
        if self.remaining() < n {
            return Err(LoadError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, LoadError> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &'static str) -> Result<i32, LoadError> {
        Ok(i32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn i64(&mut self, what: &'static str) -> Result<i64, LoadError> {
        Ok(i64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    /// Element count whose items occupy at least `min_item` bytes each; the
    /// cap keeps hostile counts from driving huge allocations.
    fn count(&mut self, min_item: usize, what: &'static str) -> Result<usize, LoadError> {
        let n = self.u32(what)? as usize;
        if n.saturating_mul(min_item.max(1)) > self.remaining() {
            return Err(LoadError::Truncated(what));
        }
        Ok(n)
    }

    fn str(&mut self, what: &'static str) -> Result<String, LoadError> {
        let n = self.count(1, what)?;
        let raw = self.bytes(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| LoadError::BadCode { what, code: u64::from(raw.first().copied().unwrap_or(0)) })
    }

    fn reg_list(&mut self, what: &'static str) -> Result<Vec<u32>, LoadError> {
        let n = self.count(4, what)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.u32(what)?);
        }
        Ok(out)
    }
}

fn read_instr(r: &mut Reader<'_>) -> Result<Instr, LoadError> {
    let op = r.u8("opcode")?;
    let i = match op {
        0 => Instr::Move { dst: r.u32("Move")?, src: r.u32("Move")? },
        1 => Instr::Ret { src: r.u32("Ret")? },
        2 => Instr::If { cond: r.u32("If")?, t_off: r.i32("If")?, f_off: r.i32("If")? },
        3 => Instr::Goto { off: r.i32("Goto")? },
        4 => Instr::LoadConst { dst: r.u32("LoadConst")?, idx: r.u32("LoadConst")? },
        5 => Instr::LoadConsti { dst: r.u32("LoadConsti")?, value: r.i64("LoadConsti")? },
        6 => Instr::AllocStorage {
            dst: r.u32("AllocStorage")?,
            size: r.u32("AllocStorage")?,
            align: r.u64("AllocStorage")?,
            device: r.u8("AllocStorage")?,
        },
        7 => {
            let dst = r.u32("AllocTensor")?;
            let storage = r.u32("AllocTensor")?;
            let offset = r.u64("AllocTensor")?;
            let rank = r.count(8, "AllocTensor")?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("AllocTensor")?);
            }
            let dtype = dtype_from(r.u8("AllocTensor")?)?;
            Instr::AllocTensor { dst, storage, offset, shape, dtype }
        }
        8 => Instr::AllocTensorReg {
            dst: r.u32("AllocTensorReg")?,
            storage: r.u32("AllocTensorReg")?,
            offset: r.u64("AllocTensorReg")?,
            shape: r.u32("AllocTensorReg")?,
            dtype: dtype_from(r.u8("AllocTensorReg")?)?,
        },
        9 => Instr::AllocADT {
            dst: r.u32("AllocADT")?,
            tag: r.u32("AllocADT")?,
            fields: r.reg_list("AllocADT")?,
        },
        10 => Instr::AllocClosure {
            dst: r.u32("AllocClosure")?,
            func: r.u32("AllocClosure")?,
            captured: r.reg_list("AllocClosure")?,
        },
        11 => Instr::FreeStorage { storage: r.u32("FreeStorage")? },
        12 => Instr::FreeTensor { tensor: r.u32("FreeTensor")? },
        13 => Instr::Invoke {
            dst: r.u32("Invoke")?,
            func: r.u32("Invoke")?,
            args: r.reg_list("Invoke")?,
        },
        14 => Instr::InvokeClosure {
            dst: r.u32("InvokeClosure")?,
            closure: r.u32("InvokeClosure")?,
            args: r.reg_list("InvokeClosure")?,
        },
        15 => Instr::InvokePacked {
            prim: r.u32("InvokePacked")?,
            args: r.reg_list("InvokePacked")?,
        },
        16 => Instr::GetField {
            dst: r.u32("GetField")?,
            obj: r.u32("GetField")?,
            index: r.u32("GetField")?,
        },
        17 => Instr::GetTag { dst: r.u32("GetTag")?, obj: r.u32("GetTag")? },
        18 => Instr::DeviceCopy {
            dst: r.u32("DeviceCopy")?,
            src: r.u32("DeviceCopy")?,
            src_dev: r.u8("DeviceCopy")?,
            dst_dev: r.u8("DeviceCopy")?,
        },
        19 => Instr::ShapeOf { dst: r.u32("ShapeOf")?, src: r.u32("ShapeOf")? },
        20 => Instr::ReshapeTensor {
            dst: r.u32("ReshapeTensor")?,
            tensor: r.u32("ReshapeTensor")?,
            shape: r.u32("ReshapeTensor")?,
        },
        21 => Instr::Fatal { msg: r.str("Fatal")? },
        c => return Err(LoadError::BadCode { what: "opcode", code: c as u64 }),
    };
    Ok(i)
}

fn read_constant(r: &mut Reader<'_>) -> Result<TensorLiteral, LoadError> {
    let dtype = dtype_from(r.u8("constant")?)?;
    let rank = r.count(8, "constant")?;
    let mut shape = Vec::with_capacity(rank);
    let mut elems: usize = 1;
    for _ in 0..rank {
        let d = r.u64("constant")?;
        if d == 0 {
            return Err(LoadError::BadCode { what: "constant dimension", code: 0 });
        }
        let d = usize::try_from(d)
            .map_err(|_| LoadError::BadCode { what: "constant dimension", code: d })?;
        elems = elems
            .checked_mul(d)
            .ok_or(LoadError::BadCode { what: "constant element count", code: d as u64 })?;
        shape.push(d);
    }
    if elems.saturating_mul(dtype.size_bytes()) > r.remaining() {
        return Err(LoadError::Truncated("constant data"));
    }
    let data = match dtype {
        DType::F32 => {
            let mut xs = Vec::with_capacity(elems);
            for _ in 0..elems {
                xs.push(f32::from_le_bytes(r.bytes(4, "constant data")?.try_into().unwrap()));
            }
            ScalarData::F32(xs)
        }
        DType::I64 => {
            let mut xs = Vec::with_capacity(elems);
            for _ in 0..elems {
                xs.push(r.i64("constant data")?);
            }
            ScalarData::I64(xs)
        }
    };
    Ok(TensorLiteral { shape, data })
}

/// Decodes and validates an executable. Never panics, whatever the input.
pub fn deserialize(bytes: &[u8]) -> Result<Executable, LoadError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.bytes(4, "magic").map_err(|_| LoadError::BadMagic)? != MAGIC {
        return Err(LoadError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(LoadError::UnsupportedVersion(version));
    }

    let mut e = Executable::new();
    e.version = version;

    let n_consts = r.count(1, "constant section")?;
    for _ in 0..n_consts {
        e.constants.push(read_constant(&mut r)?);
    }

    let n_funcs = r.count(1, "function section")?;
    for _ in 0..n_funcs {
        let name = r.str("function name")?;
        let n_regs = r.u32("function")?;
        let n_params = r.u32("function")?;
        let n_instrs = r.count(1, "function body")?;
        let mut code = Vec::with_capacity(n_instrs);
        for _ in 0..n_instrs {
            code.push(read_instr(&mut r)?);
        }
        e.functions.push(VMFunction { name, n_regs, n_params, code });
    }

    let n_prims = r.count(1, "primitive section")?;
    for _ in 0..n_prims {
        let name = r.str("primitive name")?;
        let arity = r.u32("primitive")?;
        let outputs = r.u32("primitive")?;
        e.primitives.push(PrimDecl { name, arity, outputs });
    }

    let n_adts = r.count(1, "adt section")?;
    for _ in 0..n_adts {
        let ctor = r.str("adt name")?;
        let fields = r.u32("adt")?;
        e.adts.push(AdtMeta { ctor, fields });
    }

    if r.pos != bytes.len() {
        return Err(LoadError::TrailingBytes);
    }
    validate(&e)?;
    Ok(e)
}

fn check_reg(reg: u32, n_regs: u32) -> Result<(), LoadError> {
    if reg >= n_regs {
        return Err(LoadError::IndexOutOfRange {
            what: "register",
            index: reg as u64,
            limit: n_regs as u64,
        });
    }
    Ok(())
}

fn check_jump(pc: usize, off: i32, len: usize) -> Result<(), LoadError> {
    let target = pc as i64 + off as i64;
    if target < 0 || target >= len as i64 {
        return Err(LoadError::BadJumpTarget { target, len });
    }
    Ok(())
}

/// Structural validation: every register, constant, function, primitive and
/// constructor index referenced by the bytecode must stay in range, packed
/// argument lists must match declared arities, and jumps must land inside
/// their function.
pub fn validate(e: &Executable) -> Result<(), LoadError> {
    for f in &e.functions {
        if f.n_params > f.n_regs {
            return Err(LoadError::IndexOutOfRange {
                what: "parameter register",
                index: f.n_params as u64,
                limit: f.n_regs as u64,
            });
        }
        for (pc, i) in f.code.iter().enumerate() {
            let n = f.n_regs;
            match i {
                Instr::Move { dst, src } => {
                    check_reg(*dst, n)?;
                    check_reg(*src, n)?;
                }
                Instr::Ret { src } => check_reg(*src, n)?,
                Instr::If { cond, t_off, f_off } => {
                    check_reg(*cond, n)?;
                    check_jump(pc, *t_off, f.code.len())?;
                    check_jump(pc, *f_off, f.code.len())?;
                }
                Instr::Goto { off } => check_jump(pc, *off, f.code.len())?,
                Instr::LoadConst { dst, idx } => {
                    check_reg(*dst, n)?;
                    if *idx as usize >= e.constants.len() {
                        return Err(LoadError::IndexOutOfRange {
                            what: "constant",
                            index: *idx as u64,
                            limit: e.constants.len() as u64,
                        });
                    }
                }
                Instr::LoadConsti { dst, .. } => check_reg(*dst, n)?,
                Instr::AllocStorage { dst, size, .. } => {
                    check_reg(*dst, n)?;
                    check_reg(*size, n)?;
                }
                Instr::AllocTensor { dst, storage, .. } => {
                    check_reg(*dst, n)?;
                    check_reg(*storage, n)?;
                }
                Instr::AllocTensorReg { dst, storage, shape, .. } => {
                    check_reg(*dst, n)?;
                    check_reg(*storage, n)?;
                    check_reg(*shape, n)?;
                }
                Instr::AllocADT { dst, tag, fields } => {
                    check_reg(*dst, n)?;
                    if *tag != TUPLE_TAG {
                        let meta = e.adts.get(*tag as usize).ok_or(LoadError::IndexOutOfRange {
                            what: "constructor tag",
                            index: *tag as u64,
                            limit: e.adts.len() as u64,
                        })?;
                        if meta.fields as usize != fields.len() {
                            return Err(LoadError::BadCode {
                                what: "constructor field count",
                                code: fields.len() as u64,
                            });
                        }
                    }
                    for &r in fields {
                        check_reg(r, n)?;
                    }
                }
                Instr::AllocClosure { dst, func, captured } => {
                    check_reg(*dst, n)?;
                    check_func(e, *func)?;
                    for &r in captured {
                        check_reg(r, n)?;
                    }
                }
                Instr::FreeStorage { storage } => check_reg(*storage, n)?,
                Instr::FreeTensor { tensor } => check_reg(*tensor, n)?,
                Instr::Invoke { dst, func, args } => {
                    check_reg(*dst, n)?;
                    check_func(e, *func)?;
                    for &r in args {
                        check_reg(r, n)?;
                    }
                    let callee = &e.functions[*func as usize];
                    if args.len() != callee.n_params as usize {
                        return Err(LoadError::BadCode {
                            what: "invoke argument count",
                            code: args.len() as u64,
                        });
                    }
                }
                Instr::InvokeClosure { dst, closure, args } => {
                    check_reg(*dst, n)?;
                    check_reg(*closure, n)?;
                    for &r in args {
                        check_reg(r, n)?;
                    }
                }
                Instr::InvokePacked { prim, args } => {
                    let decl =
                        e.primitives.get(*prim as usize).ok_or(LoadError::IndexOutOfRange {
                            what: "primitive",
                            index: *prim as u64,
                            limit: e.primitives.len() as u64,
                        })?;
                    if args.len() != (decl.arity + decl.outputs) as usize {
                        return Err(LoadError::BadCode {
                            what: "packed argument count",
                            code: args.len() as u64,
                        });
                    }
                    for &r in args {
                        check_reg(r, n)?;
                    }
                }
                Instr::GetField { dst, obj, .. } => {
                    check_reg(*dst, n)?;
                    check_reg(*obj, n)?;
                }
                Instr::GetTag { dst, obj } => {
                    check_reg(*dst, n)?;
                    check_reg(*obj, n)?;
                }
                Instr::DeviceCopy { dst, src, .. } => {
                    check_reg(*dst, n)?;
                    check_reg(*src, n)?;
                }
                Instr::ShapeOf { dst, src } => {
                    check_reg(*dst, n)?;
                    check_reg(*src, n)?;
                }
                Instr::ReshapeTensor { dst, tensor, shape } => {
                    check_reg(*dst, n)?;
                    check_reg(*tensor, n)?;
                    check_reg(*shape, n)?;
                }
                Instr::Fatal { .. } => {}
            }
        }
    }
    Ok(())
}

fn check_func(e: &Executable, idx: u32) -> Result<(), LoadError> {
    if idx as usize >= e.functions.len() {
        return Err(LoadError::IndexOutOfRange {
            what: "function",
            index: idx as u64,
            limit: e.functions.len() as u64,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::exe::OPCODE_COUNT;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One function exercising every instruction form, with operands that
    /// pass validation.
    fn kitchen_sink() -> Executable {
        let code = vec![
            Instr::Move { dst: 2, src: 0 },
            Instr::If { cond: 2, t_off: 1, f_off: 2 },
            Instr::Goto { off: 1 },
            Instr::LoadConst { dst: 3, idx: 0 },
            Instr::LoadConsti { dst: 4, value: -7 },
            Instr::AllocStorage { dst: 5, size: 4, align: 64, device: 0 },
            Instr::AllocTensor {
                dst: 6,
                storage: 5,
                offset: 0,
                shape: vec![2, 2],
                dtype: DType::F32,
            },
            Instr::AllocTensorReg { dst: 6, storage: 5, offset: 8, shape: 3, dtype: DType::I64 },
            Instr::AllocADT { dst: 7, tag: 1, fields: vec![0, 1] },
            Instr::AllocADT { dst: 7, tag: TUPLE_TAG, fields: vec![] },
            Instr::AllocClosure { dst: 7, func: 1, captured: vec![0] },
            Instr::FreeStorage { storage: 5 },
            Instr::FreeTensor { tensor: 6 },
            Instr::Invoke { dst: 2, func: 1, args: vec![0] },
            Instr::InvokeClosure { dst: 2, closure: 7, args: vec![1] },
            Instr::InvokePacked { prim: 0, args: vec![0, 1, 6] },
            Instr::GetField { dst: 2, obj: 7, index: 0 },
            Instr::GetTag { dst: 2, obj: 7 },
            Instr::DeviceCopy { dst: 2, src: 6, src_dev: 0, dst_dev: 1 },
            Instr::ShapeOf { dst: 2, src: 6 },
            Instr::ReshapeTensor { dst: 2, tensor: 6, shape: 3 },
            Instr::Fatal { msg: "boom".into() },
            Instr::Ret { src: 2 },
        ];
        Executable {
            version: FORMAT_VERSION,
            constants: vec![
                TensorLiteral::vector_i64(vec![2, 2]),
                TensorLiteral { shape: vec![2], data: ScalarData::F32(vec![1.5, -2.5]) },
            ],
            functions: vec![
                VMFunction { name: "main".into(), n_regs: 8, n_params: 2, code },
                VMFunction {
                    name: "helper".into(),
                    n_regs: 2,
                    n_params: 1,
                    code: vec![Instr::Ret { src: 0 }],
                },
            ],
            primitives: vec![PrimDecl { name: "op:add".into(), arity: 2, outputs: 1 }],
            adts: vec![
                AdtMeta { ctor: "Leaf".into(), fields: 1 },
                AdtMeta { ctor: "Node".into(), fields: 2 },
            ],
        }
    }

    #[test]
    fn every_instruction_form_survives_a_roundtrip() {
        let exe = kitchen_sink();
        let seen: std::collections::BTreeSet<u8> =
            exe.functions[0].code.iter().map(|i| i.opcode()).collect();
        assert_eq!(seen.len(), OPCODE_COUNT, "fixture must cover all opcodes");

        let bytes = serialize(&exe);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, exe);
        assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn corrupted_streams_report_distinct_errors() {
        let exe = kitchen_sink();
        let bytes = serialize(&exe);

        let mut magic = bytes.clone();
        magic[0] ^= 0xff;
        assert_eq!(deserialize(&magic), Err(LoadError::BadMagic));

        let mut version = bytes.clone();
        version[4] = 9;
        assert_eq!(deserialize(&version), Err(LoadError::UnsupportedVersion(9)));

        assert!(matches!(
            deserialize(&bytes[..bytes.len() - 1]),
            Err(LoadError::Truncated(_))
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert_eq!(deserialize(&trailing), Err(LoadError::TrailingBytes));

        let mut bad_func = exe.clone();
        bad_func.functions[1].code = vec![Instr::Invoke { dst: 0, func: 42, args: vec![] }];
        assert_eq!(
            deserialize(&serialize(&bad_func)),
            Err(LoadError::IndexOutOfRange { what: "function", index: 42, limit: 2 })
        );

        let mut bad_reg = exe.clone();
        bad_reg.functions[1].code = vec![Instr::Ret { src: 100 }];
        assert_eq!(
            deserialize(&serialize(&bad_reg)),
            Err(LoadError::IndexOutOfRange { what: "register", index: 100, limit: 2 })
        );

        let mut bad_jump = exe.clone();
        bad_jump.functions[1].code = vec![Instr::Goto { off: -5 }];
        assert_eq!(
            deserialize(&serialize(&bad_jump)),
            Err(LoadError::BadJumpTarget { target: -5, len: 1 })
        );

        let mut bad_arity = exe.clone();
        bad_arity.functions[1].code = vec![Instr::InvokePacked { prim: 0, args: vec![0] }];
        assert_eq!(
            deserialize(&serialize(&bad_arity)),
            Err(LoadError::BadCode { what: "packed argument count", code: 1 })
        );

        let mut bad_tag = exe.clone();
        bad_tag.functions[1].code = vec![Instr::AllocADT { dst: 0, tag: 9, fields: vec![] }];
        assert_eq!(
            deserialize(&serialize(&bad_tag)),
            Err(LoadError::IndexOutOfRange { what: "constructor tag", index: 9, limit: 2 })
        );

        let mut bad_const = exe.clone();
        bad_const.functions[1].code = vec![Instr::LoadConst { dst: 0, idx: 7 }];
        assert_eq!(
            deserialize(&serialize(&bad_const)),
            Err(LoadError::IndexOutOfRange { what: "constant", index: 7, limit: 2 })
        );
    }

    #[test]
    fn random_and_mutated_bytes_never_panic_the_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..4000 {
            let len = rng.gen_range(0..256);
            let buf: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let _ = deserialize(&buf);
        }
        let valid = serialize(&kitchen_sink());
        for _ in 0..4000 {
            let mut buf = valid.clone();
            for _ in 0..rng.gen_range(1..=8) {
                let at = rng.gen_range(0..buf.len());
                buf[at] = rng.gen();
            }
            let _ = deserialize(&buf);
        }
    }
}
