//! Reference evaluator.
//!
//! Evaluates a module at any stage and is the semantic authority the
//! compiler passes and the VM are tested against: lowering a module must
//! not change what `main` computes. Pure calls evaluate through
//! [`crate::ops::ref_eval`]; the explicit memory forms evaluate against
//! byte-level storage blocks so aliasing introduced by the memory planner
//! is observable. An instrumented mode shadows every storage byte and
//! fails on reads of killed data, which is how kill placement and block
//! coalescing are validated.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::EvalError;
use crate::ir::expr::{
    AttrValue, Attrs, Expr, FnDef, Module, Param, ScalarData, ShapeArg, TensorLiteral,
};
use crate::ir::types::{DType, Device, Dim, Type};
use crate::ops::{self, ShapeInput, ShapeMode};

const MAX_DEPTH: usize = 300;

/// One allocated block of raw bytes. `poison` is present only under
/// instrumentation; a `true` byte was killed and must be rewritten before
/// it may be read again.
#[derive(Debug)]
pub struct StorageBuf {
    pub id: usize,
    pub bytes: Vec<u8>,
    pub align: u64,
    pub device: Option<Device>,
    pub poison: Option<Vec<bool>>,
}

pub type StorageRef = Rc<RefCell<StorageBuf>>;

#[derive(Clone)]
pub enum Backing {
    Owned(Rc<ScalarData>),
    View { storage: StorageRef, offset: usize },
}

/// A runtime tensor: either an immutable owned value or a typed window
/// into a storage block.
#[derive(Clone)]
pub struct TensorVal {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub backing: Backing,
}

impl TensorVal {
    pub fn from_literal(lit: TensorLiteral) -> TensorVal {
        TensorVal {
            shape: lit.shape,
            dtype: lit.data.dtype(),
            backing: Backing::Owned(Rc::new(lit.data)),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_bytes(&self) -> usize {
        self.num_elements() * self.dtype.size_bytes()
    }

    pub fn device(&self) -> Option<Device> {
        match &self.backing {
            Backing::Owned(_) => None,
            Backing::View { storage, .. } => storage.borrow().device,
        }
    }

    /// Materializes the value, checking poison on views.
    pub fn to_literal(&self) -> Result<TensorLiteral, EvalError> {
        match &self.backing {
            Backing::Owned(data) => {
                Ok(TensorLiteral { shape: self.shape.clone(), data: (**data).clone() })
            }
            Backing::View { storage, offset } => {
                let buf = storage.borrow();
                let n = self.num_bytes();
                let end = offset + n;
                if end > buf.bytes.len() {
                    return Err(EvalError::Other(format!(
                        "tensor view [{offset}, {end}) exceeds storage block {} of {} bytes",
                        buf.id,
                        buf.bytes.len()
                    )));
                }
                if let Some(poison) = &buf.poison {
                    if let Some(bad) = (*offset..end).find(|&i| poison[i]) {
                        return Err(EvalError::PoisonedRead { block: buf.id, offset: bad });
                    }
                }
                Ok(TensorLiteral {
                    shape: self.shape.clone(),
                    data: decode(self.dtype, &buf.bytes[*offset..end]),
                })
            }
        }
    }

    /// Writes a computed value into a view, clearing poison.
    pub fn write(&self, lit: &TensorLiteral) -> Result<(), EvalError> {
        let Backing::View { storage, offset } = &self.backing else {
            return Err(EvalError::Other("write target is not a storage view".into()));
        };
        if lit.shape != self.shape || lit.dtype() != self.dtype {
            return Err(EvalError::Other(format!(
                "write of {:?} {} into view of {:?} {}",
                lit.shape,
                lit.dtype(),
                self.shape,
                self.dtype
            )));
        }
        let mut buf = storage.borrow_mut();
        let raw = encode(&lit.data);
        let end = offset + raw.len();
        if end > buf.bytes.len() {
            return Err(EvalError::Other(format!(
                "tensor view [{offset}, {end}) exceeds storage block {} of {} bytes",
                buf.id,
                buf.bytes.len()
            )));
        }
        buf.bytes[*offset..end].copy_from_slice(&raw);
        if let Some(poison) = &mut buf.poison {
            poison[*offset..end].fill(false);
        }
        Ok(())
    }
}

fn encode(data: &ScalarData) -> Vec<u8> {
    match data {
        ScalarData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ScalarData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn decode(dtype: DType, bytes: &[u8]) -> ScalarData {
    match dtype {
        DType::F32 => ScalarData::F32(
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::I64 => ScalarData::I64(
            bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
    }
}

pub struct ClosureVal {
    pub params: Vec<Param>,
    pub ret: Type,
    pub body: Expr,
    pub captured: Vec<(String, Value)>,
}

#[derive(Clone)]
pub enum Value {
    Tensor(TensorVal),
    Tuple(Vec<Value>),
    Adt { ctor: String, fields: Vec<Value> },
    Closure(Rc<ClosureVal>),
    Storage(StorageRef),
}

impl Value {
    pub fn unit() -> Value {
        Value::Tuple(Vec::new())
    }

    pub fn from_literal(lit: TensorLiteral) -> Value {
        Value::Tensor(TensorVal::from_literal(lit))
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Tensor(_) => "tensor",
            Value::Tuple(_) => "tuple",
            Value::Adt { .. } => "adt",
            Value::Closure(_) => "closure",
            Value::Storage(_) => "storage",
        }
    }

    pub fn as_tensor(&self) -> Result<&TensorVal, EvalError> {
        match self {
            Value::Tensor(t) => Ok(t),
            other => Err(EvalError::Other(format!("expected a tensor, got a {}", other.kind()))),
        }
    }
}

/// A fully materialized result, detached from storage, for comparing the
/// output of different stages and backends.
#[derive(Debug, Clone, PartialEq)]
pub enum PureValue {
    Tensor(TensorLiteral),
    Tuple(Vec<PureValue>),
    Adt { ctor: String, fields: Vec<PureValue> },
}

pub fn to_pure(v: &Value) -> Result<PureValue, EvalError> {
    match v {
        Value::Tensor(t) => Ok(PureValue::Tensor(t.to_literal()?)),
        Value::Tuple(vs) => Ok(PureValue::Tuple(vs.iter().map(to_pure).collect::<Result<_, _>>()?)),
        Value::Adt { ctor, fields } => Ok(PureValue::Adt {
            ctor: ctor.clone(),
            fields: fields.iter().map(to_pure).collect::<Result<_, _>>()?,
        }),
        other => Err(EvalError::Other(format!("{} is not a first-order result", other.kind()))),
    }
}

/// Structural equality with an absolute f32 tolerance; i64 data is exact.
pub fn pure_close(a: &PureValue, b: &PureValue, tol: f32) -> bool {
    match (a, b) {
        (PureValue::Tensor(x), PureValue::Tensor(y)) => {
            x.shape == y.shape
                && match (&x.data, &y.data) {
                    (ScalarData::I64(p), ScalarData::I64(q)) => p == q,
                    (ScalarData::F32(p), ScalarData::F32(q)) => {
                        p.len() == q.len()
                            && p.iter().zip(q).all(|(u, v)| {
                                (u.is_nan() && v.is_nan()) || (u - v).abs() <= tol
                            })
                    }
                    _ => false,
                }
        }
        (PureValue::Tuple(xs), PureValue::Tuple(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| pure_close(x, y, tol))
        }
        (PureValue::Adt { ctor: ca, fields: fa }, PureValue::Adt { ctor: cb, fields: fb }) => {
            ca == cb && fa.len() == fb.len() && fa.iter().zip(fb).all(|(x, y)| pure_close(x, y, tol))
        }
        _ => false,
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EvalStats {
    pub allocs: u64,
    pub alloc_bytes: u64,
    pub copies: u64,
    pub copy_bytes: u64,
    pub invokes: u64,
}

type Env = Vec<(String, Value)>;

fn lookup(env: &Env, name: &str) -> Option<Value> {
    env.iter().rev().find(|(n, _)| n == name).map(|(_, v)| v.clone())
}

/// Checks that a runtime value fits a declared type. Static dimensions must
/// match exactly; `?` admits anything. This is the runtime half of the
/// gradual typing story: annotations the checker trusted are verified here.
fn check_value(v: &Value, ty: &Type) -> Result<(), String> {
    match (v, ty) {
        (Value::Tensor(t), Type::Tensor(tt)) => {
            if t.shape.len() != tt.dims.len() {
                return Err(format!(
                    "rank {} value against rank {} type {tt}",
                    t.shape.len(),
                    tt.dims.len()
                ));
            }
            if t.dtype != tt.dtype {
                return Err(format!("dtype {} value against {tt}", t.dtype));
            }
            for (i, (have, want)) in t.shape.iter().zip(&tt.dims).enumerate() {
                if let Dim::Static(d) = want {
                    if *have as u64 != *d {
                        return Err(format!("axis {i} has extent {have}, type {tt} wants {d}"));
                    }
                }
            }
            Ok(())
        }
        (Value::Tuple(vs), Type::Tuple(ts)) => {
            if vs.len() != ts.len() {
                return Err(format!("{}-tuple against {}-tuple type", vs.len(), ts.len()));
            }
            for (v, t) in vs.iter().zip(ts) {
                check_value(v, t)?;
            }
            Ok(())
        }
        (Value::Adt { .. }, Type::Adt) => Ok(()),
        (Value::Closure(c), Type::Fn { params, .. }) => {
            if c.params.len() != params.len() {
                return Err(format!(
                    "closure of {} parameters against {ty}",
                    c.params.len()
                ));
            }
            Ok(())
        }
        (Value::Storage(_), Type::Storage) => Ok(()),
        _ => Err(format!("{} value against type {ty}", v.kind())),
    }
}

pub struct Evaluator<'m> {
    m: &'m Module,
    instrument: bool,
    pub stats: EvalStats,
    depth: usize,
    next_id: usize,
}

impl<'m> Evaluator<'m> {
    pub fn new(m: &'m Module) -> Evaluator<'m> {
        Evaluator { m, instrument: false, stats: EvalStats::default(), depth: 0, next_id: 0 }
    }

    /// Instrumented evaluation shadows storage bytes: `kill` poisons and a
    /// later un-rewritten read fails.
    pub fn instrumented(m: &'m Module) -> Evaluator<'m> {
        Evaluator { m, instrument: true, ..Evaluator::new(m) }
    }

    pub fn eval_main(&mut self, args: Vec<Value>) -> Result<Value, EvalError> {
        let main = self
            .m
            .main()
            .ok_or_else(|| EvalError::Other("module has no `main` function".into()))?;
        self.call_fn(main, args)
    }

    fn call_fn(&mut self, f: &FnDef, args: Vec<Value>) -> Result<Value, EvalError> {
        if args.len() != f.params.len() {
            return Err(EvalError::ArityMismatch(f.name.clone()));
        }
        if self.depth >= MAX_DEPTH {
            return Err(EvalError::Other(format!(
                "recursion deeper than {MAX_DEPTH} calls in `{}`",
                f.name
            )));
        }
        for (i, (a, p)) in args.iter().zip(&f.params).enumerate() {
            check_value(a, &p.ty).map_err(|msg| EvalError::ArgType { index: i, msg })?;
        }
        let mut env: Env =
            f.params.iter().map(|p| p.name.clone()).zip(args).collect();
        self.depth += 1;
        let out = self.eval(&f.body, &mut env);
        self.depth -= 1;
        let out = out?;
        check_value(&out, &f.ret).map_err(|msg| {
            EvalError::Other(format!("`{}` returned a bad value: {msg}", f.name))
        })?;
        Ok(out)
    }

    fn fresh_storage(&mut self, bytes: usize, align: u64, device: Option<Device>) -> StorageRef {
        let id = self.next_id;
        self.next_id += 1;
        self.stats.allocs += 1;
        self.stats.alloc_bytes += bytes as u64;
        Rc::new(RefCell::new(StorageBuf {
            id,
            bytes: vec![0; bytes],
            align,
            device,
            poison: self.instrument.then(|| vec![false; bytes]),
        }))
    }

    fn tensor_args(&mut self, exprs: &[Expr], env: &mut Env) -> Result<Vec<TensorVal>, EvalError> {
        exprs
            .iter()
            .map(|e| Ok(self.eval(e, env)?.as_tensor()?.clone()))
            .collect()
    }

    /// Views carrying an assigned device must agree within one invocation.
    fn check_one_device(&self, op: &str, vals: &[TensorVal]) -> Result<(), EvalError> {
        let mut seen: Option<Device> = None;
        for v in vals {
            let Some(d) = v.device() else { continue };
            match seen {
                None => seen = Some(d),
                Some(prev) if prev != d => {
                    return Err(EvalError::Other(format!(
                        "`{op}` mixes operands on {prev} and {d}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Binding and branching forms run in a loop so that long statement
    /// chains do not grow the host stack; other forms recurse.
    fn eval(&mut self, e: &Expr, env: &mut Env) -> Result<Value, EvalError> {
        let base = env.len();
        let mut cur = e;
        let out = loop {
            match cur {
                Expr::Let { name, ty, value, body } => {
                    let v = self.eval_step(value, env)?;
                    if let Some(ty) = ty {
                        check_value(&v, ty).map_err(|msg| EvalError::ShapeMismatch {
                            op: "annotation".into(),
                            msg: format!("`{name}`: {msg}"),
                        })?;
                    }
                    if name != "_" {
                        env.push((name.clone(), v));
                    }
                    cur = body;
                }
                Expr::If { cond, then_body, else_body } => {
                    let c = self.eval_step(cond, env)?;
                    let lit = c.as_tensor()?.to_literal()?;
                    if !lit.shape.is_empty() {
                        return Err(EvalError::NonScalarCondition);
                    }
                    let ScalarData::I64(v) = &lit.data else {
                        return Err(EvalError::NonScalarCondition);
                    };
                    cur = if v[0] != 0 { then_body } else { else_body };
                }
                Expr::Match { scrutinee, arms } => {
                    let s = self.eval_step(scrutinee, env)?;
                    let Value::Adt { ctor, fields } = s else {
                        return Err(EvalError::Other(format!("matched on a {}", s.kind())));
                    };
                    let arm = arms.iter().find(|a| a.ctor == ctor).ok_or_else(|| {
                        EvalError::NoMatchArm(self.m.ctor_tag(&ctor).unwrap_or(u32::MAX))
                    })?;
                    if arm.binders.len() != fields.len() {
                        return Err(EvalError::ArityMismatch(ctor.clone()));
                    }
                    env.extend(arm.binders.iter().cloned().zip(fields));
                    cur = &arm.body;
                }
                other => break self.eval_step(other, env)?,
            }
        };
        env.truncate(base);
        Ok(out)
    }

    fn eval_step(&mut self, e: &Expr, env: &mut Env) -> Result<Value, EvalError> {
        match e {
            Expr::Var(name) => {
                lookup(env, name).ok_or_else(|| EvalError::UnboundVar(name.clone()))
            }
            Expr::Constant(lit) => Ok(Value::from_literal(lit.clone())),
            Expr::Call { op, args, attrs } => self.eval_call(op, args, attrs, env),
            Expr::Apply { callee, args } => {
                let f = self.eval(callee, env)?;
                let Value::Closure(c) = f else {
                    return Err(EvalError::Other(format!(
                        "applied a {}, not a closure",
                        f.kind()
                    )));
                };
                let argv: Vec<Value> =
                    args.iter().map(|a| self.eval(a, env)).collect::<Result<_, _>>()?;
                if argv.len() != c.params.len() {
                    return Err(EvalError::ArityMismatch("closure".into()));
                }
                if self.depth >= MAX_DEPTH {
                    return Err(EvalError::Other(format!(
                        "recursion deeper than {MAX_DEPTH} calls in a closure"
                    )));
                }
                for (i, (a, p)) in argv.iter().zip(&c.params).enumerate() {
                    check_value(a, &p.ty).map_err(|msg| EvalError::ArgType { index: i, msg })?;
                }
                let mut inner: Env = c.captured.clone();
                inner.extend(c.params.iter().map(|p| p.name.clone()).zip(argv));
                self.depth += 1;
                let out = self.eval(&c.body, &mut inner);
                self.depth -= 1;
                let out = out?;
                check_value(&out, &c.ret)
                    .map_err(|msg| EvalError::Other(format!("closure returned a bad value: {msg}")))?;
                Ok(out)
            }
            Expr::Let { .. } | Expr::If { .. } | Expr::Match { .. } => self.eval(e, env),
            Expr::Closure { params, ret, body } => {
                let free = crate::ir::expr::free_vars(e);
                let captured: Env = free
                    .into_iter()
                    .filter_map(|n| lookup(env, &n).map(|v| (n, v)))
                    .collect();
                Ok(Value::Closure(Rc::new(ClosureVal {
                    params: params.clone(),
                    ret: ret.clone(),
                    body: (**body).clone(),
                    captured,
                })))
            }
            Expr::Tuple(elems) => Ok(Value::Tuple(
                elems.iter().map(|x| self.eval(x, env)).collect::<Result<_, _>>()?,
            )),
            Expr::Proj { tuple, index } => {
                let t = self.eval(tuple, env)?;
                let Value::Tuple(vs) = t else {
                    return Err(EvalError::Other(format!(
                        "projected field {index} of a {}",
                        t.kind()
                    )));
                };
                vs.get(*index).cloned().ok_or_else(|| {
                    EvalError::Other(format!(
                        "projection index {index} out of bounds for a {}-tuple",
                        vs.len()
                    ))
                })
            }
            Expr::Construct { ctor, args } => {
                let def = self
                    .m
                    .adts
                    .get(ctor)
                    .ok_or_else(|| EvalError::UnknownOp(ctor.clone()))?;
                if args.len() != def.fields.len() {
                    return Err(EvalError::ArityMismatch(ctor.clone()));
                }
                let fields: Vec<Value> =
                    args.iter().map(|a| self.eval(a, env)).collect::<Result<_, _>>()?;
                for (i, (v, ty)) in fields.iter().zip(&def.fields).enumerate() {
                    check_value(v, ty).map_err(|msg| EvalError::ArgType { index: i, msg })?;
                }
                Ok(Value::Adt { ctor: ctor.clone(), fields })
            }
            Expr::InvokeMut { op, inputs, outputs, attrs } => {
                self.stats.invokes += 1;
                let ins = self.tensor_args(inputs, env)?;
                let outs = self.tensor_args(outputs, env)?;
                let mut all = ins.clone();
                all.extend(outs.iter().cloned());
                self.check_one_device(op, &all)?;
                let in_lits: Vec<TensorLiteral> =
                    ins.iter().map(|t| t.to_literal()).collect::<Result<_, _>>()?;
                let results = if let Some(def) = self.m.composites.get(op) {
                    let out = ops::composite_ref_eval(def, &in_lits)?;
                    vec![out]
                } else if ops::is_builtin(op) {
                    let out_shapes: Vec<Vec<usize>> =
                        outs.iter().map(|t| t.shape.clone()).collect();
                    ops::ref_eval_mut(op, &in_lits, attrs, &out_shapes)?
                } else {
                    return Err(EvalError::UnknownOp(op.clone()));
                };
                if results.len() != outs.len() {
                    return Err(EvalError::ArityMismatch(op.clone()));
                }
                for (dst, lit) in outs.iter().zip(&results) {
                    dst.write(lit)?;
                }
                Ok(Value::unit())
            }
            Expr::AllocStorage { size, align, device } => {
                let sz = self.eval(size, env)?.as_tensor()?.to_literal()?;
                let ScalarData::I64(v) = &sz.data else {
                    return Err(EvalError::Other("storage size is not an i64 scalar".into()));
                };
                if !sz.shape.is_empty() {
                    return Err(EvalError::Other("storage size is not a scalar".into()));
                }
                let n = v[0];
                if n <= 0 {
                    return Err(EvalError::Other(format!("storage size {n} must be positive")));
                }
                Ok(Value::Storage(self.fresh_storage(n as usize, *align, *device)))
            }
            Expr::AllocTensor { storage, offset, shape, dtype } => {
                let st = self.eval(storage, env)?;
                let Value::Storage(buf) = st else {
                    return Err(EvalError::Other(format!(
                        "alloc_tensor over a {}, not storage",
                        st.kind()
                    )));
                };
                let dims = self.shape_dims(shape, env)?;
                let elems: usize = dims.iter().product();
                let nbytes = elems * dtype.size_bytes();
                let avail = buf.borrow().bytes.len();
                if offset + nbytes as u64 > avail as u64 {
                    return Err(EvalError::Other(format!(
                        "tensor of {nbytes} bytes at offset {offset} exceeds storage of {avail} bytes"
                    )));
                }
                Ok(Value::Tensor(TensorVal {
                    shape: dims,
                    dtype: *dtype,
                    backing: Backing::View { storage: buf, offset: *offset as usize },
                }))
            }
            Expr::Kill(target) => {
                let v = self.eval(target, env)?;
                match v {
                    Value::Tensor(t) => {
                        if let Backing::View { storage, offset } = &t.backing {
                            let mut buf = storage.borrow_mut();
                            let end = offset + t.num_bytes();
                            if let Some(poison) = &mut buf.poison {
                                poison[*offset..end].fill(true);
                            }
                        }
                        Ok(Value::unit())
                    }
                    Value::Storage(buf) => {
                        let mut buf = buf.borrow_mut();
                        if let Some(poison) = &mut buf.poison {
                            poison.fill(true);
                        }
                        Ok(Value::unit())
                    }
                    other => {
                        Err(EvalError::Other(format!("killed a {}", other.kind())))
                    }
                }
            }
            Expr::ShapeOf(x) => {
                let t = self.eval(x, env)?.as_tensor()?.clone();
                if t.shape.is_empty() {
                    return Err(EvalError::Other("shape_of on a rank-0 tensor".into()));
                }
                Ok(Value::from_literal(TensorLiteral::vector_i64(
                    t.shape.iter().map(|&d| d as i64).collect(),
                )))
            }
            Expr::InvokeShapeFunc { op, inputs, outputs, attrs } => {
                self.eval_shape_func(op, inputs, outputs, attrs, env)
            }
            Expr::DeviceCopy { value, src, dst } => {
                let t = self.eval(value, env)?.as_tensor()?.clone();
                if let Some(d) = t.device() {
                    if d != *src {
                        return Err(EvalError::Other(format!(
                            "device_copy source says {src} but the value lives on {d}"
                        )));
                    }
                }
                let lit = t.to_literal()?;
                let nbytes = t.num_bytes();
                let buf = self.fresh_storage(nbytes, 64, Some(*dst));
                self.stats.copies += 1;
                self.stats.copy_bytes += nbytes as u64;
                let out = TensorVal {
                    shape: t.shape.clone(),
                    dtype: t.dtype,
                    backing: Backing::View { storage: buf, offset: 0 },
                };
                out.write(&lit)?;
                Ok(Value::Tensor(out))
            }
            Expr::ReshapeTensor { tensor, shape } => {
                let t = self.eval(tensor, env)?.as_tensor()?.clone();
                let dims = self.shape_dims(shape, env)?;
                let elems: usize = dims.iter().product();
                if elems != t.num_elements() {
                    return Err(EvalError::Other(format!(
                        "reshape of {} elements to {:?}",
                        t.num_elements(),
                        dims
                    )));
                }
                Ok(Value::Tensor(TensorVal { shape: dims, dtype: t.dtype, backing: t.backing }))
            }
        }
    }

    /// Immediate extents, or a rank-1 i64 shape tensor read at runtime.
    fn shape_dims(&mut self, shape: &ShapeArg, env: &mut Env) -> Result<Vec<usize>, EvalError> {
        match shape {
            ShapeArg::Imm(dims) => Ok(dims.iter().map(|&d| d as usize).collect()),
            ShapeArg::Ref(e) => {
                let lit = self.eval(e, env)?.as_tensor()?.to_literal()?;
                let ScalarData::I64(v) = &lit.data else {
                    return Err(EvalError::Other("shape tensor is not i64".into()));
                };
                if lit.shape.len() != 1 {
                    return Err(EvalError::Other("shape tensor is not rank 1".into()));
                }
                let mut dims = Vec::with_capacity(v.len());
                for &d in v {
                    if d < 1 {
                        return Err(EvalError::Other(format!("shape tensor holds extent {d}")));
                    }
                    dims.push(d as usize);
                }
                Ok(dims)
            }
        }
    }

    fn eval_call(
        &mut self,
        op: &str,
        args: &[Expr],
        attrs: &Attrs,
        env: &mut Env,
    ) -> Result<Value, EvalError> {
        if let Some(f) = self.m.functions.get(op) {
            let argv: Vec<Value> =
                args.iter().map(|a| self.eval(a, env)).collect::<Result<_, _>>()?;
            let f = f.clone();
            return self.call_fn(&f, argv);
        }
        if let Some(def) = self.m.composites.get(op) {
            let ins = self.tensor_args(args, env)?;
            let lits: Vec<TensorLiteral> =
                ins.iter().map(|t| t.to_literal()).collect::<Result<_, _>>()?;
            let def = def.clone();
            return Ok(Value::from_literal(ops::composite_ref_eval(&def, &lits)?));
        }
        if ops::is_builtin(op) {
            let ins = self.tensor_args(args, env)?;
            let lits: Vec<TensorLiteral> =
                ins.iter().map(|t| t.to_literal()).collect::<Result<_, _>>()?;
            return Ok(Value::from_literal(ops::ref_eval(op, &lits, attrs)?));
        }
        Err(EvalError::UnknownOp(op.to_string()))
    }

    /// Runtime shape computation. Arguments whose shapes were fully static
    /// are not passed at runtime; their shapes ride along as `static{i}`
    /// attributes and are spliced back into position here.
    fn eval_shape_func(
        &mut self,
        op: &str,
        inputs: &[Expr],
        outputs: &[Expr],
        attrs: &Attrs,
        env: &mut Env,
    ) -> Result<Value, EvalError> {
        let mode = match ops::lookup(op) {
            Some(def) => def.mode,
            None if self.m.composites.contains_key(op) => ShapeMode::DataIndependent,
            None => return Err(EvalError::UnknownOp(op.to_string())),
        };
        let ins = self.tensor_args(inputs, env)?;
        let in_lits: Vec<TensorLiteral> =
            ins.iter().map(|t| t.to_literal()).collect::<Result<_, _>>()?;

        let mut static_at: Vec<Option<Vec<usize>>> = Vec::new();
        for (k, v) in attrs {
            let Some(rest) = k.strip_prefix("static") else { continue };
            let Ok(i) = rest.parse::<usize>() else { continue };
            let AttrValue::Shape(dims) = v else {
                return Err(EvalError::Other(format!("{k} is not a shape attribute")));
            };
            if static_at.len() <= i {
                static_at.resize(i + 1, None);
            }
            static_at[i] = Some(dims.iter().map(|&d| d as usize).collect());
        }
        let n_static = static_at.iter().flatten().count();
        let total = in_lits.len() + n_static;
        if static_at.len() > total {
            return Err(EvalError::ArityMismatch(op.to_string()));
        }
        static_at.resize(total, None);

        // Data-independent arguments arrive as rank-1 i64 shape tensors;
        // data-dependent ones arrive as the values themselves.
        let mut decoded: Vec<Vec<usize>> = Vec::new();
        if mode != ShapeMode::DataDependent {
            for lit in &in_lits {
                let ScalarData::I64(v) = &lit.data else {
                    return Err(EvalError::Other(format!("`{op}` shape input is not i64")));
                };
                if lit.shape.len() != 1 {
                    return Err(EvalError::Other(format!("`{op}` shape input is not rank 1")));
                }
                decoded.push(v.iter().map(|&d| d.max(0) as usize).collect());
            }
        }
        let mut next = 0usize;
        let mut positional: Vec<ShapeInput<'_>> = Vec::with_capacity(total);
        for slot in static_at.iter().take(total) {
            match slot {
                Some(dims) => positional.push(ShapeInput::Shape(dims)),
                None => {
                    if next >= in_lits.len() {
                        return Err(EvalError::ArityMismatch(op.to_string()));
                    }
                    if mode == ShapeMode::DataDependent {
                        positional.push(ShapeInput::Value(&in_lits[next]));
                    } else {
                        positional.push(ShapeInput::Shape(&decoded[next]));
                    }
                    next += 1;
                }
            }
        }
        if next != in_lits.len() {
            return Err(EvalError::ArityMismatch(op.to_string()));
        }

        let shapes: Vec<Vec<usize>> = if let Some(def) = self.m.composites.get(op) {
            let shape_ins: Vec<Vec<usize>> =
                positional.iter().map(|s| match s {
                    ShapeInput::Shape(d) => d.to_vec(),
                    ShapeInput::Value(v) => v.shape.clone(),
                }).collect();
            vec![ops::composite_shape_fn(def, &shape_ins)?]
        } else {
            ops::shape_fn(op, &positional, attrs)?
        };

        let outs = self.tensor_args(outputs, env)?;
        if outs.len() != shapes.len() {
            return Err(EvalError::ArityMismatch(op.to_string()));
        }
        for (dst, dims) in outs.iter().zip(&shapes) {
            if dims.is_empty() {
                return Err(EvalError::Other(format!("`{op}` produced a rank-0 shape")));
            }
            let lit = TensorLiteral::vector_i64(dims.iter().map(|&d| d as i64).collect());
            dst.write(&lit)?;
        }
        Ok(Value::unit())
    }
}

/// Deep recursion and long statement chains need more stack than a test
/// thread's default; evaluation runs on its own roomy thread. Storage and
/// closure values never cross the boundary, only the materialized result.
fn on_eval_stack<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    std::thread::scope(|s| {
        std::thread::Builder::new()
            .stack_size(64 << 20)
            .spawn_scoped(s, f)
            .expect("spawn evaluator thread")
            .join()
            .unwrap_or_else(|p| std::panic::resume_unwind(p))
    })
}

/// Evaluates `main` on tensor arguments and materializes the result.
pub fn eval_ref(m: &Module, args: &[TensorLiteral]) -> Result<PureValue, EvalError> {
    on_eval_stack(|| {
        let mut ev = Evaluator::new(m);
        let vals = args.iter().map(|l| Value::from_literal(l.clone())).collect();
        let out = ev.eval_main(vals)?;
        to_pure(&out)
    })
}

/// Like [`eval_ref`] but with byte poisoning on `kill` and allocation and
/// copy counters, for validating planner output.
pub fn eval_ref_instrumented(
    m: &Module,
    args: &[TensorLiteral],
) -> Result<(PureValue, EvalStats), EvalError> {
    on_eval_stack(|| {
        let mut ev = Evaluator::instrumented(m);
        let vals = args.iter().map(|l| Value::from_literal(l.clone())).collect();
        let out = ev.eval_main(vals)?;
        let pure = to_pure(&out)?;
        Ok((pure, ev.stats))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_module;

    fn f32s(v: Vec<f32>) -> TensorLiteral {
        TensorLiteral::vector_f32(v)
    }

    #[test]
    fn pure_stage_matches_op_reference() {
        let m = parse_module(
            "fn main(a: Tensor<(2, 3), f32>, b: Tensor<(3), f32>) -> Tensor<(2, 3), f32> {\n\
             let s = add(a, b);\n\
             multiply(s, s)\n\
             }",
        )
        .unwrap();
        let a = TensorLiteral::new(vec![2, 3], ScalarData::F32(vec![1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let b = f32s(vec![10., 20., 30.]);
        let got = eval_ref(&m, &[a.clone(), b.clone()]).unwrap();
        let s = ops::ref_eval("add", &[a, b], &Attrs::new()).unwrap();
        let want = ops::ref_eval("multiply", &[s.clone(), s], &Attrs::new()).unwrap();
        assert!(pure_close(&got, &PureValue::Tensor(want), 0.0));
    }

    #[test]
    fn explicit_forms_write_through_storage() {
        let m = parse_module(
            "// stage: memplanned\n\
             fn main(t1: Tensor<(10), f32>, t2: Tensor<(10), f32>) -> Tensor<(10), f32> {\n\
             let buf1 = alloc_storage(40,64,cpu);\n\
             let out1 = alloc_tensor(buf1,0,(10),f32);\n\
             invoke_mut(add, (t1, t2), (out1));\n\
             out1\n\
             }",
        )
        .unwrap();
        let t1 = f32s((0..10).map(|i| i as f32).collect());
        let t2 = f32s((0..10).map(|i| (10 * i) as f32).collect());
        let got = eval_ref(&m, &[t1, t2]).unwrap();
        let want = f32s((0..10).map(|i| (11 * i) as f32).collect());
        assert_eq!(got, PureValue::Tensor(want));
    }

    #[test]
    fn recursion_closures_and_match() {
        let m = parse_module(
            "data Leaf(Tensor<(2), f32>);\n\
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
             }",
        )
        .unwrap();
        let x = f32s(vec![1.0, 10.0]);
        let got = eval_ref(&m, &[x]).unwrap();
        assert_eq!(got, PureValue::Tensor(f32s(vec![4.0, 40.0])));
    }

    #[test]
    fn if_selects_on_scalar_condition() {
        let m = parse_module(
            "fn main(a: Tensor<(), i64>, b: Tensor<(), i64>) -> Tensor<(?), i64> {\n\
             if (less(a, b)) {\n\
             arange(0, 3, 1)\n\
             } else {\n\
             arange(0, 5, 1)\n\
             }\n\
             }",
        )
        .unwrap();
        let lo = TensorLiteral::scalar_i64(1);
        let hi = TensorLiteral::scalar_i64(2);
        let got = eval_ref(&m, &[lo.clone(), hi.clone()]).unwrap();
        assert_eq!(got, PureValue::Tensor(TensorLiteral::vector_i64(vec![0, 1, 2])));
        let got = eval_ref(&m, &[hi, lo]).unwrap();
        assert_eq!(got, PureValue::Tensor(TensorLiteral::vector_i64(vec![0, 1, 2, 3, 4])));
    }

    #[test]
    fn annotations_are_checked_at_runtime() {
        let m = parse_module(
            "fn main(n: Tensor<(), i64>) -> Tensor<(10), i64> {\n\
             let r: Tensor<(10), i64> = arange(0, n, 1);\n\
             r\n\
             }",
        )
        .unwrap();
        assert!(eval_ref(&m, &[TensorLiteral::scalar_i64(10)]).is_ok());
        let err = eval_ref(&m, &[TensorLiteral::scalar_i64(7)]).unwrap_err();
        assert!(matches!(err, EvalError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn kill_poisons_only_under_instrumentation() {
        let src = "// stage: memplanned\n\
                   fn main(t: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
                   let buf = alloc_storage(16,64,cpu);\n\
                   let out = alloc_tensor(buf,0,(4),f32);\n\
                   invoke_mut(add, (t, t), (out));\n\
                   kill(out);\n\
                   out\n\
                   }";
        let m = parse_module(src).unwrap();
        let t = f32s(vec![1., 2., 3., 4.]);
        assert!(eval_ref(&m, &[t.clone()]).is_ok());
        let err = eval_ref_instrumented(&m, &[t]).unwrap_err();
        assert!(matches!(err, EvalError::PoisonedRead { .. }), "{err}");
    }

    #[test]
    fn rewriting_killed_bytes_unpoisons_them() {
        let src = "// stage: memplanned\n\
                   fn main(t: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
                   let buf = alloc_storage(16,64,cpu);\n\
                   let a = alloc_tensor(buf,0,(4),f32);\n\
                   invoke_mut(add, (t, t), (a));\n\
                   kill(a);\n\
                   let b = alloc_tensor(buf,0,(4),f32);\n\
                   invoke_mut(multiply, (t, t), (b));\n\
                   b\n\
                   }";
        let m = parse_module(src).unwrap();
        let t = f32s(vec![1., 2., 3., 4.]);
        let (got, stats) = eval_ref_instrumented(&m, &[t]).unwrap();
        assert_eq!(got, PureValue::Tensor(f32s(vec![1., 4., 9., 16.])));
        assert_eq!(stats.allocs, 1);
        assert_eq!(stats.alloc_bytes, 16);
    }

    #[test]
    fn dynamic_shape_func_drives_allocation() {
        // A manifested dynamic concat: the output extent is computed at
        // runtime, sized in bytes, and the kernel writes into a view of a
        // dynamically sized block. The second argument is fully static, so
        // it rides along as an attribute instead of a shape tensor.
        let src = "// stage: memplanned\n\
                   fn main(x: Tensor<(?), f32>, y: Tensor<(3), f32>) -> Tensor<(?), f32> {\n\
                   let sx = shape_of(x);\n\
                   let shp = alloc_storage(8,64,cpu);\n\
                   let so = alloc_tensor(shp,0,(1),i64);\n\
                   invoke_shape_func(concat, (sx), (so), axis=0, static1=(3));\n\
                   let nb = bytes(so, dtype=f32);\n\
                   let buf = alloc_storage(nb,64,cpu);\n\
                   let out = alloc_tensor(buf,0,so,f32);\n\
                   invoke_mut(concat, (x, y), (out), axis=0);\n\
                   out\n\
                   }";
        let m = parse_module(src).unwrap();
        let x = f32s(vec![1., 2.]);
        let y = f32s(vec![10., 20., 30.]);
        let (got, stats) = eval_ref_instrumented(&m, &[x, y]).unwrap();
        assert_eq!(got, PureValue::Tensor(f32s(vec![1., 2., 10., 20., 30.])));
        assert_eq!(stats.alloc_bytes, 8 + 20);
        assert_eq!(stats.invokes, 1);
    }

    #[test]
    fn device_mismatch_is_rejected_and_copies_fix_it() {
        let bad = parse_module(
            "// stage: placed\n\
             fn main(t: Tensor<(2), f32>) -> Tensor<(2), f32> {\n\
             let b1 = alloc_storage(8,64,cpu);\n\
             let x = alloc_tensor(b1,0,(2),f32);\n\
             invoke_mut(add, (t, t), (x));\n\
             let b2 = alloc_storage(8,64,dev0);\n\
             let y = alloc_tensor(b2,0,(2),f32);\n\
             invoke_mut(add, (x, x), (y));\n\
             y\n\
             }",
        )
        .unwrap();
        let t = f32s(vec![1., 2.]);
        let err = eval_ref(&bad, &[t.clone()]).unwrap_err();
        assert!(err.to_string().contains("mixes operands"), "{err}");

        let good = parse_module(
            "// stage: placed\n\
             fn main(t: Tensor<(2), f32>) -> Tensor<(2), f32> {\n\
             let b1 = alloc_storage(8,64,cpu);\n\
             let x = alloc_tensor(b1,0,(2),f32);\n\
             invoke_mut(add, (t, t), (x));\n\
             let xd = device_copy(x, cpu, dev0);\n\
             let b2 = alloc_storage(8,64,dev0);\n\
             let y = alloc_tensor(b2,0,(2),f32);\n\
             invoke_mut(add, (xd, xd), (y));\n\
             y\n\
             }",
        )
        .unwrap();
        let mut ev = Evaluator::new(&good);
        let out = ev.eval_main(vec![Value::from_literal(t)]).unwrap();
        assert_eq!(ev.stats.copies, 1);
        assert_eq!(ev.stats.copy_bytes, 8);
        assert_eq!(to_pure(&out).unwrap(), PureValue::Tensor(f32s(vec![4., 8.])));
    }

    #[test]
    fn unbounded_recursion_is_cut_off() {
        let m = parse_module(
            "fn spin(x: Tensor<(), i64>) -> Tensor<(), i64> {\n\
             spin(x)\n\
             }\n\
             fn main(x: Tensor<(), i64>) -> Tensor<(), i64> {\n\
             spin(x)\n\
             }",
        )
        .unwrap();
        let err = eval_ref(&m, &[TensorLiteral::scalar_i64(0)]).unwrap_err();
        assert!(err.to_string().contains("recursion"), "{err}");
    }

    #[test]
    fn reshape_and_proj_views() {
        let m = parse_module(
            "// stage: memplanned\n\
             fn main(t: Tensor<(6), f32>) -> (Tensor<(2, 3), f32>, Tensor<(), f32>) {\n\
             let buf = alloc_storage(24,64,cpu);\n\
             let a = alloc_tensor(buf,0,(6),f32);\n\
             invoke_mut(add, (t, t), (a));\n\
             let r = reshape_tensor(a, (2,3));\n\
             let p = (r, take(t, 0, axis=0));\n\
             p\n\
             }",
        )
        .unwrap();
        let t = f32s(vec![0., 1., 2., 3., 4., 5.]);
        let got = eval_ref(&m, &[t]).unwrap();
        let want = PureValue::Tuple(vec![
            PureValue::Tensor(
                TensorLiteral::new(vec![2, 3], ScalarData::F32(vec![0., 2., 4., 6., 8., 10.]))
                    .unwrap(),
            ),
            PureValue::Tensor(TensorLiteral::scalar_f32(0.)),
        ]);
        assert_eq!(got, want);
    }
}
