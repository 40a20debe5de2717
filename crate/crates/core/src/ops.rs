//! Operator registry: names, shape-function modes, fusion class, reference
//! semantics, and static type relations.
//!
//! Reference evaluation here is deliberately naive (plain loops, no tiling)
//! so generated kernels can be checked against it. Floating-point reductions
//! use the same accumulation order as the kernels, which makes differential
//! comparisons exact in practice.

use crate::error::{EvalError, TypeError};
use crate::ir::expr::{attr_dtype, attr_int, attr_shape, Attrs, CompositeArg, CompositeDef, ScalarData, TensorLiteral};
use crate::ir::types::{DType, Dim, TensorType, Type};
use crate::typesys::broadcast_rel;

/// When a shape function can run and what it needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeMode {
    /// Output shape follows from input shapes alone.
    DataIndependent,
    /// Output shape needs input values (so those values must be on the host).
    DataDependent,
    /// Input shapes give only an upper bound; the kernel reports the true
    /// shape alongside its padded output.
    UpperBound,
}

#[derive(Debug, Clone, Copy)]
pub struct OpDef {
    pub name: &'static str,
    /// Elementwise ops broadcast and may fuse with each other.
    pub elementwise: bool,
    pub mode: ShapeMode,
    /// Whether a loop-nest kernel is generated; others run as native
    /// primitives in the VM.
    pub lowerable: bool,
}

pub const OPS: &[OpDef] = &[
    OpDef { name: "add", elementwise: true, mode: ShapeMode::DataIndependent, lowerable: true },
    OpDef { name: "multiply", elementwise: true, mode: ShapeMode::DataIndependent, lowerable: true },
    OpDef { name: "less", elementwise: true, mode: ShapeMode::DataIndependent, lowerable: true },
    OpDef { name: "dense", elementwise: false, mode: ShapeMode::DataIndependent, lowerable: true },
    OpDef { name: "concat", elementwise: false, mode: ShapeMode::DataIndependent, lowerable: true },
    OpDef { name: "take", elementwise: false, mode: ShapeMode::DataIndependent, lowerable: false },
    OpDef { name: "reshape", elementwise: false, mode: ShapeMode::DataIndependent, lowerable: false },
    OpDef { name: "arange", elementwise: false, mode: ShapeMode::DataDependent, lowerable: true },
    OpDef { name: "unique", elementwise: false, mode: ShapeMode::UpperBound, lowerable: false },
    OpDef { name: "bytes", elementwise: false, mode: ShapeMode::DataIndependent, lowerable: false },
];

pub fn registry() -> &'static [OpDef] {
    OPS
}

pub fn lookup(op: &str) -> Option<&'static OpDef> {
    OPS.iter().find(|o| o.name == op)
}

pub fn is_builtin(op: &str) -> bool {
    lookup(op).is_some()
}

/// Number of output tensors an `invoke_mut` of this op writes.
pub fn output_count(op: &str) -> usize {
    match op {
        "unique" => 2,
        _ => 1,
    }
}

fn eerr(op: &str, msg: impl Into<String>) -> EvalError {
    EvalError::ShapeMismatch { op: op.to_string(), msg: msg.into() }
}

fn terr(msg: impl Into<String>) -> TypeError {
    TypeError::new(msg)
}

// ---------------------------------------------------------------------------
// Broadcasting helpers shared by reference eval and shape functions.
// ---------------------------------------------------------------------------

pub fn broadcast_shapes(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, EvalError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(eerr(op, format!("cannot broadcast {da} vs {db} on axis {i}")));
        };
    }
    Ok(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat index into an input broadcast against `out_idx` (right-aligned;
/// extent-1 axes read index 0).
fn bcast_flat(out_idx: &[usize], in_shape: &[usize], in_strides: &[usize]) -> usize {
    let off = out_idx.len() - in_shape.len();
    let mut flat = 0;
    for (i, &d) in in_shape.iter().enumerate() {
        let idx = if d == 1 { 0 } else { out_idx[off + i] };
        flat += idx * in_strides[i];
    }
    flat
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Reference evaluation.
// ---------------------------------------------------------------------------

fn binary_ew(op: &str, a: &TensorLiteral, b: &TensorLiteral) -> Result<TensorLiteral, EvalError> {
    if a.dtype() != b.dtype() {
        return Err(eerr(op, format!("dtype mismatch {} vs {}", a.dtype(), b.dtype())));
    }
    let out_shape = broadcast_shapes(op, &a.shape, &b.shape)?;
    let sa = strides(&a.shape);
    let sb = strides(&b.shape);
    let n: usize = out_shape.iter().product();
    match (&a.data, &b.data) {
        (ScalarData::F32(da), ScalarData::F32(db)) => {
            if op == "less" {
                let mut out = Vec::with_capacity(n);
                for_each_index(&out_shape, |idx| {
                    let x = da[bcast_flat(idx, &a.shape, &sa)];
                    let y = db[bcast_flat(idx, &b.shape, &sb)];
                    out.push((x < y) as i64);
                });
                Ok(TensorLiteral { shape: out_shape, data: ScalarData::I64(out) })
            } else {
                let mut out = Vec::with_capacity(n);
                for_each_index(&out_shape, |idx| {
                    let x = da[bcast_flat(idx, &a.shape, &sa)];
                    let y = db[bcast_flat(idx, &b.shape, &sb)];
                    out.push(if op == "add" { x + y } else { x * y });
                });
                Ok(TensorLiteral { shape: out_shape, data: ScalarData::F32(out) })
            }
        }
        (ScalarData::I64(da), ScalarData::I64(db)) => {
            let mut out = Vec::with_capacity(n);
            for_each_index(&out_shape, |idx| {
                let x = da[bcast_flat(idx, &a.shape, &sa)];
                let y = db[bcast_flat(idx, &b.shape, &sb)];
                out.push(match op {
                    "add" => x.wrapping_add(y),
                    "multiply" => x.wrapping_mul(y),
                    _ => (x < y) as i64,
                });
            });
            Ok(TensorLiteral { shape: out_shape, data: ScalarData::I64(out) })
        }
        _ => Err(eerr(op, "dtype mismatch")),
    }
}

fn ref_dense(a: &TensorLiteral, b: &TensorLiteral) -> Result<TensorLiteral, EvalError> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(eerr("dense", "expects rank-2 inputs"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(eerr("dense", format!("contraction mismatch {k} vs {k2}")));
    }
    match (&a.data, &b.data) {
        (ScalarData::F32(da), ScalarData::F32(db)) => {
            let mut out = vec![0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0f32;
                    for kk in 0..k {
                        acc += da[i * k + kk] * db[kk * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
            Ok(TensorLiteral { shape: vec![m, n], data: ScalarData::F32(out) })
        }
        (ScalarData::I64(da), ScalarData::I64(db)) => {
            let mut out = vec![0i64; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0i64;
                    for kk in 0..k {
                        acc = acc.wrapping_add(da[i * k + kk].wrapping_mul(db[kk * n + j]));
                    }
                    out[i * n + j] = acc;
                }
            }
            Ok(TensorLiteral { shape: vec![m, n], data: ScalarData::I64(out) })
        }
        _ => Err(eerr("dense", "dtype mismatch")),
    }
}

fn ref_concat(inputs: &[TensorLiteral], attrs: &Attrs) -> Result<TensorLiteral, EvalError> {
    if inputs.is_empty() {
        return Err(eerr("concat", "needs at least one input"));
    }
    let axis = attr_int(attrs, "axis").unwrap_or(0) as usize;
    let rank = inputs[0].shape.len();
    if axis >= rank {
        return Err(eerr("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let dtype = inputs[0].dtype();
    let mut out_shape = inputs[0].shape.clone();
    out_shape[axis] = 0;
    for t in inputs {
        if t.shape.len() != rank || t.dtype() != dtype {
            return Err(eerr("concat", "inputs must agree in rank and dtype"));
        }
        for (i, (&d, &d0)) in t.shape.iter().zip(inputs[0].shape.iter()).enumerate() {
            if i != axis && d != d0 {
                return Err(eerr("concat", format!("axis {i} extent {d} vs {d0}")));
            }
        }
        out_shape[axis] += t.shape[axis];
    }
    // Row-major copy: iterate over blocks before the axis, then per input the
    // contiguous run covering the axis and everything after it.
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let out_elems: usize = out_shape.iter().product();
    match dtype {
        DType::F32 => {
            let mut out = vec![0f32; out_elems];
            let mut base = 0usize;
            for t in inputs {
                let run = t.shape[axis] * inner;
                let data = match &t.data {
                    ScalarData::F32(d) => d,
                    _ => unreachable!(),
                };
                for o in 0..outer {
                    let dst = o * out_shape[axis] * inner + base;
                    out[dst..dst + run].copy_from_slice(&data[o * run..(o + 1) * run]);
                }
                base += run;
            }
            Ok(TensorLiteral { shape: out_shape, data: ScalarData::F32(out) })
        }
        DType::I64 => {
            let mut out = vec![0i64; out_elems];
            let mut base = 0usize;
            for t in inputs {
                let run = t.shape[axis] * inner;
                let data = match &t.data {
                    ScalarData::I64(d) => d,
                    _ => unreachable!(),
                };
                for o in 0..outer {
                    let dst = o * out_shape[axis] * inner + base;
                    out[dst..dst + run].copy_from_slice(&data[o * run..(o + 1) * run]);
                }
                base += run;
            }
            Ok(TensorLiteral { shape: out_shape, data: ScalarData::I64(out) })
        }
    }
}

fn ref_take(data: &TensorLiteral, indices: &TensorLiteral, attrs: &Attrs) -> Result<TensorLiteral, EvalError> {
    let axis = attr_int(attrs, "axis").unwrap_or(0) as usize;
    if axis >= data.shape.len() {
        return Err(eerr("take", format!("axis {axis} out of range")));
    }
    if indices.dtype() != DType::I64 || indices.shape.len() > 1 {
        return Err(eerr("take", "indices must be an i64 scalar or vector"));
    }
    let idxs = match &indices.data {
        ScalarData::I64(v) => v.clone(),
        _ => unreachable!(),
    };
    let extent = data.shape[axis];
    for &i in &idxs {
        if i < 0 || i as usize >= extent {
            return Err(EvalError::IndexOutOfRange { index: i, extent });
        }
    }
    let mut out_shape = Vec::new();
    out_shape.extend_from_slice(&data.shape[..axis]);
    out_shape.extend_from_slice(&indices.shape);
    out_shape.extend_from_slice(&data.shape[axis + 1..]);
    if out_shape.iter().product::<usize>() == 0 {
        return Err(eerr("take", "result would be empty"));
    }
    let outer: usize = data.shape[..axis].iter().product();
    let inner: usize = data.shape[axis + 1..].iter().product();
    macro_rules! gather {
        ($d:expr, $zero:expr) => {{
            let mut out = vec![$zero; outer * idxs.len() * inner];
            for o in 0..outer {
                for (pos, &i) in idxs.iter().enumerate() {
                    let src = (o * extent + i as usize) * inner;
                    let dst = (o * idxs.len() + pos) * inner;
                    out[dst..dst + inner].copy_from_slice(&$d[src..src + inner]);
                }
            }
            out
        }};
    }
    Ok(match &data.data {
        ScalarData::F32(d) => TensorLiteral { shape: out_shape, data: ScalarData::F32(gather!(d, 0f32)) },
        ScalarData::I64(d) => TensorLiteral { shape: out_shape, data: ScalarData::I64(gather!(d, 0i64)) },
    })
}

/// Element count of an arange; shared with its shape function so the shape
/// computed at runtime always matches the values written.
pub fn arange_len(start: &TensorLiteral, stop: &TensorLiteral, step: &TensorLiteral) -> Result<usize, EvalError> {
    let n = match (&start.data, &stop.data, &step.data) {
        (ScalarData::I64(a), ScalarData::I64(b), ScalarData::I64(s)) => {
            let (a, b, s) = (a[0], b[0], s[0]);
            if s == 0 {
                return Err(EvalError::ZeroStep);
            }
            let span = b - a;
            if span == 0 || (span > 0) != (s > 0) {
                0
            } else {
                ((span.abs() + s.abs() - 1) / s.abs()) as usize
            }
        }
        (ScalarData::F32(a), ScalarData::F32(b), ScalarData::F32(s)) => {
            let (a, b, s) = (a[0], b[0], s[0]);
            if s == 0.0 {
                return Err(EvalError::ZeroStep);
            }
            let n = ((b - a) / s).ceil();
            if n <= 0.0 {
                0
            } else {
                n as usize
            }
        }
        _ => return Err(eerr("arange", "start/stop/step must share a dtype")),
    };
    if n == 0 {
        return Err(eerr("arange", "empty range"));
    }
    if n > 1 << 24 {
        return Err(eerr("arange", "range too large"));
    }
    Ok(n)
}

fn ref_arange(args: &[TensorLiteral]) -> Result<TensorLiteral, EvalError> {
    if args.iter().any(|a| !a.shape.is_empty()) {
        return Err(eerr("arange", "expects scalar start/stop/step"));
    }
    let n = arange_len(&args[0], &args[1], &args[2])?;
    match (&args[0].data, &args[2].data) {
        (ScalarData::I64(a), ScalarData::I64(s)) => {
            let out = (0..n).map(|i| a[0].wrapping_add(s[0].wrapping_mul(i as i64))).collect();
            Ok(TensorLiteral { shape: vec![n], data: ScalarData::I64(out) })
        }
        (ScalarData::F32(a), ScalarData::F32(s)) => {
            let out = (0..n).map(|i| a[0] + s[0] * i as f32).collect();
            Ok(TensorLiteral { shape: vec![n], data: ScalarData::F32(out) })
        }
        _ => Err(eerr("arange", "dtype mismatch")),
    }
}

/// Distinct elements in first-occurrence order.
fn unique_values(t: &TensorLiteral) -> Result<TensorLiteral, EvalError> {
    if t.shape.len() != 1 {
        return Err(eerr("unique", "expects a rank-1 input"));
    }
    match &t.data {
        ScalarData::I64(d) => {
            let mut out: Vec<i64> = Vec::new();
            for &v in d {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
            Ok(TensorLiteral { shape: vec![out.len()], data: ScalarData::I64(out) })
        }
        ScalarData::F32(d) => {
            let mut out: Vec<f32> = Vec::new();
            for &v in d {
                if !out.iter().any(|&x| x.to_bits() == v.to_bits()) {
                    out.push(v);
                }
            }
            Ok(TensorLiteral { shape: vec![out.len()], data: ScalarData::F32(out) })
        }
    }
}

fn ref_reshape(t: &TensorLiteral, attrs: &Attrs) -> Result<TensorLiteral, EvalError> {
    let shape = attr_shape(attrs, "shape")
        .ok_or_else(|| eerr("reshape", "missing `shape` attribute"))?
        .iter()
        .map(|&d| d as usize)
        .collect::<Vec<_>>();
    let new_elems: usize = shape.iter().product();
    if new_elems != t.num_elements() {
        return Err(eerr(
            "reshape",
            format!("cannot reshape {} elements into {:?}", t.num_elements(), shape),
        ));
    }
    Ok(TensorLiteral { shape, data: t.data.clone() })
}

fn ref_bytes(t: &TensorLiteral, attrs: &Attrs) -> Result<TensorLiteral, EvalError> {
    let dtype = attr_dtype(attrs, "dtype").ok_or_else(|| eerr("bytes", "missing `dtype`"))?;
    let dims = match &t.data {
        ScalarData::I64(d) => d.clone(),
        _ => return Err(eerr("bytes", "expects an i64 shape tensor")),
    };
    let mut n: i64 = 1;
    for d in dims {
        n = n.wrapping_mul(d);
    }
    Ok(TensorLiteral::scalar_i64(n * dtype.size_bytes() as i64))
}

/// Pure call semantics of a builtin: one output tensor with its true shape.
pub fn ref_eval(op: &str, inputs: &[TensorLiteral], attrs: &Attrs) -> Result<TensorLiteral, EvalError> {
    let expect = |n: usize| {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(EvalError::ArityMismatch(op.to_string()))
        }
    };
    match op {
        "add" | "multiply" | "less" => {
            expect(2)?;
            binary_ew(op, &inputs[0], &inputs[1])
        }
        "dense" => {
            expect(2)?;
            ref_dense(&inputs[0], &inputs[1])
        }
        "concat" => ref_concat(inputs, attrs),
        "take" => {
            expect(2)?;
            ref_take(&inputs[0], &inputs[1], attrs)
        }
        "arange" => {
            expect(3)?;
            ref_arange(inputs)
        }
        "unique" => {
            expect(1)?;
            unique_values(&inputs[0])
        }
        "reshape" => {
            expect(1)?;
            ref_reshape(&inputs[0], attrs)
        }
        "bytes" => {
            expect(1)?;
            ref_bytes(&inputs[0], attrs)
        }
        _ => Err(EvalError::UnknownOp(op.to_string())),
    }
}

/// Destination-buffer semantics used by `invoke_mut`: results are produced
/// to match `out_shapes` exactly. Upper-bound ops write a zero-padded value
/// tensor plus the true shape.
pub fn ref_eval_mut(
    op: &str,
    inputs: &[TensorLiteral],
    attrs: &Attrs,
    out_shapes: &[Vec<usize>],
) -> Result<Vec<TensorLiteral>, EvalError> {
    if op == "unique" {
        if out_shapes.len() != 2 {
            return Err(EvalError::ArityMismatch("unique".into()));
        }
        let vals = unique_values(&inputs[0])?;
        let cap: usize = out_shapes[0].iter().product();
        if vals.num_elements() > cap {
            return Err(eerr("unique", format!("{} uniques exceed capacity {cap}", vals.num_elements())));
        }
        let padded = match vals.data {
            ScalarData::I64(mut d) => {
                d.resize(cap, 0);
                TensorLiteral { shape: out_shapes[0].clone(), data: ScalarData::I64(d) }
            }
            ScalarData::F32(mut d) => {
                d.resize(cap, 0.0);
                TensorLiteral { shape: out_shapes[0].clone(), data: ScalarData::F32(d) }
            }
        };
        let true_shape = TensorLiteral::vector_i64(vec![vals.shape[0] as i64]);
        return Ok(vec![padded, true_shape]);
    }
    let out = ref_eval(op, inputs, attrs)?;
    if out_shapes.len() != 1 || out.shape != out_shapes[0] {
        return Err(eerr(
            op,
            format!("result shape {:?} does not match destination {:?}", out.shape, out_shapes),
        ));
    }
    Ok(vec![out])
}

// ---------------------------------------------------------------------------
// Shape functions: runtime shape computation plus the checks the static
// relation deferred on `?` dimensions.
// ---------------------------------------------------------------------------

/// Runtime shape-function input: a shape for data-independent arguments, the
/// value itself for data-dependent ones.
#[derive(Debug, Clone)]
pub enum ShapeInput<'a> {
    Shape(&'a [usize]),
    Value(&'a TensorLiteral),
}

impl ShapeInput<'_> {
    fn shape(&self) -> &[usize] {
        match self {
            ShapeInput::Shape(s) => s,
            ShapeInput::Value(v) => &v.shape,
        }
    }
}

/// Computes output shapes from runtime inputs, raising the deferred runtime
/// checks. For `UpperBound` ops the result is the padded upper bound.
pub fn shape_fn(op: &str, inputs: &[ShapeInput<'_>], attrs: &Attrs) -> Result<Vec<Vec<usize>>, EvalError> {
    match op {
        "add" | "multiply" | "less" => {
            let out = broadcast_shapes(op, inputs[0].shape(), inputs[1].shape())?;
            Ok(vec![out])
        }
        "dense" => {
            let (a, b) = (inputs[0].shape(), inputs[1].shape());
            if a.len() != 2 || b.len() != 2 {
                return Err(eerr("dense", "expects rank-2 inputs"));
            }
            if a[1] != b[0] {
                return Err(eerr("dense", format!("contraction mismatch {} vs {}", a[1], b[0])));
            }
            Ok(vec![vec![a[0], b[1]]])
        }
        "concat" => {
            let axis = attr_int(attrs, "axis").unwrap_or(0) as usize;
            let rank = inputs[0].shape().len();
            if axis >= rank {
                return Err(eerr("concat", format!("axis {axis} out of range for rank {rank}")));
            }
            let mut out = inputs[0].shape().to_vec();
            for t in &inputs[1..] {
                let s = t.shape();
                if s.len() != rank {
                    return Err(eerr("concat", "rank mismatch"));
                }
                for i in 0..rank {
                    if i != axis && s[i] != out[i] {
                        return Err(eerr("concat", format!("axis {i} extent {} vs {}", s[i], out[i])));
                    }
                }
                out[axis] += s[axis];
            }
            Ok(vec![out])
        }
        "take" => {
            let axis = attr_int(attrs, "axis").unwrap_or(0) as usize;
            let data = inputs[0].shape();
            if axis >= data.len() {
                return Err(eerr("take", format!("axis {axis} out of range")));
            }
            let mut out = Vec::new();
            out.extend_from_slice(&data[..axis]);
            out.extend_from_slice(inputs[1].shape());
            out.extend_from_slice(&data[axis + 1..]);
            Ok(vec![out])
        }
        "arange" => {
            let vals: Vec<&TensorLiteral> = inputs
                .iter()
                .map(|i| match i {
                    ShapeInput::Value(v) => Ok(*v),
                    ShapeInput::Shape(_) => Err(eerr("arange", "shape function needs values")),
                })
                .collect::<Result<_, _>>()?;
            let n = arange_len(vals[0], vals[1], vals[2])?;
            Ok(vec![vec![n]])
        }
        "unique" => {
            let s = inputs[0].shape();
            if s.len() != 1 {
                return Err(eerr("unique", "expects a rank-1 input"));
            }
            Ok(vec![s.to_vec()])
        }
        "reshape" => {
            let shape: Vec<usize> = attr_shape(attrs, "shape")
                .ok_or_else(|| eerr("reshape", "missing `shape` attribute"))?
                .iter()
                .map(|&d| d as usize)
                .collect();
            let in_elems: usize = inputs[0].shape().iter().product();
            let out_elems: usize = shape.iter().product();
            if in_elems != out_elems {
                return Err(eerr("reshape", format!("cannot reshape {in_elems} elements into {shape:?}")));
            }
            Ok(vec![shape])
        }
        "bytes" => Ok(vec![Vec::new()]),
        _ => Err(EvalError::UnknownOp(op.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Static type relations over possibly unknown dimensions.
// ---------------------------------------------------------------------------

fn want_tensor<'a>(op: &str, ts: &'a [Type], i: usize) -> Result<&'a TensorType, TypeError> {
    ts.get(i)
        .and_then(Type::tensor)
        .ok_or_else(|| terr(format!("`{op}` argument {i} must be a tensor")))
}

/// Broadcast two whole types, right-aligned.
pub fn broadcast_types(op: &str, a: &TensorType, b: &TensorType) -> Result<TensorType, TypeError> {
    if a.dtype != b.dtype {
        return Err(terr(format!("`{op}` dtype mismatch: {} vs {}", a.dtype, b.dtype)));
    }
    let rank = a.rank().max(b.rank());
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = if i < rank - a.rank() { Dim::Static(1) } else { a.dims[i - (rank - a.rank())] };
        let db = if i < rank - b.rank() { Dim::Static(1) } else { b.dims[i - (rank - b.rank())] };
        dims.push(broadcast_rel(da, db).map_err(|e| terr(format!("`{op}` axis {i}: {}", e.msg)))?);
    }
    Ok(TensorType { dims, dtype: a.dtype })
}

/// Static output type of a builtin call. Checks that are undecidable on `?`
/// dimensions are deferred to the shape function at runtime.
pub fn type_rel(op: &str, args: &[Type], attrs: &Attrs) -> Result<Type, TypeError> {
    let expect = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(terr(format!("`{op}` takes {n} arguments, got {}", args.len())))
        }
    };
    match op {
        "add" | "multiply" | "less" => {
            expect(2)?;
            let a = want_tensor(op, args, 0)?;
            let b = want_tensor(op, args, 1)?;
            let mut out = broadcast_types(op, a, b)?;
            if op == "less" {
                out.dtype = DType::I64;
            }
            Ok(Type::Tensor(out))
        }
        "dense" => {
            expect(2)?;
            let a = want_tensor(op, args, 0)?;
            let b = want_tensor(op, args, 1)?;
            if a.rank() != 2 || b.rank() != 2 {
                return Err(terr("`dense` expects rank-2 inputs"));
            }
            if a.dtype != b.dtype {
                return Err(terr("`dense` dtype mismatch"));
            }
            if let (Dim::Static(x), Dim::Static(y)) = (a.dims[1], b.dims[0]) {
                if x != y {
                    return Err(terr(format!("`dense` contraction mismatch {x} vs {y}")));
                }
            }
            Ok(Type::Tensor(TensorType { dims: vec![a.dims[0], b.dims[1]], dtype: a.dtype }))
        }
        "concat" => {
            if args.is_empty() {
                return Err(terr("`concat` needs at least one argument"));
            }
            let axis = attr_int(attrs, "axis").unwrap_or(0);
            let first = want_tensor(op, args, 0)?;
            let rank = first.rank();
            if axis < 0 || axis as usize >= rank {
                return Err(terr(format!("`concat` axis {axis} out of range for rank {rank}")));
            }
            let axis = axis as usize;
            let mut dims = first.dims.clone();
            let mut sum: Option<u64> = first.dims[axis].extent();
            for i in 1..args.len() {
                let t = want_tensor(op, args, i)?;
                if t.rank() != rank || t.dtype != first.dtype {
                    return Err(terr("`concat` inputs must agree in rank and dtype"));
                }
                for ax in 0..rank {
                    if ax == axis {
                        continue;
                    }
                    match (dims[ax], t.dims[ax]) {
                        (Dim::Static(x), Dim::Static(y)) if x != y => {
                            return Err(terr(format!("`concat` axis {ax} extent {x} vs {y}")));
                        }
                        (Dim::Any, d @ Dim::Static(_)) => dims[ax] = d,
                        _ => {}
                    }
                }
                sum = match (sum, t.dims[axis].extent()) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                };
            }
            dims[axis] = match sum {
                Some(s) => Dim::Static(s),
                None => Dim::Any,
            };
            Ok(Type::Tensor(TensorType { dims, dtype: first.dtype }))
        }
        "take" => {
            expect(2)?;
            let data = want_tensor(op, args, 0)?;
            let idx = want_tensor(op, args, 1)?;
            if idx.dtype != DType::I64 || idx.rank() > 1 {
                return Err(terr("`take` indices must be an i64 scalar or vector"));
            }
            let axis = attr_int(attrs, "axis").unwrap_or(0);
            if axis < 0 || axis as usize >= data.rank() {
                return Err(terr(format!("`take` axis {axis} out of range")));
            }
            let axis = axis as usize;
            let mut dims = Vec::new();
            dims.extend_from_slice(&data.dims[..axis]);
            dims.extend_from_slice(&idx.dims);
            dims.extend_from_slice(&data.dims[axis + 1..]);
            Ok(Type::Tensor(TensorType { dims, dtype: data.dtype }))
        }
        "arange" => {
            expect(3)?;
            let dt = want_tensor(op, args, 0)?.dtype;
            for i in 0..3 {
                let t = want_tensor(op, args, i)?;
                if t.rank() != 0 || t.dtype != dt {
                    return Err(terr("`arange` expects three scalars of one dtype"));
                }
            }
            Ok(Type::Tensor(TensorType { dims: vec![Dim::Any], dtype: dt }))
        }
        "unique" => {
            expect(1)?;
            let t = want_tensor(op, args, 0)?;
            if t.rank() != 1 {
                return Err(terr("`unique` expects a rank-1 input"));
            }
            Ok(Type::Tensor(TensorType { dims: vec![Dim::Any], dtype: t.dtype }))
        }
        "reshape" => {
            expect(1)?;
            let t = want_tensor(op, args, 0)?;
            let shape = attr_shape(attrs, "shape")
                .ok_or_else(|| terr("`reshape` needs a `shape` attribute"))?;
            let out = TensorType::new(shape.iter().map(|&d| Dim::Static(d)).collect(), t.dtype)
                .map_err(|e| terr(format!("`reshape`: {}", e.msg)))?;
            if let Some(n) = t.num_elements() {
                let m = out.num_elements().expect("static");
                if n != m {
                    return Err(terr(format!("`reshape` cannot turn {n} elements into {m}")));
                }
            }
            Ok(Type::Tensor(out))
        }
        "bytes" => {
            expect(1)?;
            let t = want_tensor(op, args, 0)?;
            if t.dtype != DType::I64 || t.rank() != 1 {
                return Err(terr("`bytes` expects an i64 shape tensor"));
            }
            attr_dtype(attrs, "dtype").ok_or_else(|| terr("`bytes` needs a `dtype` attribute"))?;
            Ok(Type::Tensor(TensorType::scalar(DType::I64)))
        }
        _ => Err(terr(format!("unknown operator `{op}`"))),
    }
}

// ---------------------------------------------------------------------------
// Composites: fused elementwise chains evaluated member by member.
// ---------------------------------------------------------------------------

fn composite_args<'a, T: Clone>(
    member: &CompositeMember,
    inputs: &'a [T],
    produced: &'a [T],
) -> Vec<T> {
    member
        .args
        .iter()
        .map(|a| match a {
            CompositeArg::Input(i) => inputs[*i].clone(),
            CompositeArg::Member(i) => produced[*i].clone(),
        })
        .collect()
}

use crate::ir::expr::CompositeMember;

pub fn composite_ref_eval(def: &CompositeDef, inputs: &[TensorLiteral]) -> Result<TensorLiteral, EvalError> {
    let mut produced: Vec<TensorLiteral> = Vec::with_capacity(def.members.len());
    for member in &def.members {
        let args = composite_args(member, inputs, &produced);
        produced.push(ref_eval(&member.op, &args, &member.attrs)?);
    }
    Ok(produced.pop().expect("composite has members"))
}

pub fn composite_type_rel(def: &CompositeDef, args: &[Type]) -> Result<Type, TypeError> {
    if args.len() != def.n_inputs {
        return Err(terr(format!("composite takes {} inputs, got {}", def.n_inputs, args.len())));
    }
    let mut produced: Vec<Type> = Vec::with_capacity(def.members.len());
    for member in &def.members {
        let margs = composite_args(member, args, &produced);
        produced.push(type_rel(&member.op, &margs, &member.attrs)?);
    }
    Ok(produced.pop().expect("composite has members"))
}

pub fn composite_shape_fn(def: &CompositeDef, inputs: &[Vec<usize>]) -> Result<Vec<usize>, EvalError> {
    let mut produced: Vec<Vec<usize>> = Vec::with_capacity(def.members.len());
    for member in &def.members {
        let margs = composite_args(member, inputs, &produced);
        let refs: Vec<ShapeInput<'_>> = margs.iter().map(|s| ShapeInput::Shape(s)).collect();
        produced.push(shape_fn(&member.op, &refs, &member.attrs)?.remove(0));
    }
    Ok(produced.pop().expect("composite has members"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32s(shape: &[usize], data: &[f32]) -> TensorLiteral {
        TensorLiteral { shape: shape.to_vec(), data: ScalarData::F32(data.to_vec()) }
    }

    fn i64s(shape: &[usize], data: &[i64]) -> TensorLiteral {
        TensorLiteral { shape: shape.to_vec(), data: ScalarData::I64(data.to_vec()) }
    }

    #[test]
    fn add_broadcasts_one_against_many() {
        let a = f32s(&[2, 1], &[1.0, 2.0]);
        let b = f32s(&[2, 3], &[10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        let out = ref_eval("add", &[a, b], &Attrs::new()).unwrap();
        assert_eq!(out.shape, vec![2, 3]);
        assert_eq!(out.data, ScalarData::F32(vec![11.0, 21.0, 31.0, 42.0, 52.0, 62.0]));
    }

    #[test]
    fn add_rejects_incompatible_extents() {
        let a = f32s(&[3], &[0.0; 3]);
        let b = f32s(&[4], &[0.0; 4]);
        let err = ref_eval("add", &[a, b], &Attrs::new()).unwrap_err();
        assert!(matches!(err, EvalError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn dense_matches_hand_matmul() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = f32s(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = f32s(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let out = ref_eval("dense", &[a, b], &Attrs::new()).unwrap();
        assert_eq!(out.data, ScalarData::F32(vec![19.0, 22.0, 43.0, 50.0]));
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let a = i64s(&[1, 2], &[1, 2]);
        let b = i64s(&[2, 2], &[3, 4, 5, 6]);
        let mut attrs = Attrs::new();
        attrs.insert("axis".into(), crate::ir::expr::AttrValue::Int(0));
        let out = ref_concat(&[a.clone(), b], &attrs).unwrap();
        assert_eq!(out.shape, vec![3, 2]);
        assert_eq!(out.data, ScalarData::I64(vec![1, 2, 3, 4, 5, 6]));

        let c = i64s(&[1, 3], &[7, 8, 9]);
        let mut attrs = Attrs::new();
        attrs.insert("axis".into(), crate::ir::expr::AttrValue::Int(1));
        let out = ref_concat(&[a, c], &attrs).unwrap();
        assert_eq!(out.shape, vec![1, 5]);
        assert_eq!(out.data, ScalarData::I64(vec![1, 2, 7, 8, 9]));
    }

    #[test]
    fn arange_examples() {
        let out = ref_eval(
            "arange",
            &[TensorLiteral::scalar_i64(0), TensorLiteral::scalar_i64(5), TensorLiteral::scalar_i64(1)],
            &Attrs::new(),
        )
        .unwrap();
        assert_eq!(out.shape, vec![5]);
        assert_eq!(out.data, ScalarData::I64(vec![0, 1, 2, 3, 4]));

        let err = ref_eval(
            "arange",
            &[TensorLiteral::scalar_i64(0), TensorLiteral::scalar_i64(5), TensorLiteral::scalar_i64(0)],
            &Attrs::new(),
        )
        .unwrap_err();
        assert_eq!(err, EvalError::ZeroStep);
    }

    #[test]
    fn unique_keeps_first_occurrence_order() {
        let out = ref_eval("unique", &[i64s(&[6], &[3, 1, 3, 2, 1, 9])], &Attrs::new()).unwrap();
        assert_eq!(out.data, ScalarData::I64(vec![3, 1, 2, 9]));
        let padded = ref_eval_mut(
            "unique",
            &[i64s(&[6], &[3, 1, 3, 2, 1, 9])],
            &Attrs::new(),
            &[vec![6], vec![1]],
        )
        .unwrap();
        assert_eq!(padded[0].data, ScalarData::I64(vec![3, 1, 2, 9, 0, 0]));
        assert_eq!(padded[1].data, ScalarData::I64(vec![4]));
    }

    #[test]
    fn take_gathers_rows_and_checks_bounds() {
        let data = i64s(&[3, 2], &[1, 2, 3, 4, 5, 6]);
        let mut attrs = Attrs::new();
        attrs.insert("axis".into(), crate::ir::expr::AttrValue::Int(0));
        let out = ref_take(&data, &i64s(&[2], &[2, 0]), &attrs).unwrap();
        assert_eq!(out.shape, vec![2, 2]);
        assert_eq!(out.data, ScalarData::I64(vec![5, 6, 1, 2]));
        let err = ref_take(&data, &i64s(&[1], &[3]), &attrs).unwrap_err();
        assert!(matches!(err, EvalError::IndexOutOfRange { .. }));
    }

    #[test]
    fn shape_fn_checks_broadcast_at_runtime() {
        let r = shape_fn("add", &[ShapeInput::Shape(&[3]), ShapeInput::Shape(&[4])], &Attrs::new());
        assert!(r.is_err());
        let r = shape_fn("add", &[ShapeInput::Shape(&[1]), ShapeInput::Shape(&[4])], &Attrs::new()).unwrap();
        assert_eq!(r, vec![vec![4]]);
    }
}
