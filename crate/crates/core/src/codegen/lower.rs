//! Lowers individual operations to loop-nest kernels. Dynamic dims become
//! symbolic variables named x0, x1, ... in first-occurrence order; runtime
//! extents are validated against the declared dim expressions on entry.

use std::collections::BTreeMap;

use crate::error::CodegenError;
use crate::ir::types::{DType, Dim, TensorType};

use super::affine::{add, cnst, mul, var, AExpr};
use super::kernel::{KBuf, KExpr, KOp, KStmt, KernelIR};

struct SymGen {
    next: usize,
    lb: BTreeMap<String, i64>,
}

impl SymGen {
    fn new() -> SymGen {
        SymGen { next: 0, lb: BTreeMap::new() }
    }

    fn fresh(&mut self) -> AExpr {
        let name = format!("x{}", self.next);
        self.next += 1;
        // tensor extents are always at least one
        self.lb.insert(name.clone(), 1);
        var(&name)
    }

    fn dim(&mut self, d: &Dim) -> AExpr {
        match d {
            Dim::Static(v) => cnst(*v as i64),
            Dim::Any => self.fresh(),
        }
    }

    fn unify(&mut self, op: &str, a: &Dim, b: &Dim) -> Result<AExpr, CodegenError> {
        match (a, b) {
            (Dim::Static(x), Dim::Static(y)) => {
                if x == y {
                    Ok(cnst(*x as i64))
                } else {
                    Err(bad(op, format!("extent mismatch {x} vs {y}")))
                }
            }
            (Dim::Static(x), Dim::Any) | (Dim::Any, Dim::Static(x)) => Ok(cnst(*x as i64)),
            (Dim::Any, Dim::Any) => Ok(self.fresh()),
        }
    }
}

fn bad(op: &str, msg: impl Into<String>) -> CodegenError {
    CodegenError::BadSignature { op: op.to_string(), msg: msg.into() }
}

fn numel(dims: &[AExpr]) -> AExpr {
    let mut acc: Option<AExpr> = None;
    for d in dims {
        acc = Some(match acc {
            None => d.clone(),
            Some(a) => mul(a, d.clone()),
        });
    }
    acc.unwrap_or(cnst(1))
}

fn load(buf: usize, index: AExpr) -> KExpr {
    KExpr::Load { buf, index }
}

fn bin(op: KOp, a: KExpr, b: KExpr) -> KExpr {
    KExpr::Bin { op, a: Box::new(a), b: Box::new(b) }
}

fn one_dtype(op: &str, inputs: &[TensorType]) -> Result<DType, CodegenError> {
    let d = inputs[0].dtype;
    for t in inputs {
        if t.dtype != d {
            return Err(bad(op, format!("dtype mismatch {} vs {}", d, t.dtype)));
        }
    }
    Ok(d)
}

/// Lowers one `op` applied to `inputs` to a fresh unscheduled kernel. Concat
/// lowers along axis 0 only.
pub fn lower_to_kernel(op: &str, inputs: &[TensorType]) -> Result<KernelIR, CodegenError> {
    match op {
        "add" | "multiply" | "less" => lower_elementwise(op, inputs),
        "dense" => lower_dense(inputs),
        "concat" => lower_concat(inputs),
        "arange" => lower_arange(inputs),
        _ => Err(CodegenError::NotLowerable(op.to_string())),
    }
}

fn lower_elementwise(op: &str, inputs: &[TensorType]) -> Result<KernelIR, CodegenError> {
    if inputs.len() != 2 {
        return Err(bad(op, format!("expects 2 inputs, got {}", inputs.len())));
    }
    let dtype = one_dtype(op, inputs)?;
    let (a, b) = (&inputs[0], &inputs[1]);
    if a.dims.len() != b.dims.len() {
        return Err(bad(op, "inputs must share a shape"));
    }
    let mut gen = SymGen::new();
    let dims: Vec<AExpr> = a
        .dims
        .iter()
        .zip(&b.dims)
        .map(|(x, y)| gen.unify(op, x, y))
        .collect::<Result<_, _>>()?;
    let kop = match op {
        "add" => KOp::Add,
        "multiply" => KOp::Mul,
        _ => KOp::Less,
    };
    let out_dtype = if op == "less" { DType::I64 } else { dtype };
    let n = numel(&dims);
    let body = vec![KStmt::Loop {
        var: "i".into(),
        upper: n,
        body: vec![KStmt::Store {
            buf: 2,
            index: var("i"),
            value: bin(kop, load(0, var("i")), load(1, var("i"))),
        }],
    }];
    Ok(KernelIR {
        name: format!("{op}_kernel"),
        buffers: vec![
            KBuf { name: "a".into(), dims: dims.clone(), dtype },
            KBuf { name: "b".into(), dims: dims.clone(), dtype },
            KBuf { name: "out".into(), dims, dtype: out_dtype },
        ],
        n_inputs: 2,
        n_axes: 1,
        body,
        schedule: None,
        tiled: Vec::new(),
        sym_lb: gen.lb,
    })
}

fn lower_dense(inputs: &[TensorType]) -> Result<KernelIR, CodegenError> {
    if inputs.len() != 2 {
        return Err(bad("dense", format!("expects 2 inputs, got {}", inputs.len())));
    }
    let dtype = one_dtype("dense", inputs)?;
    let (a, b) = (&inputs[0], &inputs[1]);
    if a.dims.len() != 2 || b.dims.len() != 2 {
        return Err(bad("dense", "expects rank-2 inputs"));
    }
    let mut gen = SymGen::new();
    let n = gen.dim(&a.dims[0]);
    let kd = gen.unify("dense", &a.dims[1], &b.dims[0])?;
    let m = gen.dim(&b.dims[1]);
    let out_idx = add(mul(var("i"), m.clone()), var("j"));
    let acc = bin(
        KOp::Add,
        load(2, out_idx.clone()),
        bin(
            KOp::Mul,
            load(0, add(mul(var("i"), kd.clone()), var("l"))),
            load(1, add(mul(var("l"), m.clone()), var("j"))),
        ),
    );
    let body = vec![KStmt::Loop {
        var: "i".into(),
        upper: n.clone(),
        body: vec![KStmt::Loop {
            var: "j".into(),
            upper: m.clone(),
            body: vec![
                KStmt::Store { buf: 2, index: out_idx.clone(), value: KExpr::Imm(0) },
                KStmt::Loop {
                    var: "l".into(),
                    upper: kd.clone(),
                    body: vec![KStmt::Store { buf: 2, index: out_idx, value: acc }],
                },
            ],
        }],
    }];
    Ok(KernelIR {
        name: "dense_kernel".into(),
        buffers: vec![
            KBuf { name: "a".into(), dims: vec![n.clone(), kd.clone()], dtype },
            KBuf { name: "b".into(), dims: vec![kd, m.clone()], dtype },
            KBuf { name: "out".into(), dims: vec![n, m], dtype },
        ],
        n_inputs: 2,
        n_axes: 3,
        body,
        schedule: None,
        tiled: Vec::new(),
        sym_lb: gen.lb,
    })
}

fn lower_concat(inputs: &[TensorType]) -> Result<KernelIR, CodegenError> {
    if inputs.len() != 2 {
        return Err(bad("concat", format!("expects 2 inputs, got {}", inputs.len())));
    }
    let dtype = one_dtype("concat", inputs)?;
    let (a, b) = (&inputs[0], &inputs[1]);
    if a.dims.is_empty() || a.dims.len() != b.dims.len() {
        return Err(bad("concat", "inputs must share a rank of at least one"));
    }
    let mut gen = SymGen::new();
    let d0a = gen.dim(&a.dims[0]);
    let rest: Vec<AExpr> = a.dims[1..]
        .iter()
        .zip(&b.dims[1..])
        .map(|(x, y)| gen.unify("concat", x, y))
        .collect::<Result<_, _>>()?;
    let d0b = gen.dim(&b.dims[0]);
    let mut dims_a = vec![d0a.clone()];
    dims_a.extend(rest.iter().cloned());
    let mut dims_b = vec![d0b.clone()];
    dims_b.extend(rest.iter().cloned());
    let mut dims_out = vec![super::affine::simplify(&add(d0a, d0b))];
    dims_out.extend(rest.iter().cloned());
    let na = numel(&dims_a);
    let nb = numel(&dims_b);
    let body = vec![
        KStmt::Loop {
            var: "i".into(),
            upper: na.clone(),
            body: vec![KStmt::Store { buf: 2, index: var("i"), value: load(0, var("i")) }],
        },
        KStmt::Loop {
            var: "j".into(),
            upper: nb,
            body: vec![KStmt::Store { buf: 2, index: add(na, var("j")), value: load(1, var("j")) }],
        },
    ];
    Ok(KernelIR {
        name: "concat_kernel".into(),
        buffers: vec![
            KBuf { name: "a".into(), dims: dims_a, dtype },
            KBuf { name: "b".into(), dims: dims_b, dtype },
            KBuf { name: "out".into(), dims: dims_out, dtype },
        ],
        n_inputs: 2,
        n_axes: 2,
        body,
        schedule: None,
        tiled: Vec::new(),
        sym_lb: gen.lb,
    })
}

fn lower_arange(inputs: &[TensorType]) -> Result<KernelIR, CodegenError> {
    if inputs.len() != 3 {
        return Err(bad("arange", format!("expects 3 inputs, got {}", inputs.len())));
    }
    let dtype = one_dtype("arange", inputs)?;
    if inputs.iter().any(|t| !t.dims.is_empty()) {
        return Err(bad("arange", "expects scalar start/stop/step"));
    }
    let mut gen = SymGen::new();
    let n = gen.fresh();
    let body = vec![KStmt::Loop {
        var: "i".into(),
        upper: n.clone(),
        body: vec![KStmt::Store {
            buf: 3,
            index: var("i"),
            value: bin(
                KOp::Add,
                load(0, cnst(0)),
                bin(KOp::Mul, KExpr::Idx(var("i")), load(2, cnst(0))),
            ),
        }],
    }];
    Ok(KernelIR {
        name: "arange_kernel".into(),
        buffers: vec![
            KBuf { name: "start".into(), dims: vec![], dtype },
            KBuf { name: "stop".into(), dims: vec![], dtype },
            KBuf { name: "step".into(), dims: vec![], dtype },
            KBuf { name: "out".into(), dims: vec![n], dtype },
        ],
        n_inputs: 3,
        n_axes: 1,
        body,
        schedule: None,
        tiled: Vec::new(),
        sym_lb: gen.lb,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use std::collections::HashMap;

    use super::super::kernel::{run_kernel, KData, KernelBuf};
    use super::*;
    use crate::ir::expr::{ScalarData, TensorLiteral};
    use crate::ops::ref_eval;

    pub(crate) fn lit_to_buf(t: &TensorLiteral) -> KernelBuf {
        KernelBuf {
            dims: t.shape.iter().map(|&d| d as i64).collect(),
            data: match &t.data {
                ScalarData::F32(v) => KData::F32(v.clone()),
                ScalarData::I64(v) => KData::I64(v.clone()),
            },
        }
    }

    pub(crate) fn buf_close(a: &KernelBuf, b: &KernelBuf) -> bool {
        if a.dims != b.dims {
            return false;
        }
        match (&a.data, &b.data) {
            (KData::I64(x), KData::I64(y)) => x == y,
            (KData::F32(x), KData::F32(y)) => x
                .iter()
                .zip(y)
                .all(|(p, q)| (p - q).abs() <= 1e-5 * q.abs().max(1.0)),
            _ => false,
        }
    }

    fn f32s(shape: &[usize], f: impl Fn(usize) -> f32) -> TensorLiteral {
        let n = shape.iter().product();
        TensorLiteral { shape: shape.to_vec(), data: ScalarData::F32((0..n).map(f).collect()) }
    }

    fn i64s(shape: &[usize], f: impl Fn(usize) -> i64) -> TensorLiteral {
        let n = shape.iter().product();
        TensorLiteral { shape: shape.to_vec(), data: ScalarData::I64((0..n).map(f).collect()) }
    }

    fn tt(dims: &[Option<u64>], dtype: DType) -> TensorType {
        let dims = dims
            .iter()
            .map(|d| match d {
                Some(v) => Dim::Static(*v),
                None => Dim::Any,
            })
            .collect();
        TensorType::new(dims, dtype).unwrap()
    }

    /// Lowers, runs on literal inputs, and checks against the reference op.
    pub(crate) fn check_against_ref(
        op: &str,
        types: &[TensorType],
        inputs: &[TensorLiteral],
        env: &[(&str, i64)],
    ) {
        let k = lower_to_kernel(op, types).unwrap();
        let want = ref_eval(op, inputs, &Default::default()).unwrap();
        let mut bufs: Vec<KernelBuf> = inputs.iter().map(lit_to_buf).collect();
        bufs.push(KernelBuf::zeros(
            k.buffers.last().unwrap().dtype,
            &want.shape.iter().map(|&d| d as i64).collect::<Vec<_>>(),
        ));
        let env: HashMap<String, i64> = env.iter().map(|(n, v)| (n.to_string(), *v)).collect();
        run_kernel(&k, &env, &mut bufs).unwrap();
        assert!(
            buf_close(bufs.last().unwrap(), &lit_to_buf(&want)),
            "`{op}` kernel disagrees with the reference evaluator"
        );
    }

    #[test]
    fn elementwise_kernels_match_the_reference() {
        let a = f32s(&[2, 4], |i| i as f32 * 0.5 - 1.0);
        let b = f32s(&[2, 4], |i| (i * i) as f32 * 0.25);
        // static dims win over dynamic ones position by position
        check_against_ref(
            "add",
            &[tt(&[None, Some(4)], DType::F32), tt(&[Some(2), None], DType::F32)],
            &[a.clone(), b.clone()],
            &[],
        );
        check_against_ref(
            "multiply",
            &[tt(&[Some(2), Some(4)], DType::F32), tt(&[Some(2), Some(4)], DType::F32)],
            &[a.clone(), b.clone()],
            &[],
        );
        // fully dynamic rank-1 shares one symbolic extent
        let x = i64s(&[5], |i| i as i64 - 2);
        let y = i64s(&[5], |i| 2 - i as i64);
        check_against_ref(
            "less",
            &[tt(&[None], DType::I64), tt(&[None], DType::I64)],
            &[x, y],
            &[("x0", 5)],
        );
        // less yields i64 even from f32 operands
        let k = lower_to_kernel("less", &[tt(&[Some(3)], DType::F32), tt(&[Some(3)], DType::F32)]).unwrap();
        assert_eq!(k.buffers[2].dtype, DType::I64);
    }

    #[test]
    fn dense_and_concat_and_arange_match_the_reference() {
        let a = f32s(&[3, 4], |i| i as f32 * 0.3 - 2.0);
        let b = f32s(&[4, 2], |i| 1.0 - i as f32 * 0.7);
        check_against_ref(
            "dense",
            &[tt(&[None, Some(4)], DType::F32), tt(&[Some(4), Some(2)], DType::F32)],
            &[a.clone(), b.clone()],
            &[("x0", 3)],
        );
        check_against_ref(
            "dense",
            &[tt(&[Some(3), Some(4)], DType::I64), tt(&[Some(4), Some(2)], DType::I64)],
            &[i64s(&[3, 4], |i| i as i64 - 5), i64s(&[4, 2], |i| 3 - i as i64)],
            &[],
        );
        check_against_ref(
            "concat",
            &[tt(&[None, Some(3)], DType::F32), tt(&[Some(2), Some(3)], DType::F32)],
            &[f32s(&[4, 3], |i| i as f32), f32s(&[2, 3], |i| -(i as f32))],
            &[("x0", 4)],
        );
        check_against_ref(
            "arange",
            &[tt(&[], DType::I64), tt(&[], DType::I64), tt(&[], DType::I64)],
            &[i64s(&[], |_| 2), i64s(&[], |_| 11), i64s(&[], |_| 3)],
            &[("x0", 3)],
        );
        check_against_ref(
            "arange",
            &[tt(&[], DType::F32), tt(&[], DType::F32), tt(&[], DType::F32)],
            &[f32s(&[], |_| 0.5), f32s(&[], |_| 3.0), f32s(&[], |_| 0.75)],
            &[("x0", 4)],
        );
    }

    #[test]
    fn unsupported_ops_and_bad_signatures_are_rejected() {
        assert!(matches!(
            lower_to_kernel("take", &[tt(&[Some(4)], DType::F32), tt(&[Some(4)], DType::F32)]),
            Err(CodegenError::NotLowerable(op)) if op == "take"
        ));
        // mixed dtypes
        let e = lower_to_kernel(
            "add",
            &[tt(&[Some(4)], DType::F32), tt(&[Some(4)], DType::I64)],
        )
        .unwrap_err();
        assert!(e.to_string().contains("dtype mismatch"));
        // mismatched static extents
        assert!(lower_to_kernel(
            "add",
            &[tt(&[Some(4)], DType::F32), tt(&[Some(5)], DType::F32)]
        )
        .is_err());
        // dense wants rank 2
        assert!(lower_to_kernel("dense", &[tt(&[Some(4)], DType::F32), tt(&[Some(4)], DType::F32)]).is_err());
        // buffer extents are validated against the declared dims
        let k = lower_to_kernel("add", &[tt(&[Some(4)], DType::F32), tt(&[Some(4)], DType::F32)]).unwrap();
        let mut bufs = vec![
            KernelBuf::zeros(DType::F32, &[5]),
            KernelBuf::zeros(DType::F32, &[5]),
            KernelBuf::zeros(DType::F32, &[5]),
        ];
        assert!(run_kernel(&k, &HashMap::new(), &mut bufs).is_err());
    }

    #[test]
    fn symbolic_dims_are_named_in_first_occurrence_order() {
        let k = lower_to_kernel(
            "dense",
            &[tt(&[None, None], DType::F32), tt(&[None, None], DType::F32)],
        )
        .unwrap();
        assert_eq!(k.sym_dims(), vec!["x0", "x1", "x2"]);
        assert_eq!(k.buffers[0].dims, vec![var("x0"), var("x1")]);
        assert_eq!(k.buffers[1].dims, vec![var("x1"), var("x2")]);
        assert_eq!(k.buffers[2].dims, vec![var("x0"), var("x2")]);
        assert_eq!(k.sym_lb.get("x0"), Some(&1));
    }
}
