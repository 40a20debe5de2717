//! Loop-nest kernel IR and the interpreter that executes it. Cost is the
//! number of executed store statements plus evaluated boundary checks.

use std::collections::HashMap;
use std::fmt;

use crate::error::CodegenError;
use crate::ir::types::DType;

use super::affine::AExpr;

/// Per-axis tiling factors and unroll flags, in axis order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Schedule {
    pub tiles: Vec<u32>,
    pub unroll: Vec<bool>,
}

impl Schedule {
    pub fn identity(n_axes: usize) -> Schedule {
        Schedule { tiles: vec![1; n_axes], unroll: vec![false; n_axes] }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axes: Vec<String> = self
            .tiles
            .iter()
            .zip(&self.unroll)
            .map(|(t, u)| format!("{t}{}", if *u { "u" } else { "" }))
            .collect();
        write!(f, "[{}]", axes.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KBuf {
    pub name: String,
    pub dims: Vec<AExpr>,
    pub dtype: DType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KOp {
    Add,
    Mul,
    Less,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KExpr {
    /// Scalar load from a buffer at a flat affine index.
    Load { buf: usize, index: AExpr },
    Imm(i64),
    ImmF(f64),
    Idx(AExpr),
    Bin { op: KOp, a: Box<KExpr>, b: Box<KExpr> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum KStmt {
    Loop { var: String, upper: AExpr, body: Vec<KStmt> },
    /// Body runs iff lhs < rhs; each dynamic test costs one guard evaluation.
    Guard { lhs: AExpr, rhs: AExpr, body: Vec<KStmt> },
    Store { buf: usize, index: AExpr, value: KExpr },
}

/// Result of tiling one axis: the original extent and the split loop vars.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledAxis {
    pub axis: usize,
    pub outer: String,
    pub inner: String,
    pub tile: u32,
    pub extent: AExpr,
    pub unrolled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelIR {
    pub name: String,
    /// Inputs first, outputs after; `n_inputs` marks the boundary.
    pub buffers: Vec<KBuf>,
    pub n_inputs: usize,
    /// Loop axes of the unscheduled nest, outermost first.
    pub n_axes: usize,
    pub body: Vec<KStmt>,
    pub schedule: Option<Schedule>,
    pub tiled: Vec<TiledAxis>,
    /// Known lower bounds for free symbolic dims, used by the prover.
    pub sym_lb: std::collections::BTreeMap<String, i64>,
}

impl KernelIR {
    pub fn sym_dims(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.buffers {
            for d in &b.dims {
                d.vars(&mut out);
            }
        }
        out
    }
}

/// Number of guard statements in the kernel body. Pure; counts statements,
/// not executions.
pub fn count_boundary_checks(k: &KernelIR) -> usize {
    fn go(stmts: &[KStmt]) -> usize {
        stmts
            .iter()
            .map(|s| match s {
                KStmt::Loop { body, .. } => go(body),
                KStmt::Guard { body, .. } => 1 + go(body),
                KStmt::Store { .. } => 0,
            })
            .sum()
    }
    go(&k.body)
}

pub fn render(k: &KernelIR) -> String {
    let mut out = String::new();
    let args: Vec<String> = k
        .buffers
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let dims: Vec<String> = b.dims.iter().map(|d| d.to_string()).collect();
            let role = if i < k.n_inputs { "in" } else { "out" };
            format!("{role} {}: {:?}[{}]", b.name, b.dtype, dims.join(", "))
        })
        .collect();
    out.push_str(&format!("kernel {}({}) {{\n", k.name, args.join(", ")));
    fn go(stmts: &[KStmt], bufs: &[KBuf], depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        for s in stmts {
            match s {
                KStmt::Loop { var, upper, body } => {
                    out.push_str(&format!("{pad}for {var} in 0..{upper} {{\n"));
                    go(body, bufs, depth + 1, out);
                    out.push_str(&format!("{pad}}}\n"));
                }
                KStmt::Guard { lhs, rhs, body } => {
                    out.push_str(&format!("{pad}if {lhs} < {rhs} {{\n"));
                    go(body, bufs, depth + 1, out);
                    out.push_str(&format!("{pad}}}\n"));
                }
                KStmt::Store { buf, index, value } => {
                    out.push_str(&format!(
                        "{pad}{}[{index}] = {};\n",
                        bufs[*buf].name,
                        render_expr(value, bufs)
                    ));
                }
            }
        }
    }
    go(&k.body, &k.buffers, 1, &mut out);
    out.push_str("}\n");
    out
}

fn render_expr(e: &KExpr, bufs: &[KBuf]) -> String {
    match e {
        KExpr::Load { buf, index } => format!("{}[{index}]", bufs[*buf].name),
        KExpr::Imm(v) => v.to_string(),
        KExpr::ImmF(v) => format!("{v:?}"),
        KExpr::Idx(a) => format!("({a})"),
        KExpr::Bin { op, a, b } => {
            let sym = match op {
                KOp::Add => "+",
                KOp::Mul => "*",
                KOp::Less => "<",
            };
            format!("({} {sym} {})", render_expr(a, bufs), render_expr(b, bufs))
        }
    }
}

/// Runtime buffer for the kernel interpreter.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBuf {
    pub dims: Vec<i64>,
    pub data: KData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KData {
    I64(Vec<i64>),
    F32(Vec<f32>),
}

impl KernelBuf {
    pub fn zeros(dtype: DType, dims: &[i64]) -> KernelBuf {
        let n: i64 = dims.iter().product::<i64>().max(1);
        let data = match dtype {
            DType::I64 => KData::I64(vec![0; n as usize]),
            DType::F32 => KData::F32(vec![0.0; n as usize]),
        };
        KernelBuf { dims: dims.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            KData::I64(v) => v.len(),
            KData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Zero-filled buffers matching the kernel's declared dims under `env`.
pub fn alloc_buffers(
    k: &KernelIR,
    env: &HashMap<String, i64>,
) -> Result<Vec<KernelBuf>, CodegenError> {
    k.buffers
        .iter()
        .map(|b| {
            let dims = b
                .dims
                .iter()
                .map(|d| {
                    d.eval(&|n| env.get(n).copied())
                        .filter(|v| *v > 0)
                        .ok_or_else(|| {
                            CodegenError::Exec(format!("cannot size dim `{d}` of `{}`", b.name))
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(KernelBuf::zeros(b.dtype, &dims))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// Executed store statements.
    pub statements: u64,
    /// Evaluated boundary checks.
    pub guard_evals: u64,
}

impl ExecStats {
    pub fn cost(&self) -> u64 {
        self.statements + self.guard_evals
    }
}

#[derive(Clone, Copy)]
enum SV {
    I(i64),
    F(f64),
}

impl SV {
    fn as_f(self) -> f64 {
        match self {
            SV::I(v) => v as f64,
            SV::F(v) => v,
        }
    }
}

struct Interp<'a> {
    kernel: &'a KernelIR,
    bufs: &'a mut [KernelBuf],
    env: HashMap<String, i64>,
    stats: ExecStats,
}

/// Executes the kernel. `env` supplies symbolic dim values; buffer dims are
/// validated against the declared dim expressions before running.
pub fn run_kernel(
    k: &KernelIR,
    env: &HashMap<String, i64>,
    bufs: &mut [KernelBuf],
) -> Result<ExecStats, CodegenError> {
    if bufs.len() != k.buffers.len() {
        return Err(CodegenError::Exec(format!(
            "kernel `{}` takes {} buffers, got {}",
            k.name,
            k.buffers.len(),
            bufs.len()
        )));
    }
    for (kb, rb) in k.buffers.iter().zip(bufs.iter()) {
        if kb.dims.len() != rb.dims.len() {
            return Err(CodegenError::Exec(format!(
                "buffer `{}` expects rank {}, got {}",
                kb.name,
                kb.dims.len(),
                rb.dims.len()
            )));
        }
        for (de, dv) in kb.dims.iter().zip(&rb.dims) {
            let want = de.eval(&|n| env.get(n).copied()).ok_or_else(|| {
                CodegenError::Exec(format!("unbound symbolic dim in `{de}`"))
            })?;
            if want != *dv {
                return Err(CodegenError::Exec(format!(
                    "buffer `{}` dim `{de}` = {want} but the buffer has {dv}",
                    kb.name
                )));
            }
        }
        let want: i64 = rb.dims.iter().product::<i64>().max(1);
        if want as usize != rb.len() {
            return Err(CodegenError::Exec(format!(
                "buffer `{}` holds {} elements for dims {:?}",
                kb.name,
                rb.len(),
                rb.dims
            )));
        }
    }
    let mut it = Interp { kernel: k, bufs, env: env.clone(), stats: ExecStats::default() };
    it.block(&k.body)?;
    Ok(it.stats)
}

impl Interp<'_> {
    fn block(&mut self, stmts: &[KStmt]) -> Result<(), CodegenError> {
        for s in stmts {
            self.stmt(s)?;
        }
        Ok(())
    }

    fn aeval(&self, e: &AExpr) -> Result<i64, CodegenError> {
        e.eval(&|n| self.env.get(n).copied())
            .ok_or_else(|| CodegenError::Exec(format!("unbound variable in `{e}`")))
    }

    fn stmt(&mut self, s: &KStmt) -> Result<(), CodegenError> {
        match s {
            KStmt::Loop { var, upper, body } => {
                let hi = self.aeval(upper)?;
                for i in 0..hi {
                    self.env.insert(var.clone(), i);
                    self.block(body)?;
                }
                self.env.remove(var);
                Ok(())
            }
            KStmt::Guard { lhs, rhs, body } => {
                self.stats.guard_evals += 1;
                if self.aeval(lhs)? < self.aeval(rhs)? {
                    self.block(body)?;
                }
                Ok(())
            }
            KStmt::Store { buf, index, value } => {
                let idx = self.aeval(index)?;
                let v = self.expr(value)?;
                let b = &mut self.bufs[*buf];
                if idx < 0 || idx as usize >= b.len() {
                    return Err(CodegenError::Exec(format!(
                        "store to `{}` out of bounds: {idx} of {}",
                        self.kernel.buffers[*buf].name,
                        b.len()
                    )));
                }
                match (&mut b.data, v) {
                    (KData::I64(d), SV::I(v)) => d[idx as usize] = v,
                    (KData::F32(d), SV::F(v)) => d[idx as usize] = v as f32,
                    (KData::F32(d), SV::I(v)) => d[idx as usize] = v as f32,
                    (KData::I64(_), SV::F(_)) => {
                        return Err(CodegenError::Exec(format!(
                            "float store into i64 buffer `{}`",
                            self.kernel.buffers[*buf].name
                        )))
                    }
                }
                self.stats.statements += 1;
                Ok(())
            }
        }
    }

    fn expr(&self, e: &KExpr) -> Result<SV, CodegenError> {
        match e {
            KExpr::Imm(v) => Ok(SV::I(*v)),
            KExpr::ImmF(v) => Ok(SV::F(*v)),
            KExpr::Idx(a) => Ok(SV::I(self.aeval(a)?)),
            KExpr::Load { buf, index } => {
                let idx = self.aeval(index)?;
                let b = &self.bufs[*buf];
                if idx < 0 || idx as usize >= b.len() {
                    return Err(CodegenError::Exec(format!(
                        "load from `{}` out of bounds: {idx} of {}",
                        self.kernel.buffers[*buf].name,
                        b.len()
                    )));
                }
                Ok(match &b.data {
                    KData::I64(d) => SV::I(d[idx as usize]),
                    KData::F32(d) => SV::F(d[idx as usize] as f64),
                })
            }
            KExpr::Bin { op, a, b } => {
                let a = self.expr(a)?;
                let b = self.expr(b)?;
                Ok(match (op, a, b) {
                    (KOp::Add, SV::I(x), SV::I(y)) => SV::I(x.wrapping_add(y)),
                    (KOp::Mul, SV::I(x), SV::I(y)) => SV::I(x.wrapping_mul(y)),
                    (KOp::Less, SV::I(x), SV::I(y)) => SV::I((x < y) as i64),
                    (KOp::Add, x, y) => SV::F(x.as_f() + y.as_f()),
                    (KOp::Mul, x, y) => SV::F(x.as_f() * y.as_f()),
                    (KOp::Less, x, y) => SV::I((x.as_f() < y.as_f()) as i64),
                })
            }
        }
    }
}
