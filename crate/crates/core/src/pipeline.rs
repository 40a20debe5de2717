//! Source-to-executable driver: runs the pass chain in its one legal order,
//! exposes intermediate dumps and line-oriented reports, and builds
//! dispatch-backed kernels that plug into the VM primitive registry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::codegen::{
    apply_schedule, build_dispatch, count_boundary_checks, lower_to_kernel, specialize_residues,
    Dispatch, ExecStats, KData, KStmt, KernelBuf, Schedule, Selected,
};
use crate::devplace::{analyze_placement, copy_report, insert_device_copies, CopyReport};
use crate::error::{CodegenError, PipelineError, VmError};
use crate::ir::expr::{Module, ScalarData, Stage, TensorLiteral};
use crate::ir::parse::parse_module;
use crate::ir::print::print_module;
use crate::ir::types::{DType, Device, Dim, TensorType};
use crate::memplan::{coalesce_storage, insert_kills, manifest_alloc, mem_report, MemReport};
use crate::shapefn::fuse_pass;
use crate::typesys::{infer_types, refine_and_unify_dims};
use crate::vm::{compile_to_executable, disasm, Executable, PrimFn, PrimOverrides, Registry};

/// Pass names in their one legal execution order.
pub const PASSES: [&str; 10] = [
    "parse",
    "infer_types",
    "refine_and_unify_dims",
    "fuse_pass",
    "manifest_alloc",
    "insert_kills",
    "coalesce_storage",
    "analyze_placement",
    "insert_device_copies",
    "compile",
];

/// A pass failure tagged with the pass that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: PipelineError,
}

fn staged<E: Into<PipelineError>>(stage: &'static str) -> impl Fn(E) -> StageError {
    move |e| StageError { stage, source: e.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub target: Device,
    /// Tile factor for dispatch-backed kernels; 1 disables tiling.
    pub tile: u32,
    /// Residue variant count c, 1..=tile.
    pub dispatch: u32,
    pub align: u64,
    pub tune_iters: u32,
    pub tune_k: usize,
    pub seed: u64,
    /// Ordered subsequence of [`PASSES`] to run.
    pub passes: Vec<String>,
    /// Ops routed to dispatch-backed kernels instead of their builtin
    /// reference primitives.
    pub kernel_ops: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            target: Device::Cpu,
            tile: 8,
            dispatch: 8,
            align: 64,
            tune_iters: 64,
            tune_k: 100,
            seed: 0,
            passes: PASSES.iter().map(|s| s.to_string()).collect(),
            kernel_ops: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        let bad = |msg: String| StageError {
            stage: "config",
            source: PipelineError::Other(msg),
        };
        if self.tile < 1 {
            return Err(bad("tile factor must be at least 1".into()));
        }
        if self.dispatch < 1 || self.dispatch > self.tile {
            return Err(bad(format!(
                "dispatch count {} must be in 1..={}",
                self.dispatch, self.tile
            )));
        }
        if self.align == 0 || !self.align.is_power_of_two() {
            return Err(bad(format!("alignment {} must be a power of two", self.align)));
        }
        if self.tune_k < 1 {
            return Err(bad("tuning k must be at least 1".into()));
        }
        let mut last = None;
        for name in &self.passes {
            let Some(at) = PASSES.iter().position(|p| p == name) else {
                return Err(bad(format!("unknown pass `{name}`")));
            };
            if let Some(prev) = last {
                if at <= prev {
                    return Err(bad(format!("pass `{name}` is out of order")));
                }
            }
            last = Some(at);
        }
        if self.passes.iter().any(|p| p == "compile")
            && !self.passes.iter().any(|p| p == "insert_device_copies")
        {
            return Err(bad("compile requires insert_device_copies".into()));
        }
        Ok(())
    }
}

/// Everything the driver produced: the module after the last pass that ran,
/// the executable if `compile` ran, reports, and any requested dumps.
#[derive(Debug)]
pub struct Artifacts {
    pub module: Module,
    pub exe: Option<Executable>,
    pub mem: Option<MemReport>,
    pub copies: Option<CopyReport>,
    /// (pass name, pretty-printed state after it) pairs, in run order.
    pub dumps: Vec<(String, String)>,
}

/// Runs the configured pass list over `src`. Passes that expect an earlier
/// stage than the source declares are skipped; `dump_after` collects the
/// printed module (or disassembly) after the named passes.
pub fn run_pipeline_dumps(
    src: &str,
    cfg: &PipelineConfig,
    dump_after: &[&str],
) -> Result<Artifacts, StageError> {
    cfg.validate()?;
    for d in dump_after {
        if !cfg.passes.iter().any(|p| p == d) {
            return Err(StageError {
                stage: "config",
                source: PipelineError::Other(format!("dump pass `{d}` is not in the pass list")),
            });
        }
    }
    let mut module = parse_module(src).map_err(staged("parse"))?;
    let mut out = Artifacts { module: module.clone(), exe: None, mem: None, copies: None, dumps: Vec::new() };
    let dump = |pass: &str, text: String, dumps: &mut Vec<(String, String)>| {
        if dump_after.contains(&pass) {
            dumps.push((pass.to_string(), text));
        }
    };
    dump("parse", print_module(&module), &mut out.dumps);

    for pass in cfg.passes.iter().map(String::as_str) {
        match pass {
            "parse" => {}
            "infer_types" => {
                if module.stage == Stage::Frontend {
                    infer_types(&mut module).map_err(staged(pass_name(pass)))?;
                }
            }
            "refine_and_unify_dims" => {
                if module.stage == Stage::Frontend {
                    refine_and_unify_dims(&mut module).map_err(staged(pass_name(pass)))?;
                }
            }
            "fuse_pass" => {
                if matches!(module.stage, Stage::Frontend | Stage::Typed) {
                    module = fuse_pass(&module);
                }
            }
            "manifest_alloc" => {
                module = manifest_alloc(&module, cfg.align).map_err(staged(pass_name(pass)))?;
            }
            "insert_kills" => module = insert_kills(&module),
            "coalesce_storage" => {
                module = coalesce_storage(&module);
                out.mem = Some(mem_report(&module));
            }
            "analyze_placement" => {
                analyze_placement(&module, cfg.target).map_err(staged(pass_name(pass)))?;
            }
            "insert_device_copies" => {
                module =
                    insert_device_copies(&module, cfg.target).map_err(staged(pass_name(pass)))?;
                out.copies = Some(copy_report(&module));
            }
            "compile" => {
                let overrides = kernel_overrides(&module, cfg).map_err(staged("compile"))?;
                let exe =
                    compile_to_executable(&module, &overrides).map_err(staged("compile"))?;
                dump("compile", disasm(&exe), &mut out.dumps);
                out.exe = Some(exe);
            }
            other => unreachable!("validated pass `{other}`"),
        }
        if pass != "compile" {
            dump(pass, print_module(&module), &mut out.dumps);
        }
    }
    out.module = module;
    Ok(out)
}

/// Interns arbitrary `&str` pass names to the static table entries so errors
/// can borrow them.
fn pass_name(name: &str) -> &'static str {
    PASSES.iter().find(|p| **p == name).copied().unwrap_or("pass")
}

pub fn run_pipeline(src: &str, cfg: &PipelineConfig) -> Result<Artifacts, StageError> {
    run_pipeline_dumps(src, cfg, &[])
}

/// key=value lines for a memory report.
pub fn mem_report_lines(r: &MemReport) -> String {
    format!(
        "static_blocks={}\nstatic_bytes={}\ndynamic_blocks={}\npeak_live_bytes={}\n",
        r.static_blocks, r.static_bytes, r.dynamic_blocks, r.peak_live_bytes
    )
}

/// key=value lines for a copy report.
pub fn copy_report_lines(r: &CopyReport) -> String {
    let mut s = format!("copies={}\n", r.copies);
    for (src, dst, n) in &r.pairs {
        s.push_str(&format!("copies.{src}.{dst}={n}\n"));
    }
    s
}

// --- dispatch-backed kernels -------------------------------------------------

/// Hit log for a dispatch primitive: one (extent, selection) row per call.
pub type DispatchHits = Arc<Mutex<Vec<(i64, Selected)>>>;

fn dim_token(d: Dim) -> String {
    match d {
        Dim::Static(n) => n.to_string(),
        Dim::Any => "*".to_string(),
    }
}

fn parse_dim(tok: &str) -> Option<Dim> {
    if tok == "*" {
        return Some(Dim::Any);
    }
    tok.parse::<u64>().ok().filter(|n| *n > 0).map(Dim::Static)
}

fn sig_encode(inputs: &[TensorType]) -> String {
    inputs
        .iter()
        .map(|t| {
            let dims: Vec<String> = t.dims.iter().map(|d| dim_token(*d)).collect();
            format!("({})@{}", dims.join(","), t.dtype)
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn sig_decode(s: &str) -> Option<Vec<TensorType>> {
    let mut out = Vec::new();
    for part in s.split(';') {
        let rest = part.strip_prefix('(')?;
        let (dims, dt) = rest.split_once(')')?;
        let dims: Vec<Dim> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',').map(parse_dim).collect::<Option<_>>()?
        };
        let dtype = match dt {
            "@f32" => DType::F32,
            "@i64" => DType::I64,
            _ => return None,
        };
        out.push(TensorType::new(dims, dtype).ok()?);
    }
    Some(out)
}

/// Canonical primitive name for a dispatch-backed kernel. The name carries
/// everything needed to rebuild the table at load time, so a `.nexe` using
/// dispatch kernels stays self-describing.
pub fn dispatch_prim_name(op: &str, inputs: &[TensorType], tile: u32, count: u32) -> String {
    format!("dispatch:{op}?c={count}&sig={}&t={tile}", sig_encode(inputs))
}

/// Inverse of [`dispatch_prim_name`]; `None` when the name is not a
/// dispatch primitive.
pub fn parse_dispatch_name(name: &str) -> Option<(String, Vec<TensorType>, u32, u32)> {
    let body = name.strip_prefix("dispatch:")?;
    let (op, attrs) = body.split_once('?')?;
    let mut tile = None;
    let mut count = None;
    let mut sig = None;
    for pair in attrs.split('&') {
        let (k, v) = pair.split_once('=')?;
        match k {
            "t" => tile = v.parse().ok(),
            "c" => count = v.parse().ok(),
            "sig" => sig = sig_decode(v),
            _ => return None,
        }
    }
    Some((op.to_string(), sig?, tile?, count?))
}

fn axis_extents(body: &[KStmt], out: &mut Vec<crate::codegen::affine::AExpr>) {
    for s in body {
        match s {
            KStmt::Loop { upper, body, .. } => {
                out.push(upper.clone());
                axis_extents(body, out);
            }
            KStmt::Guard { body, .. } => axis_extents(body, out),
            KStmt::Store { .. } => {}
        }
    }
}

/// Lowers `op`, tiles the axis that runs over its single symbolic dim, and
/// builds the residue dispatch table.
pub fn build_op_dispatch(
    op: &str,
    inputs: &[TensorType],
    tile: u32,
    count: u32,
) -> Result<(String, Dispatch), CodegenError> {
    let kir = lower_to_kernel(op, inputs)?;
    let mut syms = kir.sym_dims();
    syms.dedup();
    let [sym] = syms.as_slice() else {
        return Err(CodegenError::BadSignature {
            op: op.to_string(),
            msg: format!("dispatch needs exactly one symbolic dim, found {}", syms.len()),
        });
    };
    let sym = sym.clone();
    let mut extents = Vec::new();
    axis_extents(&kir.body, &mut extents);
    let axis = extents
        .iter()
        .position(|e| *e == crate::codegen::affine::var(&sym))
        .ok_or_else(|| CodegenError::BadSignature {
            op: op.to_string(),
            msg: format!("no loop axis runs over `{sym}`"),
        })?;
    let mut sched = Schedule::identity(kir.n_axes);
    sched.tiles[axis] = tile;
    let tiled = apply_schedule(&kir, &sched)?;
    let table = specialize_residues(&tiled, &sym, tile, count)?;
    Ok((sym, build_dispatch(table)?))
}

fn to_kbuf(lit: &TensorLiteral) -> KernelBuf {
    let dims: Vec<i64> = lit.shape.iter().map(|d| *d as i64).collect();
    let data = match &lit.data {
        ScalarData::F32(v) => KData::F32(v.clone()),
        ScalarData::I64(v) => KData::I64(v.clone()),
    };
    KernelBuf { dims, data }
}

fn from_kbuf(buf: KernelBuf, shape: &[usize]) -> Result<TensorLiteral, VmError> {
    let data = match buf.data {
        KData::F32(v) => ScalarData::F32(v),
        KData::I64(v) => ScalarData::I64(v),
    };
    if data.len() != shape.iter().product::<usize>() {
        return Err(VmError::Primitive(
            "dispatch".into(),
            format!("kernel produced {} elements for shape {shape:?}", data.len()),
        ));
    }
    Ok(TensorLiteral { shape: shape.to_vec(), data })
}

/// Wraps a dispatch table as a VM primitive. The callable reads the runtime
/// extent out of the first input dim that was symbolic in the declared
/// signature, sizes the outputs from the destination shapes the VM passes
/// in, and logs every selection.
pub fn dispatch_prim(
    op: &str,
    inputs: &[TensorType],
    tile: u32,
    count: u32,
) -> Result<(String, PrimFn, DispatchHits), CodegenError> {
    let name = dispatch_prim_name(op, inputs, tile, count);
    let (_sym, disp) = build_op_dispatch(op, inputs, tile, count)?;
    let sym_at = inputs
        .iter()
        .enumerate()
        .find_map(|(i, t)| t.dims.iter().position(|d| *d == Dim::Any).map(|j| (i, j)))
        .ok_or_else(|| CodegenError::BadSignature {
            op: op.to_string(),
            msg: "no symbolic input dim".into(),
        })?;
    let hits: DispatchHits = Arc::new(Mutex::new(Vec::new()));
    let log = hits.clone();
    let n_in = inputs.len();
    let pname = name.clone();
    let f: PrimFn = Arc::new(move |ins: &[TensorLiteral], outs: &[Vec<usize>]| {
        if ins.len() != n_in {
            return Err(VmError::BadArgCount { expected: n_in, got: ins.len() });
        }
        let extent = *ins[sym_at.0].shape.get(sym_at.1).ok_or_else(|| {
            VmError::Primitive(pname.clone(), "symbolic dim missing at runtime".into())
        })? as i64;
        let mut bufs: Vec<KernelBuf> = ins.iter().map(to_kbuf).collect();
        for shape in outs {
            let dims: Vec<i64> = shape.iter().map(|d| *d as i64).collect();
            let dtype = match disp.table.fallback.buffers[bufs.len()].dtype {
                DType::F32 => DType::F32,
                DType::I64 => DType::I64,
            };
            bufs.push(KernelBuf::zeros(dtype, &dims));
        }
        let (sel, _stats) = disp
            .run(extent, &mut bufs)
            .map_err(|e| VmError::Primitive(pname.clone(), e.to_string()))?;
        log.lock().unwrap().push((extent, sel));
        let mut results = Vec::with_capacity(outs.len());
        for (buf, shape) in bufs.drain(..).skip(n_in).zip(outs) {
            results.push(from_kbuf(buf, shape)?);
        }
        Ok(results)
    });
    Ok((name, f, hits))
}

/// Builds compile-time overrides routing `cfg.kernel_ops` to dispatch
/// primitives, using each op's input types as written in the module.
fn kernel_overrides(m: &Module, cfg: &PipelineConfig) -> Result<PrimOverrides, PipelineError> {
    let mut out = PrimOverrides::new();
    for op in &cfg.kernel_ops {
        let inputs = op_input_types(m, op).ok_or_else(|| {
            PipelineError::Other(format!("no invocation of `{op}` found for kernel routing"))
        })?;
        build_op_dispatch(op, &inputs, cfg.tile, cfg.dispatch)?;
        out.insert(op.clone(), dispatch_prim_name(op, &inputs, cfg.tile, cfg.dispatch));
    }
    Ok(out)
}

/// Input types of the first `invoke_mut(op, ...)` in the module, read from
/// the declared parameter/binding types.
fn op_input_types(m: &Module, op: &str) -> Option<Vec<TensorType>> {
    use crate::ir::expr::Expr;
    fn types_of(m: &Module, e: &crate::ir::expr::Expr, env: &mut Vec<(String, TensorType)>, op: &str) -> Option<Vec<TensorType>> {
        match e {
            Expr::Let { name, value, body, .. } => {
                if let Some(t) = types_of(m, value, env, op) {
                    return Some(t);
                }
                if let Expr::AllocTensor { shape, dtype, .. } = value.as_ref() {
                    if let crate::ir::expr::ShapeArg::Imm(dims) = shape {
                        let dims = dims.iter().map(|d| Dim::Static(*d)).collect();
                        if let Ok(t) = TensorType::new(dims, *dtype) {
                            env.push((name.clone(), t));
                        }
                    }
                }
                types_of(m, body, env, op)
            }
            Expr::InvokeMut { op: o, inputs, .. } if o == op => {
                let mut out = Vec::new();
                for i in inputs {
                    let Expr::Var(x) = i else { return None };
                    let t = env.iter().rev().find(|(n, _)| n == x)?.1.clone();
                    out.push(t);
                }
                Some(out)
            }
            _ => {
                for c in e.children() {
                    if let Some(t) = types_of(m, c, env, op) {
                        return Some(t);
                    }
                }
                None
            }
        }
    }
    for f in m.functions.values() {
        let mut env: Vec<(String, TensorType)> = f
            .params
            .iter()
            .filter_map(|p| match &p.ty {
                crate::ir::types::Type::Tensor(t) => Some((p.name.clone(), t.clone())),
                _ => None,
            })
            .collect();
        if let Some(t) = types_of(m, &f.body, &mut env, op) {
            return Some(t);
        }
    }
    None
}

/// Registers every `dispatch:` primitive an executable references, so a
/// `.nexe` compiled with kernel routing loads without its source module.
pub fn register_dispatch_prims(reg: &mut Registry, exe: &Executable) -> Result<(), PipelineError> {
    for p in &exe.primitives {
        if !p.name.starts_with("dispatch:") {
            continue;
        }
        let (op, inputs, tile, count) = parse_dispatch_name(&p.name).ok_or_else(|| {
            PipelineError::Other(format!("malformed dispatch primitive `{}`", p.name))
        })?;
        let (_name, f, _hits) = dispatch_prim(&op, &inputs, tile, count)?;
        reg.register_primitive(&p.name, p.arity, p.outputs, f)?;
    }
    Ok(())
}

/// One row of the bench table: costs of running `op` at a concrete extent.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub extent: i64,
    pub residue: u32,
    pub selected: String,
    /// Guards remaining in the selected kernel text.
    pub static_guards: usize,
    pub stats: ExecStats,
}

/// Runs the dispatch-backed kernel for `op` across `extents` with zeroed
/// buffers and reports executed statements and guard evaluations per shape.
pub fn bench_op(
    op: &str,
    inputs: &[TensorType],
    tile: u32,
    count: u32,
    extents: &[i64],
) -> Result<Vec<BenchRow>, CodegenError> {
    let (sym, disp) = build_op_dispatch(op, inputs, tile, count)?;
    let mut rows = Vec::new();
    for &x in extents {
        let env: HashMap<String, i64> = [(sym.clone(), x)].into();
        let mut bufs = crate::codegen::alloc_buffers(&disp.table.fallback, &env)
            .map_err(|e| CodegenError::Exec(e.to_string()))?;
        let (sel, stats) = disp.run(x, &mut bufs)?;
        let residue = x.rem_euclid(tile as i64) as u32;
        let (selected, static_guards) = match sel {
            Selected::Variant(r) => ("variant".to_string(), {
                count_boundary_checks(&disp.table.variants[&r])
            }),
            Selected::Fallback => ("fallback".to_string(), count_boundary_checks(&disp.table.fallback)),
            Selected::External(ref n) => (format!("external:{n}"), 0),
        };
        rows.push(BenchRow { extent: x, residue, selected, static_guards, stats });
    }
    Ok(rows)
}

/// key=value lines for the bench table, one block per extent.
pub fn bench_lines(op: &str, tile: u32, count: u32, rows: &[BenchRow]) -> String {
    let mut s = format!("op={op}\ntile={tile}\ndispatch={count}\n");
    for r in rows {
        s.push_str(&format!(
            "x={} residue={} selected={} static_guards={} statements={} guard_evals={}\n",
            r.extent, r.residue, r.selected, r.static_guards, r.stats.statements, r.stats.guard_evals
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::eval::{eval_ref, pure_close, PureValue};
    use crate::vm::Vm;

    fn f32s(v: Vec<f32>) -> TensorLiteral {
        TensorLiteral { shape: vec![v.len()], data: ScalarData::F32(v) }
    }

    fn run_exe(exe: &Executable, reg: &Registry, args: &[TensorLiteral]) -> PureValue {
        let mut vm = Vm::new(exe, reg).unwrap();
        let vargs = args.iter().map(|l| vm.literal_arg(l)).collect();
        let out = vm.run_main(vargs).unwrap();
        let pure = vm.to_pure(&out).unwrap();
        vm.release(&out);
        assert_eq!(vm.live_bytes(), 0);
        pure
    }

    #[test]
    fn pipeline_smoke_add_program_runs() {
        let src = "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
                   add(a, b)\n\
                   }";
        let art = run_pipeline(src, &PipelineConfig::default()).unwrap();
        let exe = art.exe.unwrap();
        let a = f32s(vec![1.0, 2.0, 3.0, 4.0]);
        let b = f32s(vec![4.0, 3.0, 2.0, 1.0]);
        let want = eval_ref(&parse_module(src).unwrap(), &[a.clone(), b.clone()]).unwrap();
        let got = run_exe(&exe, &Registry::new(), &[a, b]);
        assert!(pure_close(&want, &got, 0.0));
        assert!(art.mem.is_some() && art.copies.is_some());
    }

    #[test]
    fn dumps_show_the_module_after_the_named_pass() {
        let src = "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
                   add(a, b)\n\
                   }";
        let art = run_pipeline_dumps(src, &PipelineConfig::default(), &["manifest_alloc", "compile"])
            .unwrap();
        assert_eq!(art.dumps.len(), 2);
        assert_eq!(art.dumps[0].0, "manifest_alloc");
        assert!(art.dumps[0].1.contains("alloc_storage"), "{}", art.dumps[0].1);
        assert!(art.dumps[1].1.contains("InvokePacked"), "{}", art.dumps[1].1);
    }

    #[test]
    fn config_ranges_are_enforced() {
        let base = PipelineConfig::default();
        for (patch, what) in [
            (PipelineConfig { tile: 0, ..base.clone() }, "tile"),
            (PipelineConfig { dispatch: 9, ..base.clone() }, "dispatch"),
            (PipelineConfig { dispatch: 0, ..base.clone() }, "dispatch"),
            (PipelineConfig { align: 3, ..base.clone() }, "align"),
            (PipelineConfig { tune_k: 0, ..base.clone() }, "k"),
            (
                PipelineConfig { passes: vec!["compile".into(), "parse".into()], ..base.clone() },
                "order",
            ),
            (PipelineConfig { passes: vec!["nosuch".into()], ..base.clone() }, "unknown"),
            (PipelineConfig { passes: vec!["compile".into()], ..base.clone() }, "placement"),
        ] {
            let err = patch.validate().unwrap_err();
            assert_eq!(err.stage, "config", "{what}: {err}");
        }
    }

    #[test]
    fn errors_carry_the_failing_pass_name() {
        let err = run_pipeline("fn main(", &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.stage, "parse");
        let err = run_pipeline(
            "fn main(a: Tensor<(2), f32>) -> Tensor<(2), f32> { add(a, missing) }",
            &PipelineConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.stage, "infer_types");
    }

    #[test]
    fn dense_routes_through_the_residue_dispatch_table() {
        let src = "fn main(a: Tensor<(?, 4), f32>, w: Tensor<(4, 3), f32>) -> Tensor<(?, 3), f32> {\n\
                   dense(a, w)\n\
                   }";
        let cfg = PipelineConfig { kernel_ops: vec!["dense".into()], ..Default::default() };
        let art = run_pipeline(src, &cfg).unwrap();
        let exe = art.exe.unwrap();
        let dname = exe
            .primitives
            .iter()
            .find(|p| p.name.starts_with("dispatch:dense"))
            .expect("dense must be rerouted")
            .name
            .clone();

        let (op, inputs, tile, count) = parse_dispatch_name(&dname).unwrap();
        assert_eq!((op.as_str(), tile, count), ("dense", 8, 8));
        let (name, f, hits) = dispatch_prim(&op, &inputs, tile, count).unwrap();
        assert_eq!(name, dname);
        let mut reg = Registry::new();
        reg.register_primitive(&name, 2, 1, f).unwrap();

        let a = TensorLiteral {
            shape: vec![5, 4],
            data: ScalarData::F32((0..20).map(|i| i as f32 * 0.25).collect()),
        };
        let w = TensorLiteral {
            shape: vec![4, 3],
            data: ScalarData::F32((0..12).map(|i| 1.0 - i as f32 * 0.125).collect()),
        };
        let want = eval_ref(&parse_module(src).unwrap(), &[a.clone(), w.clone()]).unwrap();
        let got = run_exe(&exe, &reg, &[a, w]);
        assert!(pure_close(&want, &got, 1e-5));
        let log = hits.lock().unwrap();
        assert_eq!(log.as_slice(), &[(5, Selected::Variant(5))], "13 mod 8 selects residue 5");
    }

    #[test]
    fn dispatch_prims_rebuild_from_their_names_alone() {
        let src = "fn main(a: Tensor<(?), f32>, b: Tensor<(?), f32>) -> Tensor<(?), f32> {\n\
                   add(a, b)\n\
                   }";
        let cfg = PipelineConfig {
            kernel_ops: vec!["add".into()],
            dispatch: 4,
            ..Default::default()
        };
        let art = run_pipeline(src, &cfg).unwrap();
        let exe = art.exe.unwrap();
        let mut reg = Registry::new();
        register_dispatch_prims(&mut reg, &exe).unwrap();
        let a = f32s(vec![1.0; 13]);
        let b = f32s(vec![2.5; 13]);
        let want = eval_ref(&parse_module(src).unwrap(), &[a.clone(), b.clone()]).unwrap();
        let got = run_exe(&exe, &reg, &[a, b]);
        assert!(pure_close(&want, &got, 0.0));
    }

    #[test]
    fn bench_rows_expose_guard_elimination() {
        let t = TensorType::new(vec![Dim::Any], DType::F32).unwrap();
        let rows = bench_op("add", &[t.clone(), t], 8, 8, &[8, 13, 64]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].residue, 0);
        assert_eq!(rows[0].static_guards, 0, "residue-0 variant keeps no guards");
        assert_eq!(rows[0].stats.guard_evals, 0);
        assert_eq!(rows[0].stats.statements, 8);
        assert_eq!(rows[1].selected, "variant");
        assert_eq!(rows[2].stats.statements, 64);
        let text = bench_lines("add", 8, 8, &rows);
        assert!(text.contains("x=13 residue=5"), "{text}");
    }
}
