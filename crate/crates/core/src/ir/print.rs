//! Canonical text form of a module.
//!
//! Printing is deterministic and parses back to the same module. Calls and
//! tuples put a space after commas; the explicit allocation forms
//! (`alloc_storage`, `alloc_tensor`) do not. Statement-position values bound
//! to `_` print bare: `invoke_mut(add, (t1, t2), (out1));`.

use crate::ir::expr::{
    AdtDef, Attrs, CompositeArg, CompositeDef, Expr, FnDef, Module, ScalarData,
    ShapeArg, TensorLiteral,
};
use crate::ir::types::Device;
use std::fmt::Write;

pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "// stage: {}", m.stage);
    for adt in m.adts.values() {
        out.push('\n');
        print_adt(&mut out, adt);
    }
    for (name, def) in &m.composites {
        out.push('\n');
        print_composite(&mut out, name, def);
    }
    for f in m.functions.values() {
        out.push('\n');
        print_fn(&mut out, f);
    }
    out
}

/// One-expression form used in diagnostics and tests.
pub fn print_expr(e: &Expr) -> String {
    expr_str(e, 0)
}

fn print_adt(out: &mut String, adt: &AdtDef) {
    let fields: Vec<String> = adt.fields.iter().map(|t| t.to_string()).collect();
    let _ = writeln!(out, "data {}({});", adt.name, fields.join(", "));
}

fn print_composite(out: &mut String, name: &str, def: &CompositeDef) {
    let inputs: Vec<String> = (0..def.n_inputs).map(|i| format!("x{i}")).collect();
    let _ = writeln!(out, "composite {name}({}) {{", inputs.join(", "));
    for (i, member) in def.members.iter().enumerate() {
        let args: Vec<String> = member
            .args
            .iter()
            .map(|a| match a {
                CompositeArg::Input(k) => format!("x{k}"),
                CompositeArg::Member(k) => format!("t{k}"),
            })
            .collect();
        let call = format!("{}({})", member.op, join_args(&args, &member.attrs));
        if i + 1 == def.members.len() {
            let _ = writeln!(out, "  {call}");
        } else {
            let _ = writeln!(out, "  let t{i} = {call};");
        }
    }
    out.push_str("}\n");
}

fn print_fn(out: &mut String, f: &FnDef) {
    let params: Vec<String> = f.params.iter().map(|p| format!("{}: {}", p.name, p.ty)).collect();
    let _ = writeln!(out, "fn {}({}) -> {} {{", f.name, params.join(", "), f.ret);
    print_body(out, &f.body, 1);
    out.push_str("}\n");
}

fn indent(n: usize) -> String {
    "  ".repeat(n)
}

/// Prints a let chain as one statement per line with the chain result last.
fn print_body(out: &mut String, e: &Expr, ind: usize) {
    let pad = indent(ind);
    let mut cur = e;
    loop {
        match cur {
            Expr::Let { name, ty, value, body } => {
                let v = expr_str(value, ind);
                if name == "_" && ty.is_none() {
                    let _ = writeln!(out, "{pad}{v};");
                } else {
                    match ty {
                        Some(t) => {
                            let _ = writeln!(out, "{pad}let {name}: {t} = {v};");
                        }
                        None => {
                            let _ = writeln!(out, "{pad}let {name} = {v};");
                        }
                    }
                }
                cur = body;
            }
            _ => {
                let _ = writeln!(out, "{pad}{}", expr_str(cur, ind));
                return;
            }
        }
    }
}

fn join_args(args: &[String], attrs: &Attrs) -> String {
    let mut parts: Vec<String> = args.to_vec();
    for (k, v) in attrs {
        parts.push(format!("{k}={v}"));
    }
    parts.join(", ")
}

fn paren_list(items: &[String]) -> String {
    format!("({})", items.join(", "))
}

fn device_str(d: Option<Device>) -> String {
    match d {
        Some(d) => d.to_string(),
        None => "?".to_string(),
    }
}

fn shape_imm(dims: &[u64]) -> String {
    let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    format!("({})", parts.join(","))
}

/// `size` slots of allocation forms print scalar i64 constants bare.
fn size_str(e: &Expr, ind: usize) -> String {
    match e {
        Expr::Constant(TensorLiteral { shape, data: ScalarData::I64(v) }) if shape.is_empty() => {
            v[0].to_string()
        }
        _ => expr_str(e, ind),
    }
}

/// Renders an expression; block-like forms span lines, with continuation
/// lines indented at `ind` so callers can embed the result directly.
fn expr_str(e: &Expr, ind: usize) -> String {
    match e {
        Expr::Var(name) => name.clone(),
        Expr::Constant(lit) => format!("const({})", literal_str(lit)),
        Expr::Call { op, args, attrs } => {
            let parts: Vec<String> = args.iter().map(|a| expr_str(a, ind)).collect();
            format!("{op}({})", join_args(&parts, attrs))
        }
        Expr::Apply { callee, args } => {
            let parts: Vec<String> = args.iter().map(|a| expr_str(a, ind)).collect();
            let c = match &**callee {
                Expr::Var(name) => name.clone(),
                other => format!("({})", expr_str(other, ind)),
            };
            format!("{c}({})", parts.join(", "))
        }
        Expr::Let { .. } => {
            let mut out = String::new();
            out.push_str("{\n");
            print_body(&mut out, e, ind + 1);
            let _ = write!(out, "{}}}", indent(ind));
            out
        }
        Expr::If { cond, then_body, else_body } => {
            let mut out = String::new();
            let _ = writeln!(out, "if ({}) {{", expr_str(cond, ind));
            print_body(&mut out, then_body, ind + 1);
            let _ = writeln!(out, "{}}} else {{", indent(ind));
            print_body(&mut out, else_body, ind + 1);
            let _ = write!(out, "{}}}", indent(ind));
            out
        }
        Expr::Closure { params, ret, body } => {
            let ps: Vec<String> = params.iter().map(|p| format!("{}: {}", p.name, p.ty)).collect();
            let mut out = String::new();
            let _ = writeln!(out, "fn({}) -> {ret} {{", ps.join(", "));
            print_body(&mut out, body, ind + 1);
            let _ = write!(out, "{}}}", indent(ind));
            out
        }
        Expr::Tuple(elems) => {
            let parts: Vec<String> = elems.iter().map(|x| expr_str(x, ind)).collect();
            if parts.len() == 1 {
                format!("({},)", parts[0])
            } else {
                paren_list(&parts)
            }
        }
        Expr::Proj { tuple, index } => {
            let t = match &**tuple {
                Expr::Var(_) | Expr::Proj { .. } => expr_str(tuple, ind),
                other => format!("({})", expr_str(other, ind)),
            };
            format!("{t}.{index}")
        }
        Expr::Construct { ctor, args } => {
            let parts: Vec<String> = args.iter().map(|a| expr_str(a, ind)).collect();
            format!("{ctor}({})", parts.join(", "))
        }
        Expr::Match { scrutinee, arms } => {
            let mut out = String::new();
            let _ = writeln!(out, "match ({}) {{", expr_str(scrutinee, ind));
            for arm in arms {
                let _ = writeln!(
                    out,
                    "{}{}({}) => {{",
                    indent(ind + 1),
                    arm.ctor,
                    arm.binders.join(", ")
                );
                print_body(&mut out, &arm.body, ind + 2);
                let _ = writeln!(out, "{}}},", indent(ind + 1));
            }
            let _ = write!(out, "{}}}", indent(ind));
            out
        }
        Expr::InvokeMut { op, inputs, outputs, attrs } => {
            let ins: Vec<String> = inputs.iter().map(|x| expr_str(x, ind)).collect();
            let outs: Vec<String> = outputs.iter().map(|x| expr_str(x, ind)).collect();
            let mut parts = vec![op.clone(), paren_list(&ins), paren_list(&outs)];
            for (k, v) in attrs {
                parts.push(format!("{k}={v}"));
            }
            format!("invoke_mut({})", parts.join(", "))
        }
        Expr::AllocStorage { size, align, device } => {
            format!("alloc_storage({},{align},{})", size_str(size, ind), device_str(*device))
        }
        Expr::AllocTensor { storage, offset, shape, dtype } => {
            let sh = match shape {
                ShapeArg::Imm(dims) => shape_imm(dims),
                ShapeArg::Ref(s) => expr_str(s, ind),
            };
            format!("alloc_tensor({},{offset},{sh},{dtype})", expr_str(storage, ind))
        }
        Expr::Kill(x) => format!("kill({})", expr_str(x, ind)),
        Expr::ShapeOf(x) => format!("shape_of({})", expr_str(x, ind)),
        Expr::InvokeShapeFunc { op, inputs, outputs, attrs } => {
            let ins: Vec<String> = inputs.iter().map(|x| expr_str(x, ind)).collect();
            let outs: Vec<String> = outputs.iter().map(|x| expr_str(x, ind)).collect();
            let mut parts = vec![op.clone(), paren_list(&ins), paren_list(&outs)];
            for (k, v) in attrs {
                parts.push(format!("{k}={v}"));
            }
            format!("invoke_shape_func({})", parts.join(", "))
        }
        Expr::DeviceCopy { value, src, dst } => {
            format!("device_copy({}, {src}, {dst})", expr_str(value, ind))
        }
        Expr::ReshapeTensor { tensor, shape } => {
            let sh = match shape {
                ShapeArg::Imm(dims) => shape_imm(dims),
                ShapeArg::Ref(s) => expr_str(s, ind),
            };
            format!("reshape_tensor({}, {sh})", expr_str(tensor, ind))
        }
    }
}

/// Nested-bracket form of a literal; `{:?}` keeps f32 values re-readable.
pub fn literal_str(lit: &TensorLiteral) -> String {
    fn scalar(data: &ScalarData, i: usize) -> String {
        match data {
            ScalarData::F32(v) => format!("{:?}", v[i]),
            ScalarData::I64(v) => v[i].to_string(),
        }
    }
    fn level(shape: &[usize], data: &ScalarData, base: usize) -> String {
        if shape.is_empty() {
            return scalar(data, base);
        }
        let stride: usize = shape[1..].iter().product();
        let parts: Vec<String> =
            (0..shape[0]).map(|i| level(&shape[1..], data, base + i * stride)).collect();
        format!("[{}]", parts.join(", "))
    }
    level(&lit.shape, &lit.data, 0)
}
