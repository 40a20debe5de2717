//! Loop tiling with boundary guards, a prover-backed guard simplifier, and
//! residue specialization of one symbolic axis.

use std::collections::BTreeMap;

use crate::error::CodegenError;

use super::affine::{add, ceildiv, cnst, mul, prove_le, prove_lt, simplify, var, AExpr, VarRange};
use super::kernel::{KExpr, KStmt, KernelIR, Schedule, TiledAxis};

fn subst_expr(e: &KExpr, name: &str, with: &AExpr) -> KExpr {
    match e {
        KExpr::Load { buf, index } => KExpr::Load { buf: *buf, index: index.subst(name, with) },
        KExpr::Imm(_) | KExpr::ImmF(_) => e.clone(),
        KExpr::Idx(a) => KExpr::Idx(a.subst(name, with)),
        KExpr::Bin { op, a, b } => KExpr::Bin {
            op: *op,
            a: Box::new(subst_expr(a, name, with)),
            b: Box::new(subst_expr(b, name, with)),
        },
    }
}

fn subst_stmts(stmts: &[KStmt], name: &str, with: &AExpr) -> Vec<KStmt> {
    stmts
        .iter()
        .map(|s| match s {
            KStmt::Loop { var, upper, body } => KStmt::Loop {
                var: var.clone(),
                upper: upper.subst(name, with),
                body: subst_stmts(body, name, with),
            },
            KStmt::Guard { lhs, rhs, body } => KStmt::Guard {
                lhs: lhs.subst(name, with),
                rhs: rhs.subst(name, with),
                body: subst_stmts(body, name, with),
            },
            KStmt::Store { buf, index, value } => KStmt::Store {
                buf: *buf,
                index: index.subst(name, with),
                value: subst_expr(value, name, with),
            },
        })
        .collect()
}

/// Substitutes a symbolic dim everywhere: buffer dims, loop bounds, guards,
/// indices, and recorded tiled extents.
pub fn subst_kernel(k: &KernelIR, name: &str, with: &AExpr) -> KernelIR {
    let mut out = k.clone();
    for b in &mut out.buffers {
        for d in &mut b.dims {
            *d = d.subst(name, with);
        }
    }
    out.body = subst_stmts(&k.body, name, with);
    for t in &mut out.tiled {
        t.extent = t.extent.subst(name, with);
    }
    out.sym_lb.remove(name);
    out
}

/// Splits each axis with tile factor above one into an outer/inner pair with
/// a boundary guard; unrolled axes inline the inner loop. Errors when the
/// kernel is already scheduled or the schedule arity differs from `n_axes`.
pub fn apply_schedule(k: &KernelIR, sched: &Schedule) -> Result<KernelIR, CodegenError> {
    if k.schedule.is_some() {
        return Err(CodegenError::BadSignature {
            op: k.name.clone(),
            msg: "kernel is already scheduled".into(),
        });
    }
    if sched.tiles.len() != k.n_axes || sched.unroll.len() != k.n_axes {
        return Err(CodegenError::BadSignature {
            op: k.name.clone(),
            msg: format!("schedule covers {} axes, kernel has {}", sched.tiles.len(), k.n_axes),
        });
    }
    let mut tiled = Vec::new();
    let mut axis = 0usize;
    let body = tile_block(&k.body, sched, &mut axis, &mut tiled);
    debug_assert_eq!(axis, k.n_axes);
    let mut out = k.clone();
    out.body = body;
    out.schedule = Some(sched.clone());
    out.tiled = tiled;
    Ok(out)
}

fn tile_block(
    stmts: &[KStmt],
    sched: &Schedule,
    axis: &mut usize,
    tiled: &mut Vec<TiledAxis>,
) -> Vec<KStmt> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            KStmt::Loop { var: v, upper, body } => {
                let my = *axis;
                *axis += 1;
                let body = tile_block(body, sched, axis, tiled);
                let t = sched.tiles[my];
                let unrolled = sched.unroll[my];
                if t <= 1 {
                    out.push(KStmt::Loop { var: v.clone(), upper: upper.clone(), body });
                    continue;
                }
                let outer = format!("{v}o");
                let inner = format!("{v}i");
                let guarded = |idx: AExpr, body: &[KStmt]| KStmt::Guard {
                    lhs: idx.clone(),
                    rhs: upper.clone(),
                    body: subst_stmts(body, v, &idx),
                };
                let base = mul(var(&outer), cnst(t as i64));
                let outer_body = if unrolled {
                    (0..t as i64).map(|c| guarded(add(base.clone(), cnst(c)), &body)).collect()
                } else {
                    vec![KStmt::Loop {
                        var: inner.clone(),
                        upper: cnst(t as i64),
                        body: vec![guarded(add(base.clone(), var(&inner)), &body)],
                    }]
                };
                tiled.push(TiledAxis {
                    axis: my,
                    outer: outer.clone(),
                    inner,
                    tile: t,
                    extent: upper.clone(),
                    unrolled,
                });
                out.push(KStmt::Loop {
                    var: outer,
                    upper: ceildiv(upper.clone(), t as i64),
                    body: outer_body,
                });
            }
            KStmt::Guard { lhs, rhs, body } => out.push(KStmt::Guard {
                lhs: lhs.clone(),
                rhs: rhs.clone(),
                body: tile_block(body, sched, axis, tiled),
            }),
            KStmt::Store { .. } => out.push(s.clone()),
        }
    }
    out
}

/// Removes boundary checks the prover can discharge: always-true guards are
/// spliced into their parent, never-true guards are dropped with their body,
/// and loops with a provably non-positive trip count are dropped. The guard
/// count never increases and untiled kernels come back unchanged.
pub fn simplify_bounds(k: &KernelIR) -> KernelIR {
    let mut out = k.clone();
    let mut loops = Vec::new();
    out.body = simp_block(&k.body, &mut loops, &k.sym_lb);
    out
}

fn simp_block(
    stmts: &[KStmt],
    loops: &mut Vec<VarRange>,
    sym_lb: &BTreeMap<String, i64>,
) -> Vec<KStmt> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            KStmt::Loop { var, upper, body } => {
                if prove_le(upper, &cnst(0), loops, sym_lb) {
                    continue;
                }
                loops.push(VarRange { name: var.clone(), upper: upper.clone() });
                let body = simp_block(body, loops, sym_lb);
                loops.pop();
                out.push(KStmt::Loop { var: var.clone(), upper: upper.clone(), body });
            }
            KStmt::Guard { lhs, rhs, body } => {
                if prove_lt(lhs, rhs, loops, sym_lb) {
                    out.extend(simp_block(body, loops, sym_lb));
                } else if prove_le(rhs, lhs, loops, sym_lb) {
                    continue;
                } else {
                    out.push(KStmt::Guard {
                        lhs: lhs.clone(),
                        rhs: rhs.clone(),
                        body: simp_block(body, loops, sym_lb),
                    });
                }
            }
            KStmt::Store { .. } => out.push(s.clone()),
        }
    }
    out
}

/// A residue-indexed family of kernels for one symbolic axis: `variants[r]`
/// handles extents with `extent % tile == r`, everything else falls back to
/// the guarded symbolic kernel.
#[derive(Debug, Clone)]
pub struct DispatchTable {
    pub sym: String,
    pub tile: u32,
    pub variants: BTreeMap<u32, KernelIR>,
    pub fallback: KernelIR,
}

/// Builds `count` residue variants (residues 0..count-1) of a scheduled
/// kernel whose axis over `sym` is tiled by `tile`. Variant r is the kernel
/// with `sym := tile*k + r`; its loops are restructured into a full-tile part
/// and a tail so the simplifier can discharge every boundary check, which
/// leaves the outputs bit-identical to the substituted kernel.
pub fn specialize_residues(
    k: &KernelIR,
    sym: &str,
    tile: u32,
    count: u32,
) -> Result<DispatchTable, CodegenError> {
    let axis = k
        .tiled
        .iter()
        .find(|t| t.extent == AExpr::Var(sym.to_string()))
        .ok_or_else(|| CodegenError::BadSignature {
            op: k.name.clone(),
            msg: format!("no tiled axis has extent `{sym}`"),
        })?
        .clone();
    if axis.tile != tile {
        return Err(CodegenError::TileMismatch { expected: tile, got: axis.tile });
    }
    if count < 1 || count > tile {
        return Err(CodegenError::BadSignature {
            op: k.name.clone(),
            msg: format!("variant count {count} must be in 1..={tile}"),
        });
    }
    let fallback = simplify_bounds(k);
    let mut variants = BTreeMap::new();
    for r in 0..count {
        variants.insert(r, residue_variant(k, &axis, sym, tile, r));
    }
    Ok(DispatchTable { sym: sym.to_string(), tile, variants, fallback })
}

fn residue_variant(k: &KernelIR, axis: &TiledAxis, sym: &str, tile: u32, r: u32) -> KernelIR {
    let ext = simplify(&add(mul(cnst(tile as i64), var("k")), cnst(r as i64)));
    let mut v = subst_kernel(k, sym, &ext);
    v.name = format!("{}_r{r}", k.name);
    v.body = split_tail(&v.body, axis, r as i64);
    v.sym_lb.insert("k".into(), if r == 0 { 1 } else { 0 });
    simplify_bounds(&v)
}

/// Rewrites the tiled loop over `axis` so the outer loop runs exactly `k`
/// full tiles and, for a nonzero residue, a copy of its body with the outer
/// var pinned to `k` and the inner extent shrunk to `r` handles the tail.
/// Iterations dropped from the tail are exactly those whose boundary check
/// fails, so the statements executed are unchanged.
fn split_tail(stmts: &[KStmt], axis: &TiledAxis, r: i64) -> Vec<KStmt> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            KStmt::Loop { var: v, upper, body } => {
                if *v == axis.outer {
                    out.push(KStmt::Loop {
                        var: v.clone(),
                        upper: var("k"),
                        body: body.clone(),
                    });
                    if r > 0 {
                        let tail = subst_stmts(body, &axis.outer, &var("k"));
                        out.extend(shrink_inner(&tail, axis, r));
                    }
                } else {
                    out.push(KStmt::Loop {
                        var: v.clone(),
                        upper: upper.clone(),
                        body: split_tail(body, axis, r),
                    });
                }
            }
            KStmt::Guard { lhs, rhs, body } => out.push(KStmt::Guard {
                lhs: lhs.clone(),
                rhs: rhs.clone(),
                body: split_tail(body, axis, r),
            }),
            KStmt::Store { .. } => out.push(s.clone()),
        }
    }
    out
}

fn shrink_inner(stmts: &[KStmt], axis: &TiledAxis, r: i64) -> Vec<KStmt> {
    if axis.unrolled {
        // unrolled instances carry per-instance guards; the simplifier drops
        // the dead ones past the residue
        return stmts.to_vec();
    }
    stmts
        .iter()
        .map(|s| match s {
            KStmt::Loop { var, upper, body } => {
                if *var == axis.inner {
                    KStmt::Loop { var: var.clone(), upper: cnst(r), body: body.clone() }
                } else {
                    KStmt::Loop {
                        var: var.clone(),
                        upper: upper.clone(),
                        body: shrink_inner(body, axis, r),
                    }
                }
            }
            KStmt::Guard { lhs, rhs, body } => KStmt::Guard {
                lhs: lhs.clone(),
                rhs: rhs.clone(),
                body: shrink_inner(body, axis, r),
            },
            other => other.clone(),
        })
        .collect()
}
