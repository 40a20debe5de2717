//! Shape functions and the fusion pass they constrain.
//!
//! Every operator computes output shapes in one of three modes: from input
//! shapes alone, from input values, or as an upper bound that the kernel
//! tightens at runtime. Only shape-oblivious (data-independent) elementwise
//! operators may fuse; a data-dependent or upper-bound operator would need
//! the intermediate value that fusion erases, so it acts as a barrier.

use indexmap::IndexMap;

use crate::error::{EvalError, TypeError};
use crate::ir::expr::{
    CompositeArg, CompositeDef, CompositeMember, Expr, MatchArm, Module, Stage, TensorLiteral,
};
use crate::ops::{self, ShapeInput, ShapeMode};

/// Runtime shape computation for one operator. Data-independent and
/// upper-bound operators never look at `input_values`; data-dependent ones
/// fail without them.
pub fn compute_output_shape(
    op: &str,
    input_shapes: &[Vec<usize>],
    input_values: Option<&[TensorLiteral]>,
    attrs: &crate::ir::expr::Attrs,
) -> Result<Vec<Vec<usize>>, EvalError> {
    let def = ops::lookup(op).ok_or_else(|| EvalError::UnknownOp(op.to_string()))?;
    if def.mode == ShapeMode::DataDependent {
        let values = input_values.ok_or_else(|| {
            EvalError::Other(format!("`{op}` has a data-dependent shape and needs input values"))
        })?;
        if values.len() != input_shapes.len() {
            return Err(EvalError::ArityMismatch(op.to_string()));
        }
        let ins: Vec<ShapeInput<'_>> = values.iter().map(ShapeInput::Value).collect();
        return ops::shape_fn(op, &ins, attrs);
    }
    let ins: Vec<ShapeInput<'_>> = input_shapes.iter().map(|s| ShapeInput::Shape(s)).collect();
    ops::shape_fn(op, &ins, attrs)
}

pub fn mode(op: &str) -> Option<ShapeMode> {
    ops::lookup(op).map(|d| d.mode)
}

/// Whether `consumer` may join a fusion group fed by `producer`. False when
/// either side is data-dependent or upper-bound (the composite's shape
/// function could not be composed from shapes alone), or when either is not
/// elementwise (the simple injective-chain rule).
pub fn can_fuse(producer: &str, consumer: &str) -> Result<bool, TypeError> {
    let p = ops::lookup(producer)
        .ok_or_else(|| TypeError::new(format!("unknown operator `{producer}`")))?;
    let c = ops::lookup(consumer)
        .ok_or_else(|| TypeError::new(format!("unknown operator `{consumer}`")))?;
    Ok(p.mode == ShapeMode::DataIndependent
        && c.mode == ShapeMode::DataIndependent
        && p.elementwise
        && c.elementwise)
}

fn eligible(m: &Module, op: &str) -> bool {
    if m.functions.contains_key(op) || m.composites.contains_key(op) {
        return false;
    }
    matches!(
        ops::lookup(op),
        Some(def) if def.elementwise && def.mode == ShapeMode::DataIndependent && def.lowerable
    )
}

/// Replaces maximal groups of fusable operator calls with composite calls.
/// Single-use intermediate bindings are folded into their consumer first so
/// that let-structured chains fuse like nested ones.
pub fn fuse_pass(m: &Module) -> Module {
    let mut out = Module::new();
    out.adts = m.adts.clone();
    out.stage = Stage::Fused;
    let mut fuser = Fuser { m, comps: IndexMap::new() };
    for (name, f) in &m.functions {
        let mut body = f.body.clone();
        loop {
            let (next, changed) = inline_once(m, body);
            body = next;
            if !changed {
                break;
            }
        }
        let body = fuser.rewrite(&body);
        let mut f = f.clone();
        f.body = body;
        out.functions.insert(name.clone(), f);
    }
    out.composites = fuser.comps;
    out
}

// -- single-use inlining ------------------------------------------------------

/// Occurrences of `name` in `e`: uses in always-evaluated position vs uses
/// guarded by a branch or closure (those block inlining).
fn count_uses(e: &Expr, name: &str, guarded: bool, open: &mut usize, shut: &mut usize) {
    match e {
        Expr::Var(n) => {
            if n == name {
                if guarded {
                    *shut += 1;
                } else {
                    *open += 1;
                }
            }
        }
        Expr::Let { name: n, value, body, .. } => {
            count_uses(value, name, guarded, open, shut);
            if n != name {
                count_uses(body, name, guarded, open, shut);
            }
        }
        Expr::If { cond, then_body, else_body } => {
            count_uses(cond, name, guarded, open, shut);
            count_uses(then_body, name, true, open, shut);
            count_uses(else_body, name, true, open, shut);
        }
        Expr::Match { scrutinee, arms } => {
            count_uses(scrutinee, name, guarded, open, shut);
            for arm in arms {
                if !arm.binders.iter().any(|b| b == name) {
                    count_uses(&arm.body, name, true, open, shut);
                }
            }
        }
        Expr::Closure { params, body, .. } => {
            if !params.iter().any(|p| p.name == name) {
                count_uses(body, name, true, open, shut);
            }
        }
        _ => {
            for c in e.children() {
                count_uses(c, name, guarded, open, shut);
            }
        }
    }
}

/// Substitutes the single unguarded use of `name` with `value`.
fn subst(e: Expr, name: &str, value: &Expr) -> Expr {
    match e {
        Expr::Var(ref n) if n == name => value.clone(),
        Expr::Let { name: n, ty, value: v, body } => {
            let v = Box::new(subst(*v, name, value));
            let body = if n == name { body } else { Box::new(subst(*body, name, value)) };
            Expr::Let { name: n, ty, value: v, body }
        }
        Expr::If { cond, then_body, else_body } => Expr::If {
            cond: Box::new(subst(*cond, name, value)),
            then_body,
            else_body,
        },
        Expr::Match { scrutinee, arms } => Expr::Match {
            scrutinee: Box::new(subst(*scrutinee, name, value)),
            arms,
        },
        Expr::Closure { .. } => e,
        Expr::Call { op, args, attrs } => Expr::Call {
            op,
            args: args.into_iter().map(|a| subst(a, name, value)).collect(),
            attrs,
        },
        Expr::Apply { callee, args } => Expr::Apply {
            callee: Box::new(subst(*callee, name, value)),
            args: args.into_iter().map(|a| subst(a, name, value)).collect(),
        },
        Expr::Tuple(elems) => {
            Expr::Tuple(elems.into_iter().map(|a| subst(a, name, value)).collect())
        }
        Expr::Proj { tuple, index } => {
            Expr::Proj { tuple: Box::new(subst(*tuple, name, value)), index }
        }
        Expr::Construct { ctor, args } => Expr::Construct {
            ctor,
            args: args.into_iter().map(|a| subst(a, name, value)).collect(),
        },
        other => other,
    }
}

/// One pass of single-use inlining over a body; reports whether anything
/// changed. Only un-annotated bindings of fusable calls are folded, and only
/// into always-evaluated positions, so evaluation cannot move into a branch
/// and annotations keep their runtime checks.
fn inline_once(m: &Module, e: Expr) -> (Expr, bool) {
    match e {
        Expr::Let { name, ty: None, value, body } if is_fusable_call(m, &value) => {
            let mut open = 0;
            let mut shut = 0;
            count_uses(&body, &name, false, &mut open, &mut shut);
            if open == 1 && shut == 0 {
                return (subst(*body, &name, &value), true);
            }
            let (body, changed) = inline_once(m, *body);
            let (value, vchanged) = inline_once(m, *value);
            (
                Expr::Let { name, ty: None, value: Box::new(value), body: Box::new(body) },
                changed || vchanged,
            )
        }
        Expr::Let { name, ty, value, body } => {
            let (value, vc) = inline_once(m, *value);
            let (body, bc) = inline_once(m, *body);
            (Expr::Let { name, ty, value: Box::new(value), body: Box::new(body) }, vc || bc)
        }
        Expr::If { cond, then_body, else_body } => {
            let (c, cc) = inline_once(m, *cond);
            let (t, tc) = inline_once(m, *then_body);
            let (f, fc) = inline_once(m, *else_body);
            (
                Expr::If {
                    cond: Box::new(c),
                    then_body: Box::new(t),
                    else_body: Box::new(f),
                },
                cc || tc || fc,
            )
        }
        Expr::Match { scrutinee, arms } => {
            let (s, mut changed) = inline_once(m, *scrutinee);
            let arms = arms
                .into_iter()
                .map(|arm| {
                    let (body, c) = inline_once(m, arm.body);
                    changed |= c;
                    MatchArm { ctor: arm.ctor, binders: arm.binders, body }
                })
                .collect();
            (Expr::Match { scrutinee: Box::new(s), arms }, changed)
        }
        Expr::Closure { params, ret, body } => {
            let (body, c) = inline_once(m, *body);
            (Expr::Closure { params, ret, body: Box::new(body) }, c)
        }
        other => (other, false),
    }
}

fn is_fusable_call(m: &Module, e: &Expr) -> bool {
    matches!(e, Expr::Call { op, .. } if eligible(m, op))
}

// -- grouping ------------------------------------------------------------------

struct Fuser<'m> {
    m: &'m Module,
    comps: IndexMap<String, CompositeDef>,
}

impl Fuser<'_> {
    fn rewrite(&mut self, e: &Expr) -> Expr {
        if let Expr::Call { op, .. } = e {
            if eligible(self.m, op) {
                let mut members = Vec::new();
                let mut inputs: Vec<Expr> = Vec::new();
                self.absorb(e, &mut members, &mut inputs);
                if members.len() >= 2 {
                    let name = self.intern(CompositeDef { n_inputs: inputs.len(), members });
                    return Expr::Call { op: name, args: inputs, attrs: Default::default() };
                }
            }
        }
        self.rewrite_children(e)
    }

    /// Folds an eligible call tree into composite members, collecting outer
    /// arguments as composite inputs. Repeated variable arguments share one
    /// input slot.
    fn absorb(
        &mut self,
        e: &Expr,
        members: &mut Vec<CompositeMember>,
        inputs: &mut Vec<Expr>,
    ) -> CompositeArg {
        if let Expr::Call { op, args, attrs } = e {
            if eligible(self.m, op) {
                let wired: Vec<CompositeArg> =
                    args.iter().map(|a| self.absorb(a, members, inputs)).collect();
                let member =
                    CompositeMember { op: op.clone(), attrs: attrs.clone(), args: wired };
                if let Some(i) = members.iter().position(|m| *m == member) {
                    return CompositeArg::Member(i);
                }
                members.push(member);
                return CompositeArg::Member(members.len() - 1);
            }
        }
        if let Expr::Var(n) = e {
            if let Some(i) = inputs.iter().position(|x| matches!(x, Expr::Var(m) if m == n)) {
                return CompositeArg::Input(i);
            }
        }
        let arg = self.rewrite(e);
        inputs.push(arg);
        CompositeArg::Input(inputs.len() - 1)
    }

    /// Composite names list the member operators; `#k` disambiguates groups
    /// with the same operator sequence but different wiring.
    fn intern(&mut self, def: CompositeDef) -> String {
        let ops: Vec<&str> = def.members.iter().map(|m| m.op.as_str()).collect();
        let base = format!("fused[{}]", ops.join("|"));
        let mut name = base.clone();
        let mut k = 2;
        loop {
            match self.comps.get(&name) {
                None => {
                    self.comps.insert(name.clone(), def);
                    return name;
                }
                Some(existing) if *existing == def => return name,
                Some(_) => {
                    name = format!("{base}#{k}");
                    k += 1;
                }
            }
        }
    }

    fn rewrite_children(&mut self, e: &Expr) -> Expr {
        match e {
            Expr::Var(_) | Expr::Constant(_) => e.clone(),
            Expr::Call { op, args, attrs } => Expr::Call {
                op: op.clone(),
                args: args.iter().map(|a| self.rewrite(a)).collect(),
                attrs: attrs.clone(),
            },
            Expr::Apply { callee, args } => Expr::Apply {
                callee: Box::new(self.rewrite(callee)),
                args: args.iter().map(|a| self.rewrite(a)).collect(),
            },
            Expr::Let { name, ty, value, body } => Expr::Let {
                name: name.clone(),
                ty: ty.clone(),
                value: Box::new(self.rewrite(value)),
                body: Box::new(self.rewrite(body)),
            },
            Expr::If { cond, then_body, else_body } => Expr::If {
                cond: Box::new(self.rewrite(cond)),
                then_body: Box::new(self.rewrite(then_body)),
                else_body: Box::new(self.rewrite(else_body)),
            },
            Expr::Closure { params, ret, body } => Expr::Closure {
                params: params.clone(),
                ret: ret.clone(),
                body: Box::new(self.rewrite(body)),
            },
            Expr::Tuple(elems) => Expr::Tuple(elems.iter().map(|a| self.rewrite(a)).collect()),
            Expr::Proj { tuple, index } => {
                Expr::Proj { tuple: Box::new(self.rewrite(tuple)), index: *index }
            }
            Expr::Construct { ctor, args } => Expr::Construct {
                ctor: ctor.clone(),
                args: args.iter().map(|a| self.rewrite(a)).collect(),
            },
            Expr::Match { scrutinee, arms } => Expr::Match {
                scrutinee: Box::new(self.rewrite(scrutinee)),
                arms: arms
                    .iter()
                    .map(|arm| MatchArm {
                        ctor: arm.ctor.clone(),
                        binders: arm.binders.clone(),
                        body: self.rewrite(&arm.body),
                    })
                    .collect(),
            },
            // Explicit forms appear only after memory planning, which runs
            // downstream of fusion.
            other => other.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::eval::{eval_ref, pure_close};
    use crate::ir::expr::{ScalarData, TensorLiteral};
    use crate::ir::parse::parse_module;
    use crate::ir::print::print_module;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn modes_gate_value_access() {
        for def in ops::registry() {
            match def.mode {
                ShapeMode::DataDependent => {
                    let shapes = vec![Vec::new(); 3];
                    let err = compute_output_shape(def.name, &shapes, None, &Default::default())
                        .unwrap_err();
                    assert!(err.to_string().contains("data-dependent"), "{}: {err}", def.name);
                }
                _ => {
                    // Representative valid shapes per operator; values absent.
                    let (shapes, attrs): (Vec<Vec<usize>>, crate::ir::expr::Attrs) = match def.name
                    {
                        "add" | "multiply" | "less" => (vec![vec![2, 1], vec![2, 7]], Default::default()),
                        "dense" => (vec![vec![2, 3], vec![3, 4]], Default::default()),
                        "concat" => (vec![vec![2], vec![3]], Default::default()),
                        "take" => (vec![vec![4, 2], vec![3]], Default::default()),
                        "unique" => (vec![vec![6]], Default::default()),
                        "bytes" => (vec![vec![2]], Default::default()),
                        "reshape" => (
                            vec![vec![6]],
                            [(
                                "shape".to_string(),
                                crate::ir::expr::AttrValue::Shape(vec![2, 3]),
                            )]
                            .into_iter()
                            .collect(),
                        ),
                        other => panic!("unhandled operator {other}"),
                    };
                    compute_output_shape(def.name, &shapes, None, &attrs)
                        .unwrap_or_else(|e| panic!("{}: {e}", def.name));
                }
            }
        }
    }

    #[test]
    fn shape_examples() {
        let got =
            compute_output_shape("add", &[vec![2, 1], vec![2, 7]], None, &Default::default())
                .unwrap();
        assert_eq!(got, vec![vec![2, 7]]);
        let vals = [
            TensorLiteral::scalar_i64(0),
            TensorLiteral::scalar_i64(5),
            TensorLiteral::scalar_i64(1),
        ];
        let got = compute_output_shape(
            "arange",
            &[vec![], vec![], vec![]],
            Some(&vals),
            &Default::default(),
        )
        .unwrap();
        assert_eq!(got, vec![vec![5]]);
        let got = compute_output_shape("unique", &[vec![6]], None, &Default::default()).unwrap();
        assert_eq!(got, vec![vec![6]]);
    }

    #[test]
    fn fusion_policy_table() {
        assert!(can_fuse("add", "multiply").unwrap());
        assert!(can_fuse("multiply", "less").unwrap());
        assert!(!can_fuse("add", "arange").unwrap());
        assert!(!can_fuse("add", "unique").unwrap());
        assert!(!can_fuse("arange", "add").unwrap());
        assert!(!can_fuse("unique", "add").unwrap());
        assert!(!can_fuse("dense", "add").unwrap());
        assert!(!can_fuse("add", "dense").unwrap());
        assert!(can_fuse("add", "nms").is_err());
    }

    #[test]
    fn upper_bound_is_sound_for_unique() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=12);
            let data: Vec<i64> = (0..n).map(|_| rng.gen_range(-3..4)).collect();
            let input = TensorLiteral::vector_i64(data);
            let bound =
                compute_output_shape("unique", &[input.shape.clone()], None, &Default::default())
                    .unwrap();
            let truth = ops::ref_eval("unique", &[input.clone()], &Default::default()).unwrap();
            assert!(truth.shape[0] <= bound[0][0]);
            let padded = ops::ref_eval_mut(
                "unique",
                &[input],
                &Default::default(),
                &[bound[0].clone(), vec![1]],
            )
            .unwrap();
            let ScalarData::I64(pad) = &padded[0].data else { panic!() };
            let ScalarData::I64(want) = &truth.data else { panic!() };
            assert_eq!(&pad[..truth.shape[0]], &want[..]);
        }
    }

    fn rand_vec(rng: &mut StdRng, n: usize) -> TensorLiteral {
        TensorLiteral::vector_f32((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn chain_fuses_to_one_composite() {
        let m = parse_module(
            "fn main(a: Tensor<(8), f32>, b: Tensor<(8), f32>, c: Tensor<(8), f32>) -> Tensor<(8), f32> {\n\
             let t0 = add(a, b);\n\
             let t1 = multiply(t0, c);\n\
             add(t1, a)\n\
             }",
        )
        .unwrap();
        let fused = fuse_pass(&m);
        assert_eq!(fused.stage, Stage::Fused);
        assert_eq!(fused.composites.len(), 1);
        let (name, def) = fused.composites.first().unwrap();
        assert_eq!(name, "fused[add|multiply|add]");
        assert_eq!(def.members.len(), 3);
        let printed = print_module(&fused);
        assert!(printed.contains("fused[add|multiply|add](a, b, c"), "{printed}");

        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let args = [rand_vec(&mut rng, 8), rand_vec(&mut rng, 8), rand_vec(&mut rng, 8)];
            let before = eval_ref(&m, &args).unwrap();
            let after = eval_ref(&fused, &args).unwrap();
            assert!(pure_close(&before, &after, 1e-5));
        }
    }

    #[test]
    fn barriers_split_groups() {
        let m = parse_module(
            "fn main(a: Tensor<(4), i64>) -> Tensor<(?), i64> {\n\
             let t0 = add(a, a);\n\
             let t1 = multiply(t0, a);\n\
             let u = unique(t1);\n\
             let t2 = add(u, u);\n\
             multiply(t2, t2)\n\
             }",
        )
        .unwrap();
        let fused = fuse_pass(&m);
        // One group on each side of the barrier; `t2` is used twice so the
        // trailing multiply cannot absorb it.
        assert_eq!(fused.composites.len(), 1, "{}", print_module(&fused));
        assert!(fused.composites.contains_key("fused[add|multiply]"));
        let printed = print_module(&fused);
        assert!(printed.contains("unique("), "{printed}");

        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..10 {
            let a = TensorLiteral::vector_i64((0..4).map(|_| rng.gen_range(0..3)).collect());
            let before = eval_ref(&m, &[a.clone()]).unwrap();
            let after = eval_ref(&fused, &[a]).unwrap();
            assert!(pure_close(&before, &after, 0.0));
        }
    }

    #[test]
    fn single_op_and_multi_use_stay_unfused() {
        let single = parse_module(
            "fn main(a: Tensor<(4), f32>) -> Tensor<(4), f32> {\nadd(a, a)\n}",
        )
        .unwrap();
        let fused = fuse_pass(&single);
        assert!(fused.composites.is_empty());
        assert!(print_module(&fused).contains("add(a, a)"));

        let multi = parse_module(
            "fn main(a: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
             let t = add(a, a);\n\
             let u = multiply(t, a);\n\
             add(t, u)\n\
             }",
        )
        .unwrap();
        // `t` is used by two separate statements, so it stays materialized;
        // only the single-use `u` folds into the tail group.
        let fused = fuse_pass(&multi);
        assert_eq!(fused.composites.len(), 1, "{}", print_module(&fused));
        let def = &fused.composites["fused[multiply|add]"];
        assert_eq!(def.n_inputs, 2);
    }

    #[test]
    fn identical_subtrees_share_one_member() {
        let m = parse_module(
            "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
             add(multiply(a, b), multiply(a, b))\n\
             }",
        )
        .unwrap();
        let fused = fuse_pass(&m);
        let def = &fused.composites["fused[multiply|add]"];
        assert_eq!(def.members.len(), 2);
        assert_eq!(
            def.members[1].args,
            vec![CompositeArg::Member(0), CompositeArg::Member(0)]
        );
    }

    #[test]
    fn tree_shaped_group_fuses_whole_subtree() {
        let m = parse_module(
            "fn main(a: Tensor<(4), f32>, b: Tensor<(4), f32>, c: Tensor<(4), f32>, d: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
             add(multiply(a, b), multiply(c, d))\n\
             }",
        )
        .unwrap();
        let fused = fuse_pass(&m);
        assert_eq!(fused.composites.len(), 1);
        let def = &fused.composites["fused[multiply|multiply|add]"];
        assert_eq!(def.n_inputs, 4);
        assert_eq!(def.members.len(), 3);
        assert_eq!(
            def.members[2].args,
            vec![CompositeArg::Member(0), CompositeArg::Member(1)]
        );
    }

    #[test]
    fn inlining_respects_branches_and_annotations() {
        let m = parse_module(
            "fn main(a: Tensor<(4), f32>, c: Tensor<(), i64>) -> Tensor<(4), f32> {\n\
             let t = add(a, a);\n\
             if (c) {\n\
             multiply(t, a)\n\
             } else {\n\
             a\n\
             }\n\
             }",
        )
        .unwrap();
        // `t`'s only use is inside a branch: fusing would move the add into
        // the conditional path, so nothing fuses.
        let fused = fuse_pass(&m);
        assert!(fused.composites.is_empty(), "{}", print_module(&fused));

        let ann = parse_module(
            "fn main(a: Tensor<(?), f32>) -> Tensor<(4), f32> {\n\
             let t: Tensor<(4), f32> = add(a, a);\n\
             multiply(t, t)\n\
             }",
        )
        .unwrap();
        let fused = fuse_pass(&ann);
        assert!(fused.composites.is_empty(), "annotated bindings keep their checks");
    }
}
