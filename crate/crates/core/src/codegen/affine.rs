//! Affine index expressions over loop variables and symbolic dimensions, a
//! multivariate polynomial normal form, and a sound bound prover used to
//! discharge boundary checks. All variables are nonnegative integers.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AExpr {
    Const(i64),
    Var(String),
    Add(Box<AExpr>, Box<AExpr>),
    Sub(Box<AExpr>, Box<AExpr>),
    Mul(Box<AExpr>, Box<AExpr>),
    /// Ceiling division by a positive constant.
    CeilDiv(Box<AExpr>, i64),
}

pub fn cnst(v: i64) -> AExpr {
    AExpr::Const(v)
}

pub fn var(name: &str) -> AExpr {
    AExpr::Var(name.to_string())
}

pub fn add(a: AExpr, b: AExpr) -> AExpr {
    AExpr::Add(Box::new(a), Box::new(b))
}

pub fn sub(a: AExpr, b: AExpr) -> AExpr {
    AExpr::Sub(Box::new(a), Box::new(b))
}

pub fn mul(a: AExpr, b: AExpr) -> AExpr {
    AExpr::Mul(Box::new(a), Box::new(b))
}

pub fn ceildiv(a: AExpr, d: i64) -> AExpr {
    AExpr::CeilDiv(Box::new(a), d)
}

impl AExpr {
    pub fn eval(&self, env: &dyn Fn(&str) -> Option<i64>) -> Option<i64> {
        match self {
            AExpr::Const(v) => Some(*v),
            AExpr::Var(n) => env(n),
            AExpr::Add(a, b) => Some(a.eval(env)? + b.eval(env)?),
            AExpr::Sub(a, b) => Some(a.eval(env)? - b.eval(env)?),
            AExpr::Mul(a, b) => Some(a.eval(env)? * b.eval(env)?),
            AExpr::CeilDiv(a, d) => {
                let a = a.eval(env)?;
                let q = a.div_euclid(*d);
                Some(if a.rem_euclid(*d) != 0 { q + 1 } else { q })
            }
        }
    }

    pub fn subst(&self, name: &str, with: &AExpr) -> AExpr {
        match self {
            AExpr::Const(_) => self.clone(),
            AExpr::Var(n) => {
                if n == name {
                    with.clone()
                } else {
                    self.clone()
                }
            }
            AExpr::Add(a, b) => add(a.subst(name, with), b.subst(name, with)),
            AExpr::Sub(a, b) => sub(a.subst(name, with), b.subst(name, with)),
            AExpr::Mul(a, b) => mul(a.subst(name, with), b.subst(name, with)),
            AExpr::CeilDiv(a, d) => ceildiv(a.subst(name, with), *d),
        }
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            AExpr::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn vars(&self, out: &mut Vec<String>) {
        match self {
            AExpr::Const(_) => {}
            AExpr::Var(n) => {
                if !out.contains(n) {
                    out.push(n.clone());
                }
            }
            AExpr::Add(a, b) | AExpr::Sub(a, b) | AExpr::Mul(a, b) => {
                a.vars(out);
                b.vars(out);
            }
            AExpr::CeilDiv(a, _) => a.vars(out),
        }
    }
}

impl fmt::Display for AExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AExpr::Const(v) => write!(f, "{v}"),
            AExpr::Var(n) => write!(f, "{n}"),
            AExpr::Add(a, b) => write!(f, "{a} + {b}"),
            AExpr::Sub(a, b) => write!(f, "{a} - {}", factor_str(b)),
            AExpr::Mul(a, b) => write!(f, "{}*{}", factor_str(a), factor_str(b)),
            AExpr::CeilDiv(a, d) => write!(f, "ceildiv({a}, {d})"),
        }
    }
}

fn factor_str(e: &AExpr) -> String {
    match e {
        AExpr::Add(..) | AExpr::Sub(..) => format!("({e})"),
        _ => e.to_string(),
    }
}

/// Monomial: variable name -> exponent; empty map is the constant monomial.
pub type Mono = BTreeMap<String, u32>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Poly(pub BTreeMap<Mono, i64>);

impl Poly {
    pub fn cnst(v: i64) -> Poly {
        let mut p = Poly::default();
        if v != 0 {
            p.0.insert(Mono::new(), v);
        }
        p
    }

    pub fn var(name: &str) -> Poly {
        let mut m = Mono::new();
        m.insert(name.to_string(), 1);
        let mut p = Poly::default();
        p.0.insert(m, 1);
        p
    }

    fn insert(&mut self, m: Mono, c: i64) {
        if c == 0 {
            return;
        }
        let e = self.0.entry(m).or_insert(0);
        *e += c;
        if *e == 0 {
            self.0.remove_entry_zero();
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, c) in &other.0 {
            out.insert(m.clone(), *c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1))
    }

    pub fn scale(&self, s: i64) -> Poly {
        let mut out = Poly::default();
        for (m, c) in &self.0 {
            out.insert(m.clone(), c * s);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::default();
        for (ma, ca) in &self.0 {
            for (mb, cb) in &other.0 {
                let mut m = ma.clone();
                for (v, e) in mb {
                    *m.entry(v.clone()).or_insert(0) += e;
                }
                out.insert(m, ca * cb);
            }
        }
        out
    }

    pub fn constant_term(&self) -> i64 {
        self.0.get(&Mono::new()).copied().unwrap_or(0)
    }

    pub fn as_const(&self) -> Option<i64> {
        if self.0.keys().all(|m| m.is_empty()) {
            Some(self.constant_term())
        } else {
            None
        }
    }

    /// Substitutes `name` by a polynomial.
    pub fn subst(&self, name: &str, with: &Poly) -> Poly {
        let mut out = Poly::default();
        for (m, c) in &self.0 {
            if let Some(&e) = m.get(name) {
                let mut rest = m.clone();
                rest.remove(name);
                let mut term = Poly::default();
                term.insert(rest, *c);
                for _ in 0..e {
                    term = term.mul(with);
                }
                out = out.add(&term);
            } else {
                out.insert(m.clone(), *c);
            }
        }
        out
    }

    /// floor((self + bias) / d) when every variable coefficient divides d.
    fn floor_div(&self, bias: i64, d: i64) -> Option<Poly> {
        let mut q = Poly::default();
        let mut c0 = bias;
        for (m, c) in &self.0 {
            if m.is_empty() {
                c0 += *c;
            } else if c % d == 0 {
                q.insert(m.clone(), c / d);
            } else {
                return None;
            }
        }
        q.insert(Mono::new(), c0.div_euclid(d));
        Some(q)
    }
}

trait RemoveZero {
    fn remove_entry_zero(&mut self);
}

impl RemoveZero for BTreeMap<Mono, i64> {
    fn remove_entry_zero(&mut self) {
        self.retain(|_, c| *c != 0);
    }
}

/// Polynomial normal form; `None` when a ceiling division stays opaque.
pub fn to_poly(e: &AExpr) -> Option<Poly> {
    match e {
        AExpr::Const(v) => Some(Poly::cnst(*v)),
        AExpr::Var(n) => Some(Poly::var(n)),
        AExpr::Add(a, b) => Some(to_poly(a)?.add(&to_poly(b)?)),
        AExpr::Sub(a, b) => Some(to_poly(a)?.sub(&to_poly(b)?)),
        AExpr::Mul(a, b) => Some(to_poly(a)?.mul(&to_poly(b)?)),
        AExpr::CeilDiv(a, d) => to_poly(a)?.floor_div(*d - 1, *d),
    }
}

pub fn from_poly(p: &Poly) -> AExpr {
    if p.0.is_empty() {
        return cnst(0);
    }
    let mut acc: Option<AExpr> = None;
    for (m, c) in &p.0 {
        let mut term: Option<AExpr> = None;
        if *c != 1 || m.is_empty() {
            term = Some(cnst(c.abs()));
        }
        for (v, e) in m {
            for _ in 0..*e {
                term = Some(match term {
                    None => var(v),
                    Some(t) => mul(t, var(v)),
                });
            }
        }
        let term = term.unwrap();
        acc = Some(match acc {
            None => {
                if *c < 0 && !m.is_empty() {
                    sub(cnst(0), term)
                } else if *c < 0 {
                    cnst(*c)
                } else {
                    term
                }
            }
            Some(a) => {
                if *c < 0 {
                    sub(a, term)
                } else {
                    add(a, term)
                }
            }
        });
    }
    acc.unwrap()
}

/// Canonicalizes through the polynomial form where possible.
pub fn simplify(e: &AExpr) -> AExpr {
    if let Some(p) = to_poly(e) {
        return from_poly(&p);
    }
    match e {
        AExpr::Add(a, b) => add(simplify(a), simplify(b)),
        AExpr::Sub(a, b) => sub(simplify(a), simplify(b)),
        AExpr::Mul(a, b) => mul(simplify(a), simplify(b)),
        AExpr::CeilDiv(a, d) => ceildiv(simplify(a), *d),
        _ => e.clone(),
    }
}

/// A loop variable ranging over [0, upper).
#[derive(Debug, Clone)]
pub struct VarRange {
    pub name: String,
    pub upper: AExpr,
}

/// Sound lower bound of `p`. Loop variables (outermost first in `loops`)
/// range over [0, upper); all other variables are nonnegative with optional
/// sharper lower bounds in `sym_lb`. Returns None when no finite bound is
/// derivable.
pub fn poly_lower_bound(
    p: &Poly,
    loops: &[VarRange],
    sym_lb: &BTreeMap<String, i64>,
) -> Option<i64> {
    let mut cur = p.clone();
    // innermost first, so substituted uppers only mention outer vars
    for r in loops.iter().rev() {
        cur = eliminate(&cur, &r.name, Some(&to_poly(&r.upper)?.sub(&Poly::cnst(1))))?;
    }
    let syms: Vec<String> = cur
        .0
        .keys()
        .flat_map(|m| m.keys().cloned())
        .collect();
    for s in syms {
        let lb = sym_lb.get(&s).copied().unwrap_or(0);
        cur = eliminate_sym(&cur, &s, lb)?;
    }
    cur.as_const()
}

/// Replaces `name` by whichever end of [0, hi] minimizes each term; hi is a
/// polynomial over outer variables.
fn eliminate(p: &Poly, name: &str, hi: Option<&Poly>) -> Option<Poly> {
    let mut out = Poly::default();
    for (m, c) in &p.0 {
        if let Some(&e) = m.get(name) {
            if *c > 0 {
                // v := 0 kills the term
                continue;
            }
            let hi = hi?;
            let mut rest = m.clone();
            rest.remove(name);
            let mut term = Poly::default();
            term.insert(rest, *c);
            for _ in 0..e {
                term = term.mul(hi);
            }
            out = out.add(&term);
        } else {
            out.insert(m.clone(), *c);
        }
    }
    Some(out)
}

/// Replaces a symbolic dimension: positive terms take the lower bound,
/// negative terms are unbounded above and fail.
fn eliminate_sym(p: &Poly, name: &str, lb: i64) -> Option<Poly> {
    let mut out = Poly::default();
    for (m, c) in &p.0 {
        if let Some(&e) = m.get(name) {
            if *c < 0 {
                return None;
            }
            let mut rest = m.clone();
            rest.remove(name);
            let mut term = Poly::default();
            term.insert(rest, *c);
            for _ in 0..e {
                term = term.mul(&Poly::cnst(lb));
            }
            out = out.add(&term);
        } else {
            out.insert(m.clone(), *c);
        }
    }
    Some(out)
}

/// Proves a < b for every assignment consistent with the context.
pub fn prove_lt(
    a: &AExpr,
    b: &AExpr,
    loops: &[VarRange],
    sym_lb: &BTreeMap<String, i64>,
) -> bool {
    let (Some(pa), Some(pb)) = (to_poly(a), to_poly(b)) else {
        return false;
    };
    matches!(poly_lower_bound(&pb.sub(&pa), loops, sym_lb), Some(d) if d >= 1)
}

/// Proves a <= b for every assignment consistent with the context.
pub fn prove_le(
    a: &AExpr,
    b: &AExpr,
    loops: &[VarRange],
    sym_lb: &BTreeMap<String, i64>,
) -> bool {
    let (Some(pa), Some(pb)) = (to_poly(a), to_poly(b)) else {
        return false;
    };
    matches!(poly_lower_bound(&pb.sub(&pa), loops, sym_lb), Some(d) if d >= 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env1(name: &str, v: i64) -> impl Fn(&str) -> Option<i64> + '_ {
        move |n: &str| if n == name { Some(v) } else { None }
    }

    #[test]
    fn ceildiv_of_tiled_extents_normalizes() {
        // ceildiv(8k + 3, 8) = k + 1
        let e = ceildiv(add(mul(cnst(8), var("k")), cnst(3)), 8);
        let s = simplify(&e);
        assert_eq!(s, add(cnst(1), var("k")));
        // ceildiv(8k, 8) = k
        let e0 = ceildiv(mul(cnst(8), var("k")), 8);
        assert_eq!(simplify(&e0), var("k"));
        // ceildiv(x, 8) stays opaque
        let ex = ceildiv(var("x"), 8);
        assert_eq!(simplify(&ex), ex);
        for x in 1..40 {
            assert_eq!(ex.eval(&env1("x", x)), Some((x + 7) / 8));
        }
    }

    #[test]
    fn polynomial_arithmetic_round_trips_through_eval() {
        // (i*8 + j) - (8k + 3) as a poly evaluates like the tree
        let e = sub(add(mul(var("i"), cnst(8)), var("j")), add(mul(cnst(8), var("k")), cnst(3)));
        let p = to_poly(&e).unwrap();
        let back = from_poly(&p);
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let env = |n: &str| match n {
                        "i" => Some(i),
                        "j" => Some(j),
                        "k" => Some(k),
                        _ => None,
                    };
                    assert_eq!(back.eval(&env), e.eval(&env));
                }
            }
        }
    }

    #[test]
    fn the_full_tile_guard_is_provable_and_the_tail_is_not() {
        // io in [0, k), ii in [0, 8): io*8 + ii < 8k + 0
        let loops = vec![
            VarRange { name: "io".into(), upper: var("k") },
            VarRange { name: "ii".into(), upper: cnst(8) },
        ];
        let lhs = add(mul(var("io"), cnst(8)), var("ii"));
        let rhs = mul(cnst(8), var("k"));
        let lbs = BTreeMap::new();
        assert!(prove_lt(&lhs, &rhs, &loops, &lbs));
        // with io in [0, k+1) the last tile may overrun
        let loose = vec![
            VarRange { name: "io".into(), upper: add(var("k"), cnst(1)) },
            VarRange { name: "ii".into(), upper: cnst(8) },
        ];
        let rhs3 = add(mul(cnst(8), var("k")), cnst(3));
        assert!(!prove_lt(&lhs, &rhs3, &loose, &lbs));
        // but the residue-3 tail row ii in [0, 3) with io = k is fine
        let tail = vec![VarRange { name: "ii".into(), upper: cnst(3) }];
        let lhs_tail = add(mul(var("k"), cnst(8)), var("ii"));
        assert!(prove_lt(&lhs_tail, &rhs3, &tail, &lbs));
    }

    #[test]
    fn provers_agree_with_enumeration_on_small_ranges() {
        // check prove_lt soundness over i in [0, n), j in [0, 4), n in 1..=6
        let cases = [
            (add(var("i"), var("j")), add(var("n"), cnst(3))),
            (mul(var("i"), cnst(4)), mul(var("n"), cnst(4))),
            (add(var("i"), cnst(1)), var("n")),
            (var("j"), cnst(4)),
            (var("j"), cnst(3)),
        ];
        let mut lbs = BTreeMap::new();
        lbs.insert("n".to_string(), 1);
        for (a, b) in &cases {
            let loops = vec![
                VarRange { name: "i".into(), upper: var("n") },
                VarRange { name: "j".into(), upper: cnst(4) },
            ];
            let proved = prove_lt(a, b, &loops, &lbs);
            let mut holds = true;
            for n in 1..=6 {
                for i in 0..n {
                    for j in 0..4 {
                        let env = |s: &str| match s {
                            "i" => Some(i),
                            "j" => Some(j),
                            "n" => Some(n),
                            _ => None,
                        };
                        holds &= a.eval(&env).unwrap() < b.eval(&env).unwrap();
                    }
                }
            }
            assert!(!proved || holds, "unsound proof of {a} < {b}");
        }
    }
}
