//! Parser for the textual module form produced by [`crate::ir::print`].
//!
//! The grammar is whitespace-insensitive with `//` line comments. A leading
//! comment `// stage: <name>` sets the module stage. `name(args)` resolves
//! to a closure application when `name` is locally bound, to a constructor
//! when it names a `data` declaration, and to an operator or function call
//! otherwise. Bare integers and floats are scalar constants.

use crate::error::ParseError;
use crate::ir::expr::{
    AdtDef, AttrValue, Attrs, CompositeArg, CompositeDef, CompositeMember, Expr, FnDef, MatchArm,
    Module, Param, ScalarData, ShapeArg, Stage, TensorLiteral,
};
use crate::ir::types::{DType, Device, Dim, TensorType, Type};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f32),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Lt,
    Gt,
    Comma,
    Semi,
    Colon,
    Eq,
    Dot,
    Question,
    Arrow,
    FatArrow,
    Eof,
}

impl std::fmt::Display for Tok {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Tok::Ident(n) => return write!(f, "`{n}`"),
            Tok::Int(n) => return write!(f, "`{n}`"),
            Tok::Float(x) => return write!(f, "`{x:?}`"),
            Tok::LParen => "`(`",
            Tok::RParen => "`)`",
            Tok::LBrace => "`{`",
            Tok::RBrace => "`}`",
            Tok::LBracket => "`[`",
            Tok::RBracket => "`]`",
            Tok::Lt => "`<`",
            Tok::Gt => "`>`",
            Tok::Comma => "`,`",
            Tok::Semi => "`;`",
            Tok::Colon => "`:`",
            Tok::Eq => "`=`",
            Tok::Dot => "`.`",
            Tok::Question => "`?`",
            Tok::Arrow => "`->`",
            Tok::FatArrow => "`=>`",
            Tok::Eof => "end of input",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
struct Sp {
    tok: Tok,
    line: usize,
    col: usize,
}

const KEYWORDS: &[&str] = &[
    "let", "if", "else", "match", "fn", "data", "composite", "const", "adt", "storage", "Tensor",
    "alloc_storage", "alloc_tensor", "invoke_mut", "kill", "shape_of", "invoke_shape_func",
    "device_copy", "reshape_tensor",
];

fn lex(src: &str) -> Result<Vec<Sp>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line: usize, col: usize, msg: String| ParseError { line, col, msg };
    macro_rules! advance {
        () => {{
            if chars[i] == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            advance!();
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                advance!();
            }
            continue;
        }
        let (tline, tcol) = (line, col);
        let tok = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            '<' => Some(Tok::Lt),
            '>' => Some(Tok::Gt),
            ',' => Some(Tok::Comma),
            ';' => Some(Tok::Semi),
            ':' => Some(Tok::Colon),
            '.' => Some(Tok::Dot),
            '?' => Some(Tok::Question),
            _ => None,
        };
        if let Some(tok) = tok {
            toks.push(Sp { tok, line: tline, col: tcol });
            advance!();
            continue;
        }
        if c == '=' {
            advance!();
            if chars.get(i) == Some(&'>') {
                advance!();
                toks.push(Sp { tok: Tok::FatArrow, line: tline, col: tcol });
            } else {
                toks.push(Sp { tok: Tok::Eq, line: tline, col: tcol });
            }
            continue;
        }
        if c == '-' {
            advance!();
            if chars.get(i) == Some(&'>') {
                advance!();
                toks.push(Sp { tok: Tok::Arrow, line: tline, col: tcol });
                continue;
            }
            if chars.get(i).is_some_and(|d| d.is_ascii_digit()) {
                let tok = lex_number(&chars, &mut i, &mut line, &mut col, true)
                    .map_err(|msg| err(tline, tcol, msg))?;
                toks.push(Sp { tok, line: tline, col: tcol });
                continue;
            }
            return Err(err(tline, tcol, "stray `-`".into()));
        }
        if c.is_ascii_digit() {
            let tok = lex_number(&chars, &mut i, &mut line, &mut col, false)
                .map_err(|msg| err(tline, tcol, msg))?;
            toks.push(Sp { tok, line: tline, col: tcol });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut name = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                name.push(chars[i]);
                advance!();
            }
            // Composite names read as one token: `fused[add|multiply]#2`.
            if name == "fused" && chars.get(i) == Some(&'[') {
                while i < chars.len() && chars[i] != ']' {
                    name.push(chars[i]);
                    advance!();
                }
                if i == chars.len() {
                    return Err(err(tline, tcol, "unterminated composite name".into()));
                }
                name.push(']');
                advance!();
                if chars.get(i) == Some(&'#') {
                    name.push('#');
                    advance!();
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        name.push(chars[i]);
                        advance!();
                    }
                }
            }
            toks.push(Sp { tok: Tok::Ident(name), line: tline, col: tcol });
            continue;
        }
        return Err(err(tline, tcol, format!("unexpected character `{c}`")));
    }
    toks.push(Sp { tok: Tok::Eof, line, col });
    Ok(toks)
}

fn lex_number(
    chars: &[char],
    i: &mut usize,
    line: &mut usize,
    col: &mut usize,
    neg: bool,
) -> Result<Tok, String> {
    let mut text = String::new();
    if neg {
        text.push('-');
    }
    let mut is_float = false;
    while *i < chars.len() {
        let c = chars[*i];
        let take = c.is_ascii_digit()
            || (c == '.' && chars.get(*i + 1).is_some_and(|d| d.is_ascii_digit()))
            || ((c == 'e' || c == 'E')
                && text.contains('.')
                && chars
                    .get(*i + 1)
                    .is_some_and(|d| d.is_ascii_digit() || *d == '-' || *d == '+'))
            || ((c == '-' || c == '+') && matches!(text.chars().last(), Some('e' | 'E')));
        if !take {
            break;
        }
        if c == '.' || c == 'e' || c == 'E' {
            is_float = true;
        }
        text.push(c);
        *i += 1;
        *col += 1;
        let _ = line;
    }
    if is_float {
        text.parse::<f32>().map(Tok::Float).map_err(|_| format!("bad float `{text}`"))
    } else {
        text.parse::<i64>().map(Tok::Int).map_err(|_| format!("bad integer `{text}`"))
    }
}

struct Parser {
    toks: Vec<Sp>,
    pos: usize,
    /// Locally bound names, for resolving `name(args)` to `Apply`.
    scope: Vec<String>,
    /// Constructor names seen so far.
    ctors: Vec<String>,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)].tok
    }

    fn here(&self) -> (usize, usize) {
        let sp = &self.toks[self.pos];
        (sp.line, sp.col)
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError { line, col, msg: msg.into() }
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == t {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: &Tok) -> Result<(), ParseError> {
        if self.eat(t) {
            Ok(())
        } else {
            Err(self.err(format!("expected {t}, found {}", self.peek())))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(n) => {
                self.bump();
                Ok(n)
            }
            other => Err(self.err(format!("expected {what}, found {other}"))),
        }
    }

    fn binder(&mut self, what: &str) -> Result<String, ParseError> {
        let name = self.ident(what)?;
        if KEYWORDS.contains(&name.as_str()) || Device::parse(&name).is_some() {
            return Err(self.err(format!("`{name}` is reserved")));
        }
        Ok(name)
    }

    fn int(&mut self, what: &str) -> Result<i64, ParseError> {
        match *self.peek() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            _ => Err(self.err(format!("expected {what}, found {}", self.peek()))),
        }
    }

    fn uint(&mut self, what: &str) -> Result<u64, ParseError> {
        let v = self.int(what)?;
        u64::try_from(v).map_err(|_| self.err(format!("{what} must be nonnegative")))
    }

    // -- types --------------------------------------------------------------

    fn ty(&mut self) -> Result<Type, ParseError> {
        match self.peek().clone() {
            Tok::Ident(n) if n == "Tensor" => {
                self.bump();
                self.expect(&Tok::Lt)?;
                let dims = if self.eat(&Tok::LParen) {
                    let mut dims = Vec::new();
                    while !self.eat(&Tok::RParen) {
                        if !dims.is_empty() {
                            self.expect(&Tok::Comma)?;
                        }
                        dims.push(self.dim()?);
                    }
                    dims
                } else {
                    vec![self.dim()?]
                };
                let dtype = if self.eat(&Tok::Comma) {
                    let name = self.ident("dtype")?;
                    DType::parse(&name).ok_or_else(|| self.err(format!("unknown dtype `{name}`")))?
                } else {
                    DType::F32
                };
                self.expect(&Tok::Gt)?;
                let t = TensorType::new(dims, dtype)
                    .map_err(|e| self.err(e.msg))?;
                Ok(Type::Tensor(t))
            }
            Tok::Ident(n) if n == "adt" => {
                self.bump();
                Ok(Type::Adt)
            }
            Tok::Ident(n) if n == "storage" => {
                self.bump();
                Ok(Type::Storage)
            }
            Tok::Ident(n) if n == "fn" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let mut params = Vec::new();
                while !self.eat(&Tok::RParen) {
                    if !params.is_empty() {
                        self.expect(&Tok::Comma)?;
                    }
                    params.push(self.ty()?);
                }
                self.expect(&Tok::Arrow)?;
                let ret = self.ty()?;
                Ok(Type::Fn { params, ret: Box::new(ret) })
            }
            Tok::LParen => {
                self.bump();
                let mut elems = Vec::new();
                while !self.eat(&Tok::RParen) {
                    if !elems.is_empty() {
                        self.expect(&Tok::Comma)?;
                    }
                    elems.push(self.ty()?);
                }
                Ok(Type::Tuple(elems))
            }
            other => Err(self.err(format!("expected a type, found {other}"))),
        }
    }

    fn dim(&mut self) -> Result<Dim, ParseError> {
        if self.eat(&Tok::Question) {
            return Ok(Dim::Any);
        }
        let v = self.uint("dimension")?;
        Ok(Dim::Static(v))
    }

    // -- expressions ----------------------------------------------------------

    /// Statement chain up to (not consuming) the closing brace.
    fn body(&mut self) -> Result<Expr, ParseError> {
        enum Stmt {
            Bind(Vec<(String, Option<Type>, Expr)>),
            Discard(Expr),
        }
        let depth = self.scope.len();
        let mut stmts: Vec<Stmt> = Vec::new();
        let tail = loop {
            if *self.peek() == Tok::RBrace {
                return Err(self.err("a block must end with a result expression"));
            }
            if self.eat_kw("let") {
                let mut names = vec![self.binder("a binding name")?];
                while self.eat(&Tok::Comma) {
                    names.push(self.binder("a binding name")?);
                }
                let ann = if self.eat(&Tok::Colon) { Some(self.ty()?) } else { None };
                self.expect(&Tok::Eq)?;
                let mut values = vec![self.expr()?];
                while self.eat(&Tok::Comma) {
                    values.push(self.expr()?);
                }
                if names.len() != values.len() {
                    return Err(self.err(format!(
                        "{} names bound to {} values",
                        names.len(),
                        values.len()
                    )));
                }
                self.expect(&Tok::Semi)?;
                let binds: Vec<(String, Option<Type>, Expr)> = names
                    .into_iter()
                    .zip(values)
                    .map(|(n, v)| (n, ann.clone(), v))
                    .collect();
                for (n, _, _) in &binds {
                    self.scope.push(n.clone());
                }
                stmts.push(Stmt::Bind(binds));
                continue;
            }
            let e = self.expr()?;
            if self.eat(&Tok::Semi) {
                stmts.push(Stmt::Discard(e));
                continue;
            }
            break e;
        };
        self.scope.truncate(depth);
        let mut out = tail;
        for stmt in stmts.into_iter().rev() {
            match stmt {
                Stmt::Bind(binds) => {
                    for (name, ty, value) in binds.into_iter().rev() {
                        out = Expr::Let {
                            name,
                            ty,
                            value: Box::new(value),
                            body: Box::new(out),
                        };
                    }
                }
                Stmt::Discard(e) => out = Expr::stmt(e, out),
            }
        }
        Ok(out)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Tok::Ident(n) if n == kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn block(&mut self) -> Result<Expr, ParseError> {
        self.expect(&Tok::LBrace)?;
        let e = self.body()?;
        self.expect(&Tok::RBrace)?;
        Ok(e)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.primary()?;
        loop {
            if *self.peek() == Tok::Dot {
                self.bump();
                let index = self.uint("a field index")? as usize;
                e = Expr::Proj { tuple: Box::new(e), index };
                continue;
            }
            // Postfix application of first-class function results; bare
            // identifier calls are resolved in `primary`.
            if *self.peek() == Tok::LParen && matches!(e, Expr::Proj { .. } | Expr::Apply { .. }) {
                let args = self.paren_exprs()?;
                e = Expr::Apply { callee: Box::new(e), args };
                continue;
            }
            break;
        }
        Ok(e)
    }

    fn paren_exprs(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect(&Tok::LParen)?;
        let mut args = Vec::new();
        while !self.eat(&Tok::RParen) {
            if !args.is_empty() {
                self.expect(&Tok::Comma)?;
            }
            args.push(self.expr()?);
        }
        Ok(args)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Constant(TensorLiteral::scalar_i64(v)))
            }
            Tok::Float(v) => {
                self.bump();
                Ok(Expr::Constant(TensorLiteral::scalar_f32(v)))
            }
            Tok::LParen => {
                self.bump();
                if self.eat(&Tok::RParen) {
                    return Ok(Expr::Tuple(Vec::new()));
                }
                let first = self.expr()?;
                if self.eat(&Tok::RParen) {
                    return Ok(first);
                }
                let mut elems = vec![first];
                while !self.eat(&Tok::RParen) {
                    self.expect(&Tok::Comma)?;
                    if *self.peek() == Tok::RParen {
                        continue;
                    }
                    elems.push(self.expr()?);
                }
                Ok(Expr::Tuple(elems))
            }
            Tok::LBrace => self.block(),
            Tok::Ident(name) => self.ident_expr(name),
            other => Err(self.err(format!("expected an expression, found {other}"))),
        }
    }

    fn ident_expr(&mut self, name: String) -> Result<Expr, ParseError> {
        match name.as_str() {
            "const" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let lit = self.literal()?;
                self.expect(&Tok::RParen)?;
                return Ok(Expr::Constant(lit));
            }
            "if" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let cond = self.expr()?;
                self.expect(&Tok::RParen)?;
                let then_body = self.block()?;
                if !self.eat_kw("else") {
                    return Err(self.err("`if` needs an `else` branch"));
                }
                let else_body = self.block()?;
                return Ok(Expr::If {
                    cond: Box::new(cond),
                    then_body: Box::new(then_body),
                    else_body: Box::new(else_body),
                });
            }
            "match" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let scrutinee = self.expr()?;
                self.expect(&Tok::RParen)?;
                self.expect(&Tok::LBrace)?;
                let mut arms = Vec::new();
                while !self.eat(&Tok::RBrace) {
                    let ctor = self.ident("a constructor pattern")?;
                    self.expect(&Tok::LParen)?;
                    let mut binders = Vec::new();
                    while !self.eat(&Tok::RParen) {
                        if !binders.is_empty() {
                            self.expect(&Tok::Comma)?;
                        }
                        binders.push(self.binder("a pattern binder")?);
                    }
                    self.expect(&Tok::FatArrow)?;
                    let depth = self.scope.len();
                    self.scope.extend(binders.iter().cloned());
                    let body = if *self.peek() == Tok::LBrace { self.block()? } else { self.expr()? };
                    self.scope.truncate(depth);
                    arms.push(MatchArm { ctor, binders, body });
                    self.eat(&Tok::Comma);
                }
                return Ok(Expr::Match { scrutinee: Box::new(scrutinee), arms });
            }
            "fn" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let mut params = Vec::new();
                while !self.eat(&Tok::RParen) {
                    if !params.is_empty() {
                        self.expect(&Tok::Comma)?;
                    }
                    let name = self.binder("a parameter name")?;
                    self.expect(&Tok::Colon)?;
                    let ty = self.ty()?;
                    params.push(Param { name, ty });
                }
                self.expect(&Tok::Arrow)?;
                let ret = self.ty()?;
                let depth = self.scope.len();
                self.scope.extend(params.iter().map(|p| p.name.clone()));
                let body = self.block()?;
                self.scope.truncate(depth);
                return Ok(Expr::Closure { params, ret, body: Box::new(body) });
            }
            "alloc_storage" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let size = self.expr()?;
                self.expect(&Tok::Comma)?;
                let align = self.uint("an alignment")?;
                self.expect(&Tok::Comma)?;
                let device = if self.eat(&Tok::Question) {
                    None
                } else {
                    Some(self.device()?)
                };
                self.expect(&Tok::RParen)?;
                return Ok(Expr::AllocStorage { size: Box::new(size), align, device });
            }
            "alloc_tensor" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let storage = self.expr()?;
                self.expect(&Tok::Comma)?;
                let offset = self.uint("an offset")?;
                self.expect(&Tok::Comma)?;
                let shape = self.shape_arg()?;
                self.expect(&Tok::Comma)?;
                let dt = self.ident("a dtype")?;
                let dtype =
                    DType::parse(&dt).ok_or_else(|| self.err(format!("unknown dtype `{dt}`")))?;
                self.expect(&Tok::RParen)?;
                return Ok(Expr::AllocTensor { storage: Box::new(storage), offset, shape, dtype });
            }
            "kill" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let e = self.expr()?;
                self.expect(&Tok::RParen)?;
                return Ok(Expr::Kill(Box::new(e)));
            }
            "shape_of" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let e = self.expr()?;
                self.expect(&Tok::RParen)?;
                return Ok(Expr::ShapeOf(Box::new(e)));
            }
            "invoke_mut" | "invoke_shape_func" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let op = self.ident("an operator name")?;
                self.expect(&Tok::Comma)?;
                let inputs = self.paren_exprs()?;
                self.expect(&Tok::Comma)?;
                let outputs = self.paren_exprs()?;
                let mut attrs = Attrs::new();
                while self.eat(&Tok::Comma) {
                    let (k, v) = self.attr()?;
                    attrs.insert(k, v);
                }
                self.expect(&Tok::RParen)?;
                return Ok(if name == "invoke_mut" {
                    Expr::InvokeMut { op, inputs, outputs, attrs }
                } else {
                    Expr::InvokeShapeFunc { op, inputs, outputs, attrs }
                });
            }
            "device_copy" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let value = self.expr()?;
                self.expect(&Tok::Comma)?;
                let src = self.device()?;
                self.expect(&Tok::Comma)?;
                let dst = self.device()?;
                self.expect(&Tok::RParen)?;
                return Ok(Expr::DeviceCopy { value: Box::new(value), src, dst });
            }
            "reshape_tensor" => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let tensor = self.expr()?;
                self.expect(&Tok::Comma)?;
                let shape = self.shape_arg()?;
                self.expect(&Tok::RParen)?;
                return Ok(Expr::ReshapeTensor { tensor: Box::new(tensor), shape });
            }
            _ => {}
        }
        self.bump();
        if *self.peek() != Tok::LParen {
            return Ok(Expr::var(&name));
        }
        // name(args): closure application if locally bound, constructor if
        // declared, otherwise an operator or function call.
        if self.scope.iter().any(|s| s == &name) {
            let args = self.paren_exprs()?;
            return Ok(Expr::Apply { callee: Box::new(Expr::var(&name)), args });
        }
        if self.ctors.iter().any(|c| c == &name) {
            let args = self.paren_exprs()?;
            return Ok(Expr::Construct { ctor: name, args });
        }
        self.expect(&Tok::LParen)?;
        let mut args = Vec::new();
        let mut attrs = Attrs::new();
        while !self.eat(&Tok::RParen) {
            if !(args.is_empty() && attrs.is_empty()) {
                self.expect(&Tok::Comma)?;
            }
            if matches!(self.peek(), Tok::Ident(_)) && *self.peek2() == Tok::Eq {
                let (k, v) = self.attr()?;
                attrs.insert(k, v);
                continue;
            }
            if !attrs.is_empty() {
                return Err(self.err("positional argument after attribute"));
            }
            args.push(self.expr()?);
        }
        Ok(Expr::Call { op: name, args, attrs })
    }

    fn attr(&mut self) -> Result<(String, AttrValue), ParseError> {
        let key = self.ident("an attribute name")?;
        self.expect(&Tok::Eq)?;
        let value = match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                AttrValue::Int(v)
            }
            Tok::LParen => {
                self.bump();
                let mut dims = Vec::new();
                while !self.eat(&Tok::RParen) {
                    if !dims.is_empty() {
                        self.expect(&Tok::Comma)?;
                    }
                    dims.push(self.uint("a shape extent")?);
                }
                AttrValue::Shape(dims)
            }
            Tok::Ident(n) => {
                let d = DType::parse(&n)
                    .ok_or_else(|| self.err(format!("bad attribute value `{n}`")))?;
                self.bump();
                AttrValue::Dtype(d)
            }
            other => return Err(self.err(format!("bad attribute value {other}"))),
        };
        Ok((key, value))
    }

    fn device(&mut self) -> Result<Device, ParseError> {
        let name = self.ident("a device")?;
        Device::parse(&name).ok_or_else(|| self.err(format!("unknown device `{name}`")))
    }

    fn shape_arg(&mut self) -> Result<ShapeArg, ParseError> {
        if *self.peek() == Tok::LParen {
            self.bump();
            let mut dims = Vec::new();
            while !self.eat(&Tok::RParen) {
                if !dims.is_empty() {
                    self.expect(&Tok::Comma)?;
                }
                dims.push(self.uint("a shape extent")?);
            }
            return Ok(ShapeArg::Imm(dims));
        }
        Ok(ShapeArg::Ref(Box::new(self.expr()?)))
    }

    /// `const` payload: a scalar or rectangular nested brackets. Any float
    /// anywhere makes the tensor f32, otherwise it is i64.
    fn literal(&mut self) -> Result<TensorLiteral, ParseError> {
        #[derive(Debug)]
        enum Node {
            F(f32),
            I(i64),
            List(Vec<Node>),
        }
        fn read(p: &mut Parser) -> Result<Node, ParseError> {
            match p.peek().clone() {
                Tok::Int(v) => {
                    p.bump();
                    Ok(Node::I(v))
                }
                Tok::Float(v) => {
                    p.bump();
                    Ok(Node::F(v))
                }
                Tok::LBracket => {
                    p.bump();
                    let mut elems = Vec::new();
                    while !p.eat(&Tok::RBracket) {
                        if !elems.is_empty() {
                            p.expect(&Tok::Comma)?;
                        }
                        elems.push(read(p)?);
                    }
                    Ok(Node::List(elems))
                }
                other => Err(p.err(format!("expected literal data, found {other}"))),
            }
        }
        fn shape_of(n: &Node) -> Result<Vec<usize>, String> {
            match n {
                Node::F(_) | Node::I(_) => Ok(Vec::new()),
                Node::List(elems) => {
                    if elems.is_empty() {
                        return Err("empty literal".into());
                    }
                    let first = shape_of(&elems[0])?;
                    for e in &elems[1..] {
                        if shape_of(e)? != first {
                            return Err("ragged literal".into());
                        }
                    }
                    let mut s = vec![elems.len()];
                    s.extend(first);
                    Ok(s)
                }
            }
        }
        fn has_float(n: &Node) -> bool {
            match n {
                Node::F(_) => true,
                Node::I(_) => false,
                Node::List(elems) => elems.iter().any(has_float),
            }
        }
        fn flatten(n: &Node, f: &mut Vec<f32>, i: &mut Vec<i64>, as_float: bool) {
            match n {
                Node::F(v) => f.push(*v),
                Node::I(v) => {
                    if as_float {
                        f.push(*v as f32);
                    } else {
                        i.push(*v);
                    }
                }
                Node::List(elems) => {
                    for e in elems {
                        flatten(e, f, i, as_float);
                    }
                }
            }
        }
        let node = read(self)?;
        let shape = shape_of(&node).map_err(|msg| self.err(msg))?;
        let as_float = has_float(&node);
        let mut fs = Vec::new();
        let mut is = Vec::new();
        flatten(&node, &mut fs, &mut is, as_float);
        let data = if as_float { ScalarData::F32(fs) } else { ScalarData::I64(is) };
        TensorLiteral::new(shape, data).map_err(|e| self.err(e.msg))
    }

    // -- items ----------------------------------------------------------------

    fn module(&mut self, stage: Stage) -> Result<Module, ParseError> {
        let mut m = Module::new();
        m.stage = stage;
        loop {
            if *self.peek() == Tok::Eof {
                break;
            }
            if self.eat_kw("data") {
                let name = self.ident("a constructor name")?;
                self.expect(&Tok::LParen)?;
                let mut fields = Vec::new();
                while !self.eat(&Tok::RParen) {
                    if !fields.is_empty() {
                        self.expect(&Tok::Comma)?;
                    }
                    fields.push(self.ty()?);
                }
                self.expect(&Tok::Semi)?;
                if m.adts.contains_key(&name) {
                    return Err(self.err(format!("duplicate constructor `{name}`")));
                }
                self.ctors.push(name.clone());
                m.adts.insert(name.clone(), AdtDef { name, fields });
                continue;
            }
            if self.eat_kw("composite") {
                let name = self.ident("a composite name")?;
                let (def, _) = self.composite()?;
                if m.composites.contains_key(&name) {
                    return Err(self.err(format!("duplicate composite `{name}`")));
                }
                m.composites.insert(name, def);
                continue;
            }
            if self.eat_kw("fn") {
                let name = self.ident("a function name")?;
                self.expect(&Tok::LParen)?;
                let mut params = Vec::new();
                while !self.eat(&Tok::RParen) {
                    if !params.is_empty() {
                        self.expect(&Tok::Comma)?;
                    }
                    let pname = self.binder("a parameter name")?;
                    self.expect(&Tok::Colon)?;
                    let ty = self.ty()?;
                    params.push(Param { name: pname, ty });
                }
                self.expect(&Tok::Arrow)?;
                let ret = self.ty()?;
                let depth = self.scope.len();
                self.scope.extend(params.iter().map(|p| p.name.clone()));
                let body = self.block()?;
                self.scope.truncate(depth);
                if m.functions.contains_key(&name) {
                    return Err(self.err(format!("duplicate function `{name}`")));
                }
                m.functions.insert(name.clone(), FnDef { name, params, ret, body });
                continue;
            }
            return Err(self.err(format!("expected an item, found {}", self.peek())));
        }
        Ok(m)
    }

    /// Composite body: a chain of single-output builtin calls over the
    /// composite inputs and earlier members.
    fn composite(&mut self) -> Result<(CompositeDef, ()), ParseError> {
        self.expect(&Tok::LParen)?;
        let mut inputs = Vec::new();
        while !self.eat(&Tok::RParen) {
            if !inputs.is_empty() {
                self.expect(&Tok::Comma)?;
            }
            inputs.push(self.binder("an input name")?);
        }
        self.expect(&Tok::LBrace)?;
        let mut names: Vec<String> = Vec::new();
        let mut members: Vec<CompositeMember> = Vec::new();
        let resolve = |inputs: &[String], names: &[String], arg: &Expr| -> Option<CompositeArg> {
            let Expr::Var(n) = arg else { return None };
            if let Some(i) = inputs.iter().position(|x| x == n) {
                return Some(CompositeArg::Input(i));
            }
            names.iter().position(|x| x == n).map(CompositeArg::Member)
        };
        loop {
            let named = self.eat_kw("let");
            let bind = if named {
                let n = self.binder("a member name")?;
                self.expect(&Tok::Eq)?;
                Some(n)
            } else {
                None
            };
            let e = self.expr()?;
            let Expr::Call { op, args, attrs } = e else {
                return Err(self.err("composite members must be operator calls"));
            };
            if !crate::ops::is_builtin(&op) {
                return Err(self.err(format!("`{op}` is not an operator")));
            }
            let wired: Option<Vec<CompositeArg>> =
                args.iter().map(|a| resolve(&inputs, &names, a)).collect();
            let wired = wired
                .ok_or_else(|| self.err("composite member arguments must be member or input names"))?;
            members.push(CompositeMember { op, attrs, args: wired });
            match bind {
                Some(n) => {
                    self.expect(&Tok::Semi)?;
                    names.push(n);
                    self.scope.push(String::new());
                    self.scope.pop();
                }
                None => {
                    self.expect(&Tok::RBrace)?;
                    break;
                }
            }
        }
        Ok((CompositeDef { n_inputs: inputs.len(), members }, ()))
    }
}

/// Leading directive comment, e.g. `// stage: memplanned`.
fn scan_stage(src: &str) -> Result<Stage, ParseError> {
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix("// stage:") {
            let name = rest.trim();
            return match name {
                "frontend" => Ok(Stage::Frontend),
                "typed" => Ok(Stage::Typed),
                "fused" => Ok(Stage::Fused),
                "memplanned" => Ok(Stage::MemPlanned),
                "placed" => Ok(Stage::Placed),
                _ => Err(ParseError {
                    line: i + 1,
                    col: 1,
                    msg: format!("unknown stage `{name}`"),
                }),
            };
        }
        break;
    }
    Ok(Stage::Frontend)
}

pub fn parse_module(src: &str) -> Result<Module, ParseError> {
    let stage = scan_stage(src)?;
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, scope: Vec::new(), ctors: Vec::new() };
    p.module(stage)
}

/// Parses a single expression, for tests and diagnostics.
pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, scope: Vec::new(), ctors: Vec::new() };
    let e = p.expr()?;
    p.expect(&Tok::Eof)?;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::print::{print_expr, print_module};

    fn roundtrip(src: &str) {
        let m = parse_module(src).expect("parses");
        let printed = print_module(&m);
        let again = parse_module(&printed).expect("reparses");
        assert_eq!(print_module(&again), printed, "printing is a fixed point");
        assert!(crate::ir::expr::alpha_eq(&m, &again));
    }

    #[test]
    fn parses_paper_style_memplanned_body() {
        let src = "// stage: memplanned\n\
                   fn main(t1: Tensor<(10), f32>, t2: Tensor<(10), f32>) -> Tensor<(10), f32> {\n\
                   let buf1 = alloc_storage(40,64,cpu);\n\
                   let out1 = alloc_tensor(buf1,0,(10),f32);\n\
                   invoke_mut(add, (t1, t2), (out1));\n\
                   out1\n\
                   }\n";
        let m = parse_module(src).unwrap();
        assert_eq!(m.stage, Stage::MemPlanned);
        let printed = print_module(&m);
        assert!(printed.contains("let buf1 = alloc_storage(40,64,cpu);"), "{printed}");
        assert!(printed.contains("let out1 = alloc_tensor(buf1,0,(10),f32);"), "{printed}");
        assert!(printed.contains("invoke_mut(add, (t1, t2), (out1));"), "{printed}");
        roundtrip(src);
    }

    #[test]
    fn resolves_apply_vs_call_vs_construct() {
        let src = "data Pair(Tensor<(2), f32>, Tensor<(2), f32>);\n\
                   fn main(x: Tensor<(2), f32>) -> adt {\n\
                   let f = fn(v: Tensor<(2), f32>) -> Tensor<(2), f32> {\n\
                   add(v, v)\n\
                   };\n\
                   let y = f(x);\n\
                   Pair(y, add(x, y))\n\
                   }\n";
        let m = parse_module(src).unwrap();
        let body = &m.functions["main"].body;
        let printed = print_expr(body);
        assert!(printed.contains("let y = f(x);"));
        assert!(printed.contains("Pair(y, add(x, y))"));
        let Expr::Let { body: inner, .. } = body else { panic!() };
        let Expr::Let { value, .. } = &**inner else { panic!() };
        assert!(matches!(&**value, Expr::Apply { .. }));
        roundtrip(src);
    }

    #[test]
    fn parses_types_and_sugar() {
        let m = parse_module(
            "fn main(a: Tensor<10>, b: Tensor<(2, ?), i64>, c: (Tensor<(1)>, adt), d: fn(storage) -> ()) -> () {\n()\n}",
        )
        .unwrap();
        let ps = &m.functions["main"].params;
        assert_eq!(ps[0].ty.to_string(), "Tensor<(10), f32>");
        assert_eq!(ps[1].ty.to_string(), "Tensor<(2, ?), i64>");
        assert_eq!(ps[2].ty.to_string(), "(Tensor<(1), f32>, adt)");
        assert_eq!(ps[3].ty.to_string(), "fn(storage) -> ()");
    }

    #[test]
    fn parses_literals_and_scalars() {
        let e = parse_expr("const([[1, 2], [3, 4]])").unwrap();
        let Expr::Constant(lit) = &e else { panic!() };
        assert_eq!(lit.shape, vec![2, 2]);
        assert_eq!(lit.data, ScalarData::I64(vec![1, 2, 3, 4]));

        let e = parse_expr("const([1.5, -2.0])").unwrap();
        let Expr::Constant(lit) = &e else { panic!() };
        assert_eq!(lit.data, ScalarData::F32(vec![1.5, -2.0]));

        // A mixed literal promotes to f32; bare numbers are scalar constants.
        let e = parse_expr("const([1, 2.5])").unwrap();
        let Expr::Constant(lit) = &e else { panic!() };
        assert_eq!(lit.data, ScalarData::F32(vec![1.0, 2.5]));
        assert!(matches!(parse_expr("42").unwrap(), Expr::Constant(_)));

        assert!(parse_expr("const([[1], [2, 3]])").is_err());
        assert!(parse_expr("const([])").is_err());
    }

    #[test]
    fn parses_match_if_and_attrs() {
        let src = "data Leaf(Tensor<(?), i64>);\n\
                   data Node(adt, adt);\n\
                   fn main(t: adt, c: Tensor<(), i64>) -> Tensor<(?), i64> {\n\
                   let r = if (c) {\n\
                   arange(0, 5, 1)\n\
                   } else {\n\
                   arange(0, 3, 1)\n\
                   };\n\
                   match (t) {\n\
                   Leaf(v) => {\n\
                   concat(v, r, axis=0)\n\
                   },\n\
                   Node(l, r2) => {\n\
                   r\n\
                   },\n\
                   }\n\
                   }\n";
        roundtrip(src);
    }

    #[test]
    fn parses_composites() {
        let src = "composite fused[add|multiply](x0, x1) {\n\
                   let t0 = add(x0, x1);\n\
                   multiply(t0, x1)\n\
                   }\n\
                   fn main(a: Tensor<(4), f32>) -> Tensor<(4), f32> {\n\
                   fused[add|multiply](a, a)\n\
                   }\n";
        let m = parse_module(src).unwrap();
        let def = &m.composites["fused[add|multiply]"];
        assert_eq!(def.n_inputs, 2);
        assert_eq!(def.members.len(), 2);
        assert_eq!(def.members[1].args, vec![CompositeArg::Member(0), CompositeArg::Input(1)]);
        roundtrip(src);
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = parse_module("fn main() -> () {\n()\n").unwrap_err();
        assert_eq!(err.line, 3);
        let err = parse_module("fn main() -> () {\nlet if = 3;\n()\n}\n").unwrap_err();
        assert!(err.msg.contains("reserved"), "{err}");
    }

    #[test]
    fn shape_and_device_forms() {
        roundtrip(
            "// stage: placed\n\
             fn main(x: Tensor<(?, 3), f32>, n: Tensor<(2), i64>) -> Tensor<(?, ?), f32> {\n\
             let b = alloc_storage(12,64,?);\n\
             let d = device_copy(x, cpu, dev0);\n\
             let s = shape_of(d);\n\
             let t = alloc_tensor(b,0,n,f32);\n\
             invoke_shape_func(add, (s, s), (n), static1=(3));\n\
             reshape_tensor(t, (3,1));\n\
             kill(d);\n\
             t\n\
             }\n",
        );
    }
}
