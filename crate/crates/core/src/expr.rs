//! Scalar expression language.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' exponent)?
//! exponent:= '-' exponent | power
//! primary := number | name | name '(' expr ')' | '(' expr ')'
//! ```
//!
//! `^` is right-associative and binds tighter than unary minus, so `-x^2`
//! is `-(x^2)`. There is no implicit multiplication. Functions: `sin cos tan
//! exp log sqrt abs`, each taking one argument. `abs(u)` is evaluated as
//! `sqrt(u^2)` and rejected when `|u|` falls inside the slit ball.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::jet::{Jet2, ScalarField};

pub const DEFAULT_SLIT_EPS: f64 = 1e-6;

/// Coordinate role of a context variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Base,
    Fibre,
    BaseVelocity,
    FibreVelocity,
    Other,
}

/// Ordered variable names with roles, plus named constants.
#[derive(Debug, Clone, PartialEq)]
pub struct VarContext {
    names: Vec<String>,
    roles: Vec<Role>,
    constants: BTreeMap<String, f64>,
    slit_eps: f64,
}

fn numbered(prefix: &str, count: usize, role: Role) -> impl Iterator<Item = (String, Role)> + '_ {
    (1..=count).map(move |i| (format!("{prefix}{i}"), role))
}

impl VarContext {
    fn build(vars: impl IntoIterator<Item = (String, Role)>) -> Self {
        let (names, roles) = vars.into_iter().unzip();
        let mut constants = BTreeMap::new();
        constants.insert("pi".to_string(), std::f64::consts::PI);
        Self {
            names,
            roles,
            constants,
            slit_eps: DEFAULT_SLIT_EPS,
        }
    }

    /// `(x, y, v, w)` on `TM`.
    pub fn tangent(n: usize, m: usize) -> Self {
        Self::build(
            numbered("x", n, Role::Base)
                .chain(numbered("y", m, Role::Fibre))
                .chain(numbered("v", n, Role::BaseVelocity))
                .chain(numbered("w", m, Role::FibreVelocity)),
        )
    }

    /// `(x, y, v)` on the pullback bundle.
    pub fn pullback(n: usize, m: usize) -> Self {
        Self::build(
            numbered("x", n, Role::Base)
                .chain(numbered("y", m, Role::Fibre))
                .chain(numbered("v", n, Role::BaseVelocity)),
        )
    }

    /// `(x, y)` on `M`.
    pub fn positions(n: usize, m: usize) -> Self {
        Self::build(numbered("x", n, Role::Base).chain(numbered("y", m, Role::Fibre)))
    }

    /// `x` on `N`.
    pub fn base(n: usize) -> Self {
        Self::build(numbered("x", n, Role::Base))
    }

    /// `(x, v)` on `TN`.
    pub fn base_tangent(n: usize) -> Self {
        Self::build(numbered("x", n, Role::Base).chain(numbered("v", n, Role::BaseVelocity)))
    }

    /// Free-form variables, e.g. a curve parameter `t`.
    pub fn custom(names: &[&str]) -> Result<Self> {
        let ctx = Self::build(names.iter().map(|s| (s.to_string(), Role::Other)));
        for (i, a) in ctx.names.iter().enumerate() {
            if ctx.names[..i].contains(a) {
                return Err(Error::InvalidInput(format!("variable `{a}` declared twice")));
            }
        }
        Ok(ctx)
    }

    pub fn with_constants(mut self, constants: &BTreeMap<String, f64>) -> Result<Self> {
        for (k, v) in constants {
            if self.names.contains(k) {
                return Err(Error::InvalidInput(format!("constant `{k}` shadows a coordinate")));
            }
            self.constants.insert(k.clone(), *v);
        }
        Ok(self)
    }

    pub fn with_slit_eps(mut self, slit_eps: f64) -> Self {
        self.slit_eps = slit_eps;
        self
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn role(&self, index: usize) -> Role {
        self.roles[index]
    }

    pub fn slit_eps(&self) -> f64 {
        self.slit_eps
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    pub const ALL: [Func; 7] = [
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Abs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Parsed expression tree. Variables are resolved to context indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Constant(String, f64),
    Var(usize, String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

fn real_pow_const(x: f64, c: f64) -> Result<f64> {
    if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 {
        if x == 0.0 && c < 0.0 {
            return Err(Error::domain("division by zero in negative power"));
        }
        return Ok(x.powi(c as i32));
    }
    if x < 0.0 {
        return Err(Error::domain(format!("non-integer power {c} of negative value {x}")));
    }
    if x == 0.0 {
        return Err(Error::domain("non-integer power is not differentiable at 0"));
    }
    Ok(x.powf(c))
}

impl Expr {
    /// True when no coordinate occurs in the tree.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Number(_) | Expr::Constant(..) => true,
            Expr::Var(..) => false,
            Expr::Neg(a) | Expr::Call(_, a) => a.is_constant(),
            Expr::Binary(_, a, b) => a.is_constant() && b.is_constant(),
        }
    }

    /// Indices of the context variables that occur in the tree.
    pub fn variables(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Var(i, _) => out.push(*i),
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            _ => {}
        }
    }

    /// True when the tree contains an operation that is not smooth at zero
    /// (`abs`, `sqrt`, or a non-integer power).
    pub fn has_kink(&self) -> bool {
        match self {
            Expr::Call(Func::Abs | Func::Sqrt, _) => true,
            Expr::Binary(BinOp::Pow, a, b) => {
                let integer_exponent = b.is_constant()
                    && b.eval_real(&[], f64::MIN_POSITIVE)
                        .map(|c| c.fract() == 0.0)
                        .unwrap_or(false);
                !integer_exponent || a.has_kink() || b.has_kink()
            }
            Expr::Neg(a) | Expr::Call(_, a) => a.has_kink(),
            Expr::Binary(_, a, b) => a.has_kink() || b.has_kink(),
            _ => false,
        }
    }

    /// The operands of the outermost chain of `+` and `-`.
    pub fn top_level_summands(&self) -> Vec<&Expr> {
        match self {
            Expr::Binary(BinOp::Add | BinOp::Sub, a, b) => {
                let mut out = a.top_level_summands();
                out.push(b);
                out
            }
            other => vec![other],
        }
    }

    /// Evaluation over jets; `vars` holds one seeded jet per context variable.
    pub fn eval_jet(&self, vars: &[Jet2], slit_eps: f64) -> Result<Jet2> {
        let dim = vars.first().map(Jet2::dim).unwrap_or(0);
        match self {
            Expr::Number(c) | Expr::Constant(_, c) => Ok(Jet2::constant(dim, *c)),
            Expr::Var(i, _) => Ok(vars[*i].clone()),
            Expr::Neg(a) => Ok(-a.eval_jet(vars, slit_eps)?),
            Expr::Binary(op, a, b) => {
                let x = a.eval_jet(vars, slit_eps)?;
                if *op == BinOp::Pow && b.is_constant() {
                    let c = b.eval_real(&[], slit_eps)?;
                    return x.powf(c);
                }
                let y = b.eval_jet(vars, slit_eps)?;
                match op {
                    BinOp::Add => Ok(&x + &y),
                    BinOp::Sub => Ok(&x - &y),
                    BinOp::Mul => Ok(&x * &y),
                    BinOp::Div => x.checked_div(&y),
                    BinOp::Pow => x.pow_var(&y),
                }
            }
            Expr::Call(f, a) => {
                let x = a.eval_jet(vars, slit_eps)?;
                match f {
                    Func::Sin => Ok(x.sin()),
                    Func::Cos => Ok(x.cos()),
                    Func::Tan => x.tan(),
                    Func::Exp => Ok(x.exp()),
                    Func::Log => x.ln(),
                    Func::Sqrt => x.sqrt(),
                    Func::Abs => x.abs_slit(slit_eps),
                }
            }
        }
    }

    /// Plain real evaluation mirroring [`Expr::eval_jet`] operation for operation.
    pub fn eval_real(&self, point: &[f64], slit_eps: f64) -> Result<f64> {
        let v = match self {
            Expr::Number(c) | Expr::Constant(_, c) => *c,
            Expr::Var(i, _) => point[*i],
            Expr::Neg(a) => -a.eval_real(point, slit_eps)?,
            Expr::Binary(op, a, b) => {
                let x = a.eval_real(point, slit_eps)?;
                let y = b.eval_real(point, slit_eps)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(Error::domain("division by zero"));
                        }
                        x / y
                    }
                    BinOp::Pow if b.is_constant() => real_pow_const(x, y)?,
                    BinOp::Pow => {
                        if !(x > 0.0) {
                            return Err(Error::domain(format!(
                                "variable exponent needs a positive base, got {x}"
                            )));
                        }
                        (y * x.ln()).exp()
                    }
                }
            }
            Expr::Call(f, a) => {
                let x = a.eval_real(point, slit_eps)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Tan => {
                        if x.cos().abs() < 1e-300 {
                            return Err(Error::domain("tan at a pole"));
                        }
                        x.tan()
                    }
                    Func::Exp => x.exp(),
                    Func::Log => {
                        if !(x > 0.0) {
                            return Err(Error::domain(format!("log of nonpositive value {x}")));
                        }
                        x.ln()
                    }
                    Func::Sqrt => {
                        if !(x > 0.0) {
                            return Err(Error::domain(format!("sqrt needs a positive value, got {x}")));
                        }
                        x.sqrt()
                    }
                    Func::Abs => {
                        if x.abs() < slit_eps || x == 0.0 {
                            return Err(Error::domain("abs evaluated inside the slit ball"));
                        }
                        (x * x).sqrt()
                    }
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::domain("non-finite intermediate value"))
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Binary(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, e: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// Prints with the fewest parentheses that reparse to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(c) => write!(f, "{c:?}"),
            Expr::Constant(name, _) | Expr::Var(_, name) => write!(f, "{name}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_wrapped(f, a, a.precedence() < 3)
            }
            Expr::Binary(BinOp::Pow, a, b) => {
                write_wrapped(f, a, a.precedence() <= 4)?;
                write!(f, "^")?;
                write_wrapped(f, b, b.precedence() < 3)
            }
            Expr::Binary(op, a, b) => {
                let p = self.precedence();
                write_wrapped(f, a, a.precedence() < p)?;
                write!(f, " {} ", op.symbol())?;
                write_wrapped(f, b, b.precedence() <= p)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s = &text[start..i];
            let v: f64 = s.parse().map_err(|_| Error::Syntax {
                offset: start,
                message: format!("malformed number `{s}`"),
            })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(text[start..i].to_string()), start));
        } else if "+-*/^(),".contains(c) {
            out.push((Tok::Sym(c), i));
            i += 1;
        } else {
            let ch = text[i..].chars().next().unwrap_or(c);
            return Err(Error::Syntax {
                offset: i,
                message: format!("unexpected character `{ch}`"),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    ctx: &'a VarContext,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn peek_sym(&self, c: char) -> bool {
        self.peek() == Some(&Tok::Sym(c))
    }

    /// Offset of the current token, or of the last token at end of input.
    fn offset(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|(_, o)| *o)
            .unwrap_or(0)
    }

    fn syntax(&self, message: impl Into<String>) -> Error {
        Error::Syntax {
            offset: self.offset(),
            message: message.into(),
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<()> {
        if self.peek_sym(c) {
            self.pos += 1;
            Ok(())
        } else if self.peek().is_none() {
            Err(self.syntax(format!("expected `{c}` before end of input")))
        } else {
            Err(self.syntax(format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.peek_sym('+') {
                BinOp::Add
            } else if self.peek_sym('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.peek_sym('*') {
                BinOp::Mul
            } else if self.peek_sym('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek_sym('-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.peek_sym('^') {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        let Some((tok, offset)) = self.toks.get(self.pos).cloned() else {
            return Err(self.syntax("unexpected end of input"));
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Expr::Number(v))
            }
            Tok::Sym('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_sym(')')?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                if self.peek_sym('(') {
                    return self.call(name, offset);
                }
                if let Some(i) = self.ctx.index_of(&name) {
                    Ok(Expr::Var(i, name))
                } else if let Some(c) = self.ctx.constant(&name) {
                    Ok(Expr::Constant(name, c))
                } else if Func::from_name(&name).is_some() {
                    Err(Error::Syntax {
                        offset,
                        message: format!("function `{name}` needs an argument list"),
                    })
                } else {
                    Err(Error::UnknownIdentifier { name, offset })
                }
            }
            Tok::Sym(c) => Err(self.syntax(format!("unexpected `{c}`"))),
        }
    }

    fn call(&mut self, name: String, offset: usize) -> Result<Expr> {
        let Some(func) = Func::from_name(&name) else {
            return Err(Error::UnknownIdentifier { name, offset });
        };
        self.expect_sym('(')?;
        let mut args = Vec::new();
        if !self.peek_sym(')') {
            args.push(self.expr()?);
            while self.peek_sym(',') {
                self.pos += 1;
                args.push(self.expr()?);
            }
        }
        self.expect_sym(')')?;
        if args.len() != 1 {
            return Err(Error::Arity {
                name,
                expected: 1,
                found: args.len(),
            });
        }
        Ok(Expr::Call(func, Box::new(args.pop().unwrap())))
    }
}

/// Parses `text` against the variables and constants of `ctx`.
pub fn parse_expression(text: &str, ctx: &VarContext) -> Result<Expr> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(Error::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let mut p = Parser { toks, pos: 0, ctx };
    let e = p.expr()?;
    if p.pos < p.toks.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

/// Wraps an expression as a field over all of `ctx`'s coordinates.
pub fn to_scalar_field(ast: &Expr, ctx: &VarContext) -> ScalarField {
    let expr = Arc::new(ast.clone());
    let slit_eps = ctx.slit_eps();
    ScalarField::new(ctx.len(), ast.to_string(), move |p: &[f64]| {
        expr.eval_jet(&Jet2::seed(p), slit_eps)
    })
}

/// Parses and wraps in one step.
pub fn compile(text: &str, ctx: &VarContext) -> Result<ScalarField> {
    Ok(to_scalar_field(&parse_expression(text, ctx)?, ctx))
}
