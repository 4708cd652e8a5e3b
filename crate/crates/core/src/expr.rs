//! Arithmetic expression parsing and evaluation for model coefficients.
//!
//! Coefficients (drift, diffusion, drivers, terminal conditions) are written as
//! plain ASCII formulas over a fixed, slot-dependent variable list — e.g. a
//! driver for a two-component system may reference `t, x, y1, y2, z`. The
//! grammar supports `+ - * / ^`, unary minus, parentheses, numeric literals,
//! and the function set `sin cos exp log sqrt abs tanh` (unary) plus
//! `min max` (binary).
//!
//! Precedence, tightest first: `^`, unary `-`, `* /`, `+ -`. Binary `+ - * /`
//! are left-associative; `^` is right-associative and its base must be an
//! atom, so `-x^2` is `-(x^2)` and `(a^b)^c` keeps its parentheses when
//! printed. Parsing is whitespace-insensitive.
//!
//! Expressions compile to a small postfix program evaluated on a fixed-size
//! value stack, so per-call cost stays low inside Monte Carlo loops. The fast
//! path skips per-node finiteness checks; when the final value is not finite,
//! a diagnostic pass re-walks the tree and reports the innermost offending
//! operation (log of a non-positive value, division by zero, overflow, ...).

use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

/// Maximum operand-stack depth a compiled expression may need.
///
/// Evaluation uses a stack allocated on the call frame; expressions deeper
/// than this are rejected at parse time (they do not occur in practice).
pub const MAX_STACK: usize = 64;

/// Parse-time failures, with byte offsets into the source string.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("parse error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown variable `{name}` at byte {pos} (allowed here: {allowed})")]
    UnknownVariable {
        pos: usize,
        name: String,
        allowed: String,
    },
    #[error("unknown function `{name}` at byte {pos}")]
    UnknownFunction { pos: usize, name: String },
    #[error("function `{name}` at byte {pos} takes {expected} argument(s), got {got}")]
    Arity {
        pos: usize,
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("expression nesting exceeds the supported stack depth of {MAX_STACK}")]
    TooDeep,
}

/// Evaluation failures for a well-formed expression.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("expected {expected} variable bindings, got {got}")]
    BindingCount { expected: usize, got: usize },
    #[error("non-finite value in `{context}`: {detail}")]
    NonFinite { context: String, detail: String },
}

/// Unary function names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func1 {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
}

impl Func1 {
    fn name(self) -> &'static str {
        match self {
            Func1::Sin => "sin",
            Func1::Cos => "cos",
            Func1::Exp => "exp",
            Func1::Log => "log",
            Func1::Sqrt => "sqrt",
            Func1::Abs => "abs",
            Func1::Tanh => "tanh",
        }
    }

    fn apply(self, a: f64) -> f64 {
        match self {
            Func1::Sin => a.sin(),
            Func1::Cos => a.cos(),
            Func1::Exp => a.exp(),
            Func1::Log => a.ln(),
            Func1::Sqrt => a.sqrt(),
            Func1::Abs => a.abs(),
            Func1::Tanh => a.tanh(),
        }
    }
}

/// Binary function names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func2 {
    Min,
    Max,
}

impl Func2 {
    fn name(self) -> &'static str {
        match self {
            Func2::Min => "min",
            Func2::Max => "max",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Func2::Min => a.min(b),
            Func2::Max => a.max(b),
        }
    }
}

/// Binary arithmetic operators.
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

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Pow => a.powf(b),
        }
    }
}

/// Expression tree. Variables are indices into the slot's variable list.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

/// Syntactic degree of `node` in variable `v`: `0` when the subtree cannot
/// depend on `v`, `1` when it is affine in `v` (coefficients may involve
/// other variables), `2` otherwise. Conservative: anything not provably
/// affine — powers, function applications, division by `v` — reports `2`.
fn degree_in(node: &Node, v: usize) -> u8 {
    match node {
        Node::Num(_) => 0,
        Node::Var(i) => u8::from(*i == v),
        Node::Neg(a) => degree_in(a, v),
        Node::Bin(op, a, b) => {
            let (da, db) = (degree_in(a, v), degree_in(b, v));
            match op {
                BinOp::Add | BinOp::Sub => da.max(db),
                BinOp::Mul => match (da, db) {
                    (0, d) | (d, 0) => d,
                    _ => 2,
                },
                BinOp::Div => {
                    if db == 0 {
                        da
                    } else {
                        2
                    }
                }
                BinOp::Pow => {
                    if da == 0 && db == 0 {
                        0
                    } else {
                        2
                    }
                }
            }
        }
        Node::Call1(_, a) => {
            if degree_in(a, v) == 0 {
                0
            } else {
                2
            }
        }
        Node::Call2(_, a, b) => {
            if degree_in(a, v) == 0 && degree_in(b, v) == 0 {
                0
            } else {
                2
            }
        }
    }
}

/// Compiled postfix instruction.
#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Var(u16),
    Bin(BinOp),
    Neg,
    Fn1(Func1),
    Fn2(Func2),
}

/// A parsed, compiled expression bound to a fixed variable list.
///
/// `eval` expects one binding per declared variable, in declaration order,
/// whether or not the expression references it — partial binding vectors are
/// rejected so call sites cannot silently misalign slots.
#[derive(Debug, Clone)]
pub struct ExprAst {
    source: String,
    vars: Vec<String>,
    root: Node,
    program: Vec<Instr>,
    free: u64,
}

impl Serialize for ExprAst {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.source)
    }
}

impl PartialEq for ExprAst {
    fn eq(&self, other: &Self) -> bool {
        self.vars == other.vars && self.root == other.root
    }
}

impl ExprAst {
    /// Parse `source` against an ordered variable list.
    ///
    /// Identifiers outside `vars` (and outside the function set) are
    /// rejected, which is how slot scoping is enforced: a terminal condition
    /// parsed with `["x"]` cannot reference `y1`.
    pub fn parse(source: &str, vars: &[&str]) -> Result<Self, ParseError> {
        assert!(vars.len() <= 64, "variable slots are limited to 64");
        let tokens = tokenize(source)?;
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            vars,
        };
        let root = parser.parse_expr()?;
        if let Some(tok) = parser.peek() {
            return Err(ParseError::Syntax {
                pos: tok.pos,
                message: format!("unexpected `{}` after complete expression", tok.text()),
            });
        }
        let mut program = Vec::new();
        compile(&root, &mut program);
        if stack_need(&root) > MAX_STACK {
            return Err(ParseError::TooDeep);
        }
        let mut free = 0u64;
        collect_free(&root, &mut free);
        Ok(ExprAst {
            source: source.to_string(),
            vars: vars.iter().map(|s| s.to_string()).collect(),
            root,
            program,
            free,
        })
    }

    /// The original source text.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Declared variable names, in binding order.
    pub fn var_names(&self) -> &[String] {
        &self.vars
    }

    /// Number of bindings `eval` expects.
    pub fn arity(&self) -> usize {
        self.vars.len()
    }

    /// Whether the expression actually references variable slot `idx`.
    pub fn uses_var(&self, idx: usize) -> bool {
        idx < 64 && self.free & (1 << idx) != 0
    }

    /// Indices of all referenced variables.
    pub fn free_vars(&self) -> Vec<usize> {
        (0..self.vars.len()).filter(|&i| self.uses_var(i)).collect()
    }

    /// Whether the expression is affine in variable `idx` for every fixed
    /// assignment of the other variables — i.e. of the form `a(..)*v + b(..)`
    /// with `a`, `b` not involving `v`. Unreferenced variables count as
    /// affine (constant). The analysis is syntactic and conservative: it may
    /// answer `false` for an expression that happens to be affine (e.g.
    /// `v^1`), but never `true` for one that is not.
    pub fn affine_in(&self, idx: usize) -> bool {
        degree_in(&self.root, idx) <= 1
    }

    /// Root of the expression tree (used by tests and the printer).
    pub fn root(&self) -> &Node {
        &self.root
    }

    /// Evaluate with one binding per declared variable.
    ///
    /// Returns a finite value or a diagnosed domain error; non-finite results
    /// never escape silently.
    pub fn eval(&self, bindings: &[f64]) -> Result<f64, EvalError> {
        if bindings.len() != self.vars.len() {
            return Err(EvalError::BindingCount {
                expected: self.vars.len(),
                got: bindings.len(),
            });
        }
        let v = self.eval_raw(bindings);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.diagnose(bindings))
        }
    }

    /// Straight-line evaluation of the compiled program; NaN/inf propagate.
    fn eval_raw(&self, bindings: &[f64]) -> f64 {
        let mut stack = [0.0f64; MAX_STACK];
        let mut sp = 0usize;
        for ins in &self.program {
            match *ins {
                Instr::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Instr::Var(i) => {
                    stack[sp] = bindings[i as usize];
                    sp += 1;
                }
                Instr::Neg => stack[sp - 1] = -stack[sp - 1],
                Instr::Fn1(f) => stack[sp - 1] = f.apply(stack[sp - 1]),
                Instr::Bin(op) => {
                    sp -= 1;
                    stack[sp - 1] = op.apply(stack[sp - 1], stack[sp]);
                }
                Instr::Fn2(f) => {
                    sp -= 1;
                    stack[sp - 1] = f.apply(stack[sp - 1], stack[sp]);
                }
            }
        }
        stack[0]
    }

    /// Walk the tree to locate the innermost non-finite operation.
    fn diagnose(&self, bindings: &[f64]) -> EvalError {
        match diagnose_node(&self.root, bindings, &self.vars) {
            Err(e) => e,
            // The fast path saw a non-finite value, so the walk must too.
            Ok(v) => EvalError::NonFinite {
                context: self.source.clone(),
                detail: format!("value {v} (inconsistent diagnosis)"),
            },
        }
    }
}

impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        print_node(&self.root, &self.vars, 0, f)
    }
}

fn compile(node: &Node, out: &mut Vec<Instr>) {
    match node {
        Node::Num(v) => out.push(Instr::Const(*v)),
        Node::Var(i) => out.push(Instr::Var(*i as u16)),
        Node::Neg(a) => {
            compile(a, out);
            out.push(Instr::Neg);
        }
        Node::Bin(op, a, b) => {
            compile(a, out);
            compile(b, out);
            out.push(Instr::Bin(*op));
        }
        Node::Call1(f, a) => {
            compile(a, out);
            out.push(Instr::Fn1(*f));
        }
        Node::Call2(f, a, b) => {
            compile(a, out);
            compile(b, out);
            out.push(Instr::Fn2(*f));
        }
    }
}

fn stack_need(node: &Node) -> usize {
    match node {
        Node::Num(_) | Node::Var(_) => 1,
        Node::Neg(a) | Node::Call1(_, a) => stack_need(a),
        Node::Bin(_, a, b) | Node::Call2(_, a, b) => {
            // Left operand stays on the stack while the right evaluates.
            stack_need(a).max(stack_need(b) + 1)
        }
    }
}

fn collect_free(node: &Node, free: &mut u64) {
    match node {
        Node::Num(_) => {}
        Node::Var(i) => *free |= 1 << i,
        Node::Neg(a) | Node::Call1(_, a) => collect_free(a, free),
        Node::Bin(_, a, b) | Node::Call2(_, a, b) => {
            collect_free(a, free);
            collect_free(b, free);
        }
    }
}

fn diagnose_node(node: &Node, bindings: &[f64], vars: &[String]) -> Result<f64, EvalError> {
    let err = |context: String, detail: String| EvalError::NonFinite { context, detail };
    match node {
        Node::Num(v) => Ok(*v),
        Node::Var(i) => Ok(bindings[*i]),
        Node::Neg(a) => Ok(-diagnose_node(a, bindings, vars)?),
        Node::Call1(f, a) => {
            let x = diagnose_node(a, bindings, vars)?;
            let v = f.apply(x);
            if v.is_finite() {
                Ok(v)
            } else {
                let detail = match f {
                    Func1::Log if x <= 0.0 => format!("log of non-positive argument {x}"),
                    Func1::Sqrt if x < 0.0 => format!("sqrt of negative argument {x}"),
                    Func1::Exp => format!("exp overflow at argument {x}"),
                    _ => format!("argument {x} gives {v}"),
                };
                Err(err(format!("{}(..)", f.name()), detail))
            }
        }
        Node::Call2(f, a, b) => {
            let x = diagnose_node(a, bindings, vars)?;
            let y = diagnose_node(b, bindings, vars)?;
            let v = f.apply(x, y);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(
                    format!("{}(..)", f.name()),
                    format!("arguments ({x}, {y}) give {v}"),
                ))
            }
        }
        Node::Bin(op, a, b) => {
            let x = diagnose_node(a, bindings, vars)?;
            let y = diagnose_node(b, bindings, vars)?;
            let v = op.apply(x, y);
            if v.is_finite() {
                Ok(v)
            } else {
                let detail = match op {
                    BinOp::Div if y == 0.0 => "division by zero".to_string(),
                    BinOp::Pow => format!("{x} ^ {y} is not finite"),
                    _ => format!("{x} {} {y} overflows", op.symbol()),
                };
                Err(err(format!("operator `{}`", op.symbol()), detail))
            }
        }
    }
}

/// Precedence levels used by both the parser (implicitly, via the grammar)
/// and the printer: `+ -` = 1, `* /` = 2, unary `-` = 3, `^` = 4, atoms = 5.
fn level(node: &Node) -> u8 {
    match node {
        Node::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Node::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Node::Neg(_) => 3,
        Node::Bin(BinOp::Pow, ..) => 4,
        Node::Num(_) | Node::Var(_) | Node::Call1(..) | Node::Call2(..) => 5,
    }
}

/// Minimal-parentheses printer; `parse(print(ast))` reproduces the tree.
fn print_node(
    node: &Node,
    vars: &[String],
    min_level: u8,
    f: &mut fmt::Formatter<'_>,
) -> fmt::Result {
    let lvl = level(node);
    let parens = lvl < min_level;
    if parens {
        write!(f, "(")?;
    }
    match node {
        Node::Num(v) => write!(f, "{v}")?,
        Node::Var(i) => write!(f, "{}", vars[*i])?,
        Node::Neg(a) => {
            write!(f, "-")?;
            print_node(a, vars, 3, f)?;
        }
        Node::Bin(op @ BinOp::Pow, a, b) => {
            // Base must be an atom; exponent admits unary expressions and
            // associates to the right.
            print_node(a, vars, 5, f)?;
            write!(f, "{}", op.symbol())?;
            print_node(b, vars, 3, f)?;
        }
        Node::Bin(op, a, b) => {
            // Left-associative: the right child needs a strictly higher level.
            print_node(a, vars, lvl, f)?;
            write!(f, "{}", op.symbol())?;
            print_node(b, vars, lvl + 1, f)?;
        }
        Node::Call1(fun, a) => {
            write!(f, "{}(", fun.name())?;
            print_node(a, vars, 0, f)?;
            write!(f, ")")?;
        }
        Node::Call2(fun, a, b) => {
            write!(f, "{}(", fun.name())?;
            print_node(a, vars, 0, f)?;
            write!(f, ",")?;
            print_node(b, vars, 0, f)?;
            write!(f, ")")?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone, PartialEq)]
struct Token {
    kind: TokenKind,
    pos: usize,
    len: usize,
    raw: String,
}

impl Token {
    fn text(&self) -> &str {
        &self.raw
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match b {
            b'+' => {
                i += 1;
                TokenKind::Plus
            }
            b'-' => {
                i += 1;
                TokenKind::Minus
            }
            b'*' => {
                i += 1;
                TokenKind::Star
            }
            b'/' => {
                i += 1;
                TokenKind::Slash
            }
            b'^' => {
                i += 1;
                TokenKind::Caret
            }
            b'(' => {
                i += 1;
                TokenKind::LParen
            }
            b')' => {
                i += 1;
                TokenKind::RParen
            }
            b',' => {
                i += 1;
                TokenKind::Comma
            }
            b'0'..=b'9' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                        return Err(ParseError::Syntax {
                            pos: start,
                            message: "digits required after decimal point".into(),
                        });
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    pos: start,
                    message: format!("invalid number literal `{text}`"),
                })?;
                TokenKind::Num(value)
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                TokenKind::Ident(src[start..i].to_string())
            }
            _ => {
                return Err(ParseError::Syntax {
                    pos: start,
                    message: format!("unexpected character `{}`", &src[start..start + 1]),
                });
            }
        };
        out.push(Token {
            kind,
            pos: start,
            len: i - start,
            raw: src[start..i].to_string(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    vars: &'a [&'a str],
}

fn func1_by_name(name: &str) -> Option<Func1> {
    Some(match name {
        "sin" => Func1::Sin,
        "cos" => Func1::Cos,
        "exp" => Func1::Exp,
        "log" => Func1::Log,
        "sqrt" => Func1::Sqrt,
        "abs" => Func1::Abs,
        "tanh" => Func1::Tanh,
        _ => return None,
    })
}

fn func2_by_name(name: &str) -> Option<Func2> {
    Some(match name {
        "min" => Func2::Min,
        "max" => Func2::Max,
        _ => return None,
    })
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn advance(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.peek().map(|t| &t.kind) == Some(kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn end_pos(&self) -> usize {
        self.tokens
            .last()
            .map(|t| t.pos + t.len)
            .unwrap_or(0)
    }

    fn parse_expr(&mut self) -> Result<Node, ParseError> {
        let mut node = self.parse_term()?;
        loop {
            if self.eat(&TokenKind::Plus) {
                let rhs = self.parse_term()?;
                node = Node::Bin(BinOp::Add, Box::new(node), Box::new(rhs));
            } else if self.eat(&TokenKind::Minus) {
                let rhs = self.parse_term()?;
                node = Node::Bin(BinOp::Sub, Box::new(node), Box::new(rhs));
            } else {
                return Ok(node);
            }
        }
    }

    fn parse_term(&mut self) -> Result<Node, ParseError> {
        let mut node = self.parse_unary()?;
        loop {
            if self.eat(&TokenKind::Star) {
                let rhs = self.parse_unary()?;
                node = Node::Bin(BinOp::Mul, Box::new(node), Box::new(rhs));
            } else if self.eat(&TokenKind::Slash) {
                let rhs = self.parse_unary()?;
                node = Node::Bin(BinOp::Div, Box::new(node), Box::new(rhs));
            } else {
                return Ok(node);
            }
        }
    }

    fn parse_unary(&mut self) -> Result<Node, ParseError> {
        if self.eat(&TokenKind::Minus) {
            let inner = self.parse_unary()?;
            Ok(Node::Neg(Box::new(inner)))
        } else {
            self.parse_power()
        }
    }

    fn parse_power(&mut self) -> Result<Node, ParseError> {
        let base = self.parse_atom()?;
        if self.eat(&TokenKind::Caret) {
            // Right-associative; the exponent may carry unary minus.
            let exponent = self.parse_unary()?;
            Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn parse_atom(&mut self) -> Result<Node, ParseError> {
        let end = self.end_pos();
        let tok = match self.advance() {
            Some(t) => t.clone(),
            None => {
                return Err(ParseError::Syntax {
                    pos: end,
                    message: "unexpected end of expression".into(),
                });
            }
        };
        match tok.kind {
            TokenKind::Num(v) => Ok(Node::Num(v)),
            TokenKind::LParen => {
                let inner = self.parse_expr()?;
                if !self.eat(&TokenKind::RParen) {
                    return Err(ParseError::Syntax {
                        pos: self.peek().map(|t| t.pos).unwrap_or(self.end_pos()),
                        message: "expected `)`".into(),
                    });
                }
                Ok(inner)
            }
            TokenKind::Ident(name) => {
                let is_call = self.peek().map(|t| &t.kind) == Some(&TokenKind::LParen);
                if is_call {
                    self.pos += 1; // consume `(`
                    let mut args = vec![self.parse_expr()?];
                    while self.eat(&TokenKind::Comma) {
                        args.push(self.parse_expr()?);
                    }
                    if !self.eat(&TokenKind::RParen) {
                        return Err(ParseError::Syntax {
                            pos: self.peek().map(|t| t.pos).unwrap_or(self.end_pos()),
                            message: "expected `)` closing argument list".into(),
                        });
                    }
                    if let Some(f) = func1_by_name(&name) {
                        if args.len() != 1 {
                            return Err(ParseError::Arity {
                                pos: tok.pos,
                                name,
                                expected: 1,
                                got: args.len(),
                            });
                        }
                        let a = args.pop().expect("one argument");
                        Ok(Node::Call1(f, Box::new(a)))
                    } else if let Some(f) = func2_by_name(&name) {
                        if args.len() != 2 {
                            return Err(ParseError::Arity {
                                pos: tok.pos,
                                name,
                                expected: 2,
                                got: args.len(),
                            });
                        }
                        let b = args.pop().expect("two arguments");
                        let a = args.pop().expect("two arguments");
                        Ok(Node::Call2(f, Box::new(a), Box::new(b)))
                    } else {
                        Err(ParseError::UnknownFunction { pos: tok.pos, name })
                    }
                } else {
                    match self.vars.iter().position(|v| *v == name) {
                        Some(idx) => Ok(Node::Var(idx)),
                        None => Err(ParseError::UnknownVariable {
                            pos: tok.pos,
                            name,
                            allowed: self.vars.join(", "),
                        }),
                    }
                }
            }
            _ => Err(ParseError::Syntax {
                pos: tok.pos,
                message: format!("unexpected `{}`", tok.raw),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_xy(src: &str) -> ExprAst {
        ExprAst::parse(src, &["t", "x", "y1", "y2", "z"]).expect("parse")
    }

    #[test]
    fn literal_and_variable_evaluation() {
        let e = parse_xy("0.5*sin(x)+y1");
        let v = e
            .eval(&[0.0, std::f64::consts::FRAC_PI_2, 2.0, 0.0, 0.0])
            .unwrap();
        assert!((v - 2.5).abs() < 1e-15);
    }

    #[test]
    fn affinity_analysis_is_exact_on_affine_shapes_and_conservative_elsewhere() {
        let cases: &[(&str, &[(&str, bool)])] = &[
            ("1.5*x + 2", &[("x", true), ("t", true)]),
            ("y2*abs(x) - t/2", &[("x", false), ("y2", true), ("t", true)]),
            ("x^2", &[("x", false)]),
            ("sin(x) + 0.25*z", &[("x", false), ("z", true), ("y1", true)]),
            ("(x + 1)/(2 + t^2)", &[("x", true), ("t", false)]),
            ("1/(1 + x)", &[("x", false)]),
            ("min(x, y1)", &[("x", false), ("y1", false), ("z", true)]),
            ("-(3*y1 - y2)*exp(t)", &[("y1", true), ("y2", true), ("t", false)]),
        ];
        let vars = ["t", "x", "y1", "y2", "z"];
        for (src, expect) in cases {
            let e = parse_xy(src);
            for (var, affine) in *expect {
                let idx = vars.iter().position(|v| v == var).unwrap();
                assert_eq!(
                    e.affine_in(idx),
                    *affine,
                    "affine_in({var}) on {src:?}"
                );
            }
        }
    }

    #[test]
    fn precedence_binds_power_over_unary_minus() {
        let e = ExprAst::parse("-x^2", &["x"]).unwrap();
        assert_eq!(e.eval(&[3.0]).unwrap(), -9.0);
        // And the tree shape is Neg(Pow(x, 2)).
        match e.root() {
            Node::Neg(inner) => match inner.as_ref() {
                Node::Bin(BinOp::Pow, ..) => {}
                other => panic!("expected power under negation, got {other:?}"),
            },
            other => panic!("expected negation at root, got {other:?}"),
        }
    }

    #[test]
    fn power_is_right_associative() {
        let e = ExprAst::parse("2^3^2", &[]).unwrap();
        assert_eq!(e.eval(&[]).unwrap(), 512.0);
    }

    #[test]
    fn multiplication_binds_over_addition() {
        let e = ExprAst::parse("2+3*4", &[]).unwrap();
        assert_eq!(e.eval(&[]).unwrap(), 14.0);
    }

    #[test]
    fn left_associativity_of_subtraction_and_division() {
        let e = ExprAst::parse("10-3-2", &[]).unwrap();
        assert_eq!(e.eval(&[]).unwrap(), 5.0);
        let e = ExprAst::parse("16/4/2", &[]).unwrap();
        assert_eq!(e.eval(&[]).unwrap(), 2.0);
    }

    #[test]
    fn negative_exponent_is_allowed() {
        let e = ExprAst::parse("2^-2", &[]).unwrap();
        assert_eq!(e.eval(&[]).unwrap(), 0.25);
    }

    #[test]
    fn whitespace_is_ignored() {
        let a = parse_xy("  0.5 * sin( x ) + y1 ");
        let b = parse_xy("0.5*sin(x)+y1");
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_variable_is_rejected_with_position() {
        let err = ExprAst::parse("x+y3", &["t", "x", "y1", "y2", "z"]).unwrap_err();
        match err {
            ParseError::UnknownVariable { pos, name, .. } => {
                assert_eq!(pos, 2);
                assert_eq!(name, "y3");
            }
            other => panic!("expected unknown variable, got {other:?}"),
        }
    }

    #[test]
    fn unknown_function_is_rejected() {
        let err = ExprAst::parse("sinh(x)", &["x"]).unwrap_err();
        assert!(matches!(err, ParseError::UnknownFunction { .. }));
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let err = ExprAst::parse("min(x)", &["x"]).unwrap_err();
        match err {
            ParseError::Arity { expected, got, .. } => {
                assert_eq!((expected, got), (2, 1));
            }
            other => panic!("expected arity error, got {other:?}"),
        }
        let err = ExprAst::parse("abs(x,x)", &["x"]).unwrap_err();
        assert!(matches!(err, ParseError::Arity { .. }));
    }

    #[test]
    fn binding_count_is_checked() {
        let e = parse_xy("x");
        let err = e.eval(&[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, EvalError::BindingCount { expected: 5, got: 2 }));
    }

    #[test]
    fn log_of_non_positive_reports_domain_error() {
        let e = ExprAst::parse("log(x)", &["x"]).unwrap();
        let err = e.eval(&[-1.0]).unwrap_err();
        match err {
            EvalError::NonFinite { detail, .. } => {
                assert!(detail.contains("non-positive"), "detail: {detail}");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn division_by_zero_reports_domain_error() {
        let e = ExprAst::parse("1/x", &["x"]).unwrap();
        let err = e.eval(&[0.0]).unwrap_err();
        match err {
            EvalError::NonFinite { detail, .. } => {
                assert!(detail.contains("division by zero"), "detail: {detail}");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn finite_inputs_give_finite_value_or_error() {
        // exp overflow is caught, not returned as infinity.
        let e = ExprAst::parse("exp(x)", &["x"]).unwrap();
        assert!(e.eval(&[1000.0]).is_err());
        assert!(e.eval(&[1.0]).unwrap().is_finite());
    }

    #[test]
    fn min_max_evaluate() {
        let e = ExprAst::parse("min(x,0)+max(x,0)", &["x"]).unwrap();
        assert_eq!(e.eval(&[-3.0]).unwrap(), -3.0);
        assert_eq!(e.eval(&[5.0]).unwrap(), 5.0);
    }

    #[test]
    fn free_variable_analysis() {
        let e = parse_xy("0.5*y2 + t");
        assert!(e.uses_var(0)); // t
        assert!(!e.uses_var(1)); // x
        assert!(!e.uses_var(2)); // y1
        assert!(e.uses_var(3)); // y2
        assert!(!e.uses_var(4)); // z
        assert_eq!(e.free_vars(), vec![0, 3]);
    }

    #[test]
    fn display_round_trips_structures() {
        let cases = [
            "x+y1*z",
            "-x^2",
            "(x+y1)*z",
            "x-(y1-z)",
            "2^-x",
            "min(x,max(y1,z))",
            "-(x*y1)",
            "--x",
            "(x^2)^3",
            "x^2^3",
            "1/(1+exp(-x))",
        ];
        for src in cases {
            let a = ExprAst::parse(src, &["t", "x", "y1", "y2", "z"]).unwrap();
            let printed = a.to_string();
            let b = ExprAst::parse(&printed, &["t", "x", "y1", "y2", "z"])
                .unwrap_or_else(|e| panic!("reparse of `{printed}` failed: {e}"));
            assert_eq!(a.root(), b.root(), "round-trip changed `{src}` -> `{printed}`");
        }
    }

    #[test]
    fn deep_nesting_is_rejected() {
        // Build an expression needing more stack than allowed:
        // ((..(1+1)+1..)+1) is shallow; right-leaning additions grow the stack.
        let mut src = String::from("1");
        for _ in 0..MAX_STACK + 4 {
            src = format!("1+({src})");
        }
        let err = ExprAst::parse(&src, &[]).unwrap_err();
        assert!(matches!(err, ParseError::TooDeep));
    }

    #[test]
    fn serializes_as_source_string() {
        let e = ExprAst::parse("x^2", &["x"]).unwrap();
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, "\"x^2\"");
    }
}
