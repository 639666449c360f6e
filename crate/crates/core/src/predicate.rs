//! Condition expressions for the rule layers.
//!
//! A tiny boolean language over named fields, shared by the label tables
//! and the decision rules so both stay data, not code:
//!
//! ```text
//! mean_speed >= 0.5 and posture = 'standing'
//! tod in [21:30, 07:00) and not voice_active
//! device(12) = 'on' or $limit < temperature
//! ```
//!
//! * comparisons: `< <= > >= = !=` over numbers, strings, booleans
//! * connectives: `and`, `or`, `not`, parentheses; `and` binds tighter
//! * `tod in [HH:MM, HH:MM)` — half-open clock range, may wrap midnight
//! * `device(ID)` — a device's reported state, as a string
//! * `$name` — a numeric parameter substituted by the enclosing rule
//! * a bare boolean field is itself a condition
//!
//! Missing values never satisfy anything: any comparison against an absent
//! field is false (and so is its negation's inner term — `not` simply
//! inverts). Expressions are type-checked once at load time against the
//! field vocabulary, so typos fail loudly up front instead of silently
//! evaluating to false forever.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::time::parse_clock;

#[derive(Debug, Error, PartialEq)]
pub enum PredicateError {
    #[error("parse error at byte {at}: {msg}")]
    Parse { at: usize, msg: String },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unknown device {0}")]
    UnknownDevice(u16),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("type error: {0}")]
    Type(String),
}

/// A value a field can take at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Str(String),
    Bool(bool),
    /// Field has no value right now (sensor gap). Comparisons against it
    /// are false.
    Missing,
}

/// Static type of a field, used for load-time checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Num,
    Str,
    Bool,
}

/// What an expression is evaluated against: field lookups, device states,
/// and rule parameters.
pub trait Scope {
    fn field(&self, name: &str) -> Value;
    fn device(&self, id: u16) -> Value;
    fn param(&self, name: &str) -> Option<f64> {
        let _ = name;
        None
    }
}

/// Load-time description of what a [`Scope`] will offer.
pub struct Vocabulary<'a> {
    pub fields: &'a [(&'a str, Kind)],
    pub device_ids: &'a [u16],
    pub params: &'a [&'a str],
}

impl<'a> Vocabulary<'a> {
    fn field_kind(&self, name: &str) -> Option<Kind> {
        self.fields.iter().find(|(n, _)| *n == name).map(|(_, k)| *k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Num(f64),
    Str(String),
    Field(String),
    Device(u16),
    Param(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    And(Vec<Expr>),
    Or(Vec<Expr>),
    Not(Box<Expr>),
    Cmp { lhs: Operand, op: CmpOp, rhs: Operand },
    /// A bare boolean field / device flag used as a condition.
    Bare(Operand),
    /// Half-open time-of-day range in seconds since midnight; wraps when
    /// `end <= start`.
    TodIn { start_s: f64, end_s: f64 },
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    Clock(f64),
    Param(String),
    Punct(&'static str),
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, PredicateError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |at: usize, msg: &str| PredicateError::Parse { at, msg: msg.to_string() };
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        match c {
            '(' | ')' | '[' | ',' => {
                out.push((start, Tok::Punct(match c {
                    '(' => "(",
                    ')' => ")",
                    '[' => "[",
                    _ => ",",
                })));
                i += 1;
            }
            '<' | '>' | '!' | '=' => {
                let two = bytes.get(i + 1) == Some(&b'=');
                let p = match (c, two) {
                    ('<', true) => "<=",
                    ('<', false) => "<",
                    ('>', true) => ">=",
                    ('>', false) => ">",
                    ('=', _) => "=",
                    ('!', true) => "!=",
                    ('!', false) => return Err(err(start, "`!` must be `!=`")),
                    _ => unreachable!(),
                };
                out.push((start, Tok::Punct(p)));
                i += if p.len() == 2 { 2 } else { 1 };
            }
            '\'' | '"' => {
                let quote = c;
                i += 1;
                let s0 = i;
                while i < bytes.len() && bytes[i] as char != quote {
                    i += 1;
                }
                if i == bytes.len() {
                    return Err(err(start, "unterminated string"));
                }
                out.push((start, Tok::Str(src[s0..i].to_string())));
                i += 1;
            }
            '$' => {
                i += 1;
                let s0 = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                if i == s0 {
                    return Err(err(start, "`$` needs a parameter name"));
                }
                out.push((start, Tok::Param(src[s0..i].to_string())));
            }
            _ if c.is_ascii_digit() || c == '-' || c == '+' => {
                let s0 = i;
                i += 1;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b':'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'-' || bytes[i] == b'+')
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let text = &src[s0..i];
                if text.contains(':') {
                    let secs = parse_clock(text)
                        .ok_or_else(|| err(s0, &format!("bad clock time `{text}`")))?;
                    out.push((s0, Tok::Clock(secs)));
                } else {
                    let n: f64 = text
                        .parse()
                        .map_err(|_| err(s0, &format!("bad number `{text}`")))?;
                    out.push((s0, Tok::Num(n)));
                }
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let s0 = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((s0, Tok::Ident(src[s0..i].to_string())));
            }
            _ => return Err(err(start, &format!("unexpected character `{c}`"))),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser (recursive descent; `or` < `and` < `not` < primary)

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    src_len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn at(&self) -> usize {
        self.toks.get(self.pos).map_or(self.src_len, |(a, _)| *a)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), PredicateError> {
        match self.next() {
            Some(Tok::Punct(q)) if q == p => Ok(()),
            _ => Err(PredicateError::Parse {
                at: self.at(),
                msg: format!("expected `{p}`"),
            }),
        }
    }

    fn error<T>(&self, msg: &str) -> Result<T, PredicateError> {
        Err(PredicateError::Parse { at: self.at(), msg: msg.to_string() })
    }

    fn parse_or(&mut self) -> Result<Expr, PredicateError> {
        let mut terms = vec![self.parse_and()?];
        while matches!(self.peek(), Some(Tok::Ident(w)) if w == "or") {
            self.next();
            terms.push(self.parse_and()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Expr::Or(terms) })
    }

    fn parse_and(&mut self) -> Result<Expr, PredicateError> {
        let mut terms = vec![self.parse_not()?];
        while matches!(self.peek(), Some(Tok::Ident(w)) if w == "and") {
            self.next();
            terms.push(self.parse_not()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Expr::And(terms) })
    }

    fn parse_not(&mut self) -> Result<Expr, PredicateError> {
        if matches!(self.peek(), Some(Tok::Ident(w)) if w == "not") {
            self.next();
            return Ok(Expr::Not(Box::new(self.parse_not()?)));
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<Expr, PredicateError> {
        if matches!(self.peek(), Some(Tok::Punct("("))) {
            self.next();
            let e = self.parse_or()?;
            self.expect_punct(")")?;
            return Ok(e);
        }
        // `tod in [a, b)` special form.
        if matches!(self.peek(), Some(Tok::Ident(w)) if w == "tod")
            && matches!(self.toks.get(self.pos + 1), Some((_, Tok::Ident(w))) if w == "in")
        {
            self.next();
            self.next();
            self.expect_punct("[")?;
            let start_s = match self.next() {
                Some(Tok::Clock(s)) => s,
                Some(Tok::Num(n)) => n,
                _ => return self.error("expected a clock time"),
            };
            self.expect_punct(",")?;
            let end_s = match self.next() {
                Some(Tok::Clock(s)) => s,
                Some(Tok::Num(n)) => n,
                _ => return self.error("expected a clock time"),
            };
            self.expect_punct(")")?;
            return Ok(Expr::TodIn { start_s, end_s });
        }
        let lhs = self.parse_operand()?;
        let op = match self.peek() {
            Some(Tok::Punct(p)) => match *p {
                "<" => Some(CmpOp::Lt),
                "<=" => Some(CmpOp::Le),
                ">" => Some(CmpOp::Gt),
                ">=" => Some(CmpOp::Ge),
                "=" => Some(CmpOp::Eq),
                "!=" => Some(CmpOp::Ne),
                _ => None,
            },
            _ => None,
        };
        match op {
            Some(op) => {
                self.next();
                let rhs = self.parse_operand()?;
                Ok(Expr::Cmp { lhs, op, rhs })
            }
            None => Ok(Expr::Bare(lhs)),
        }
    }

    fn parse_operand(&mut self) -> Result<Operand, PredicateError> {
        match self.next() {
            Some(Tok::Num(n)) => Ok(Operand::Num(n)),
            Some(Tok::Str(s)) => Ok(Operand::Str(s)),
            Some(Tok::Param(p)) => Ok(Operand::Param(p)),
            Some(Tok::Ident(name)) if name == "device" => {
                self.expect_punct("(")?;
                let id = match self.next() {
                    Some(Tok::Num(n)) if n >= 0.0 && n.fract() == 0.0 && n <= f64::from(u16::MAX) => {
                        n as u16
                    }
                    _ => return self.error("device() takes a small integer id"),
                };
                self.expect_punct(")")?;
                Ok(Operand::Device(id))
            }
            Some(Tok::Ident(name)) if !matches!(name.as_str(), "and" | "or" | "not" | "in") => {
                Ok(Operand::Field(name))
            }
            _ => self.error("expected a value or field"),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, PredicateError> {
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0, src_len: src.len() };
        let e = p.parse_or()?;
        if p.pos != p.toks.len() {
            return p.error("trailing input");
        }
        Ok(e)
    }

    /// Load-time validation: every field, device and parameter must exist,
    /// and comparisons must be type-sensible. `tod` ranges require the
    /// vocabulary to offer a numeric `tod` field.
    pub fn check(&self, vocab: &Vocabulary) -> Result<(), PredicateError> {
        let operand_kind = |o: &Operand| -> Result<Kind, PredicateError> {
            match o {
                Operand::Num(_) | Operand::Param(_) => Ok(Kind::Num),
                Operand::Str(_) => Ok(Kind::Str),
                Operand::Field(f) => vocab
                    .field_kind(f)
                    .ok_or_else(|| PredicateError::UnknownField(f.clone())),
                Operand::Device(_) => Ok(Kind::Str),
            }
        };
        let check_operand = |o: &Operand| -> Result<(), PredicateError> {
            match o {
                Operand::Device(id) if !vocab.device_ids.contains(id) => {
                    Err(PredicateError::UnknownDevice(*id))
                }
                Operand::Param(p) if !vocab.params.contains(&p.as_str()) => {
                    Err(PredicateError::UnknownParam(p.clone()))
                }
                _ => Ok(()),
            }
        };
        match self {
            Expr::And(terms) | Expr::Or(terms) => terms.iter().try_for_each(|t| t.check(vocab)),
            Expr::Not(inner) => inner.check(vocab),
            Expr::Cmp { lhs, op, rhs } => {
                check_operand(lhs)?;
                check_operand(rhs)?;
                let (lk, rk) = (operand_kind(lhs)?, operand_kind(rhs)?);
                if lk != rk {
                    return Err(PredicateError::Type(format!(
                        "cannot compare {lk:?} {op} {rk:?}"
                    )));
                }
                if lk != Kind::Num && !matches!(op, CmpOp::Eq | CmpOp::Ne) {
                    return Err(PredicateError::Type(format!(
                        "ordering `{op}` needs numbers, got {lk:?}"
                    )));
                }
                Ok(())
            }
            Expr::Bare(o) => {
                check_operand(o)?;
                if operand_kind(o)? != Kind::Bool {
                    return Err(PredicateError::Type(
                        "a bare condition must be a boolean field".into(),
                    ));
                }
                Ok(())
            }
            Expr::TodIn { start_s, end_s } => {
                if vocab.field_kind("tod") != Some(Kind::Num) {
                    return Err(PredicateError::UnknownField("tod".into()));
                }
                for s in [start_s, end_s] {
                    if !(0.0..86400.0).contains(s) {
                        return Err(PredicateError::Type(format!(
                            "clock time {s} outside [0, 86400)"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, scope: &dyn Scope) -> bool {
        self.margin(scope).is_some()
    }

    /// Evaluates the expression; `Some(margin)` when satisfied, where the
    /// margin in [0, 1] says how far numeric comparisons sit from their
    /// thresholds (relative to the threshold magnitude). `and` takes the
    /// weakest link, `or` the strongest.  Non-numeric conditions that hold
    /// have margin 1.
    pub fn margin(&self, scope: &dyn Scope) -> Option<f64> {
        match self {
            Expr::And(terms) => {
                let mut worst = 1.0f64;
                for t in terms {
                    worst = worst.min(t.margin(scope)?);
                }
                Some(worst)
            }
            Expr::Or(terms) => {
                let mut best: Option<f64> = None;
                for t in terms {
                    if let Some(m) = t.margin(scope) {
                        best = Some(best.map_or(m, |b: f64| b.max(m)));
                    }
                }
                best
            }
            Expr::Not(inner) => (!inner.eval(scope)).then_some(1.0),
            Expr::Cmp { lhs, op, rhs } => {
                let l = resolve(lhs, scope);
                let r = resolve(rhs, scope);
                match (l, r) {
                    (Value::Num(a), Value::Num(b)) => {
                        let holds = match op {
                            CmpOp::Lt => a < b,
                            CmpOp::Le => a <= b,
                            CmpOp::Gt => a > b,
                            CmpOp::Ge => a >= b,
                            CmpOp::Eq => a == b,
                            CmpOp::Ne => a != b,
                        };
                        holds.then(|| {
                            if matches!(op, CmpOp::Eq | CmpOp::Ne) {
                                1.0
                            } else {
                                ((a - b).abs() / b.abs().max(1e-9)).min(1.0)
                            }
                        })
                    }
                    (Value::Str(a), Value::Str(b)) => {
                        let holds = match op {
                            CmpOp::Eq => a == b,
                            CmpOp::Ne => a != b,
                            _ => false,
                        };
                        holds.then_some(1.0)
                    }
                    (Value::Bool(a), Value::Bool(b)) => {
                        let holds = match op {
                            CmpOp::Eq => a == b,
                            CmpOp::Ne => a != b,
                            _ => false,
                        };
                        holds.then_some(1.0)
                    }
                    // Missing (or mismatched) values satisfy nothing.
                    _ => None,
                }
            }
            Expr::Bare(o) => match resolve(o, scope) {
                Value::Bool(true) => Some(1.0),
                _ => None,
            },
            Expr::TodIn { start_s, end_s } => match scope.field("tod") {
                Value::Num(t) => {
                    let inside = if start_s <= end_s {
                        t >= *start_s && t < *end_s
                    } else {
                        t >= *start_s || t < *end_s
                    };
                    inside.then_some(1.0)
                }
                _ => None,
            },
        }
    }
}

fn resolve(o: &Operand, scope: &dyn Scope) -> Value {
    match o {
        Operand::Num(n) => Value::Num(*n),
        Operand::Str(s) => Value::Str(s.clone()),
        Operand::Field(f) => scope.field(f),
        Operand::Device(id) => scope.device(*id),
        Operand::Param(p) => scope.param(p).map_or(Value::Missing, Value::Num),
    }
}

/// A ready-made scope backed by maps; the common case for tests and for
/// rule evaluation contexts assembled field-by-field.
#[derive(Debug, Clone, Default)]
pub struct MapScope {
    pub fields: BTreeMap<String, Value>,
    pub devices: BTreeMap<u16, String>,
    pub params: BTreeMap<String, f64>,
}

impl Scope for MapScope {
    fn field(&self, name: &str) -> Value {
        self.fields.get(name).cloned().unwrap_or(Value::Missing)
    }

    fn device(&self, id: u16) -> Value {
        self.devices.get(&id).cloned().map_or(Value::Missing, Value::Str)
    }

    fn param(&self, name: &str) -> Option<f64> {
        self.params.get(name).copied()
    }
}
