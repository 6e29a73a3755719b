//! Source-language front end: lexer, parser, variable classification and
//! the predicate database with conservative first-argument indexing.
//!
//! The accepted language is a Prolog subset: clauses and facts with `:-`,
//! parallel conjunction `,`, top-level sequential conjunction `&&`, cut `!`,
//! commit `|`, lists, integers, atoms and variables, plus the directive
//! `:- eager_split(Name/Arity).`

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
#[error("{line}:{col}: {msg}")]
pub struct FrontError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

fn err<T>(line: u32, col: u32, msg: impl Into<String>) -> Result<T, FrontError> {
    Err(FrontError {
        line,
        col,
        msg: msg.into(),
    })
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Atom(String),
    Var(String),
    Int(i64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Bar,     // | (commit in bodies, tail separator in lists)
    Bang,    // !
    Dot,     // clause terminator
    Neck,    // :-
    SeqAnd,  // &&
    Op(&'static str),
    Eof,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
    /// True when the previous token can end an operand, which makes a
    /// following `-` a binary operator rather than a sign.
    after_operand: bool,
}

#[derive(Clone)]
struct Spanned {
    tok: Tok,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
            line: 1,
            col: 1,
            after_operand: false,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek2(&self) -> Option<u8> {
        self.src.get(self.pos + 1).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) -> Result<(), FrontError> {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'%') => {
                    while let Some(c) = self.peek() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                Some(b'/') if self.peek2() == Some(b'*') => {
                    let (l, c) = (self.line, self.col);
                    self.bump();
                    self.bump();
                    loop {
                        match self.peek() {
                            Some(b'*') if self.peek2() == Some(b'/') => {
                                self.bump();
                                self.bump();
                                break;
                            }
                            Some(_) => {
                                self.bump();
                            }
                            None => return err(l, c, "unterminated block comment"),
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn next(&mut self) -> Result<Spanned, FrontError> {
        self.skip_ws()?;
        let (line, col) = (self.line, self.col);
        let mk = |tok, operand| (tok, operand);
        let Some(c) = self.peek() else {
            return Ok(Spanned {
                tok: Tok::Eof,
                line,
                col,
            });
        };
        let (tok, operand) = match c {
            b'(' => {
                self.bump();
                mk(Tok::LParen, false)
            }
            b')' => {
                self.bump();
                mk(Tok::RParen, true)
            }
            b'[' => {
                self.bump();
                mk(Tok::LBracket, false)
            }
            b']' => {
                self.bump();
                mk(Tok::RBracket, true)
            }
            b',' => {
                self.bump();
                mk(Tok::Comma, false)
            }
            b'!' => {
                self.bump();
                mk(Tok::Bang, true)
            }
            b'|' => {
                self.bump();
                mk(Tok::Bar, false)
            }
            b'.' => {
                self.bump();
                mk(Tok::Dot, false)
            }
            b':' if self.peek2() == Some(b'-') => {
                self.bump();
                self.bump();
                mk(Tok::Neck, false)
            }
            b'&' if self.peek2() == Some(b'&') => {
                self.bump();
                self.bump();
                mk(Tok::SeqAnd, false)
            }
            b'=' => {
                self.bump();
                match self.peek() {
                    Some(b'<') => {
                        self.bump();
                        mk(Tok::Op("=<"), false)
                    }
                    Some(b':') => {
                        self.bump();
                        if self.peek() == Some(b'=') {
                            self.bump();
                            mk(Tok::Op("=:="), false)
                        } else {
                            return err(line, col, "expected `=:=`");
                        }
                    }
                    Some(b'\\') => {
                        self.bump();
                        if self.peek() == Some(b'=') {
                            self.bump();
                            mk(Tok::Op("=\\="), false)
                        } else {
                            return err(line, col, "expected `=\\=`");
                        }
                    }
                    _ => mk(Tok::Op("="), false),
                }
            }
            b'<' => {
                self.bump();
                mk(Tok::Op("<"), false)
            }
            b'>' => {
                self.bump();
                if self.peek() == Some(b'=') {
                    self.bump();
                    mk(Tok::Op(">="), false)
                } else {
                    mk(Tok::Op(">"), false)
                }
            }
            b'+' => {
                self.bump();
                mk(Tok::Op("+"), false)
            }
            b'*' => {
                self.bump();
                mk(Tok::Op("*"), false)
            }
            b'/' if self.peek2() == Some(b'/') => {
                self.bump();
                self.bump();
                mk(Tok::Op("//"), false)
            }
            b'/' => {
                self.bump();
                mk(Tok::Op("/"), false)
            }
            b'-' => {
                self.bump();
                if !self.after_operand && self.peek().is_some_and(|d| d.is_ascii_digit()) {
                    let n = self.read_int(line, col)?;
                    mk(Tok::Int(-n), true)
                } else {
                    mk(Tok::Op("-"), false)
                }
            }
            b'0'..=b'9' => {
                let n = self.read_int(line, col)?;
                mk(Tok::Int(n), true)
            }
            b'\'' => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        Some(b'\'') => break,
                        Some(c) => s.push(c as char),
                        None => return err(line, col, "unterminated quoted atom"),
                    }
                }
                mk(Tok::Atom(s), true)
            }
            b'a'..=b'z' => {
                let s = self.read_name();
                if s == "is" || s == "mod" {
                    mk(Tok::Op(if s == "is" { "is" } else { "mod" }), false)
                } else {
                    mk(Tok::Atom(s), true)
                }
            }
            b'A'..=b'Z' | b'_' => mk(Tok::Var(self.read_name()), true),
            other => {
                return err(line, col, format!("unexpected character `{}`", other as char));
            }
        };
        self.after_operand = operand;
        Ok(Spanned { tok, line, col })
    }

    fn read_int(&mut self, line: u32, col: u32) -> Result<i64, FrontError> {
        let mut n: i64 = 0;
        while let Some(c) = self.peek() {
            if !c.is_ascii_digit() {
                break;
            }
            self.bump();
            n = match n.checked_mul(10).and_then(|m| m.checked_add((c - b'0') as i64)) {
                Some(m) => m,
                None => return err(line, col, "integer literal overflows i64"),
            };
        }
        Ok(n)
    }

    fn read_name(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == b'_' {
                s.push(c as char);
                self.bump();
            } else {
                break;
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// AST
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RawTerm {
    Atom(String),
    Int(i64),
    Var(String),
    Compound(String, Vec<RawTerm>),
}

impl RawTerm {
    pub fn functor(&self) -> (&str, usize) {
        match self {
            RawTerm::Atom(a) => (a, 0),
            RawTerm::Compound(f, args) => (f, args.len()),
            _ => ("", 0),
        }
    }

    pub fn nil() -> RawTerm {
        RawTerm::Atom("[]".into())
    }

    pub fn cons(h: RawTerm, t: RawTerm) -> RawTerm {
        RawTerm::Compound(".".into(), vec![h, t])
    }
}

const INFIX: &[(&str, u16, bool)] = &[
    // (name, precedence, right-assoc). Comparisons are xfx at 700,
    // additive yfx at 500, multiplicative yfx at 400.
    ("=", 700, false),
    ("=<", 700, false),
    ("<", 700, false),
    (">", 700, false),
    (">=", 700, false),
    ("=:=", 700, false),
    ("=\\=", 700, false),
    ("is", 700, false),
    ("+", 500, false),
    ("-", 500, false),
    ("*", 400, false),
    ("//", 400, false),
    ("/", 400, false),
    ("mod", 400, false),
];

fn infix_of(tok: &Tok) -> Option<(&'static str, u16, bool)> {
    if let Tok::Op(name) = tok {
        for (n, p, r) in INFIX {
            if n == name {
                return Some((n, *p, *r));
            }
        }
    }
    None
}

impl fmt::Display for RawTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_raw(self, f, 1200)
    }
}

fn write_raw(t: &RawTerm, f: &mut fmt::Formatter<'_>, max: u16) -> fmt::Result {
    match t {
        RawTerm::Atom(a) => {
            if atom_needs_quotes(a) {
                write!(f, "'{}'", a)
            } else {
                write!(f, "{}", a)
            }
        }
        RawTerm::Int(n) => write!(f, "{}", n),
        RawTerm::Var(v) => write!(f, "{}", v),
        RawTerm::Compound(name, args) if name == "." && args.len() == 2 => {
            write!(f, "[")?;
            write_raw(&args[0], f, 999)?;
            let mut tail = &args[1];
            loop {
                match tail {
                    RawTerm::Atom(a) if a == "[]" => break,
                    RawTerm::Compound(n2, a2) if n2 == "." && a2.len() == 2 => {
                        write!(f, ",")?;
                        write_raw(&a2[0], f, 999)?;
                        tail = &a2[1];
                    }
                    other => {
                        write!(f, "|")?;
                        write_raw(other, f, 999)?;
                        break;
                    }
                }
            }
            write!(f, "]")
        }
        RawTerm::Compound(name, args) => {
            if args.len() == 2 {
                if let Some((op, prec, _)) = INFIX.iter().find(|(n, _, _)| n == name) {
                    let need_parens = *prec > max;
                    if need_parens {
                        write!(f, "(")?;
                    }
                    write_raw(&args[0], f, prec - 1)?;
                    write!(f, "{}{}{}", op_space(op), op, op_space(op))?;
                    write_raw(&args[1], f, prec - 1)?;
                    if need_parens {
                        write!(f, ")")?;
                    }
                    return Ok(());
                }
            }
            if atom_needs_quotes(name) {
                write!(f, "'{}'(", name)?;
            } else {
                write!(f, "{}(", name)?;
            }
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write_raw(a, f, 999)?;
            }
            write!(f, ")")
        }
    }
}

fn op_space(op: &str) -> &'static str {
    if op.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
        " "
    } else {
        ""
    }
}

fn atom_needs_quotes(a: &str) -> bool {
    if a == "[]" {
        return false;
    }
    match a.chars().next() {
        None => true,
        Some(c) if !c.is_ascii_lowercase() => true,
        Some(_) => !a.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'),
    }
}

// ---------------------------------------------------------------------------
// Clause representation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum BodyItem {
    Goal(RawTerm),
    Cut,
    Commit,
    SeqBarrier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Storage {
    Perm(u16),
    Temp(u16),
}

#[derive(Clone, Debug)]
pub struct ClauseVar {
    pub name: Rc<str>,
    /// Uniform display slot (Y1, Y2, ...) used by code listings.
    pub display: u16,
    pub storage: Storage,
}

#[derive(Clone)]
pub struct Clause {
    pub head: RawTerm,
    pub body: Vec<BodyItem>,
    pub vars: Vec<ClauseVar>,
    pub var_of: HashMap<String, usize>,
    pub perm_count: u16,
    pub temp_count: u16,
    pub has_cut: bool,
    pub has_commit: bool,
}

/// Summary of a clause-head first argument for indexing.
#[derive(Clone, Debug, PartialEq)]
pub enum ArgPat {
    Any,
    Atom(String),
    Int(i64),
    Functor(String, usize),
}

#[derive(Clone)]
pub struct Predicate {
    pub name: String,
    pub arity: usize,
    pub clauses: Vec<Clause>,
    pub first_arg: Vec<ArgPat>,
    pub eager_split: bool,
}

pub struct Database {
    pub preds: HashMap<(String, usize), Predicate>,
    /// Load order, for printing and deterministic iteration.
    pub order: Vec<(String, usize)>,
}

impl Database {
    pub fn lookup(&self, name: &str, arity: usize) -> Option<&Predicate> {
        self.preds.get(&(name.to_string(), arity))
    }
}

/// Conservative superset of the clauses whose head can match a call with
/// the given (dereferenced) first argument shape.
pub fn index_candidates(p: &Predicate, first_arg: Option<&ArgPat>) -> Vec<usize> {
    index_candidates_code(&p.first_arg, first_arg)
}

pub fn index_candidates_code(first_args: &[ArgPat], pat: Option<&ArgPat>) -> Vec<usize> {
    let Some(pat) = pat else {
        return (0..first_args.len()).collect();
    };
    (0..first_args.len())
        .filter(|&i| match (&first_args[i], pat) {
            (ArgPat::Any, _) | (_, ArgPat::Any) => true,
            (ArgPat::Atom(a), ArgPat::Atom(b)) => a == b,
            (ArgPat::Int(a), ArgPat::Int(b)) => a == b,
            (ArgPat::Functor(f, n), ArgPat::Functor(g, m)) => f == g && n == m,
            _ => false,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    lx: Lexer<'a>,
    cur: Spanned,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, FrontError> {
        let mut lx = Lexer::new(src);
        let cur = lx.next()?;
        Ok(Parser { lx, cur })
    }

    fn advance(&mut self) -> Result<(), FrontError> {
        self.cur = self.lx.next()?;
        Ok(())
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), FrontError> {
        if self.cur.tok == tok {
            self.advance()
        } else {
            err(
                self.cur.line,
                self.cur.col,
                format!("expected {}, found {:?}", what, self.cur.tok),
            )
        }
    }

    /// Operator-precedence term parser; `max` is the loosest precedence
    /// allowed (999 inside argument lists, 700+ at goal level).
    fn term(&mut self, max: u16) -> Result<RawTerm, FrontError> {
        let mut left = self.primary()?;
        loop {
            let Some((name, prec, right)) = infix_of(&self.cur.tok) else {
                return Ok(left);
            };
            if prec > max {
                return Ok(left);
            }
            self.advance()?;
            let sub = if right { prec } else { prec - 1 };
            let rhs = self.term(sub)?;
            left = RawTerm::Compound(name.to_string(), vec![left, rhs]);
        }
    }

    fn primary(&mut self) -> Result<RawTerm, FrontError> {
        let Spanned { tok, line, col } = self.cur.clone();
        match tok {
            Tok::Int(n) => {
                self.advance()?;
                Ok(RawTerm::Int(n))
            }
            Tok::Var(v) => {
                self.advance()?;
                Ok(RawTerm::Var(v))
            }
            Tok::Atom(a) => {
                self.advance()?;
                if self.cur.tok == Tok::LParen {
                    self.advance()?;
                    let mut args = vec![self.term(999)?];
                    while self.cur.tok == Tok::Comma {
                        self.advance()?;
                        args.push(self.term(999)?);
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    Ok(RawTerm::Compound(a, args))
                } else {
                    Ok(RawTerm::Atom(a))
                }
            }
            Tok::LParen => {
                self.advance()?;
                let t = self.term(1200)?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(t)
            }
            Tok::LBracket => {
                self.advance()?;
                if self.cur.tok == Tok::RBracket {
                    self.advance()?;
                    return Ok(RawTerm::nil());
                }
                let mut items = vec![self.term(999)?];
                while self.cur.tok == Tok::Comma {
                    self.advance()?;
                    items.push(self.term(999)?);
                }
                let tail = if self.cur.tok == Tok::Bar {
                    self.advance()?;
                    self.term(999)?
                } else {
                    RawTerm::nil()
                };
                self.expect(Tok::RBracket, "`]`")?;
                let mut t = tail;
                for item in items.into_iter().rev() {
                    t = RawTerm::cons(item, t);
                }
                Ok(t)
            }
            other => err(line, col, format!("unexpected token {:?}", other)),
        }
    }

    /// Body grammar. Sequential conjunction is only legal at the top level
    /// of a body; `&&` nested under `,` (via parentheses) is a load error.
    fn body(&mut self) -> Result<Vec<BodyItem>, FrontError> {
        let (line, col) = (self.cur.line, self.cur.col);
        let expr = self.body_expr(true)?;
        let mut out = Vec::new();
        match expr {
            BodyExpr::Seq(groups) => {
                for (i, g) in groups.into_iter().enumerate() {
                    if i > 0 {
                        out.push(BodyItem::SeqBarrier);
                    }
                    flatten_par(g, &mut out, line, col)?;
                }
            }
            other => flatten_par(other, &mut out, line, col)?,
        }
        Ok(out)
    }

    fn body_expr(&mut self, seq_allowed: bool) -> Result<BodyExpr, FrontError> {
        let mut items = vec![self.body_atom(seq_allowed)?];
        let mut groups: Vec<BodyExpr> = Vec::new();
        loop {
            match self.cur.tok {
                Tok::Comma => {
                    self.advance()?;
                    items.push(self.body_atom(false)?);
                }
                Tok::SeqAnd => {
                    let (line, col) = (self.cur.line, self.cur.col);
                    if !seq_allowed {
                        return err(
                            line,
                            col,
                            "sequential conjunction `&&` may not appear below `,`",
                        );
                    }
                    self.advance()?;
                    groups.push(par_of(items));
                    items = vec![self.body_atom(false)?];
                }
                _ => break,
            }
        }
        if groups.is_empty() {
            Ok(par_of(items))
        } else {
            groups.push(par_of(items));
            Ok(BodyExpr::Seq(groups))
        }
    }

    fn body_atom(&mut self, seq_allowed: bool) -> Result<BodyExpr, FrontError> {
        match &self.cur.tok {
            Tok::Bang => {
                self.advance()?;
                Ok(BodyExpr::Item(BodyItem::Cut))
            }
            Tok::Bar => {
                self.advance()?;
                Ok(BodyExpr::Item(BodyItem::Commit))
            }
            Tok::LParen => {
                self.advance()?;
                // A parenthesized group: either a sub-body or an operator
                // term that happens to start with `(`.
                let inner = self.body_expr(seq_allowed)?;
                self.expect(Tok::RParen, "`)`")?;
                // `(Term) op ...` continues as an operator term.
                if let BodyExpr::Item(BodyItem::Goal(t)) = inner {
                    if infix_of(&self.cur.tok).is_some() {
                        let mut left = t;
                        while let Some((name, prec, right)) = infix_of(&self.cur.tok) {
                            if prec > 1200 {
                                break;
                            }
                            self.advance()?;
                            let sub = if right { prec } else { prec - 1 };
                            let rhs = self.term(sub)?;
                            left = RawTerm::Compound(name.to_string(), vec![left, rhs]);
                        }
                        return Ok(BodyExpr::Item(BodyItem::Goal(left)));
                    }
                    return Ok(BodyExpr::Item(BodyItem::Goal(t)));
                }
                Ok(inner)
            }
            _ => {
                let t = self.term(1200)?;
                Ok(BodyExpr::Item(BodyItem::Goal(t)))
            }
        }
    }
}

enum BodyExpr {
    Item(BodyItem),
    Par(Vec<BodyExpr>),
    Seq(Vec<BodyExpr>),
}

fn par_of(mut items: Vec<BodyExpr>) -> BodyExpr {
    if items.len() == 1 {
        items.pop().unwrap()
    } else {
        BodyExpr::Par(items)
    }
}

fn flatten_par(e: BodyExpr, out: &mut Vec<BodyItem>, line: u32, col: u32) -> Result<(), FrontError> {
    match e {
        BodyExpr::Item(i) => out.push(i),
        BodyExpr::Par(items) => {
            for i in items {
                flatten_par(i, out, line, col)?;
            }
        }
        BodyExpr::Seq(_) => {
            return err(line, col, "sequential conjunction `&&` may not appear below `,`");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Classification and load
// ---------------------------------------------------------------------------

fn collect_vars(t: &RawTerm, out: &mut Vec<String>) {
    match t {
        RawTerm::Var(v) => {
            if !out.contains(v) {
                out.push(v.clone());
            }
        }
        RawTerm::Compound(_, args) => {
            for a in args {
                collect_vars(a, out);
            }
        }
        _ => {}
    }
}

/// Gives anonymous variables distinct fresh names so every occurrence of
/// `_` is its own variable.
fn freshen_anon(t: &mut RawTerm, counter: &mut u32) {
    match t {
        RawTerm::Var(v) if v == "_" => {
            *counter += 1;
            *v = format!("_A{}", counter);
        }
        RawTerm::Compound(_, args) => {
            for a in args {
                freshen_anon(a, counter);
            }
        }
        _ => {}
    }
}

/// Variables that appear only in the body are permanent; all others are
/// temporary. Slot order groups variables by the last call using them,
/// later calls first, head variables before body-only ones.
pub fn classify_vars(head: &RawTerm, body: &[BodyItem]) -> Vec<(String, bool)> {
    let mut head_vars = Vec::new();
    collect_vars(head, &mut head_vars);
    let goal_vars: Vec<Vec<String>> = body
        .iter()
        .map(|item| {
            let mut vs = Vec::new();
            if let BodyItem::Goal(g) = item {
                collect_vars(g, &mut vs);
            }
            vs
        })
        .collect();

    let mut all: Vec<String> = head_vars.clone();
    for vs in &goal_vars {
        for v in vs {
            if !all.contains(v) {
                all.push(v.clone());
            }
        }
    }

    let last_use = |v: &String| -> usize {
        let mut last = 0;
        for (i, vs) in goal_vars.iter().enumerate() {
            if vs.contains(v) {
                last = i + 1;
            }
        }
        last
    };

    let mut ordered: Vec<String> = Vec::new();
    let max_goal = goal_vars.len();
    for group in (0..=max_goal).rev() {
        // head-occurring first, in head order
        for v in &head_vars {
            if last_use(v) == group && !ordered.contains(v) {
                ordered.push(v.clone());
            }
        }
        // then body-only, in body occurrence order
        for vs in &goal_vars {
            for v in vs {
                if last_use(v) == group && !ordered.contains(v) {
                    ordered.push(v.clone());
                }
            }
        }
    }
    debug_assert_eq!(ordered.len(), all.len());

    ordered
        .into_iter()
        .map(|v| {
            let permanent = !head_vars.contains(&v);
            (v, permanent)
        })
        .collect()
}

fn build_clause(mut head: RawTerm, mut body: Vec<BodyItem>) -> Clause {
    let mut anon = 0;
    freshen_anon(&mut head, &mut anon);
    for item in &mut body {
        if let BodyItem::Goal(g) = item {
            freshen_anon(g, &mut anon);
        }
    }
    let classified = classify_vars(&head, &body);
    let mut vars = Vec::new();
    let mut var_of = HashMap::new();
    let mut perm_count = 0u16;
    let mut temp_count = 0u16;
    for (i, (name, permanent)) in classified.iter().enumerate() {
        let storage = if *permanent {
            let s = Storage::Perm(perm_count);
            perm_count += 1;
            s
        } else {
            let s = Storage::Temp(temp_count);
            temp_count += 1;
            s
        };
        var_of.insert(name.clone(), i);
        vars.push(ClauseVar {
            name: Rc::from(name.as_str()),
            display: (i + 1) as u16,
            storage,
        });
    }
    let has_cut = body.iter().any(|b| matches!(b, BodyItem::Cut));
    let has_commit = body.iter().any(|b| matches!(b, BodyItem::Commit));
    Clause {
        head,
        body,
        vars,
        var_of,
        perm_count,
        temp_count,
        has_cut,
        has_commit,
    }
}

fn first_arg_pat(head: &RawTerm) -> ArgPat {
    match head {
        RawTerm::Compound(_, args) => match &args[0] {
            RawTerm::Var(_) => ArgPat::Any,
            RawTerm::Atom(a) => ArgPat::Atom(a.clone()),
            RawTerm::Int(n) => ArgPat::Int(*n),
            RawTerm::Compound(f, aa) => ArgPat::Functor(f.clone(), aa.len()),
        },
        _ => ArgPat::Any,
    }
}

pub fn parse_program(text: &str) -> Result<Database, FrontError> {
    let mut p = Parser::new(text)?;
    let mut db = Database {
        preds: HashMap::new(),
        order: Vec::new(),
    };
    loop {
        if p.cur.tok == Tok::Eof {
            break;
        }
        let (line, col) = (p.cur.line, p.cur.col);
        if p.cur.tok == Tok::Neck {
            // directive
            p.advance()?;
            let t = p.term(1200)?;
            p.expect(Tok::Dot, "`.`")?;
            apply_directive(&mut db, &t, line, col)?;
            continue;
        }
        let head = p.term(1200)?;
        match &head {
            RawTerm::Atom(_) | RawTerm::Compound(_, _) => {}
            _ => return err(line, col, "clause head must be an atom or compound"),
        }
        let body = if p.cur.tok == Tok::Neck {
            p.advance()?;
            p.body()?
        } else {
            Vec::new()
        };
        p.expect(Tok::Dot, "`.`")?;
        let (name, arity) = {
            let (n, a) = head.functor();
            (n.to_string(), a)
        };
        let clause = build_clause(head, body);
        let pat = first_arg_pat(&clause.head);
        let key = (name.clone(), arity);
        let pred = db.preds.entry(key.clone()).or_insert_with(|| {
            db.order.push(key.clone());
            Predicate {
                name,
                arity,
                clauses: Vec::new(),
                first_arg: Vec::new(),
                eager_split: false,
            }
        });
        pred.clauses.push(clause);
        pred.first_arg.push(pat);
    }
    Ok(db)
}

fn apply_directive(db: &mut Database, t: &RawTerm, line: u32, col: u32) -> Result<(), FrontError> {
    match t {
        RawTerm::Compound(d, args) if d == "eager_split" && args.len() == 1 => {
            if let RawTerm::Compound(slash, fa) = &args[0] {
                if slash == "/" && fa.len() == 2 {
                    if let (RawTerm::Atom(name), RawTerm::Int(ar)) = (&fa[0], &fa[1]) {
                        let key = (name.clone(), *ar as usize);
                        let pred = db.preds.entry(key.clone()).or_insert_with(|| {
                            db.order.push(key.clone());
                            Predicate {
                                name: name.clone(),
                                arity: *ar as usize,
                                clauses: Vec::new(),
                                first_arg: Vec::new(),
                                eager_split: false,
                            }
                        });
                        pred.eager_split = true;
                        return Ok(());
                    }
                }
            }
            err(line, col, "eager_split expects Name/Arity")
        }
        _ => err(line, col, "unknown directive"),
    }
}

/// Parses a query: a bare body ("?-" is not written). Query variables are
/// all permanent.
pub struct Query {
    pub body: Vec<BodyItem>,
    pub vars: Vec<String>,
}

pub fn parse_query(text: &str) -> Result<Query, FrontError> {
    let mut p = Parser::new(text)?;
    let mut body = p.body()?;
    if p.cur.tok == Tok::Dot {
        p.advance()?;
    }
    if p.cur.tok != Tok::Eof {
        return err(p.cur.line, p.cur.col, "trailing input after query");
    }
    let mut anon = 0;
    let mut vars = Vec::new();
    for item in &mut body {
        if let BodyItem::Goal(g) = item {
            freshen_anon(g, &mut anon);
            collect_vars(g, &mut vars);
        }
    }
    Ok(Query { body, vars })
}

/// Prints a whole database back to clause syntax (used by the round-trip
/// property test).
pub fn print_program(db: &Database) -> String {
    let mut out = String::new();
    use std::fmt::Write;
    for key in &db.order {
        let p = &db.preds[key];
        if p.eager_split {
            let _ = writeln!(out, ":- eager_split({}/{}).", p.name, p.arity);
        }
        for c in &p.clauses {
            let _ = write!(out, "{}", c.head);
            if !c.body.is_empty() {
                let _ = write!(out, " :- ");
                let mut first = true;
                for item in &c.body {
                    match item {
                        BodyItem::SeqBarrier => {
                            let _ = write!(out, " && ");
                            first = true;
                            continue;
                        }
                        _ => {
                            if !first {
                                let _ = write!(out, ", ");
                            }
                        }
                    }
                    match item {
                        BodyItem::Goal(g) => {
                            let _ = write!(out, "{}", g);
                        }
                        BodyItem::Cut => {
                            let _ = write!(out, "!");
                        }
                        BodyItem::Commit => {
                            let _ = write!(out, "|");
                        }
                        BodyItem::SeqBarrier => unreachable!(),
                    }
                    first = false;
                }
            }
            let _ = writeln!(out, ".");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_fact() {
        let db = parse_program("p(a).").unwrap();
        let p = db.lookup("p", 1).unwrap();
        assert_eq!(p.clauses.len(), 1);
        assert!(p.clauses[0].body.is_empty());
    }

    #[test]
    fn parent_facts() {
        let src = "parent(john, richard).\nparent(john, mary).\nparent(patrick, paul).\nparent(patrick, susan).";
        let db = parse_program(src).unwrap();
        assert_eq!(db.lookup("parent", 2).unwrap().clauses.len(), 4);
    }

    #[test]
    fn seq_under_parallel_is_load_error() {
        let e = match parse_program("p :- q, (r && s).") {
            Err(e) => e,
            Ok(_) => panic!("expected load error"),
        };
        assert!(e.msg.contains("sequential"), "{}", e.msg);
    }

    #[test]
    fn top_level_seq_ok() {
        let db = parse_program("p :- q, r && s, t.").unwrap();
        let c = &db.lookup("p", 0).unwrap().clauses[0];
        let kinds: Vec<_> = c
            .body
            .iter()
            .map(|b| match b {
                BodyItem::Goal(_) => "g",
                BodyItem::SeqBarrier => "&&",
                BodyItem::Cut => "!",
                BodyItem::Commit => "|",
            })
            .collect();
        assert_eq!(kinds, ["g", "g", "&&", "g", "g"]);
    }

    #[test]
    fn cut_and_commit_items() {
        let db = parse_program("p :- q, !, r.\nw :- a, |, b.").unwrap();
        assert!(db.lookup("p", 0).unwrap().clauses[0].has_cut);
        assert!(db.lookup("w", 0).unwrap().clauses[0].has_commit);
    }

    #[test]
    fn nreverse_classification() {
        // nreverse([X|L0],L) :- nreverse(L0,L1), concatenate(L1,[X],L).
        // L1 is the only permanent variable.
        let db =
            parse_program("nreverse([X|L0],L) :- nreverse(L0,L1), concatenate(L1,[X],L).").unwrap();
        let c = &db.lookup("nreverse", 2).unwrap().clauses[0];
        let perms: Vec<&str> = c
            .vars
            .iter()
            .filter(|v| matches!(v.storage, Storage::Perm(_)))
            .map(|v| &*v.name)
            .collect();
        assert_eq!(perms, ["L1"]);
        assert_eq!(c.temp_count, 3);
    }

    #[test]
    fn head_var_is_temporary() {
        let db = parse_program("p(X) :- q(X).").unwrap();
        let c = &db.lookup("p", 1).unwrap().clauses[0];
        assert!(matches!(c.vars[0].storage, Storage::Temp(_)));
    }

    #[test]
    fn body_only_var_is_permanent() {
        let db = parse_program("p :- q(Y), r(Y).").unwrap();
        let c = &db.lookup("p", 0).unwrap().clauses[0];
        assert_eq!(c.perm_count, 1);
        assert!(matches!(c.vars[0].storage, Storage::Perm(_)));
    }

    #[test]
    fn ancestor_slot_order_matches_scheme() {
        // Clause 2 must allocate Z=Y1, Y=Y2, X=Y3.
        let db = parse_program("ancestor(X,Z) :- parent(X,Y), ancestor(Y,Z).").unwrap();
        let c = &db.lookup("ancestor", 2).unwrap().clauses[0];
        let names: Vec<&str> = c.vars.iter().map(|v| &*v.name).collect();
        assert_eq!(names, ["Z", "Y", "X"]);
    }

    #[test]
    fn indexing_unbound_selects_all() {
        let src = "parent(john, richard).\nparent(john, mary).\nparent(patrick, paul).\nparent(patrick, susan).";
        let db = parse_program(src).unwrap();
        let p = db.lookup("parent", 2).unwrap();
        assert_eq!(index_candidates(p, None), vec![0, 1, 2, 3]);
        assert_eq!(
            index_candidates(p, Some(&ArgPat::Atom("john".into()))),
            vec![0, 1]
        );
    }

    #[test]
    fn indexing_compound_excludes_nil_clause() {
        let src = "partition([X|L],Y,[X|L1],L2) :- X =< Y, partition(L,Y,L1,L2).\n\
                   partition([X|L],Y,L1,[X|L2]) :- X > Y, partition(L,Y,L1,L2).\n\
                   partition([],_,[],[]).";
        let db = parse_program(src).unwrap();
        let p = db.lookup("partition", 4).unwrap();
        assert_eq!(
            index_candidates(p, Some(&ArgPat::Functor(".".into(), 2))),
            vec![0, 1]
        );
        assert_eq!(
            index_candidates(p, Some(&ArgPat::Atom("[]".into()))),
            vec![2]
        );
    }

    #[test]
    fn operator_terms_parse_as_data() {
        let db = parse_program("d(U+V, DU+DV).").unwrap();
        let c = &db.lookup("d", 2).unwrap().clauses[0];
        let (f, n) = c.head.functor();
        assert_eq!((f, n), ("d", 2));
        if let RawTerm::Compound(_, args) = &c.head {
            assert_eq!(args[0].functor(), ("+", 2));
        } else {
            panic!();
        }
    }

    #[test]
    fn negative_literals_and_subtraction() {
        let q = parse_query("X is 3 - -2, Y is X-1").unwrap();
        assert_eq!(q.vars, ["X", "Y"]);
        let db = parse_program("p(-5).").unwrap();
        if let RawTerm::Compound(_, args) = &db.lookup("p", 1).unwrap().clauses[0].head {
            assert_eq!(args[0], RawTerm::Int(-5));
        } else {
            panic!();
        }
    }

    #[test]
    fn eager_split_directive() {
        let db = parse_program(":- eager_split(member/2).\nmember(X,[X|_]).\nmember(X,[_|T]) :- member(X,T).").unwrap();
        assert!(db.lookup("member", 2).unwrap().eager_split);
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let src = "p(a).\nq(X) :- p(X), r(X, [1,2|X]), X = f(Y+1).\nw :- a && b, c.";
        let db1 = parse_program(src).unwrap();
        let printed1 = print_program(&db1);
        let db2 = parse_program(&printed1).unwrap();
        let printed2 = print_program(&db2);
        assert_eq!(printed1, printed2);
    }
}
