//! The abstract instruction set and its textual listing format.

use std::fmt::Write as _;
use std::rc::Rc;

use crate::builtins::BuiltinTag;
use crate::front::Storage;
use crate::term::{Interner, Sym};
use crate::tree::CallKind;

pub type CodeIx = usize;

/// Slot addressing either a permanent-variable index or a temporary
/// register in the activation frame. `display` is the uniform Y-number
/// used by listings; classification decides actual storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub display: u16,
    pub storage: Storage,
}

/// Where a get/put instruction finds or leaves its term: an argument
/// register or a frame slot (used to stage nested structures).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loc {
    Arg(u16),
    Slot(Slot),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Instr {
    ExploreAlternative(u16),

    GetVar(Loc, Slot),
    GetVal(Loc, Slot),
    GetAtom(Loc, Sym),
    GetInt(Loc, i64),
    GetStruct(Loc, Sym, u16),
    GetList(Loc),

    UnifyVar(Slot),
    UnifyVal(Slot),
    UnifyAtom(Sym),
    UnifyInt(i64),
    UnifyStruct(Sym, u16),
    UnifyList,

    PutVar(Loc, Slot),
    PutVal(Loc, Slot),
    PutAtom(Loc, Sym),
    PutInt(Loc, i64),
    PutStruct(Loc, Sym, u16),
    PutList(Loc),

    PrepareCalls(u16, Vec<CodeIx>),
    CallPred(Rc<str>, u16),
    CallBuiltin(BuiltinTag),
    CutOp,
    CommitOp,
    SeqBarrierOp,
    Proceed,
}

/// Compiled form of one clause.
#[derive(Clone)]
pub struct ClauseCode {
    /// Offset of the explore_alternative instruction.
    pub seg_start: CodeIx,
    /// Offset just past explore_alternative; head unification starts here.
    pub head_start: CodeIx,
    pub seg_end: CodeIx,
    pub nr_calls: u16,
    pub call_labels: Vec<CodeIx>,
    pub call_kinds: Vec<CallKind>,
    pub perm_names: Vec<Rc<str>>,
    pub temp_count: u16,
    pub has_cut: bool,
}

#[derive(Clone)]
pub struct PredCode {
    pub name: Rc<str>,
    pub arity: usize,
    pub clauses: Vec<ClauseCode>,
    pub first_arg: Vec<crate::front::ArgPat>,
    pub eager_split: bool,
}

fn loc_str(l: &Loc) -> String {
    match l {
        Loc::Arg(i) => format!("A{}", i + 1),
        Loc::Slot(s) => format!("Y{}", s.display),
    }
}

fn slot_str(s: &Slot) -> String {
    format!("Y{}", s.display)
}

/// Renders one instruction in the listing format: one instruction per
/// line, operands comma-separated (prepare_calls labels space-separated).
pub fn instr_line(instr: &Instr, interner: &Interner, label_of: &dyn Fn(CodeIx) -> String) -> String {
    let (name, operands) = match instr {
        Instr::ExploreAlternative(i) => ("explore_alternative", format!("{}", i)),
        Instr::GetVar(l, s) => ("get_var", format!("{},{}", loc_str(l), slot_str(s))),
        Instr::GetVal(l, s) => ("get_val", format!("{},{}", loc_str(l), slot_str(s))),
        Instr::GetAtom(l, a) => ("get_atom", format!("{},{}", loc_str(l), interner.name(*a))),
        Instr::GetInt(l, n) => ("get_int", format!("{},{}", loc_str(l), n)),
        Instr::GetStruct(l, f, n) => (
            "get_struct",
            format!("{},{}/{}", loc_str(l), interner.name(*f), n),
        ),
        Instr::GetList(l) => ("get_list", loc_str(l)),
        Instr::UnifyVar(s) => ("unify_var", slot_str(s)),
        Instr::UnifyVal(s) => ("unify_val", slot_str(s)),
        Instr::UnifyAtom(a) => ("unify_atom", interner.name(*a).to_string()),
        Instr::UnifyInt(n) => ("unify_int", format!("{}", n)),
        Instr::UnifyStruct(f, n) => ("unify_struct", format!("{}/{}", interner.name(*f), n)),
        Instr::UnifyList => ("unify_list", String::new()),
        Instr::PutVar(l, s) => ("put_var", format!("{},{}", loc_str(l), slot_str(s))),
        Instr::PutVal(l, s) => ("put_val", format!("{},{}", loc_str(l), slot_str(s))),
        Instr::PutAtom(l, a) => ("put_atom", format!("{},{}", loc_str(l), interner.name(*a))),
        Instr::PutInt(l, n) => ("put_int", format!("{},{}", loc_str(l), n)),
        Instr::PutStruct(l, f, n) => (
            "put_struct",
            format!("{},{}/{}", loc_str(l), interner.name(*f), n),
        ),
        Instr::PutList(l) => ("put_list", loc_str(l)),
        Instr::PrepareCalls(n, labels) => {
            let mut s = format!("{}", n);
            for l in labels {
                let _ = write!(s, " {}", label_of(*l));
            }
            ("prepare_calls", s)
        }
        Instr::CallPred(f, n) => ("call_pred", format!("{}/{}", f, n)),
        Instr::CallBuiltin(tag) => ("call_builtin", format!("{}/{}", tag.name(), tag.arity())),
        Instr::CutOp => ("cut_op", String::new()),
        Instr::CommitOp => ("commit_op", String::new()),
        Instr::SeqBarrierOp => ("seq_barrier", String::new()),
        Instr::Proceed => ("proceed", String::new()),
    };
    if operands.is_empty() {
        format!("    {}", name)
    } else {
        format!("    {:<16} {}", name, operands)
    }
}

/// Lists one clause segment, with per-clause labels L1..Ln.
pub fn dump_clause(code: &[Instr], cc: &ClauseCode, interner: &Interner) -> String {
    let label_of = |ix: CodeIx| -> String {
        match cc.call_labels.iter().position(|&l| l == ix) {
            Some(k) => format!("L{}", k + 1),
            None => format!("@{}", ix),
        }
    };
    let mut out = String::new();
    for ix in cc.seg_start..cc.seg_end {
        if let Some(k) = cc.call_labels.iter().position(|&l| l == ix) {
            let _ = writeln!(out, " L{}:", k + 1);
        }
        let _ = writeln!(out, "{}", instr_line(&code[ix], interner, &label_of));
    }
    out
}
