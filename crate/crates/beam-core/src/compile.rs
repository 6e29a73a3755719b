//! Clause and query compilation to the abstract instruction set, following
//! a WAM-like scheme: head arguments compile to get/unify instructions,
//! rule bodies to prepare_calls plus one put/call block per goal. Nested
//! structures are flattened through staging slots.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use thiserror::Error;

use crate::builtins::BuiltinTag;
use crate::code::{ClauseCode, CodeIx, Instr, Loc, PredCode, Slot};
use crate::front::{BodyItem, Clause, Database, Query, RawTerm, Storage};
use crate::term::Interner;
use crate::tree::CallKind;

#[derive(Debug, Error)]
#[error("compile error: {0}")]
pub struct CompileError(pub String);

pub struct Program {
    pub code: Vec<Instr>,
    pub preds: HashMap<(String, usize), PredCode>,
    pub order: Vec<(String, usize)>,
    pub interner: Interner,
}

impl Program {
    pub fn lookup(&self, name: &str, arity: usize) -> Option<&PredCode> {
        self.preds.get(&(name.to_string(), arity))
    }
}

/// Compiled query: the root box's call layout.
pub struct QueryCode {
    pub nr_calls: u16,
    pub call_labels: Vec<CodeIx>,
    pub call_kinds: Vec<CallKind>,
    pub perm_names: Vec<Rc<str>>,
    pub temp_count: u16,
}

struct ClauseCtx<'a> {
    clause_vars: &'a HashMap<String, usize>,
    slots: Vec<Slot>,
    seen: HashSet<usize>,
    /// Next staging temp index / display number.
    next_temp: u16,
    next_display: u16,
    query_mode: bool,
}

impl<'a> ClauseCtx<'a> {
    fn slot_of(&self, name: &str) -> Slot {
        self.slots[self.clause_vars[name]]
    }

    fn var_index(&self, name: &str) -> usize {
        self.clause_vars[name]
    }

    fn staging(&mut self) -> Slot {
        let s = Slot {
            display: self.next_display,
            storage: Storage::Temp(self.next_temp),
        };
        self.next_temp += 1;
        self.next_display += 1;
        s
    }
}

pub fn compile_program(db: &Database) -> Result<Program, CompileError> {
    let mut interner = Interner::default();
    let mut code = Vec::new();
    let mut preds = HashMap::new();
    let mut order = Vec::new();
    for key in &db.order {
        let p = &db.preds[key];
        if BuiltinTag::lookup(&p.name, p.arity).is_some() {
            return Err(CompileError(format!(
                "predicate {}/{} collides with a builtin",
                p.name, p.arity
            )));
        }
        let mut clauses = Vec::new();
        for (i, c) in p.clauses.iter().enumerate() {
            clauses.push(compile_clause(c, (i + 1) as u16, &mut code, &mut interner)?);
        }
        let pc = PredCode {
            name: Rc::from(p.name.as_str()),
            arity: p.arity,
            clauses,
            first_arg: p.first_arg.clone(),
            eager_split: p.eager_split,
        };
        preds.insert(key.clone(), pc);
        order.push(key.clone());
    }
    Ok(Program {
        code,
        preds,
        order,
        interner,
    })
}

pub fn compile_clause(
    c: &Clause,
    alt_index: u16,
    code: &mut Vec<Instr>,
    interner: &mut Interner,
) -> Result<ClauseCode, CompileError> {
    let mut ctx = ClauseCtx {
        clause_vars: &c.var_of,
        slots: c.vars.iter().map(|v| Slot {
            display: v.display,
            storage: v.storage,
        })
        .collect(),
        seen: HashSet::new(),
        next_temp: c.temp_count,
        next_display: (c.vars.len() + 1) as u16,
        query_mode: false,
    };

    let seg_start = code.len();
    code.push(Instr::ExploreAlternative(alt_index));
    let head_start = code.len();

    if let RawTerm::Compound(_, args) = &c.head {
        for (j, arg) in args.iter().enumerate() {
            compile_get(arg, Loc::Arg(j as u16), code, &mut ctx, interner)?;
        }
    }

    let (nr_calls, call_labels, call_kinds) = compile_body(&c.body, code, &mut ctx, interner)?;

    let seg_end = code.len();
    Ok(ClauseCode {
        seg_start,
        head_start,
        seg_end,
        nr_calls,
        call_labels,
        call_kinds,
        perm_names: c
            .vars
            .iter()
            .filter(|v| matches!(v.storage, Storage::Perm(_)))
            .map(|v| v.name.clone())
            .collect(),
        temp_count: ctx.next_temp,
        has_cut: c.has_cut || c.has_commit,
    })
}

/// Queries compile as a bare body whose variables are all permanent;
/// first occurrences use put_var.
pub fn compile_query(
    q: &Query,
    code: &mut Vec<Instr>,
    interner: &mut Interner,
) -> Result<QueryCode, CompileError> {
    let mut var_of = HashMap::new();
    let mut slots = Vec::new();
    for (i, name) in q.vars.iter().enumerate() {
        var_of.insert(name.clone(), i);
        slots.push(Slot {
            display: (i + 1) as u16,
            storage: Storage::Perm(i as u16),
        });
    }
    let mut ctx = ClauseCtx {
        clause_vars: &var_of,
        slots,
        seen: HashSet::new(),
        next_temp: 0,
        next_display: (q.vars.len() + 1) as u16,
        query_mode: true,
    };
    let (nr_calls, call_labels, call_kinds) = compile_body(&q.body, code, &mut ctx, interner)?;
    Ok(QueryCode {
        nr_calls,
        call_labels,
        call_kinds,
        perm_names: q.vars.iter().map(|s| Rc::from(s.as_str())).collect(),
        temp_count: ctx.next_temp,
    })
}

fn compile_body(
    body: &[BodyItem],
    code: &mut Vec<Instr>,
    ctx: &mut ClauseCtx<'_>,
    interner: &mut Interner,
) -> Result<(u16, Vec<CodeIx>, Vec<CallKind>), CompileError> {
    if body.is_empty() {
        code.push(Instr::Proceed);
        return Ok((0, Vec::new(), Vec::new()));
    }
    let prepare_ix = code.len();
    code.push(Instr::PrepareCalls(body.len() as u16, Vec::new()));
    let mut labels = Vec::new();
    let mut kinds = Vec::new();
    for item in body {
        labels.push(code.len());
        match item {
            BodyItem::Goal(g) => {
                kinds.push(goal_kind(g));
                compile_goal(g, code, ctx, interner)?;
            }
            BodyItem::Cut => {
                kinds.push(CallKind::Cut);
                code.push(Instr::CutOp);
            }
            BodyItem::Commit => {
                kinds.push(CallKind::Commit);
                code.push(Instr::CommitOp);
            }
            BodyItem::SeqBarrier => {
                kinds.push(CallKind::SeqBarrier);
                code.push(Instr::SeqBarrierOp);
            }
        }
    }
    code[prepare_ix] = Instr::PrepareCalls(body.len() as u16, labels.clone());
    Ok((body.len() as u16, labels, kinds))
}

fn goal_kind(g: &RawTerm) -> CallKind {
    let (name, arity) = match g {
        RawTerm::Atom(a) => (a.as_str(), 0),
        RawTerm::Compound(f, args) => (f.as_str(), args.len()),
        _ => return CallKind::Goal,
    };
    if BuiltinTag::lookup(name, arity).is_some() {
        CallKind::Builtin
    } else {
        CallKind::Goal
    }
}

fn compile_goal(
    g: &RawTerm,
    code: &mut Vec<Instr>,
    ctx: &mut ClauseCtx<'_>,
    interner: &mut Interner,
) -> Result<(), CompileError> {
    let (name, arity) = match g {
        RawTerm::Atom(a) => (a.as_str(), 0),
        RawTerm::Compound(f, args) => (f.as_str(), args.len()),
        RawTerm::Var(v) => {
            return Err(CompileError(format!("variable goal `{}` is not supported", v)))
        }
        RawTerm::Int(n) => return Err(CompileError(format!("integer `{}` is not callable", n))),
    };
    if let RawTerm::Compound(_, args) = g {
        for (j, arg) in args.iter().enumerate() {
            compile_put(arg, Loc::Arg(j as u16), code, ctx, interner)?;
        }
    }
    match BuiltinTag::lookup(name, arity) {
        Some(tag) => code.push(Instr::CallBuiltin(tag)),
        None => code.push(Instr::CallPred(Rc::from(name), arity as u16)),
    }
    Ok(())
}

fn compile_get(
    t: &RawTerm,
    loc: Loc,
    code: &mut Vec<Instr>,
    ctx: &mut ClauseCtx<'_>,
    interner: &mut Interner,
) -> Result<(), CompileError> {
    match t {
        RawTerm::Var(v) => {
            let slot = ctx.slot_of(v);
            if ctx.seen.insert(ctx.var_index(v)) {
                code.push(Instr::GetVar(loc, slot));
            } else {
                code.push(Instr::GetVal(loc, slot));
            }
        }
        RawTerm::Atom(a) => code.push(Instr::GetAtom(loc, interner.intern(a))),
        RawTerm::Int(n) => code.push(Instr::GetInt(loc, *n)),
        RawTerm::Compound(f, args) => {
            if f == "." && args.len() == 2 {
                code.push(Instr::GetList(loc));
            } else {
                code.push(Instr::GetStruct(loc, interner.intern(f), args.len() as u16));
            }
            let mut deferred = Vec::new();
            for sub in args.iter() {
                compile_unify_elem(sub, code, ctx, interner, &mut deferred);
            }
            for (slot, sub) in deferred {
                compile_get(sub, Loc::Slot(slot), code, ctx, interner)?;
            }
        }
    }
    Ok(())
}

/// Emits the unify_* instruction for one element of a compound being
/// matched or built; nested compounds go through a staging slot.
fn compile_unify_elem<'t>(
    t: &'t RawTerm,
    code: &mut Vec<Instr>,
    ctx: &mut ClauseCtx<'_>,
    interner: &mut Interner,
    deferred: &mut Vec<(Slot, &'t RawTerm)>,
) {
    match t {
        RawTerm::Var(v) => {
            let slot = ctx.slot_of(v);
            if ctx.seen.insert(ctx.var_index(v)) {
                code.push(Instr::UnifyVar(slot));
            } else {
                code.push(Instr::UnifyVal(slot));
            }
        }
        RawTerm::Atom(a) => code.push(Instr::UnifyAtom(interner.intern(a))),
        RawTerm::Int(n) => code.push(Instr::UnifyInt(*n)),
        RawTerm::Compound(_, _) => {
            let s = ctx.staging();
            code.push(Instr::UnifyVar(s));
            deferred.push((s, t));
        }
    }
}

fn compile_put(
    t: &RawTerm,
    loc: Loc,
    code: &mut Vec<Instr>,
    ctx: &mut ClauseCtx<'_>,
    interner: &mut Interner,
) -> Result<(), CompileError> {
    match t {
        RawTerm::Var(v) => {
            let slot = ctx.slot_of(v);
            let first = ctx.seen.insert(ctx.var_index(v));
            if first && ctx.query_mode {
                code.push(Instr::PutVar(loc, slot));
            } else {
                code.push(Instr::PutVal(loc, slot));
            }
        }
        RawTerm::Atom(a) => code.push(Instr::PutAtom(loc, interner.intern(a))),
        RawTerm::Int(n) => code.push(Instr::PutInt(loc, *n)),
        RawTerm::Compound(f, args) => {
            // Build nested children bottom-up into staging slots first.
            let mut fills: Vec<Fill> = Vec::new();
            for sub in args.iter() {
                match sub {
                    RawTerm::Var(v) => {
                        let slot = ctx.slot_of(v);
                        let first = ctx.seen.insert(ctx.var_index(v));
                        fills.push(Fill::Var(slot, first && ctx.query_mode));
                    }
                    RawTerm::Atom(a) => fills.push(Fill::Atom(interner.intern(a))),
                    RawTerm::Int(n) => fills.push(Fill::Int(*n)),
                    RawTerm::Compound(_, _) => {
                        let s = ctx.staging();
                        compile_put(sub, Loc::Slot(s), code, ctx, interner)?;
                        fills.push(Fill::Staged(s));
                    }
                }
            }
            if f == "." && args.len() == 2 {
                code.push(Instr::PutList(loc));
            } else {
                code.push(Instr::PutStruct(loc, interner.intern(f), args.len() as u16));
            }
            for fill in fills {
                match fill {
                    Fill::Var(s, fresh) => {
                        if fresh {
                            code.push(Instr::UnifyVar(s));
                        } else {
                            code.push(Instr::UnifyVal(s));
                        }
                    }
                    Fill::Atom(a) => code.push(Instr::UnifyAtom(a)),
                    Fill::Int(n) => code.push(Instr::UnifyInt(n)),
                    Fill::Staged(s) => code.push(Instr::UnifyVal(s)),
                }
            }
        }
    }
    Ok(())
}

enum Fill {
    Var(Slot, bool),
    Atom(crate::term::Sym),
    Int(i64),
    Staged(Slot),
}

/// Static register-safety check: every temporary slot is written before it
/// is read along every code path (head block, then each call block).
pub fn check_registers(code: &[Instr], cc: &ClauseCode) -> Result<(), CompileError> {
    let mut head_written: HashSet<u16> = HashSet::new();
    let head_end = if cc.nr_calls == 0 {
        cc.seg_end
    } else {
        // up to (and including) prepare_calls
        cc.call_labels.first().copied().unwrap_or(cc.seg_end)
    };
    check_block(&code[cc.head_start..head_end], &mut head_written)?;
    for (k, &label) in cc.call_labels.iter().enumerate() {
        let end = cc
            .call_labels
            .get(k + 1)
            .copied()
            .unwrap_or(cc.seg_end);
        let mut written = head_written.clone();
        check_block(&code[label..end], &mut written)?;
    }
    Ok(())
}

fn check_block(block: &[Instr], written: &mut HashSet<u16>) -> Result<(), CompileError> {
    fn read(written: &HashSet<u16>, slot: &Slot) -> Result<(), CompileError> {
        if let Storage::Temp(i) = slot.storage {
            if !written.contains(&i) {
                return Err(CompileError(format!(
                    "temporary Y{} read before written",
                    slot.display
                )));
            }
        }
        Ok(())
    }
    for instr in block {
        match instr {
            Instr::GetVar(_, s) | Instr::UnifyVar(s) => {
                if let Storage::Temp(i) = s.storage {
                    written.insert(i);
                }
            }
            Instr::GetVal(_, s) | Instr::UnifyVal(s) | Instr::PutVal(_, s) => {
                read(written, s)?
            }
            Instr::PutVar(_, s) => {
                if let Storage::Temp(i) = s.storage {
                    written.insert(i);
                }
            }
            Instr::GetStruct(l, _, _) | Instr::GetList(l) => {
                if let Loc::Slot(s) = l {
                    read(written, s)?;
                }
            }
            Instr::PutStruct(l, _, _) | Instr::PutList(l) => {
                if let Loc::Slot(s) = l {
                    if let Storage::Temp(i) = s.storage {
                        written.insert(i);
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code::dump_clause;
    use crate::front::parse_program;

    fn dump_pred(src: &str, name: &str, arity: usize) -> String {
        let db = parse_program(src).unwrap();
        let prog = compile_program(&db).unwrap();
        let pc = prog.lookup(name, arity).unwrap();
        let mut out = String::new();
        for cc in &pc.clauses {
            out.push_str(&dump_clause(&prog.code, cc, &prog.interner));
        }
        out
    }

    fn tokens(s: &str) -> Vec<String> {
        s.replace(", ", ",")
            .split_whitespace()
            .map(|t| t.to_string())
            .collect()
    }

    #[test]
    fn ancestor_clause1_matches_scheme() {
        let src = "ancestor(X,Y) :- parent(X,Y).\nancestor(X,Z) :- parent(X,Y), ancestor(Y,Z).";
        let out = dump_pred(src, "ancestor", 2);
        let expected = "
            explore_alternative 1
            get_var A1,Y1
            get_var A2,Y2
            prepare_calls 1 L1
            L1:
            put_val A1,Y1
            put_val A2,Y2
            call_pred parent/2
            explore_alternative 2
            get_var A1,Y3
            get_var A2,Y1
            prepare_calls 2 L1 L2
            L1:
            put_val A1,Y3
            put_val A2,Y2
            call_pred parent/2
            L2:
            put_val A1,Y2
            put_val A2,Y1
            call_pred ancestor/2";
        assert_eq!(tokens(&out), tokens(expected));
    }

    #[test]
    fn parent_fact_matches_scheme() {
        let out = dump_pred("parent(a,fa).\nparent(a,ma).", "parent", 2);
        let expected = "
            explore_alternative 1
            get_atom A1,a
            get_atom A2,fa
            proceed
            explore_alternative 2
            get_atom A1,a
            get_atom A2,ma
            proceed";
        assert_eq!(tokens(&out), tokens(expected));
    }

    #[test]
    fn zero_arity_fact() {
        let out = dump_pred("p.", "p", 0);
        assert_eq!(tokens(&out), tokens("explore_alternative 1\nproceed"));
    }

    #[test]
    fn register_safety_on_corpus() {
        let src = "qsort([X|L],R,R0) :- partition(L,X,L1,L2), qsort(L1,R,[X|R1]), qsort(L2,R1,R0).\n\
                   qsort([],R,R).\n\
                   serialise(pair(X,Y)) :- w(f(g(X), h(Y, k(1)))).";
        let db = parse_program(src).unwrap();
        let prog = compile_program(&db).unwrap();
        for pc in prog.preds.values() {
            for cc in &pc.clauses {
                check_registers(&prog.code, cc).unwrap();
            }
        }
    }

    #[test]
    fn nested_structures_stage_bottom_up() {
        let src = "p(f(g(1))) :- q(h(i(2), X)).";
        let db = parse_program(src).unwrap();
        let prog = compile_program(&db).unwrap();
        let pc = prog.lookup("p", 1).unwrap();
        check_registers(&prog.code, &pc.clauses[0]).unwrap();
        let listing = dump_clause(&prog.code, &pc.clauses[0], &prog.interner);
        assert!(listing.contains("get_struct"));
        assert!(listing.contains("put_struct"));
    }

    #[test]
    fn query_compiles_with_put_var() {
        let q = crate::front::parse_query("parent(X, mary)").unwrap();
        let mut code = Vec::new();
        let mut interner = Interner::default();
        let qc = compile_query(&q, &mut code, &mut interner).unwrap();
        assert_eq!(qc.nr_calls, 1);
        let label_of = |_ix: CodeIx| "L1".to_string();
        let lines: Vec<String> = code
            .iter()
            .map(|i| crate::code::instr_line(i, &interner, &label_of))
            .collect();
        let joined = lines.join("\n");
        assert!(joined.contains("put_var"), "{}", joined);
        assert!(joined.contains("call_pred"), "{}", joined);
    }
}
