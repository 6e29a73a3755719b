//! The abstract-machine emulator: runs get/unify/put instruction sequences
//! between manager ports. There are no backtracking registers; recovery
//! flows through the tree manager, and every binding made to an external
//! variable is reported back for recording on the working and-box.

use std::rc::Rc;

use crate::builtins::BuiltinTag;
use crate::code::{CodeIx, Instr, Loc, Slot};
use crate::front::Storage;
use crate::term::{Sym, Term, Trail, Unifier, UnifyOutcome, VarId, VarStore};
use crate::tree::{AndId, Frame};

#[derive(Debug)]
pub enum ExecOutcome {
    Fail,
    Proceed,
    PrepareCalls(u16, Vec<CodeIx>),
    CallPred(Rc<str>, u16),
    CallBuiltin(BuiltinTag),
    Cut,
    Commit,
    SeqBarrier,
}

pub struct ExecResult {
    pub outcome: ExecOutcome,
    pub trail: Trail,
    /// Bindings to variables external to the working box, in order.
    pub externals: Vec<(VarId, Term)>,
    /// Fresh permanent variables created by write-mode instructions; they
    /// belong to the working box.
    pub new_locals: Vec<VarId>,
}

enum BuildTarget {
    Loc(Loc),
    BindVar(VarId),
}

enum Ctx {
    Read {
        args: Rc<[Term]>,
        idx: usize,
    },
    Write {
        functor: Sym,
        arity: u16,
        elems: Vec<Term>,
        target: BuildTarget,
    },
}

/// Register file and structure context. The `PC` lives in the exec loop,
/// `S` is the index of the innermost read context, and `Mode` is write iff
/// the innermost context is building a fresh term.
pub struct MachineState {
    pub x: Vec<Option<Term>>,
    ctx_stack: Vec<Ctx>,
}

impl MachineState {
    pub fn new() -> Self {
        MachineState {
            x: Vec::new(),
            ctx_stack: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.x.clear();
        self.ctx_stack.clear();
    }

    pub fn in_write_mode(&self) -> bool {
        matches!(self.ctx_stack.last(), Some(Ctx::Write { .. }))
    }

    pub fn write_x(&mut self, i: usize, t: Term) {
        if self.x.len() <= i {
            self.x.resize(i + 1, None);
        }
        self.x[i] = Some(t);
    }

    pub fn read_x(&self, i: usize) -> Term {
        self.x
            .get(i)
            .and_then(|t| t.clone())
            .expect("argument register read before write")
    }
}

impl Default for MachineState {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Exec<'a> {
    pub store: &'a mut VarStore,
    pub frame: &'a mut Frame,
    pub state: &'a mut MachineState,
    pub box_id: AndId,
    pub box_depth: u32,
    /// Interned `.`/2 functor for list instructions.
    pub dot: Sym,
    pub unifier: Unifier,
    pub new_locals: Vec<VarId>,
}

impl<'a> Exec<'a> {
    pub fn new(
        store: &'a mut VarStore,
        frame: &'a mut Frame,
        state: &'a mut MachineState,
        box_id: AndId,
        box_depth: u32,
        dot: Sym,
    ) -> Self {
        state.ctx_stack.clear();
        Exec {
            store,
            frame,
            state,
            box_id,
            box_depth,
            dot,
            unifier: Unifier::new(box_depth),
            new_locals: Vec::new(),
        }
    }

    fn fresh_var(&mut self) -> VarId {
        let v = self.store.fresh(self.box_id, self.box_depth, None);
        self.new_locals.push(v);
        v
    }

    fn slot_term(&self, slot: &Slot) -> Term {
        match slot.storage {
            Storage::Perm(i) => Term::Var(self.frame.perms[i as usize]),
            Storage::Temp(i) => self.frame.temps[i as usize]
                .clone()
                .expect("temporary slot read before written"),
        }
    }

    fn read_loc(&self, loc: &Loc) -> Term {
        match loc {
            Loc::Arg(i) => self.state.read_x(*i as usize),
            Loc::Slot(s) => self.slot_term(s),
        }
    }

    fn store_temp(&mut self, i: usize, t: Term) {
        if self.frame.temps.len() <= i {
            self.frame.temps.resize(i + 1, None);
        }
        self.frame.temps[i] = Some(t);
    }

    /// First-occurrence write: temporaries are moved into, permanents are
    /// pre-created cells that unify with the incoming term.
    fn write_slot(&mut self, slot: &Slot, t: Term) -> UnifyOutcome {
        match slot.storage {
            Storage::Temp(i) => {
                self.store_temp(i as usize, t);
                UnifyOutcome::Success
            }
            Storage::Perm(i) => {
                let v = self.frame.perms[i as usize];
                self.unifier.unify(self.store, &Term::Var(v), &t)
            }
        }
    }

    fn write_loc(&mut self, loc: &Loc, t: Term) -> UnifyOutcome {
        match loc {
            Loc::Arg(i) => {
                self.state.write_x(*i as usize, t);
                UnifyOutcome::Success
            }
            Loc::Slot(s) => self.write_slot(s, t),
        }
    }

    fn unify(&mut self, a: &Term, b: &Term) -> UnifyOutcome {
        self.unifier.unify(self.store, a, b)
    }

    fn get_compound(&mut self, loc: &Loc, f: Sym, n: u16) -> Option<ExecOutcome> {
        let t = self.read_loc(loc);
        match self.store.deref(&t) {
            Term::Compound(g, args) if g == f && args.len() == n as usize => {
                self.state.ctx_stack.push(Ctx::Read { args, idx: 0 });
                None
            }
            Term::Var(v) => {
                self.state.ctx_stack.push(Ctx::Write {
                    functor: f,
                    arity: n,
                    elems: Vec::with_capacity(n as usize),
                    target: BuildTarget::BindVar(v),
                });
                None
            }
            _ => Some(ExecOutcome::Fail),
        }
    }

    /// Handles one unify_* element in read or write mode.
    fn unify_elem(&mut self, op: ElemOp) -> Option<ExecOutcome> {
        while let Some(Ctx::Read { args, idx }) = self.state.ctx_stack.last() {
            if *idx >= args.len() {
                self.state.ctx_stack.pop();
            } else {
                break;
            }
        }
        let read_elem = match self.state.ctx_stack.last_mut() {
            Some(Ctx::Read { args, idx }) => {
                let elem = args[*idx].clone();
                *idx += 1;
                Some(elem)
            }
            Some(Ctx::Write { .. }) => None,
            None => panic!("unify instruction outside a get/put sequence"),
        };
        match read_elem {
            Some(elem) => match op {
                ElemOp::Var(slot) => {
                    if self.write_slot(&slot, elem) == UnifyOutcome::Failure {
                        return Some(ExecOutcome::Fail);
                    }
                    None
                }
                ElemOp::Val(slot) => {
                    let t = self.slot_term(&slot);
                    if self.unify(&t, &elem) == UnifyOutcome::Failure {
                        return Some(ExecOutcome::Fail);
                    }
                    None
                }
                ElemOp::Const(c) => {
                    if self.unify(&elem, &c) == UnifyOutcome::Failure {
                        return Some(ExecOutcome::Fail);
                    }
                    None
                }
                ElemOp::Struct(f, n) => match self.store.deref(&elem) {
                    Term::Compound(g, args) if g == f && args.len() == n as usize => {
                        self.state.ctx_stack.push(Ctx::Read { args, idx: 0 });
                        None
                    }
                    Term::Var(v) => {
                        self.state.ctx_stack.push(Ctx::Write {
                            functor: f,
                            arity: n,
                            elems: Vec::with_capacity(n as usize),
                            target: BuildTarget::BindVar(v),
                        });
                        None
                    }
                    _ => Some(ExecOutcome::Fail),
                },
            },
            None => {
                // Write mode: produce the element, then append it.
                match op {
                    ElemOp::Var(slot) => {
                        let t = match slot.storage {
                            Storage::Perm(i) => Term::Var(self.frame.perms[i as usize]),
                            Storage::Temp(i) => {
                                let v = self.fresh_var();
                                self.store_temp(i as usize, Term::Var(v));
                                Term::Var(v)
                            }
                        };
                        self.push_built_elem(t)
                    }
                    ElemOp::Val(slot) => {
                        let t = self.slot_term(&slot);
                        self.push_built_elem(t)
                    }
                    ElemOp::Const(c) => self.push_built_elem(c),
                    ElemOp::Struct(f, n) => {
                        // Placeholder var appended to the parent now; the
                        // nested build binds it on completion.
                        let v = self.fresh_var();
                        let step = self.push_built_elem(Term::Var(v));
                        if step.is_some() {
                            return step;
                        }
                        self.state.ctx_stack.push(Ctx::Write {
                            functor: f,
                            arity: n,
                            elems: Vec::with_capacity(n as usize),
                            target: BuildTarget::BindVar(v),
                        });
                        None
                    }
                }
            }
        }
    }

    /// Appends an element to the innermost write context, finishing builds
    /// whose element counts are reached.
    fn push_built_elem(&mut self, elem: Term) -> Option<ExecOutcome> {
        match self.state.ctx_stack.last_mut() {
            Some(Ctx::Write { elems, .. }) => elems.push(elem),
            _ => panic!("write element with no build context"),
        }
        loop {
            let done = match self.state.ctx_stack.last() {
                Some(Ctx::Write { arity, elems, .. }) => elems.len() == *arity as usize,
                _ => false,
            };
            if !done {
                return None;
            }
            let Some(Ctx::Write {
                functor,
                elems,
                target,
                ..
            }) = self.state.ctx_stack.pop()
            else {
                unreachable!()
            };
            let term = Term::Compound(functor, elems.into());
            match target {
                BuildTarget::BindVar(v) => {
                    if self.store.is_unbound(v) {
                        self.unifier.bind(self.store, v, term);
                    } else if self.unify(&Term::Var(v), &term) == UnifyOutcome::Failure {
                        return Some(ExecOutcome::Fail);
                    }
                }
                BuildTarget::Loc(loc) => {
                    if self.write_loc(&loc, term) == UnifyOutcome::Failure {
                        return Some(ExecOutcome::Fail);
                    }
                }
            }
        }
    }

    fn step(&mut self, instr: &Instr) -> Option<ExecOutcome> {
        macro_rules! check {
            ($out:expr) => {
                if $out == UnifyOutcome::Failure {
                    return Some(ExecOutcome::Fail);
                }
            };
        }
        match instr {
            Instr::ExploreAlternative(_) => None,

            Instr::GetVar(loc, slot) => {
                let t = self.read_loc(loc);
                check!(self.write_slot(slot, t));
                None
            }
            Instr::GetVal(loc, slot) => {
                let a = self.slot_term(slot);
                let b = self.read_loc(loc);
                check!(self.unify(&a, &b));
                None
            }
            Instr::GetAtom(loc, s) => {
                let t = self.read_loc(loc);
                check!(self.unify(&t, &Term::Atom(*s)));
                None
            }
            Instr::GetInt(loc, n) => {
                let t = self.read_loc(loc);
                check!(self.unify(&t, &Term::Int(*n)));
                None
            }
            Instr::GetStruct(loc, f, n) => self.get_compound(loc, *f, *n),
            Instr::GetList(loc) => self.get_compound(loc, self.dot, 2),

            Instr::UnifyVar(slot) => self.unify_elem(ElemOp::Var(*slot)),
            Instr::UnifyVal(slot) => self.unify_elem(ElemOp::Val(*slot)),
            Instr::UnifyAtom(s) => self.unify_elem(ElemOp::Const(Term::Atom(*s))),
            Instr::UnifyInt(n) => self.unify_elem(ElemOp::Const(Term::Int(*n))),
            Instr::UnifyStruct(f, n) => self.unify_elem(ElemOp::Struct(*f, *n)),
            Instr::UnifyList => self.unify_elem(ElemOp::Struct(self.dot, 2)),

            Instr::PutVar(loc, slot) => {
                let t = match slot.storage {
                    Storage::Perm(i) => Term::Var(self.frame.perms[i as usize]),
                    Storage::Temp(i) => {
                        let v = self.fresh_var();
                        self.store_temp(i as usize, Term::Var(v));
                        Term::Var(v)
                    }
                };
                check!(self.write_loc(loc, t));
                None
            }
            Instr::PutVal(loc, slot) => {
                let t = self.slot_term(slot);
                check!(self.write_loc(loc, t));
                None
            }
            Instr::PutAtom(loc, s) => {
                check!(self.write_loc(loc, Term::Atom(*s)));
                None
            }
            Instr::PutInt(loc, n) => {
                check!(self.write_loc(loc, Term::Int(*n)));
                None
            }
            Instr::PutStruct(loc, f, n) => {
                self.state.ctx_stack.push(Ctx::Write {
                    functor: *f,
                    arity: *n,
                    elems: Vec::with_capacity(*n as usize),
                    target: BuildTarget::Loc(*loc),
                });
                None
            }
            Instr::PutList(loc) => {
                self.state.ctx_stack.push(Ctx::Write {
                    functor: self.dot,
                    arity: 2,
                    elems: Vec::with_capacity(2),
                    target: BuildTarget::Loc(*loc),
                });
                None
            }

            Instr::PrepareCalls(n, labels) => Some(ExecOutcome::PrepareCalls(*n, labels.clone())),
            Instr::CallPred(name, ar) => Some(ExecOutcome::CallPred(name.clone(), *ar)),
            Instr::CallBuiltin(tag) => Some(ExecOutcome::CallBuiltin(*tag)),
            Instr::CutOp => Some(ExecOutcome::Cut),
            Instr::CommitOp => Some(ExecOutcome::Commit),
            Instr::SeqBarrierOp => Some(ExecOutcome::SeqBarrier),
            Instr::Proceed => Some(ExecOutcome::Proceed),
        }
    }
}

enum ElemOp {
    Var(Slot),
    Val(Slot),
    Const(Term),
    Struct(Sym, u16),
}

/// Runs instructions from `pc` until a manager port is reached. The trail
/// covers every binding made; on Fail the caller must undo it (speculative
/// callers undo it regardless of outcome).
pub fn exec(e: &mut Exec<'_>, code: &[Instr], mut pc: CodeIx) -> ExecResult {
    let outcome = loop {
        let instr = &code[pc];
        pc += 1;
        if let Some(out) = e.step(instr) {
            break out;
        }
    };
    ExecResult {
        outcome,
        trail: std::mem::take(&mut e.unifier.trail),
        externals: std::mem::take(&mut e.unifier.externals),
        new_locals: std::mem::take(&mut e.new_locals),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::Interner;

    const BOX0: AndId = AndId { index: 0, gen: 0 };

    fn frame_with(perms: Vec<VarId>, temps: usize) -> Frame {
        Frame {
            perms,
            temps: vec![None; temps],
        }
    }

    fn slot_t(i: u16) -> Slot {
        Slot {
            display: i + 1,
            storage: Storage::Temp(i),
        }
    }

    #[test]
    fn fact_head_unification_binds_local() {
        // parent(a, fa) head code against call parent(a, Q), Q local.
        let mut interner = Interner::default();
        let a = interner.intern("a");
        let fa = interner.intern("fa");
        let dot = interner.intern(".");
        let mut store = VarStore::new();
        let q = store.fresh(BOX0, 1, None);
        let code = vec![
            Instr::ExploreAlternative(1),
            Instr::GetAtom(Loc::Arg(0), a),
            Instr::GetAtom(Loc::Arg(1), fa),
            Instr::Proceed,
        ];
        let mut frame = frame_with(vec![], 0);
        let mut state = MachineState::new();
        state.write_x(0, Term::Atom(a));
        state.write_x(1, Term::Var(q));
        let mut e = Exec::new(&mut store, &mut frame, &mut state, BOX0, 1, dot);
        let r = exec(&mut e, &code, 0);
        assert!(matches!(r.outcome, ExecOutcome::Proceed));
        assert!(r.externals.is_empty());
        assert_eq!(store.deref(&Term::Var(q)), Term::Atom(fa));
    }

    #[test]
    fn clashing_head_fails_and_rolls_back() {
        let mut interner = Interner::default();
        let a = interner.intern("a");
        let richard = interner.intern("richard");
        let mary = interner.intern("mary");
        let dot = interner.intern(".");
        let mut store = VarStore::new();
        let x = store.fresh(BOX0, 0, None);
        let code = vec![
            Instr::ExploreAlternative(1),
            Instr::GetAtom(Loc::Arg(0), a),
            Instr::GetAtom(Loc::Arg(1), richard),
            Instr::Proceed,
        ];
        let mut frame = frame_with(vec![], 0);
        let mut state = MachineState::new();
        state.write_x(0, Term::Var(x));
        state.write_x(1, Term::Atom(mary));
        let mut e = Exec::new(&mut store, &mut frame, &mut state, BOX0, 1, dot);
        let mut r = exec(&mut e, &code, 0);
        assert!(matches!(r.outcome, ExecOutcome::Fail));
        r.trail.undo(&mut store);
        assert!(store.is_unbound(x));
    }

    #[test]
    fn write_mode_builds_structure_on_unbound_arg() {
        // get_list A1; unify_var Y1t; unify_atom nil  against unbound X
        // should bind X = [<fresh>].
        let mut interner = Interner::default();
        let dot = interner.intern(".");
        let nil = interner.intern("[]");
        let mut store = VarStore::new();
        let x = store.fresh(BOX0, 0, None);
        let code = vec![
            Instr::GetList(Loc::Arg(0)),
            Instr::UnifyVar(slot_t(0)),
            Instr::UnifyAtom(nil),
            Instr::Proceed,
        ];
        let mut frame = frame_with(vec![], 1);
        let mut state = MachineState::new();
        state.write_x(0, Term::Var(x));
        let mut e = Exec::new(&mut store, &mut frame, &mut state, BOX0, 2, dot);
        let r = exec(&mut e, &code, 0);
        assert!(matches!(r.outcome, ExecOutcome::Proceed));
        // X was external (depth 0 vs ctx 2) and got bound to a list cell.
        assert_eq!(r.externals.len(), 1);
        assert_eq!(r.new_locals.len(), 1);
        match store.deref(&Term::Var(x)) {
            Term::Compound(f, args) => {
                assert_eq!(f, dot);
                assert_eq!(args.len(), 2);
                assert_eq!(store.deref(&args[1]), Term::Atom(nil));
            }
            other => panic!("expected list, got {:?}", other),
        }
    }

    #[test]
    fn nested_unify_struct_read_mode() {
        // Head p(f(g(1))) via explicit nested unify_struct, matched against
        // a ground argument.
        let mut interner = Interner::default();
        let dot = interner.intern(".");
        let f = interner.intern("f");
        let g = interner.intern("g");
        let mut store = VarStore::new();
        let arg = Term::compound(f, vec![Term::compound(g, vec![Term::Int(1)])]);
        let code = vec![
            Instr::GetStruct(Loc::Arg(0), f, 1),
            Instr::UnifyStruct(g, 1),
            Instr::UnifyInt(1),
            Instr::Proceed,
        ];
        let mut frame = frame_with(vec![], 0);
        let mut state = MachineState::new();
        state.write_x(0, arg);
        let mut e = Exec::new(&mut store, &mut frame, &mut state, BOX0, 0, dot);
        let r = exec(&mut e, &code, 0);
        assert!(matches!(r.outcome, ExecOutcome::Proceed));
    }

    #[test]
    fn put_struct_builds_nested_terms() {
        // put_struct g/1, Y1t; unify_int 2; put_struct f/2, A1; unify_val Y1t;
        // unify_atom a  =>  X1 = f(g(2), a)
        let mut interner = Interner::default();
        let dot = interner.intern(".");
        let f = interner.intern("f");
        let g = interner.intern("g");
        let a = interner.intern("a");
        let mut store = VarStore::new();
        let code = vec![
            Instr::PutStruct(Loc::Slot(slot_t(0)), g, 1),
            Instr::UnifyInt(2),
            Instr::PutStruct(Loc::Arg(0), f, 2),
            Instr::UnifyVal(slot_t(0)),
            Instr::UnifyAtom(a),
            Instr::Proceed,
        ];
        let mut frame = frame_with(vec![], 1);
        let mut state = MachineState::new();
        let mut e = Exec::new(&mut store, &mut frame, &mut state, BOX0, 0, dot);
        let r = exec(&mut e, &code, 0);
        assert!(matches!(r.outcome, ExecOutcome::Proceed));
        let built = state.read_x(0);
        match store.deref(&built) {
            Term::Compound(ff, args) => {
                assert_eq!(ff, f);
                match store.deref(&args[0]) {
                    Term::Compound(gg, ga) => {
                        assert_eq!(gg, g);
                        assert_eq!(store.deref(&ga[0]), Term::Int(2));
                    }
                    other => panic!("expected g(2), got {:?}", other),
                }
                assert_eq!(store.deref(&args[1]), Term::Atom(a));
            }
            other => panic!("expected f/2, got {:?}", other),
        }
    }
}
