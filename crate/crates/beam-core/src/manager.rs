//! The And-Or Tree Manager: decides which rewrite rule applies to the
//! current configuration and executes it. Control moves between the eight
//! entry points (suspend, success, fail, next_call, next_alternative,
//! unique_alternative, wake, select_work); the emulator runs abstract code
//! in between.
//!
//! Rule priorities: failure propagation first (handled synchronously, so a
//! failure is never deferred behind other work), then success propagation
//! and and-compression, then promotion and propagation, then reduction.
//! Splitting is deferred until nothing else applies.

use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use serde_json::json;
use thiserror::Error;

use crate::builtins::{eval_arith, BuiltinTag, Eval};
use crate::code::CodeIx;
use crate::compile::{compile_program, compile_query, Program, QueryCode};
use crate::front::{ArgPat, Database, Query};
use crate::machine::{exec, Exec, ExecOutcome, ExecResult, MachineState};
use crate::term::{ExternalBinding, Sym, Term, Unifier, UnifyOutcome, VarId, VarStore};
use crate::trace::{RunStats, TraceEvent, TraceSink};
use crate::tree::{
    AltRecord, AltState, AndBox, AndId, CallKind, CallRecord, CallState, Frame, OrBox, OrId,
    SuspendReason, Tree, WaitInfo,
};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Strategy {
    Lazy,
    Eager,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ImplicitPruning {
    Leftmost,
    Full,
}

#[derive(Clone, Debug)]
pub struct EngineOpts {
    pub strategy: Strategy,
    pub implicit_pruning: ImplicitPruning,
    pub first_solution: bool,
    pub max_steps: Option<u64>,
    /// Suppress write/nl output on stdout (it is still collected).
    pub quiet: bool,
    /// Check tree well-formedness after every rule application.
    pub validate_every_step: bool,
}

impl Default for EngineOpts {
    fn default() -> Self {
        EngineOpts {
            strategy: Strategy::Lazy,
            implicit_pruning: ImplicitPruning::Leftmost,
            first_solution: false,
            max_steps: Some(50_000_000),
            quiet: true,
            validate_every_step: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0}")]
    Parse(#[from] crate::front::FrontError),
    #[error("{0}")]
    Compile(#[from] crate::compile::CompileError),
    #[error("undefined predicate {name}/{arity}")]
    Undefined { name: String, arity: usize },
    #[error("type error: {0}")]
    Type(String),
    #[error("tree invariant violated: {0}")]
    Invariant(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Answer {
    /// (variable name, canonically printed value), in query-variable order.
    pub bindings: Vec<(String, String)>,
}

impl Answer {
    pub fn canonical(&self) -> String {
        if self.bindings.is_empty() {
            return "true".to_string();
        }
        let parts: Vec<String> = self
            .bindings
            .iter()
            .map(|(n, v)| format!("{} = {}", n, v))
            .collect();
        parts.join(", ")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExitKind {
    Completed,
    Deadlock,
    StepLimit,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub answers: Vec<Answer>,
    pub stats: RunStats,
    pub exit: ExitKind,
    /// Text emitted by write/nl, in emission order.
    pub output: String,
    pub deadlock_diag: Option<String>,
}

enum Port {
    NextCall(AndId),
    NextAlternative(OrId),
    Explore(OrId, usize),
    Wake(AndId),
    SelectWork,
    End(ExitKind),
}

struct Engine<'t> {
    program: Program,
    store: VarStore,
    tree: Tree,
    machine: MachineState,
    stats: RunStats,
    opts: EngineOpts,
    trace: &'t mut TraceSink,
    step: u64,
    output: String,
    dot: Sym,
    answers: Vec<Answer>,
    deadlock_diag: Option<String>,
}

pub fn run_query(
    db: &Database,
    query: &Query,
    opts: &EngineOpts,
    trace: &mut TraceSink,
) -> Result<RunOutcome, EngineError> {
    let started = Instant::now();
    let mut program = compile_program(db)?;
    let qc = compile_query(query, &mut program.code, &mut program.interner)?;
    let dot = program.interner.intern(".");
    program.interner.intern("[]");
    let mut engine = Engine {
        program,
        store: VarStore::new(),
        tree: Tree::new(),
        machine: MachineState::new(),
        stats: RunStats::default(),
        opts: opts.clone(),
        trace,
        step: 0,
        output: String::new(),
        dot,
        answers: Vec::new(),
        deadlock_diag: None,
    };
    let exit = engine.run(&qc)?;
    let mut stats = engine.stats.clone();
    stats.reclaimed_boxes = engine.tree.reclaimed_boxes;
    stats.answers = engine.answers.len() as u64;
    stats.wall_ms = started.elapsed().as_millis() as u64;
    Ok(RunOutcome {
        answers: engine.answers,
        stats,
        exit,
        output: engine.output,
        deadlock_diag: engine.deadlock_diag,
    })
}

/// Convenience entry point used by tests and the CLI: parse + run.
pub fn run_source(
    source: &str,
    goal: &str,
    opts: &EngineOpts,
    trace: &mut TraceSink,
) -> Result<RunOutcome, EngineError> {
    let db = crate::front::parse_program(source)?;
    let q = crate::front::parse_query(goal)?;
    run_query(&db, &q, opts, trace)
}

enum FreeMode {
    /// Eager reclamation on success/failure.
    Reclaim,
    /// Discarded by a pruning rule (also counted as reclaimed).
    Prune,
    /// Structure moved into a split copy; not an reclamation event.
    Silent,
}

impl<'t> Engine<'t> {
    // ---- setup ------------------------------------------------------------

    fn make_root(&mut self, qc: &QueryCode) -> AndId {
        let root = self.tree.new_and(AndBox {
            parent: None,
            depth: 0,
            calls: Vec::new(),
            first_pending: 0,
            locals: Vec::new(),
            externals: Vec::new(),
            frames: Vec::new(),
            suspended: None,
            woken: false,
            side_effects: false,
            answer_vars: Vec::new(),
        });
        let mut perms = Vec::new();
        let mut answer_vars = Vec::new();
        for name in &qc.perm_names {
            let v = self.store.fresh(root, 0, Some(name.clone()));
            perms.push(v);
            answer_vars.push((name.clone(), v));
        }
        let frame = Frame {
            perms: perms.clone(),
            temps: vec![None; qc.temp_count as usize],
        };
        let calls: Vec<CallRecord> = qc
            .call_labels
            .iter()
            .zip(qc.call_kinds.iter())
            .map(|(&code, &kind)| CallRecord {
                kind,
                code,
                state: CallState::Ready,
                child: None,
                frame: 0,
                waiting_on: None,
            })
            .collect();
        {
            let b = self.tree.and_box_mut(root);
            b.locals = perms;
            b.frames.push(frame);
            b.calls = calls;
            b.answer_vars = answer_vars;
        }
        self.tree.roots.push(root);
        root
    }

    // ---- main loop ----------------------------------------------------------

    fn run(&mut self, qc: &QueryCode) -> Result<ExitKind, EngineError> {
        let root = self.make_root(qc);
        let mut port = if qc.nr_calls == 0 {
            self.emit_answer(root);
            self.free_subtree(root, FreeMode::Reclaim);
            return Ok(ExitKind::Completed);
        } else {
            Port::NextCall(root)
        };
        loop {
            if let Some(limit) = self.opts.max_steps {
                if self.step >= limit {
                    return Ok(ExitKind::StepLimit);
                }
            }
            if self.opts.validate_every_step {
                self.tree
                    .validate(&self.store)
                    .map_err(EngineError::Invariant)?;
            }
            // Woken boxes preempt all pending work except failure cascades,
            // which run synchronously inside the handlers.
            if !matches!(port, Port::Wake(_) | Port::End(_)) {
                if let Some(w) = self.front_woken() {
                    port = Port::Wake(w);
                }
            }
            port = match port {
                Port::NextCall(b) => self.next_call(b)?,
                Port::NextAlternative(o) => self.next_alternative(o)?,
                Port::Explore(o, ix) => self.explore(o, ix)?,
                Port::Wake(b) => self.wake_box(b)?,
                Port::SelectWork => self.select_work()?,
                Port::End(kind) => return Ok(kind),
            };
        }
    }

    fn front_woken(&self) -> Option<AndId> {
        let front = *self.tree.suspension.front()?;
        if !self.tree.and_alive(front) {
            return None;
        }
        if self.tree.and_box(front).woken {
            return Some(front);
        }
        None
    }

    fn trace_rule(&mut self, rule: &str, box_id: u64, detail: serde_json::Value) {
        self.step += 1;
        if !self.trace.enabled() {
            return;
        }
        let mut stats = self.stats.clone();
        stats.reclaimed_boxes = self.tree.reclaimed_boxes;
        stats.answers = self.answers.len() as u64;
        self.trace.emit(TraceEvent {
            step: self.step,
            rule: rule.to_string(),
            box_id,
            detail,
            stats,
        });
    }

    fn bnum(b: AndId) -> u64 {
        b.index as u64
    }

    fn onum(o: OrId) -> u64 {
        o.index as u64
    }

    // ---- next_call ----------------------------------------------------------

    fn next_call(&mut self, b: AndId) -> Result<Port, EngineError> {
        let mut b = b;
        if !self.tree.and_alive(b) {
            return Ok(Port::SelectWork);
        }
        // Promotion cascade: while this box is the single live alternative
        // of its or-box, promote (and compress when cut-free) before doing
        // any reduction work.
        loop {
            if let Some(port) = self.check_deferred_failure(b) {
                return Ok(port);
            }
            let node = self.tree.and_box(b);
            let Some((o, _)) = node.parent else { break };
            if self.tree.or_box(o).live_count() != 1 {
                break;
            }
            let promotable = !node.externals.is_empty() || !node.has_unfired_cut();
            if !promotable {
                break;
            }
            match self.resolve_unique(o)? {
                Port::NextCall(nb) => {
                    if !self.tree.and_alive(nb) {
                        return Ok(Port::SelectWork);
                    }
                    b = nb;
                }
                other => return Ok(other),
            }
        }

        let n_calls = self.tree.and_box(b).calls.len();
        let mut ix = self.tree.and_box(b).first_pending.min(n_calls);
        // The cursor skips a resolved prefix only; rescan from there.
        while ix > 0 && self.tree.and_box(b).calls[ix - 1].state != CallState::Success {
            ix = 0;
            break;
        }
        while ix < n_calls {
            let (kind, state, child) = {
                let c = &self.tree.and_box(b).calls[ix];
                (c.kind, c.state, c.child)
            };
            match state {
                CallState::Success => {
                    if ix == self.tree.and_box(b).first_pending {
                        self.tree.and_box_mut(b).first_pending = ix + 1;
                    }
                    ix += 1;
                }
                CallState::Fail => break,
                CallState::Waiting => {
                    ix += 1;
                }
                CallState::Running => {
                    if let Some(o) = child {
                        if self.tree.or_alive(o) {
                            let has_work = self
                                .tree
                                .or_box(o)
                                .alts
                                .iter()
                                .any(|a| matches!(a.state, AltState::Ready | AltState::Wake));
                            if has_work {
                                return Ok(Port::NextAlternative(o));
                            }
                            if self.pending_promotion(o) {
                                return self.resolve_unique(o);
                            }
                        }
                    }
                    ix += 1;
                }
                CallState::Ready => match kind {
                    CallKind::SeqBarrier => {
                        let ok = self.tree.and_box(b).calls[..ix]
                            .iter()
                            .all(|c| c.state == CallState::Success);
                        if ok {
                            self.tree.and_box_mut(b).calls[ix].state = CallState::Success;
                            ix += 1;
                        } else {
                            break;
                        }
                    }
                    CallKind::Cut | CallKind::Commit => {
                        if self.try_fire_cut(b, ix)? {
                            return Ok(Port::NextCall(b));
                        }
                        ix += 1;
                    }
                    CallKind::Builtin => return self.start_call(b, ix),
                    CallKind::Goal => {
                        if self.tree.and_box(b).has_quarantine() {
                            // Parked: a suspended box may not open new
                            // user calls (it would expand the tree below
                            // an uncommitted binding); builtins above may
                            // still have discriminated it.
                            ix += 1;
                        } else {
                            return self.start_call(b, ix);
                        }
                    }
                },
            }
        }
        self.box_quiesced(b)
    }

    fn start_call(&mut self, b: AndId, ix: usize) -> Result<Port, EngineError> {
        let (code_ix, frame_ix) = {
            let c = &self.tree.and_box(b).calls[ix];
            (c.code, c.frame as usize)
        };
        self.machine.reset();
        let r = self.exec_in(b, frame_ix, code_ix);
        match r.outcome {
            ExecOutcome::CallPred(name, ar) => {
                self.tree.and_box_mut(b).locals.extend(r.new_locals);
                debug_assert!(r.externals.is_empty());
                self.reduce_call(b, ix, &name, ar as usize)
            }
            ExecOutcome::CallBuiltin(tag) => {
                self.tree.and_box_mut(b).locals.extend(r.new_locals);
                self.eval_builtin(b, ix, tag)
            }
            other => unreachable!("call block ended at {:?}", other),
        }
    }

    fn exec_in(&mut self, b: AndId, frame_ix: usize, pc: CodeIx) -> ExecResult {
        let depth = self.tree.and_box(b).depth;
        let Engine {
            program,
            store,
            tree,
            machine,
            dot,
            ..
        } = self;
        let frame = &mut tree.and_box_mut(b).frames[frame_ix];
        let mut e = Exec::new(store, frame, machine, b, depth, *dot);
        exec(&mut e, &program.code, pc)
    }

    fn box_quiesced(&mut self, b: AndId) -> Result<Port, EngineError> {
        let node = self.tree.and_box(b);
        let complete = node.all_calls_success();
        let parent = node.parent;
        if complete {
            if self.tree.and_box(b).has_quarantine() {
                if let Some((o, ix)) = parent {
                    self.tree.or_box_mut(o).alts[ix].state = AltState::SuspendOnEnd;
                }
                self.ensure_listed(b);
                return Ok(match parent {
                    Some((o, _)) => Port::NextAlternative(o),
                    None => Port::SelectWork,
                });
            }
            if !self.tree.and_box(b).externals.is_empty() {
                // Committed externals imply a sole alternative; promotion
                // consumes them before success can propagate.
                if let Some((o, _)) = parent {
                    debug_assert_eq!(self.tree.or_box(o).live_count(), 1);
                    return self.resolve_unique(o);
                }
            }
            return self.handle_success(b);
        }
        match parent {
            Some((o, _)) => Ok(Port::NextAlternative(o)),
            None => Ok(Port::SelectWork),
        }
    }

    fn check_deferred_failure(&mut self, b: AndId) -> Option<Port> {
        let node = self.tree.and_box(b);
        let failed_ix = node.calls.iter().position(|c| c.state == CallState::Fail)?;
        let fire = match self.opts.implicit_pruning {
            ImplicitPruning::Full => true,
            ImplicitPruning::Leftmost => node.calls[..failed_ix]
                .iter()
                .all(|c| c.state == CallState::Success),
        };
        if fire {
            Some(self.handle_fail(b, "false_in_and"))
        } else {
            None
        }
    }

    // ---- reduction -----------------------------------------------------------

    fn arg_pat(&self, t: &Term) -> Option<ArgPat> {
        match self.store.deref(t) {
            Term::Var(_) => None,
            Term::Atom(s) => Some(ArgPat::Atom(self.program.interner.name(s).to_string())),
            Term::Int(n) => Some(ArgPat::Int(n)),
            Term::Compound(f, args) => Some(ArgPat::Functor(
                self.program.interner.name(f).to_string(),
                args.len(),
            )),
        }
    }

    fn reduce_call(
        &mut self,
        b: AndId,
        ix: usize,
        name: &str,
        arity: usize,
    ) -> Result<Port, EngineError> {
        let key = (name.to_string(), arity);
        if !self.program.preds.contains_key(&key) {
            return Err(EngineError::Undefined {
                name: name.to_string(),
                arity,
            });
        }
        let args: Vec<Term> = (0..arity).map(|i| self.machine.read_x(i)).collect();
        let candidates: Vec<usize> = {
            let pred = &self.program.preds[&key];
            if arity == 0 {
                (0..pred.clauses.len()).collect()
            } else {
                let pat = self.arg_pat(&args[0]);
                crate::front::index_candidates_code(&pred.first_arg, pat.as_ref())
            }
        };
        // Full speculative head unification with rollback: suspension is
        // only required when at least two clauses actually unify.
        let mut survivors = Vec::new();
        for &ci in &candidates {
            if self.speculate_head(&key, ci, &args) {
                survivors.push(ci);
            }
        }
        self.stats.reductions += 1;
        if survivors.is_empty() {
            self.trace_rule(
                "reduce",
                Self::bnum(b),
                json!({"pred": format!("{}/{}", name, arity), "call": ix,
                       "candidates": candidates.len(), "survivors": 0}),
            );
            return Ok(self.fail_call(b, ix, "no matching clause"));
        }
        let single = survivors.len() == 1;
        let single_has_cut = single && self.program.preds[&key].clauses[survivors[0]].has_cut;
        if single && !single_has_cut {
            return self.det_reduce_promote(b, ix, &key, survivors[0], &args);
        }
        let eager = self.program.preds[&key].eager_split;
        let alts: Vec<AltRecord> = survivors
            .iter()
            .map(|&ci| AltRecord {
                and_box: None,
                code: self.program.preds[&key].clauses[ci].seg_start,
                clause_ix: ci,
                state: AltState::Ready,
            })
            .collect();
        let cuts: Vec<bool> = survivors
            .iter()
            .map(|&ci| self.program.preds[&key].clauses[ci].has_cut)
            .collect();
        let o = self.tree.new_or(OrBox {
            parent: b,
            call_ix: ix,
            alts,
            args,
            pred_name: Rc::from(name),
            eager,
        });
        {
            let call = &mut self.tree.and_box_mut(b).calls[ix];
            call.child = Some(o);
            call.state = CallState::Running;
        }
        self.trace_rule(
            "reduce",
            Self::bnum(b),
            json!({"pred": format!("{}/{}", name, arity), "call": ix,
                   "candidates": candidates.len(), "survivors": survivors.len(),
                   "or_box": Self::onum(o), "clause_cuts": cuts}),
        );
        Ok(Port::NextAlternative(o))
    }

    fn speculate_head(&mut self, key: &(String, usize), clause_ix: usize, args: &[Term]) -> bool {
        let cc = &self.program.preds[key].clauses[clause_ix];
        let (head_start, perm_count, temp_count) =
            (cc.head_start, cc.perm_names.len(), cc.temp_count);
        let scratch_box = AndId {
            index: u32::MAX,
            gen: 0,
        };
        let depth = u32::MAX; // deeper than everything: no external records
        let mut frame = Frame {
            perms: (0..perm_count)
                .map(|_| self.store.fresh(scratch_box, depth, None))
                .collect(),
            temps: vec![None; temp_count as usize],
        };
        self.machine.reset();
        for (i, a) in args.iter().enumerate() {
            self.machine.write_x(i, a.clone());
        }
        let survives;
        {
            let Engine {
                program,
                store,
                machine,
                dot,
                ..
            } = self;
            let mut e = Exec::new(store, &mut frame, machine, scratch_box, depth, *dot);
            let mut r = exec(&mut e, &program.code, head_start);
            survives = !matches!(r.outcome, ExecOutcome::Fail);
            r.trail.undo(store);
        }
        self.machine.reset();
        for (i, a) in args.iter().enumerate() {
            self.machine.write_x(i, a.clone());
        }
        survives
    }

    /// Deterministic-reduce-and-promote: a single-candidate, cut-free clause
    /// expands directly in the caller's and-box; no boxes are created.
    fn det_reduce_promote(
        &mut self,
        b: AndId,
        ix: usize,
        key: &(String, usize),
        clause_ix: usize,
        args: &[Term],
    ) -> Result<Port, EngineError> {
        let cc = self.program.preds[key].clauses[clause_ix].clone();
        let depth = self.tree.and_box(b).depth;
        let mut perms = Vec::new();
        for name in &cc.perm_names {
            perms.push(self.store.fresh(b, depth, Some(name.clone())));
        }
        self.tree
            .and_box_mut(b)
            .locals
            .extend(perms.iter().copied());
        let frame_ix = {
            let node = self.tree.and_box_mut(b);
            node.frames.push(Frame {
                perms,
                temps: vec![None; cc.temp_count as usize],
            });
            node.frames.len() - 1
        };
        self.machine.reset();
        for (i, a) in args.iter().enumerate() {
            self.machine.write_x(i, a.clone());
        }
        let r = self.exec_in(b, frame_ix, cc.head_start);
        match r.outcome {
            ExecOutcome::Fail => {
                let mut trail = r.trail;
                trail.undo(&mut self.store);
                Ok(self.fail_call(b, ix, "determinate head failed"))
            }
            ExecOutcome::Proceed => {
                self.tree.and_box_mut(b).locals.extend(r.new_locals);
                self.trace_rule(
                    "det_reduce_promote",
                    Self::bnum(b),
                    json!({"pred": format!("{}/{}", key.0, key.1), "clause": clause_ix,
                           "call": ix, "body_calls": 0}),
                );
                self.tree.and_box_mut(b).calls[ix].state = CallState::Success;
                let bound = r.trail.0.clone();
                self.record_externals(b, r.externals, Some(ix as u16));
                self.maybe_suspend(b);
                self.wake_for_bound(&bound);
                Ok(Port::NextCall(b))
            }
            ExecOutcome::PrepareCalls(_, labels) => {
                self.tree.and_box_mut(b).locals.extend(r.new_locals);
                let new_calls: Vec<CallRecord> = labels
                    .iter()
                    .zip(cc.call_kinds.iter())
                    .map(|(&code, &kind)| CallRecord {
                        kind,
                        code,
                        state: CallState::Ready,
                        child: None,
                        frame: frame_ix as u16,
                        waiting_on: None,
                    })
                    .collect();
                self.trace_rule(
                    "det_reduce_promote",
                    Self::bnum(b),
                    json!({"pred": format!("{}/{}", key.0, key.1), "clause": clause_ix,
                           "call": ix, "body_calls": new_calls.len()}),
                );
                self.splice_calls(b, ix, new_calls);
                let bound = r.trail.0.clone();
                self.record_externals(b, r.externals, Some(ix as u16));
                self.maybe_suspend(b);
                self.wake_for_bound(&bound);
                Ok(Port::NextCall(b))
            }
            other => unreachable!("head code ended at {:?}", other),
        }
    }

    /// Replaces the call at `at` with `replacement`, fixing call-index back
    /// references of or-boxes and external records to the right.
    fn splice_calls(&mut self, b: AndId, at: usize, replacement: Vec<CallRecord>) {
        let delta = replacement.len() as isize - 1;
        let moved_children: Vec<(OrId, usize)> = {
            let node = self.tree.and_box(b);
            node.calls
                .iter()
                .enumerate()
                .skip(at + 1)
                .filter_map(|(i, c)| c.child.map(|o| (o, i)))
                .collect()
        };
        {
            let node = self.tree.and_box_mut(b);
            node.calls.splice(at..=at, replacement);
            for e in node.externals.iter_mut() {
                if let Some(fc) = e.from_call {
                    if fc as usize > at {
                        e.from_call = Some((fc as isize + delta) as u16);
                    }
                }
            }
            if node.first_pending > at {
                node.first_pending = at;
            }
        }
        for (o, old_ix) in moved_children {
            if self.tree.or_alive(o) {
                self.tree.or_box_mut(o).call_ix = (old_ix as isize + delta) as usize;
            }
        }
    }

    // ---- externals, suspension, commitment ----------------------------------

    fn record_externals(&mut self, b: AndId, externals: Vec<(VarId, Term)>, from: Option<u16>) {
        if externals.is_empty() {
            return;
        }
        let node = self.tree.and_box_mut(b);
        for (var, value) in externals {
            node.externals.push(ExternalBinding {
                var,
                value,
                committed: true,
                from_call: from,
            });
        }
    }

    /// True when an or-box has a single explored alternative whose
    /// promotion (or compression) is still outstanding.
    fn pending_promotion(&self, o: OrId) -> bool {
        let or = self.tree.or_box(o);
        if or.live_count() != 1 {
            return false;
        }
        or.alts
            .iter()
            .find(|a| a.state != AltState::Fail)
            .and_then(|a| a.and_box)
            .map(|bx| {
                let n = self.tree.and_box(bx);
                !n.externals.is_empty() || !n.has_unfired_cut()
            })
            .unwrap_or(false)
    }

    fn live_siblings(&self, b: AndId) -> usize {
        match self.tree.and_box(b).parent {
            Some((o, _)) => self.tree.or_box(o).live_count(),
            None => 1,
        }
    }

    /// The suspension decision: a box with external bindings quarantines
    /// them (and suspends) iff at least two alternatives remain live in its
    /// or-box; a sole alternative commits. Bindings made right of an
    /// unfired cut are always quarantined (no leftward export).
    /// Returns true if the box now holds quarantined bindings.
    fn maybe_suspend(&mut self, b: AndId) -> bool {
        let siblings = self.live_siblings(b);
        let cut_ix = self.tree.and_box(b).unfired_cut_index();
        let mut to_quarantine: Vec<usize> = Vec::new();
        {
            let node = self.tree.and_box(b);
            for (i, e) in node.externals.iter().enumerate() {
                if !e.committed {
                    continue;
                }
                let gated = match (cut_ix, e.from_call) {
                    (Some(c), Some(fc)) => (fc as usize) > c,
                    _ => false,
                };
                if siblings >= 2 || gated {
                    to_quarantine.push(i);
                }
            }
        }
        if !to_quarantine.is_empty() {
            let mut vars = Vec::new();
            for &i in &to_quarantine {
                let var = {
                    let e = &mut self.tree.and_box_mut(b).externals[i];
                    e.committed = false;
                    e.var
                };
                self.store.cell_mut(var).value = None;
                self.store.add_suspension(var, b);
                vars.push(var.0);
            }
            self.stats.suspensions += 1;
            self.trace_rule(
                "suspend",
                Self::bnum(b),
                json!({"vars": vars, "live_siblings": siblings}),
            );
            self.set_reason(b);
            if let Some((o, ix)) = self.tree.and_box(b).parent {
                let alt = &mut self.tree.or_box_mut(o).alts[ix];
                if alt.state == AltState::Running {
                    alt.state = AltState::Suspend;
                }
            }
        }
        self.tree.and_box(b).has_quarantine()
    }

    fn set_reason(&mut self, b: AndId) {
        let reason = self.reason_for(b);
        if self.tree.in_suspension_list(b) {
            self.tree.and_box_mut(b).suspended = Some(reason);
        } else {
            self.tree.add_suspension(b, reason);
        }
    }

    fn ensure_listed(&mut self, b: AndId) {
        if !self.tree.in_suspension_list(b) {
            let reason = self.reason_for(b);
            self.tree.add_suspension(b, reason);
        } else {
            let reason = self.reason_for(b);
            self.tree.and_box_mut(b).suspended = Some(reason);
        }
    }

    fn reason_for(&self, b: AndId) -> SuspendReason {
        let node = self.tree.and_box(b);
        let qvars: Vec<VarId> = node
            .externals
            .iter()
            .filter(|e| !e.committed)
            .map(|e| e.var)
            .collect();
        if !qvars.is_empty() {
            return SuspendReason::ExternalConflict(qvars);
        }
        let mut ground = Vec::new();
        for c in &node.calls {
            if let Some(WaitInfo::Ground(vs)) = &c.waiting_on {
                ground.extend(vs.iter().copied());
            }
        }
        if !ground.is_empty() {
            SuspendReason::WaitingGround(ground)
        } else {
            SuspendReason::WaitingLeftmost
        }
    }

    /// Propagation: sends wake signals to every box suspended on `v`.
    fn wake_suspended_on(&mut self, v: VarId) {
        let waiters: Vec<AndId> = self.store.cell(v).suspensions.clone();
        if waiters.is_empty() {
            return;
        }
        let mut woken = Vec::new();
        for w in waiters {
            if !self.tree.and_alive(w) || !self.tree.in_suspension_list(w) {
                continue;
            }
            self.tree.wake_entry(w);
            self.tree.and_box_mut(w).woken = true;
            if let Some((o, ix)) = self.tree.and_box(w).parent {
                let alt = &mut self.tree.or_box_mut(o).alts[ix];
                if matches!(alt.state, AltState::Suspend | AltState::SuspendOnEnd) {
                    alt.state = AltState::Wake;
                }
            }
            woken.push(Self::bnum(w));
        }
        if !woken.is_empty() {
            self.trace_rule("propagate", 0, json!({"var": v.0, "woken": woken}));
        }
    }

    fn wake_for_bound(&mut self, bound: &[VarId]) {
        for &v in bound {
            if self.store.cell(v).value.is_some() && !self.store.cell(v).suspensions.is_empty() {
                self.wake_suspended_on(v);
            }
        }
    }

    // ---- builtins ---------------------------------------------------------------

    fn eval_builtin(&mut self, b: AndId, ix: usize, tag: BuiltinTag) -> Result<Port, EngineError> {
        let arity = tag.arity();
        let args: Vec<Term> = (0..arity).map(|i| self.machine.read_x(i)).collect();
        match tag {
            BuiltinTag::True => {
                self.tree.and_box_mut(b).calls[ix].state = CallState::Success;
                Ok(Port::NextCall(b))
            }
            BuiltinTag::Fail => Ok(self.fail_call(b, ix, "fail/0")),
            BuiltinTag::Unify => self.builtin_unify(b, ix, &args[0], &args[1]),
            BuiltinTag::Is => {
                let rhs = {
                    let interner = &self.program.interner;
                    eval_arith(&self.store, &|s| interner.name(s).to_string(), &args[1])
                };
                match rhs {
                    Eval::TypeError(e) => Err(EngineError::Type(e)),
                    Eval::Unbound(vars) => {
                        self.park_waiting_ground(b, ix, vars);
                        Ok(Port::NextCall(b))
                    }
                    Eval::Int(n) => self.builtin_unify(b, ix, &args[0], &Term::Int(n)),
                }
            }
            BuiltinTag::Le
            | BuiltinTag::Lt
            | BuiltinTag::Gt
            | BuiltinTag::Ge
            | BuiltinTag::ArithEq
            | BuiltinTag::ArithNe => {
                let (l, r) = {
                    let interner = &self.program.interner;
                    let names = |s: Sym| interner.name(s).to_string();
                    (
                        eval_arith(&self.store, &names, &args[0]),
                        eval_arith(&self.store, &names, &args[1]),
                    )
                };
                match (l, r) {
                    (Eval::TypeError(e), _) | (_, Eval::TypeError(e)) => Err(EngineError::Type(e)),
                    (Eval::Unbound(mut a), Eval::Unbound(c)) => {
                        for v in c {
                            if !a.contains(&v) {
                                a.push(v);
                            }
                        }
                        self.park_waiting_ground(b, ix, a);
                        Ok(Port::NextCall(b))
                    }
                    (Eval::Unbound(a), _) | (_, Eval::Unbound(a)) => {
                        self.park_waiting_ground(b, ix, a);
                        Ok(Port::NextCall(b))
                    }
                    (Eval::Int(x), Eval::Int(y)) => {
                        let ok = match tag {
                            BuiltinTag::Le => x <= y,
                            BuiltinTag::Lt => x < y,
                            BuiltinTag::Gt => x > y,
                            BuiltinTag::Ge => x >= y,
                            BuiltinTag::ArithEq => x == y,
                            BuiltinTag::ArithNe => x != y,
                            _ => unreachable!(),
                        };
                        if ok {
                            self.tree.and_box_mut(b).calls[ix].state = CallState::Success;
                            Ok(Port::NextCall(b))
                        } else {
                            Ok(self.fail_call(b, ix, "arithmetic test failed"))
                        }
                    }
                }
            }
            BuiltinTag::Write | BuiltinTag::Nl => {
                if self.tree.is_leftmost(b) {
                    let text = match tag {
                        BuiltinTag::Write => self.term_string(&args[0]),
                        _ => "\n".to_string(),
                    };
                    if !self.opts.quiet {
                        print!("{}", text);
                    }
                    self.output.push_str(&text);
                    self.tree.and_box_mut(b).calls[ix].state = CallState::Success;
                    Ok(Port::NextCall(b))
                } else {
                    let call = &mut self.tree.and_box_mut(b).calls[ix];
                    call.state = CallState::Waiting;
                    call.waiting_on = Some(WaitInfo::Leftmost);
                    self.ensure_listed(b);
                    Ok(Port::NextCall(b))
                }
            }
        }
    }

    fn builtin_unify(
        &mut self,
        b: AndId,
        ix: usize,
        a0: &Term,
        a1: &Term,
    ) -> Result<Port, EngineError> {
        let depth = self.tree.and_box(b).depth;
        let mut u = Unifier::new(depth);
        let out = u.unify(&mut self.store, a0, a1);
        if out == UnifyOutcome::Failure {
            u.trail.undo(&mut self.store);
            return Ok(self.fail_call(b, ix, "unification failure"));
        }
        let bound = u.trail.0.clone();
        self.record_externals(b, u.externals, Some(ix as u16));
        self.tree.and_box_mut(b).calls[ix].state = CallState::Success;
        self.maybe_suspend(b);
        self.wake_for_bound(&bound);
        Ok(Port::NextCall(b))
    }

    fn park_waiting_ground(&mut self, b: AndId, ix: usize, vars: Vec<VarId>) {
        for v in &vars {
            self.store.add_suspension(*v, b);
        }
        let call = &mut self.tree.and_box_mut(b).calls[ix];
        call.state = CallState::Waiting;
        call.waiting_on = Some(WaitInfo::Ground(vars));
        self.ensure_listed(b);
    }

    fn term_string(&self, t: &Term) -> String {
        print_term(&self.store, &self.program.interner, t, &mut HashMap::new())
    }

    // ---- alternatives ---------------------------------------------------------

    fn next_alternative(&mut self, o: OrId) -> Result<Port, EngineError> {
        if !self.tree.or_alive(o) {
            return Ok(Port::SelectWork);
        }
        // Eager splitting: a producer-annotated or-box with several live
        // alternatives is split before the next alternative is explored.
        if self.opts.strategy == Strategy::Eager
            && self.tree.or_box(o).eager
            && self.tree.or_box(o).live_count() >= 2
            && self
                .tree
                .or_box(o)
                .alts
                .iter()
                .any(|a| a.state == AltState::Ready)
        {
            let p = self.tree.or_box(o).parent;
            if !self.tree.subtree_has_unfired_cut(p) {
                return self.split(p, o, None);
            }
        }
        let (wake_ix, ready_ix) = {
            let or = self.tree.or_box(o);
            let wake = or.alts.iter().position(|a| a.state == AltState::Wake);
            let ready = or.alts.iter().position(|a| a.state == AltState::Ready);
            (wake, ready)
        };
        if let Some(ix) = wake_ix {
            let b = self.tree.or_box(o).alts[ix].and_box.unwrap();
            return Ok(Port::Wake(b));
        }
        if let Some(ix) = ready_ix {
            return Ok(Port::Explore(o, ix));
        }
        let parent = self.tree.or_box(o).parent;
        Ok(Port::NextCall(parent))
    }

    fn explore(&mut self, o: OrId, alt_ix: usize) -> Result<Port, EngineError> {
        if !self.tree.or_alive(o) {
            return Ok(Port::SelectWork);
        }
        let (parent, args, code, clause_ix) = {
            let or = self.tree.or_box(o);
            (
                or.parent,
                or.args.clone(),
                or.alts[alt_ix].code,
                or.alts[alt_ix].clause_ix,
            )
        };
        let pred_key = {
            let or = self.tree.or_box(o);
            let name = or.pred_name.to_string();
            (name, or.args.len())
        };
        let cc = {
            let pred = &self.program.preds[&pred_key];
            pred.clauses[clause_ix].clone()
        };
        debug_assert_eq!(cc.seg_start, code);
        let depth = self.tree.and_box(parent).depth + 1;
        let b = self.tree.new_and(AndBox {
            parent: Some((o, alt_ix)),
            depth,
            calls: Vec::new(),
            first_pending: 0,
            locals: Vec::new(),
            externals: Vec::new(),
            frames: Vec::new(),
            suspended: None,
            woken: false,
            side_effects: false,
            answer_vars: Vec::new(),
        });
        let mut perms = Vec::new();
        for name in &cc.perm_names {
            perms.push(self.store.fresh(b, depth, Some(name.clone())));
        }
        {
            let node = self.tree.and_box_mut(b);
            node.locals = perms.clone();
            node.frames.push(Frame {
                perms,
                temps: vec![None; cc.temp_count as usize],
            });
        }
        {
            let alt = &mut self.tree.or_box_mut(o).alts[alt_ix];
            alt.and_box = Some(b);
            alt.state = AltState::Running;
        }
        self.machine.reset();
        for (i, a) in args.iter().enumerate() {
            self.machine.write_x(i, a.clone());
        }
        self.trace_rule(
            "explore",
            Self::bnum(b),
            json!({"or_box": Self::onum(o), "alt": alt_ix, "clause": clause_ix,
                   "has_cut": cc.has_cut}),
        );
        let r = self.exec_in(b, 0, cc.seg_start);
        match r.outcome {
            ExecOutcome::Fail => {
                let mut trail = r.trail;
                trail.undo(&mut self.store);
                self.trace_rule(
                    "fail",
                    Self::bnum(b),
                    json!({"cause": "head unification", "or_box": Self::onum(o)}),
                );
                self.free_subtree(b, FreeMode::Reclaim);
                {
                    let alt = &mut self.tree.or_box_mut(o).alts[alt_ix];
                    alt.state = AltState::Fail;
                    alt.and_box = None;
                }
                self.after_alt_failure(o)
            }
            ExecOutcome::Proceed => {
                self.tree.and_box_mut(b).locals.extend(r.new_locals);
                let bound = r.trail.0.clone();
                self.record_externals(b, r.externals, None);
                let suspended = self.maybe_suspend(b);
                self.wake_for_bound(&bound);
                if suspended {
                    {
                        let alt = &mut self.tree.or_box_mut(o).alts[alt_ix];
                        alt.state = AltState::SuspendOnEnd;
                    }
                    self.ensure_listed(b);
                    return Ok(Port::NextAlternative(o));
                }
                if self.tree.and_box(b).externals.is_empty() {
                    self.handle_success(b)
                } else {
                    // Committed externals on a sole alternative: promote.
                    debug_assert_eq!(self.tree.or_box(o).live_count(), 1);
                    self.resolve_unique(o)
                }
            }
            ExecOutcome::PrepareCalls(_, labels) => {
                self.tree.and_box_mut(b).locals.extend(r.new_locals);
                let calls: Vec<CallRecord> = labels
                    .iter()
                    .zip(cc.call_kinds.iter())
                    .map(|(&code, &kind)| CallRecord {
                        kind,
                        code,
                        state: CallState::Ready,
                        child: None,
                        frame: 0,
                        waiting_on: None,
                    })
                    .collect();
                self.tree.and_box_mut(b).calls = calls;
                let bound = r.trail.0.clone();
                self.record_externals(b, r.externals, None);
                let suspended = self.maybe_suspend(b);
                self.wake_for_bound(&bound);
                if suspended {
                    // The box is registered as suspended but continues to
                    // execute its body; it may not commit externals.
                    return Ok(Port::NextCall(b));
                }
                if self.tree.or_box(o).live_count() == 1 {
                    // Sole alternative: promote (and compress) before any
                    // reduction below.
                    return self.resolve_unique(o);
                }
                Ok(Port::NextCall(b))
            }
            other => unreachable!("head code ended at {:?}", other),
        }
    }

    fn after_alt_failure(&mut self, o: OrId) -> Result<Port, EngineError> {
        let live = self.tree.or_box(o).live_count();
        match live {
            0 => {
                let parent = self.tree.or_box(o).parent;
                let call_ix = self.tree.or_box(o).call_ix;
                self.tree.free_or(o);
                self.tree.and_box_mut(parent).calls[call_ix].child = None;
                Ok(self.fail_call(parent, call_ix, "all alternatives failed"))
            }
            1 => self.resolve_unique(o),
            _ => Ok(Port::NextAlternative(o)),
        }
    }

    // ---- failure ------------------------------------------------------------------

    fn fail_call(&mut self, b: AndId, ix: usize, why: &str) -> Port {
        {
            let call = &mut self.tree.and_box_mut(b).calls[ix];
            call.state = CallState::Fail;
            call.child = None;
        }
        let eager = match self.opts.implicit_pruning {
            ImplicitPruning::Full => true,
            ImplicitPruning::Leftmost => self.tree.and_box(b).calls[..ix]
                .iter()
                .all(|c| c.state == CallState::Success),
        };
        if eager {
            self.handle_fail(b, why)
        } else {
            self.trace_rule(
                "call_fail",
                Self::bnum(b),
                json!({"call": ix, "cause": why, "gate": "deferred"}),
            );
            Port::NextCall(b)
        }
    }

    /// The box fails: assignments undone, subtree detached, failure
    /// propagated. Runs synchronously (failure has priority over all other
    /// rules).
    fn handle_fail(&mut self, b: AndId, cause: &str) -> Port {
        let parent = self.tree.and_box(b).parent;
        self.trace_rule(
            "fail",
            Self::bnum(b),
            json!({"cause": cause,
                   "or_box": parent.map(|(o, _)| Self::onum(o)),
                   "root_level": parent.is_none()}),
        );
        self.free_subtree(b, FreeMode::Reclaim);
        match parent {
            None => Port::SelectWork,
            Some((o, ix)) => {
                {
                    let alt = &mut self.tree.or_box_mut(o).alts[ix];
                    alt.state = AltState::Fail;
                    alt.and_box = None;
                }
                match self.after_alt_failure(o) {
                    Ok(p) => p,
                    Err(_) => Port::SelectWork,
                }
            }
        }
    }

    // ---- success -------------------------------------------------------------------

    /// A true-box: no goals left and no constraints on external variables.
    fn handle_success(&mut self, b: AndId) -> Result<Port, EngineError> {
        debug_assert!(self.tree.and_box(b).externals.is_empty());
        let parent = self.tree.and_box(b).parent;
        let None = self.tree.and_box(b).suspended else {
            self.tree.remove_suspension(b);
            return self.handle_success(b);
        };
        match parent {
            None => {
                self.trace_rule("success", Self::bnum(b), json!({"root_level": true}));
                self.emit_answer(b);
                self.free_subtree(b, FreeMode::Reclaim);
                if self.opts.first_solution {
                    return Ok(Port::End(ExitKind::Completed));
                }
                Ok(Port::SelectWork)
            }
            Some((o, ix)) => {
                self.tree.or_box_mut(o).alts[ix].state = AltState::Success;
                let live = self.tree.or_box(o).live_count();
                if live > 1 {
                    let prune = match self.opts.implicit_pruning {
                        ImplicitPruning::Full => true,
                        ImplicitPruning::Leftmost => self.tree.is_leftmost(b),
                    };
                    if prune {
                        let pruned = self.prune_other_alts(o, ix);
                        self.trace_rule(
                            "true_in_or",
                            Self::bnum(b),
                            json!({"or_box": Self::onum(o), "pruned": pruned}),
                        );
                    } else {
                        self.trace_rule(
                            "success",
                            Self::bnum(b),
                            json!({"or_box": Self::onum(o), "sole": false}),
                        );
                        return Ok(Port::NextAlternative(o));
                    }
                }
                // Success-Propagation: single successful alternative, the
                // or-box is discarded.
                let p = self.tree.or_box(o).parent;
                let call_ix = self.tree.or_box(o).call_ix;
                self.trace_rule(
                    "success",
                    Self::bnum(b),
                    json!({"or_box": Self::onum(o), "sole": true}),
                );
                self.free_subtree(b, FreeMode::Reclaim);
                self.tree.free_or(o);
                {
                    let call = &mut self.tree.and_box_mut(p).calls[call_ix];
                    call.child = None;
                    call.state = CallState::Success;
                }
                Ok(Port::NextCall(p))
            }
        }
    }

    fn prune_other_alts(&mut self, o: OrId, keep_ix: usize) -> Vec<u64> {
        let victims: Vec<(usize, Option<AndId>)> = self
            .tree
            .or_box(o)
            .alts
            .iter()
            .enumerate()
            .filter(|(i, a)| *i != keep_ix && a.state != AltState::Fail)
            .map(|(i, a)| (i, a.and_box))
            .collect();
        let mut pruned = Vec::new();
        for (i, bx) in victims {
            if let Some(bx) = bx {
                pruned.push(Self::bnum(bx));
                self.free_subtree(bx, FreeMode::Prune);
            }
            let alt = &mut self.tree.or_box_mut(o).alts[i];
            alt.state = AltState::Fail;
            alt.and_box = None;
        }
        pruned
    }

    fn emit_answer(&mut self, b: AndId) {
        let mut names: HashMap<VarId, String> = HashMap::new();
        let bindings: Vec<(String, String)> = self
            .tree
            .and_box(b)
            .answer_vars
            .iter()
            .map(|(name, v)| {
                (
                    name.to_string(),
                    print_term(&self.store, &self.program.interner, &Term::Var(*v), &mut names),
                )
            })
            .collect();
        let answer = Answer { bindings };
        self.trace_rule("answer", Self::bnum(b), json!({"answer": answer.canonical()}));
        self.answers.push(answer);
    }

    // ---- promotion / and-compression -------------------------------------------------

    /// unique_alternative: the or-box has a single live alternative, whose
    /// variables and constraints are promoted to the parent and-box; the
    /// boxes are merged (and-compression) unless the inner box carries an
    /// unfired cut.
    fn resolve_unique(&mut self, o: OrId) -> Result<Port, EngineError> {
        debug_assert_eq!(self.tree.or_box(o).live_count(), 1);
        let alt_ix = self
            .tree
            .or_box(o)
            .alts
            .iter()
            .position(|a| a.state != AltState::Fail)
            .expect("live alternative");
        let (state, bx) = {
            let a = &self.tree.or_box(o).alts[alt_ix];
            (a.state, a.and_box)
        };
        if state == AltState::Ready {
            return Ok(Port::Explore(o, alt_ix));
        }
        let b = bx.expect("explored alternative has a box");
        let p = self.tree.or_box(o).parent;
        let call_ix = self.tree.or_box(o).call_ix;
        let compress = !self.tree.and_box(b).has_unfired_cut();
        self.stats.promotions += 1;
        self.trace_rule(
            "promote",
            Self::bnum(b),
            json!({"or_box": Self::onum(o), "into": Self::bnum(p),
                   "live_count": 1, "compress": compress}),
        );

        // Promote variables: locals of b become locals of p.
        let locals = std::mem::take(&mut self.tree.and_box_mut(b).locals);
        let p_depth = self.tree.and_box(p).depth;
        for &v in &locals {
            let cell = self.store.cell_mut(v);
            cell.home = p;
            cell.home_depth = p_depth;
        }
        self.tree.and_box_mut(p).locals.extend(locals);

        // Promote constraints: commit the ones that became local, move the
        // rest up. Every box suspended on a newly committed variable is
        // woken (Propagation).
        let records = std::mem::take(&mut self.tree.and_box_mut(b).externals);
        for rec in &records {
            if !rec.committed {
                self.store.remove_suspension(rec.var, b);
            }
        }
        self.tree.remove_suspension(b);
        let mut failed = false;
        for rec in records {
            let home_depth = self.store.cell(rec.var).home_depth;
            if home_depth == p_depth {
                if rec.committed {
                    continue; // already in the store, now plain local
                }
                // Replay the quarantined binding at its new home level.
                let mut u = Unifier::new(p_depth);
                let out = u.unify(&mut self.store, &Term::Var(rec.var), &rec.value);
                if out == UnifyOutcome::Failure {
                    u.trail.undo(&mut self.store);
                    failed = true;
                    break;
                }
                let bound = u.trail.0.clone();
                self.record_externals(p, u.externals, Some(call_ix as u16));
                self.wake_for_bound(&bound);
            } else {
                let node = self.tree.and_box_mut(p);
                node.externals.push(ExternalBinding {
                    from_call: Some(call_ix as u16),
                    ..rec.clone()
                });
                if !rec.committed {
                    // Keep the store registration pointing at the new owner.
                    self.store.add_suspension(rec.var, p);
                    let _ = &rec;
                }
            }
        }
        if failed {
            return Ok(self.handle_fail(p, "promotion conflict"));
        }

        if compress {
            self.stats.and_compressions += 1;
            let complete = self.tree.and_box(b).all_calls_success();
            if complete {
                self.free_subtree(b, FreeMode::Reclaim);
                self.tree.free_or(o);
                let call = &mut self.tree.and_box_mut(p).calls[call_ix];
                call.child = None;
                call.state = CallState::Success;
            } else {
                // Merge b's structure into p: calls splice in at the call
                // position; the subtree below moves up one level.
                let frames = std::mem::take(&mut self.tree.and_box_mut(b).frames);
                let frame_offset = self.tree.and_box(p).frames.len() as u16;
                self.tree.and_box_mut(p).frames.extend(frames);
                let mut calls = std::mem::take(&mut self.tree.and_box_mut(b).calls);
                for c in calls.iter_mut() {
                    c.frame += frame_offset;
                }
                let n_new = calls.len();
                let children: Vec<OrId> = calls.iter().filter_map(|c| c.child).collect();
                self.splice_calls(p, call_ix, calls);
                for (k, oc) in children.iter().enumerate() {
                    let _ = k;
                    if self.tree.or_alive(*oc) {
                        self.tree.or_box_mut(*oc).parent = p;
                    }
                }
                // Fix the call_ix of the spliced children precisely.
                for pos in call_ix..call_ix + n_new {
                    if let Some(oc) = self.tree.and_box(p).calls[pos].child {
                        if self.tree.or_alive(oc) {
                            self.tree.or_box_mut(oc).call_ix = pos;
                        }
                    }
                }
                self.renumber_depth_under(p, call_ix, n_new);
                self.tree.free_and(b);
                self.tree.free_or(o);
            }
            self.maybe_suspend(p);
            Ok(Port::NextCall(p))
        } else {
            // Cut present: the box structure is retained; only bindings and
            // variables were promoted.
            self.maybe_suspend(p);
            {
                let alt = &mut self.tree.or_box_mut(o).alts[alt_ix];
                if alt.state == AltState::Suspend {
                    alt.state = AltState::Running;
                }
            }
            Ok(Port::NextCall(b))
        }
    }

    /// After compression, b's former subtree hangs one level higher: walk
    /// the spliced calls and decrement depths (and local home depths).
    fn renumber_depth_under(&mut self, p: AndId, from: usize, count: usize) {
        let mut stack: Vec<AndId> = Vec::new();
        for pos in from..from + count {
            if let Some(o) = self.tree.and_box(p).calls[pos].child {
                if !self.tree.or_alive(o) {
                    continue;
                }
                for alt in &self.tree.or_box(o).alts {
                    if let Some(bx) = alt.and_box {
                        if alt.state != AltState::Fail && self.tree.and_alive(bx) {
                            stack.push(bx);
                        }
                    }
                }
            }
        }
        while let Some(bx) = stack.pop() {
            {
                let node = self.tree.and_box_mut(bx);
                node.depth -= 1;
            }
            let locals = self.tree.and_box(bx).locals.clone();
            for v in locals {
                self.store.cell_mut(v).home_depth -= 1;
            }
            for call in &self.tree.and_box(bx).calls {
                if let Some(o) = call.child {
                    if !self.tree.or_alive(o) {
                        continue;
                    }
                    for alt in &self.tree.or_box(o).alts {
                        if let Some(cb) = alt.and_box {
                            if alt.state != AltState::Fail && self.tree.and_alive(cb) {
                                stack.push(cb);
                            }
                        }
                    }
                }
            }
        }
    }

    // ---- wake -------------------------------------------------------------------------

    /// Environment synchronization: the woken box's recorded bindings are
    /// replayed against values committed since it suspended.
    fn wake_box(&mut self, b: AndId) -> Result<Port, EngineError> {
        if !self.tree.and_alive(b) {
            return Ok(Port::SelectWork);
        }
        self.tree.and_box_mut(b).woken = false;
        self.stats.wakes += 1;
        let records = std::mem::take(&mut self.tree.and_box_mut(b).externals);
        let mut kept: Vec<ExternalBinding> = Vec::new();
        let mut resolved: Vec<u32> = Vec::new();
        let mut failed = false;
        let depth = self.tree.and_box(b).depth;
        for rec in records {
            if rec.committed || self.store.is_unbound(rec.var) {
                kept.push(rec);
                continue;
            }
            // The variable is now bound: test compatibility by unifying the
            // recorded value against the committed one.
            let mut u = Unifier::new(depth);
            let out = u.unify(&mut self.store, &Term::Var(rec.var), &rec.value);
            if out == UnifyOutcome::Failure {
                u.trail.undo(&mut self.store);
                failed = true;
                resolved.push(rec.var.0);
                break;
            }
            let bound = u.trail.0.clone();
            self.store.remove_suspension(rec.var, b);
            resolved.push(rec.var.0);
            // Sub-unification may create new (possibly external) bindings.
            self.record_externals(b, u.externals, rec.from_call);
            self.wake_for_bound(&bound);
        }
        if failed {
            self.trace_rule("wake", Self::bnum(b), json!({"resolved": resolved, "failed": true}));
            // Put the unresolved records back for uniform cleanup.
            self.tree.and_box_mut(b).externals.extend(kept);
            return Ok(self.handle_fail(b, "environment synchronization"));
        }
        self.tree.and_box_mut(b).externals.extend(kept);

        // Retry parked arithmetic whose variables became bound.
        let mut retried = 0;
        {
            let n = self.tree.and_box(b).calls.len();
            for ix in 0..n {
                let ready = match &self.tree.and_box(b).calls[ix].waiting_on {
                    Some(WaitInfo::Ground(vars)) => {
                        vars.iter().all(|v| self.store.cell(*v).value.is_some())
                    }
                    _ => false,
                };
                if ready {
                    let vars = match self
                        .tree
                        .and_box_mut(b)
                        .calls
                        .get_mut(ix)
                        .and_then(|c| c.waiting_on.take())
                    {
                        Some(WaitInfo::Ground(vars)) => vars,
                        _ => Vec::new(),
                    };
                    for v in vars {
                        self.store.remove_suspension(v, b);
                    }
                    self.tree.and_box_mut(b).calls[ix].state = CallState::Ready;
                    retried += 1;
                }
            }
        }
        let still_quarantined = self.tree.and_box(b).has_quarantine();
        self.trace_rule(
            "wake",
            Self::bnum(b),
            json!({"resolved": resolved, "failed": false,
                   "still_suspended": still_quarantined, "retried": retried}),
        );
        let complete = self.tree.and_box(b).all_calls_success();
        if still_quarantined {
            // Remains suspended: reposition at the tail of the list.
            self.tree.remove_suspension(b);
            self.set_reason(b);
            if let Some((o, ix)) = self.tree.and_box(b).parent {
                let alt = &mut self.tree.or_box_mut(o).alts[ix];
                alt.state = if complete {
                    AltState::SuspendOnEnd
                } else {
                    AltState::Suspend
                };
            }
            if retried > 0 {
                return Ok(Port::NextCall(b));
            }
            return Ok(Port::SelectWork);
        }
        // No quarantined bindings remain.
        let has_wait = self
            .tree
            .and_box(b)
            .calls
            .iter()
            .any(|c| c.waiting_on.is_some());
        self.tree.remove_suspension(b);
        if has_wait {
            self.ensure_listed(b);
        }
        if let Some((o, ix)) = self.tree.and_box(b).parent {
            self.tree.or_box_mut(o).alts[ix].state = AltState::Running;
        }
        if complete && self.tree.and_box(b).externals.is_empty() {
            return self.handle_success(b);
        }
        Ok(Port::NextCall(b))
    }

    // ---- cut / commit ---------------------------------------------------------------------

    /// Early-pruning (quiet cut, leftmost in its box) or Leftmost-pruning
    /// (box leftmost in the tree, guard resolved). Firing prunes the box's
    /// or-siblings (right side for cut, both for commit) and promotes the
    /// leftmost guard branches' constraints into the box.
    fn try_fire_cut(&mut self, b: AndId, cut_ix: usize) -> Result<bool, EngineError> {
        let kind = self.tree.and_box(b).calls[cut_ix].kind;
        let early = {
            let node = self.tree.and_box(b);
            node.calls[..cut_ix]
                .iter()
                .all(|c| c.state == CallState::Success)
                && node.externals.is_empty()
        };
        let guard_resolved_or_success = |e: &Engine<'_>, c: &CallRecord| -> bool {
            match c.state {
                CallState::Success => true,
                CallState::Running => {
                    let Some(o) = c.child else { return false };
                    if !e.tree.or_alive(o) {
                        return false;
                    }
                    let or = e.tree.or_box(o);
                    or.alts
                        .iter()
                        .find(|a| a.state != AltState::Fail)
                        .map(|a| matches!(a.state, AltState::SuspendOnEnd | AltState::Success))
                        .unwrap_or(false)
                }
                _ => false,
            }
        };
        let leftmost = if early {
            false
        } else {
            self.tree.is_leftmost(b) && {
                let node = self.tree.and_box(b);
                node.calls[..cut_ix]
                    .iter()
                    .all(|c| guard_resolved_or_success(self, c))
            }
        };
        if !early && !leftmost {
            return Ok(false);
        }

        // Resolve unfinished guard calls: prune their or-boxes down to the
        // leftmost live branch and promote its constraints into b.
        let mut guard_pruned: Vec<u64> = Vec::new();
        if leftmost {
            for ix in 0..cut_ix {
                let (state, child) = {
                    let c = &self.tree.and_box(b).calls[ix];
                    (c.state, c.child)
                };
                if state != CallState::Running {
                    continue;
                }
                let Some(og) = child else { continue };
                let keep = self
                    .tree
                    .or_box(og)
                    .alts
                    .iter()
                    .position(|a| a.state != AltState::Fail)
                    .expect("live guard branch");
                guard_pruned.extend(self.prune_other_alts(og, keep));
                match self.resolve_unique(og)? {
                    Port::NextCall(_) => {}
                    _ => {}
                }
            }
        }

        // Prune sibling alternatives of b in its parent or-box: right of b
        // for cut, both sides for commit.
        let mut pruned: Vec<u64> = Vec::new();
        match self.tree.and_box(b).parent {
            Some((o, my_ix)) => {
                let victims: Vec<(usize, Option<AndId>)> = self
                    .tree
                    .or_box(o)
                    .alts
                    .iter()
                    .enumerate()
                    .filter(|(i, a)| {
                        a.state != AltState::Fail
                            && *i != my_ix
                            && (kind == CallKind::Commit || *i > my_ix)
                    })
                    .map(|(i, a)| (i, a.and_box))
                    .collect();
                for (i, bx) in victims {
                    if let Some(bx) = bx {
                        pruned.push(Self::bnum(bx));
                        self.free_subtree(bx, FreeMode::Prune);
                    }
                    let alt = &mut self.tree.or_box_mut(o).alts[i];
                    alt.state = AltState::Fail;
                    alt.and_box = None;
                }
            }
            None => {
                // Top-level box: prune sibling configurations.
                let my_pos = self.tree.roots.iter().position(|r| *r == b).unwrap();
                let victims: Vec<AndId> = self
                    .tree
                    .roots
                    .clone()
                    .into_iter()
                    .enumerate()
                    .filter(|(i, r)| {
                        *r != b
                            && self.tree.and_alive(*r)
                            && (kind == CallKind::Commit || *i > my_pos)
                    })
                    .map(|(_, r)| r)
                    .collect();
                for bx in victims {
                    pruned.push(Self::bnum(bx));
                    self.free_subtree(bx, FreeMode::Prune);
                }
            }
        }
        self.tree.and_box_mut(b).calls[cut_ix].state = CallState::Success;
        self.trace_rule(
            if kind == CallKind::Commit { "commit" } else { "cut" },
            Self::bnum(b),
            json!({"mode": if early { "early_pruning" } else { "leftmost_pruning" },
                   "pruned_siblings": pruned, "guard_pruned": guard_pruned}),
        );
        self.stats.pruned_boxes += 0; // free_subtree counted per box
        // Bindings gated behind the cut may now commit.
        if self.recommit(b).is_err() {
            return Ok(true); // the failure handler already ran
        }
        Ok(true)
    }

    /// Re-decides quarantined bindings after the gate that held them back
    /// disappeared (a cut fired). Err(()) means the box failed.
    fn recommit(&mut self, b: AndId) -> Result<(), ()> {
        if self.live_siblings(b) >= 2 || self.tree.and_box(b).has_unfired_cut() {
            return Ok(());
        }
        let records = std::mem::take(&mut self.tree.and_box_mut(b).externals);
        let depth = self.tree.and_box(b).depth;
        let mut out = Vec::new();
        for mut rec in records {
            if rec.committed {
                out.push(rec);
                continue;
            }
            self.store.remove_suspension(rec.var, b);
            if self.store.is_unbound(rec.var) {
                let mut u = Unifier::new(depth);
                u.bind(&mut self.store, rec.var, rec.value.clone());
                rec.committed = true;
                let v = rec.var;
                out.push(rec);
                self.tree.and_box_mut(b).externals = out;
                self.wake_suspended_on(v);
                out = std::mem::take(&mut self.tree.and_box_mut(b).externals);
            } else {
                let mut u = Unifier::new(depth);
                let res = u.unify(&mut self.store, &Term::Var(rec.var), &rec.value);
                if res == UnifyOutcome::Failure {
                    u.trail.undo(&mut self.store);
                    self.tree.and_box_mut(b).externals = out;
                    self.handle_fail(b, "recommit conflict");
                    return Err(());
                }
                let bound = u.trail.0.clone();
                self.record_externals(b, u.externals, rec.from_call);
                out = std::mem::take(&mut self.tree.and_box_mut(b).externals);
                self.wake_for_bound(&bound);
            }
        }
        self.tree.and_box_mut(b).externals = out;
        if !self.tree.and_box(b).has_quarantine() {
            let waiting = self
                .tree
                .and_box(b)
                .calls
                .iter()
                .any(|c| c.waiting_on.is_some());
            self.tree.remove_suspension(b);
            if waiting {
                self.ensure_listed(b);
            }
        } else {
            self.set_reason(b);
        }
        Ok(())
    }

    // ---- select_work / splitting --------------------------------------------------------------

    fn select_work(&mut self) -> Result<Port, EngineError> {
        if let Some(w) = self.front_woken() {
            return Ok(Port::Wake(w));
        }
        // Side-effect builtins waiting to become leftmost.
        let listed: Vec<AndId> = self.tree.suspension.iter().copied().collect();
        for b in listed {
            if !self.tree.and_alive(b) {
                continue;
            }
            let has_leftmost_wait = self
                .tree
                .and_box(b)
                .calls
                .iter()
                .any(|c| matches!(c.waiting_on, Some(WaitInfo::Leftmost)));
            if has_leftmost_wait && self.tree.is_leftmost(b) {
                let n = self.tree.and_box(b).calls.len();
                for ix in 0..n {
                    if matches!(
                        self.tree.and_box(b).calls[ix].waiting_on,
                        Some(WaitInfo::Leftmost)
                    ) {
                        let call = &mut self.tree.and_box_mut(b).calls[ix];
                        call.waiting_on = None;
                        call.state = CallState::Ready;
                    }
                }
                if !self.tree.and_box(b).has_quarantine() {
                    let still_waiting = self
                        .tree
                        .and_box(b)
                        .calls
                        .iter()
                        .any(|c| c.waiting_on.is_some());
                    if !still_waiting {
                        self.tree.remove_suspension(b);
                    }
                }
                return Ok(Port::NextCall(b));
            }
        }
        // Any reduction work left anywhere takes priority over splitting.
        if let Some(port) = self.scan_runnable() {
            return Ok(port);
        }
        // Splitting: leftmost suspended box, nearest enclosing or-box; the
        // duplicated conjunction must be free of unfired cuts.
        let mut candidates: Vec<AndId> = Vec::new();
        self.collect_conflict_suspended(&mut candidates);
        for s in candidates {
            let Some((o, _)) = self.tree.and_box(s).parent else {
                continue;
            };
            let p = self.tree.or_box(o).parent;
            if self.tree.or_box(o).live_count() < 2 {
                // A sole alternative should have been promoted; do it now.
                return self.resolve_unique(o);
            }
            if self.tree.subtree_has_unfired_cut(p) {
                continue;
            }
            return self.split(p, o, Some(s));
        }
        // A disjunction may also get stuck with every alternative resolved
        // (successes whose discharge gate never opened); distributing the
        // conjunction across it enumerates the branches.
        let mut stuck: Vec<OrId> = Vec::new();
        self.collect_stuck_ors(&mut stuck);
        for o in stuck {
            let p = self.tree.or_box(o).parent;
            if self.tree.subtree_has_unfired_cut(p) {
                continue;
            }
            return self.split(p, o, None);
        }
        // No split candidate: the run is over (or deadlocked).
        if self.tree.suspension.is_empty() {
            return Ok(Port::End(ExitKind::Completed));
        }
        let mut diag = String::from("stuck boxes:\n");
        for b in self.tree.suspension.iter() {
            if !self.tree.and_alive(*b) {
                continue;
            }
            diag.push_str(&format!(
                "  box {:?}: {:?}\n",
                b,
                self.tree.and_box(*b).suspended
            ));
        }
        self.deadlock_diag = Some(diag);
        Ok(Port::End(ExitKind::Deadlock))
    }

    fn collect_stuck_ors(&self, out: &mut Vec<OrId>) {
        fn walk(t: &Tree, b: AndId, out: &mut Vec<OrId>) {
            for call in &t.and_box(b).calls {
                if let Some(o) = call.child {
                    if !t.or_alive(o) {
                        continue;
                    }
                    let or = t.or_box(o);
                    let live: Vec<&AltRecord> = or
                        .alts
                        .iter()
                        .filter(|a| a.state != AltState::Fail)
                        .collect();
                    if live.len() >= 2
                        && live.iter().all(|a| {
                            matches!(
                                a.state,
                                AltState::Success | AltState::SuspendOnEnd | AltState::Suspend
                            )
                        })
                    {
                        out.push(o);
                    }
                    for alt in &or.alts {
                        if let Some(child) = alt.and_box {
                            if alt.state != AltState::Fail && t.and_alive(child) {
                                walk(t, child, out);
                            }
                        }
                    }
                }
            }
        }
        for r in &self.tree.roots {
            if self.tree.and_alive(*r) {
                walk(&self.tree, *r, out);
            }
        }
    }

    fn collect_conflict_suspended(&self, out: &mut Vec<AndId>) {
        fn walk(t: &Tree, b: AndId, out: &mut Vec<AndId>) {
            if matches!(
                t.and_box(b).suspended,
                Some(SuspendReason::ExternalConflict(_))
            ) {
                out.push(b);
            }
            for call in &t.and_box(b).calls {
                if let Some(o) = call.child {
                    if !t.or_alive(o) {
                        continue;
                    }
                    for alt in &t.or_box(o).alts {
                        if let Some(child) = alt.and_box {
                            if alt.state != AltState::Fail && t.and_alive(child) {
                                walk(t, child, out);
                            }
                        }
                    }
                }
            }
        }
        for r in &self.tree.roots {
            if self.tree.and_alive(*r) {
                walk(&self.tree, *r, out);
            }
        }
    }

    /// Work that still must run before a split may be considered.
    fn scan_runnable(&self) -> Option<Port> {
        for r in &self.tree.roots {
            if self.tree.and_alive(*r) {
                if let Some(port) = self.scan_box(*r) {
                    return Some(port);
                }
            }
        }
        None
    }

    fn scan_box(&self, b: AndId) -> Option<Port> {
        let node = self.tree.and_box(b);
        // A deferred failure whose gate has been satisfied.
        if let Some(fx) = node.calls.iter().position(|c| c.state == CallState::Fail) {
            let fire = match self.opts.implicit_pruning {
                ImplicitPruning::Full => true,
                ImplicitPruning::Leftmost => node.calls[..fx]
                    .iter()
                    .all(|c| c.state == CallState::Success),
            };
            if fire {
                return Some(Port::NextCall(b));
            }
        }
        for (ix, call) in node.calls.iter().enumerate() {
            match call.state {
                CallState::Fail => break,
                CallState::Ready => match call.kind {
                    CallKind::Builtin => return Some(Port::NextCall(b)),
                    CallKind::Goal => {
                        if !node.has_quarantine() {
                            return Some(Port::NextCall(b));
                        }
                        continue;
                    }
                    CallKind::SeqBarrier => {
                        if node.calls[..ix].iter().all(|c| c.state == CallState::Success) {
                            return Some(Port::NextCall(b));
                        }
                        break;
                    }
                    CallKind::Cut | CallKind::Commit => continue,
                },
                CallState::Running => {
                    if let Some(o) = call.child {
                        if self.tree.or_alive(o) {
                            let or = self.tree.or_box(o);
                            if or.alts.iter().any(|a| a.state == AltState::Ready) {
                                return Some(Port::NextAlternative(o));
                            }
                            if or.live_count() == 1
                                && or.alts.iter().any(|a| {
                                    a.state != AltState::Fail
                                        && a.and_box
                                            .map(|bx| {
                                                let n = self.tree.and_box(bx);
                                                !n.externals.is_empty() || !n.has_unfired_cut()
                                            })
                                            .unwrap_or(false)
                                })
                            {
                                // Pending promotion.
                                let parent = or.parent;
                                return Some(Port::NextCall(parent));
                            }
                            for alt in &or.alts {
                                if let Some(child) = alt.and_box {
                                    if alt.state != AltState::Fail && self.tree.and_alive(child) {
                                        if let Some(port) = self.scan_box(child) {
                                            return Some(port);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        None
    }

    /// Splitting (non-determinate promotion): distributes the parent's
    /// cut-free conjunction across the disjunction. The original keeps the
    /// first live alternative; a fresh copy keeps the remaining ones and is
    /// inserted immediately to the right.
    fn split(&mut self, p: AndId, o: OrId, woken: Option<AndId>) -> Result<Port, EngineError> {
        let keep_ix = self
            .tree
            .or_box(o)
            .alts
            .iter()
            .position(|a| a.state != AltState::Fail)
            .expect("split of empty or-box");
        self.stats.splits += 1;

        let (copy, copies_and, copies_or) = self.deep_copy_box(p, Some((o, keep_ix)), None);
        // Insert the copy to the right of p.
        match self.tree.and_box(p).parent {
            None => {
                let pos = self.tree.roots.iter().position(|r| *r == p).unwrap();
                self.tree.roots.insert(pos + 1, copy);
            }
            Some((po, pix)) => {
                let (code, clause_ix, state) = {
                    let a = &self.tree.or_box(po).alts[pix];
                    (a.code, a.clause_ix, a.state)
                };
                self.tree.or_box_mut(po).alts.insert(
                    pix + 1,
                    AltRecord {
                        and_box: Some(copy),
                        code,
                        clause_ix,
                        state,
                    },
                );
                self.tree.and_box_mut(copy).parent = Some((po, pix + 1));
                // Re-number parent links of alternatives shifted right.
                let n = self.tree.or_box(po).alts.len();
                for i in pix + 2..n {
                    if let Some(bx) = self.tree.or_box(po).alts[i].and_box {
                        if self.tree.and_alive(bx) {
                            self.tree.and_box_mut(bx).parent = Some((po, i));
                        }
                    }
                }
            }
        }
        // The original keeps only the first live alternative.
        let victims: Vec<(usize, Option<AndId>)> = self
            .tree
            .or_box(o)
            .alts
            .iter()
            .enumerate()
            .filter(|(i, a)| *i != keep_ix && a.state != AltState::Fail)
            .map(|(i, a)| (i, a.and_box))
            .collect();
        for (i, bx) in victims {
            if let Some(bx) = bx {
                self.free_subtree(bx, FreeMode::Silent);
            }
            let alt = &mut self.tree.or_box_mut(o).alts[i];
            alt.state = AltState::Fail;
            alt.and_box = None;
        }
        self.trace_rule(
            "split",
            Self::bnum(p),
            json!({"or_box": Self::onum(o), "copy": Self::bnum(copy),
                   "kept_alt": keep_ix,
                   "woken": woken.map(Self::bnum),
                   "subtree_cut_free": true,
                   "pending_other_work": false,
                   "woken_pending": false,
                   "copies_and": copies_and
                       .iter()
                       .map(|(a, b)| [Self::bnum(*a), Self::bnum(*b)])
                       .collect::<Vec<_>>(),
                   "copies_or": copies_or
                       .iter()
                       .map(|(a, b)| [Self::onum(*a), Self::onum(*b)])
                       .collect::<Vec<_>>()}),
        );
        if let Some(s) = woken {
            if self.tree.and_alive(s) && self.tree.in_suspension_list(s) {
                self.tree.wake_entry(s);
                self.tree.and_box_mut(s).woken = true;
                if let Some((so, six)) = self.tree.and_box(s).parent {
                    let alt = &mut self.tree.or_box_mut(so).alts[six];
                    if matches!(alt.state, AltState::Suspend | AltState::SuspendOnEnd) {
                        alt.state = AltState::Wake;
                    }
                }
            }
        }
        // The kept alternative is now unique: promote it.
        self.resolve_unique(o)
    }

    // ---- deep copy --------------------------------------------------------------------------

    /// Copies the whole subtree under `b`. `restrict` = (or-box, alt to
    /// exclude): the copy keeps every alternative of that or-box except the
    /// given one (the "remaining alternatives" branch of the splitting
    /// rule).
    fn deep_copy_box(
        &mut self,
        b: AndId,
        restrict: Option<(OrId, usize)>,
        new_parent: Option<(OrId, usize)>,
    ) -> (AndId, Vec<(AndId, AndId)>, Vec<(OrId, OrId)>) {
        let mut var_map: HashMap<VarId, VarId> = HashMap::new();
        let mut copied_boxes: Vec<(AndId, AndId)> = Vec::new();
        let mut copied_ors: Vec<(OrId, OrId)> = Vec::new();
        let copy = self.copy_and_rec(
            b,
            new_parent,
            restrict,
            &mut var_map,
            &mut copied_boxes,
            &mut copied_ors,
        );
        // Second pass: values, temps, or-args and record values were copied
        // verbatim; remap variable ids now that the whole map exists.
        for (_, new_b) in &copied_boxes {
            let frames_len = self.tree.and_box(*new_b).frames.len();
            for fi in 0..frames_len {
                let temps_len = self.tree.and_box(*new_b).frames[fi].temps.len();
                for ti in 0..temps_len {
                    if let Some(t) = self.tree.and_box(*new_b).frames[fi].temps[ti].clone() {
                        let t2 = remap_term(&t, &var_map);
                        self.tree.and_box_mut(*new_b).frames[fi].temps[ti] = Some(t2);
                    }
                }
            }
            let ext_len = self.tree.and_box(*new_b).externals.len();
            for ei in 0..ext_len {
                let value = self.tree.and_box(*new_b).externals[ei].value.clone();
                self.tree.and_box_mut(*new_b).externals[ei].value = remap_term(&value, &var_map);
            }
            let calls_len = self.tree.and_box(*new_b).calls.len();
            for ci in 0..calls_len {
                if let Some(oc) = self.tree.and_box(*new_b).calls[ci].child {
                    let args_len = self.tree.or_box(oc).args.len();
                    for ai in 0..args_len {
                        let t = self.tree.or_box(oc).args[ai].clone();
                        self.tree.or_box_mut(oc).args[ai] = remap_term(&t, &var_map);
                    }
                }
            }
        }
        // Copy variable values.
        for (&old_v, &new_v) in &var_map {
            let val = self.store.cell(old_v).value.clone();
            if let Some(val) = val {
                self.store.cell_mut(new_v).value = Some(remap_term(&val, &var_map));
            }
        }
        // Third pass: re-register suspensions for the copies, preserving
        // the relative order of the originals in the suspension list.
        let order: Vec<AndId> = self.tree.suspension.iter().copied().collect();
        let box_map: HashMap<AndId, AndId> = copied_boxes.iter().copied().collect();
        for old in order {
            let Some(&new_b) = box_map.get(&old) else {
                continue;
            };
            let reason = self.tree.and_box(new_b).suspended.clone();
            self.tree.and_box_mut(new_b).suspended = None;
            if let Some(reason) = reason {
                self.tree.add_suspension(new_b, reason);
            }
            // Register on the (possibly remapped) variables.
            let qvars: Vec<VarId> = self
                .tree
                .and_box(new_b)
                .externals
                .iter()
                .filter(|e| !e.committed)
                .map(|e| e.var)
                .collect();
            for v in qvars {
                self.store.add_suspension(v, new_b);
            }
            let n = self.tree.and_box(new_b).calls.len();
            for ci in 0..n {
                if let Some(WaitInfo::Ground(vs)) =
                    self.tree.and_box(new_b).calls[ci].waiting_on.clone()
                {
                    for v in vs {
                        self.store.add_suspension(v, new_b);
                    }
                }
            }
        }
        (copy, copied_boxes, copied_ors)
    }

    fn copy_and_rec(
        &mut self,
        b: AndId,
        new_parent: Option<(OrId, usize)>,
        restrict: Option<(OrId, usize)>,
        var_map: &mut HashMap<VarId, VarId>,
        copied: &mut Vec<(AndId, AndId)>,
        copied_ors: &mut Vec<(OrId, OrId)>,
    ) -> AndId {
        let depth = self.tree.and_box(b).depth;
        let new_b = self.tree.new_and(AndBox {
            parent: new_parent,
            depth,
            calls: Vec::new(),
            first_pending: self.tree.and_box(b).first_pending,
            locals: Vec::new(),
            externals: Vec::new(),
            frames: Vec::new(),
            suspended: None,
            woken: false,
            side_effects: self.tree.and_box(b).side_effects,
            answer_vars: Vec::new(),
        });
        copied.push((b, new_b));
        // Locals first so frames and records can remap.
        let old_locals = self.tree.and_box(b).locals.clone();
        let mut new_locals = Vec::with_capacity(old_locals.len());
        for v in &old_locals {
            let name = self.store.cell(*v).name.clone();
            let nv = self.store.fresh(new_b, depth, name);
            var_map.insert(*v, nv);
            new_locals.push(nv);
        }
        // Frames (perms remapped now; temps remapped in pass 2).
        let frames: Vec<Frame> = {
            let node = self.tree.and_box(b);
            node.frames
                .iter()
                .map(|f| Frame {
                    perms: f.perms.iter().map(|v| var_map[v]).collect(),
                    temps: f.temps.clone(),
                })
                .collect()
        };
        let externals: Vec<ExternalBinding> = self
            .tree
            .and_box(b)
            .externals
            .iter()
            .map(|e| ExternalBinding {
                var: *var_map.get(&e.var).unwrap_or(&e.var),
                value: e.value.clone(),
                committed: e.committed,
                from_call: e.from_call,
            })
            .collect();
        let suspended = self.tree.and_box(b).suspended.clone().map(|r| match r {
            SuspendReason::ExternalConflict(vs) => SuspendReason::ExternalConflict(
                vs.iter().map(|v| *var_map.get(v).unwrap_or(v)).collect(),
            ),
            SuspendReason::WaitingGround(vs) => SuspendReason::WaitingGround(
                vs.iter().map(|v| *var_map.get(v).unwrap_or(v)).collect(),
            ),
            SuspendReason::WaitingLeftmost => SuspendReason::WaitingLeftmost,
        });
        let answer_vars: Vec<(Rc<str>, VarId)> = self
            .tree
            .and_box(b)
            .answer_vars
            .iter()
            .map(|(n, v)| (n.clone(), *var_map.get(v).unwrap_or(v)))
            .collect();
        {
            let node = self.tree.and_box_mut(new_b);
            node.locals = new_locals;
            node.frames = frames;
            node.externals = externals;
            node.suspended = suspended;
            node.answer_vars = answer_vars;
        }
        // Calls and children.
        let n_calls = self.tree.and_box(b).calls.len();
        let mut new_calls = Vec::with_capacity(n_calls);
        for ci in 0..n_calls {
            let (kind, code, state, child, frame, waiting_on) = {
                let c = &self.tree.and_box(b).calls[ci];
                (
                    c.kind,
                    c.code,
                    c.state,
                    c.child,
                    c.frame,
                    c.waiting_on.clone(),
                )
            };
            let waiting_on = waiting_on.map(|w| match w {
                WaitInfo::Ground(vs) => WaitInfo::Ground(
                    vs.iter().map(|v| *var_map.get(v).unwrap_or(v)).collect(),
                ),
                WaitInfo::Leftmost => WaitInfo::Leftmost,
            });
            let new_child = child.and_then(|oc| {
                if !self.tree.or_alive(oc) {
                    return None;
                }
                Some(self.copy_or_rec(oc, new_b, ci, restrict, var_map, copied, copied_ors))
            });
            new_calls.push(CallRecord {
                kind,
                code,
                state,
                child: new_child,
                frame,
                waiting_on,
            });
        }
        self.tree.and_box_mut(new_b).calls = new_calls;
        new_b
    }

    #[allow(clippy::too_many_arguments)]
    fn copy_or_rec(
        &mut self,
        o: OrId,
        new_parent: AndId,
        call_ix: usize,
        restrict: Option<(OrId, usize)>,
        var_map: &mut HashMap<VarId, VarId>,
        copied: &mut Vec<(AndId, AndId)>,
        copied_ors: &mut Vec<(OrId, OrId)>,
    ) -> OrId {
        let (args, pred_name, eager) = {
            let or = self.tree.or_box(o);
            (or.args.clone(), or.pred_name.clone(), or.eager)
        };
        let new_o = self.tree.new_or(OrBox {
            parent: new_parent,
            call_ix,
            alts: Vec::new(),
            args,
            pred_name,
            eager,
        });
        copied_ors.push((o, new_o));
        let n_alts = self.tree.or_box(o).alts.len();
        let mut new_alts = Vec::new();
        for ai in 0..n_alts {
            let (state, code, clause_ix, bx) = {
                let a = &self.tree.or_box(o).alts[ai];
                (a.state, a.code, a.clause_ix, a.and_box)
            };
            if state == AltState::Fail {
                continue;
            }
            if let Some((ro, rix)) = restrict {
                if ro == o && ai == rix {
                    continue; // this alternative stays with the original
                }
            }
            let new_ix = new_alts.len();
            let new_bx = bx.map(|bxx| {
                self.copy_and_rec(bxx, Some((new_o, new_ix)), restrict, var_map, copied, copied_ors)
            });
            new_alts.push(AltRecord {
                and_box: new_bx,
                code,
                clause_ix,
                state,
            });
        }
        self.tree.or_box_mut(new_o).alts = new_alts;
        new_o
    }

    // ---- detach -------------------------------------------------------------------------------

    /// Detaches a subtree: assignments undone, suspension registrations
    /// dropped, every box counted once by the reclamation counter (pruning
    /// additionally bumps the pruned counter).
    fn free_subtree(&mut self, b: AndId, mode: FreeMode) {
        let calls_len = self.tree.and_box(b).calls.len();
        for ci in 0..calls_len {
            let child = self.tree.and_box(b).calls[ci].child;
            if let Some(o) = child {
                if !self.tree.or_alive(o) {
                    continue;
                }
                let n_alts = self.tree.or_box(o).alts.len();
                for ai in 0..n_alts {
                    let bx = {
                        let a = &self.tree.or_box(o).alts[ai];
                        if a.state == AltState::Fail {
                            None
                        } else {
                            a.and_box
                        }
                    };
                    if let Some(bx) = bx {
                        if self.tree.and_alive(bx) {
                            self.free_subtree(bx, match mode {
                                FreeMode::Silent => FreeMode::Silent,
                                FreeMode::Prune => FreeMode::Prune,
                                FreeMode::Reclaim => FreeMode::Reclaim,
                            });
                        }
                    }
                }
                match mode {
                    FreeMode::Silent => self.tree.free_or_quiet(o),
                    FreeMode::Prune => {
                        self.stats.pruned_boxes += 1;
                        self.tree.free_or(o);
                    }
                    FreeMode::Reclaim => self.tree.free_or(o),
                }
            }
        }
        // Undo this box's assignments and registrations.
        let records = std::mem::take(&mut self.tree.and_box_mut(b).externals);
        for rec in records.iter().rev() {
            if rec.committed {
                self.store.cell_mut(rec.var).value = None;
            } else {
                self.store.remove_suspension(rec.var, b);
            }
        }
        let n = self.tree.and_box(b).calls.len();
        for ci in 0..n {
            if let Some(WaitInfo::Ground(vs)) = self.tree.and_box(b).calls[ci].waiting_on.clone() {
                for v in vs {
                    self.store.remove_suspension(v, b);
                }
            }
        }
        self.tree.remove_suspension(b);
        match mode {
            FreeMode::Silent => self.tree.free_and_quiet(b),
            FreeMode::Prune => {
                self.stats.pruned_boxes += 1;
                self.tree.free_and(b);
            }
            FreeMode::Reclaim => self.tree.free_and(b),
        }
    }
}

fn remap_term(t: &Term, var_map: &HashMap<VarId, VarId>) -> Term {
    match t {
        Term::Var(v) => Term::Var(*var_map.get(v).unwrap_or(v)),
        Term::Atom(_) | Term::Int(_) => t.clone(),
        Term::Compound(f, args) => {
            let mapped: Vec<Term> = args.iter().map(|a| remap_term(a, var_map)).collect();
            Term::Compound(*f, mapped.into())
        }
    }
}

/// Canonical printing used for answers: lists sugared, other compounds in
/// functor(args) form, unbound variables named _A, _B, ... by appearance.
pub fn print_term(
    store: &VarStore,
    interner: &crate::term::Interner,
    t: &Term,
    names: &mut HashMap<VarId, String>,
) -> String {
    fn var_name(k: usize) -> String {
        let letter = (b'A' + (k % 26) as u8) as char;
        if k < 26 {
            format!("_{}", letter)
        } else {
            format!("_{}{}", letter, k / 26)
        }
    }
    let t = store.deref(t);
    match t {
        Term::Var(v) => {
            let k = names.len();
            names.entry(v).or_insert_with(|| var_name(k)).clone()
        }
        Term::Int(n) => n.to_string(),
        Term::Atom(s) => interner.name(s).to_string(),
        Term::Compound(f, args) => {
            if interner.name(f) == "." && args.len() == 2 {
                let mut out = String::from("[");
                out.push_str(&print_term(store, interner, &args[0], names));
                let mut tail = store.deref(&args[1]);
                loop {
                    match tail {
                        Term::Atom(s) if interner.name(s) == "[]" => break,
                        Term::Compound(f2, ref a2) if interner.name(f2) == "." && a2.len() == 2 => {
                            out.push(',');
                            out.push_str(&print_term(store, interner, &a2[0], names));
                            tail = store.deref(&a2[1]);
                        }
                        other => {
                            out.push('|');
                            out.push_str(&print_term(store, interner, &other, names));
                            break;
                        }
                    }
                }
                out.push(']');
                out
            } else {
                let mut out = format!("{}(", interner.name(f));
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&print_term(store, interner, a, names));
                }
                out.push(')');
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(src: &str, goal: &str) -> RunOutcome {
        let mut sink = TraceSink::disabled();
        let mut opts = EngineOpts::default();
        opts.validate_every_step = true;
        run_source(src, goal, &opts, &mut sink).expect("run")
    }

    fn answers(out: &RunOutcome) -> Vec<String> {
        let mut v: Vec<String> = out.answers.iter().map(|a| a.canonical()).collect();
        v.sort();
        v
    }

    const PARENT_DB: &str = "parent(john, richard).\nparent(john, mary).\n\
                             parent(patrick, paul).\nparent(patrick, susan).";

    #[test]
    fn deterministic_fact_lookup() {
        let out = run(PARENT_DB, "parent(X, mary)");
        assert_eq!(answers(&out), ["X = john"]);
        assert_eq!(out.stats.splits, 0);
        assert_eq!(out.exit, ExitKind::Completed);
    }

    #[test]
    fn ground_fact_check() {
        let out = run(PARENT_DB, "parent(john, mary)");
        assert_eq!(answers(&out), ["true"]);
        let out = run(PARENT_DB, "parent(mary, john)");
        assert!(answers(&out).is_empty());
    }

    #[test]
    fn open_query_enumerates_by_splitting() {
        let out = run(PARENT_DB, "parent(patrick, Q)");
        assert_eq!(answers(&out), ["Q = paul", "Q = susan"]);
        assert!(out.stats.splits >= 1, "needs at least one split");
    }

    #[test]
    fn conjunction_with_shared_variable() {
        let out = run(PARENT_DB, "parent(john, X), parent(patrick, Y)");
        assert_eq!(out.answers.len(), 4);
    }

    #[test]
    fn ancestor_figure_program() {
        // Left-open recursion diverges under the default strategy (the
        // model may loop on ancestor); the producer annotation plus eager
        // splitting grounds the intermediate variable.
        let src = ":- eager_split(parent/2).\n\
                   ancestor(X,Y) :- parent(X,Y).\n\
                   ancestor(X,Z) :- parent(X,Y), ancestor(Y,Z).\n\
                   parent(a,fa).\nparent(a,ma).\n\
                   parent(fa,gfa).";
        let mut sink = TraceSink::disabled();
        let mut opts = EngineOpts::default();
        opts.strategy = Strategy::Eager;
        opts.validate_every_step = true;
        let out = run_source(src, "ancestor(a, Z)", &opts, &mut sink).unwrap();
        assert_eq!(answers(&out), ["Z = fa", "Z = gfa", "Z = ma"]);
    }

    #[test]
    fn arithmetic_and_is() {
        let out = run("double(X, Y) :- Y is X + X.", "double(21, Z)");
        assert_eq!(answers(&out), ["Z = 42"]);
    }

    #[test]
    fn partition_is_deterministic_without_splits() {
        let src = "partition([X|L],Y,[X|L1],L2) :- X =< Y, partition(L,Y,L1,L2).\n\
                   partition([X|L],Y,L1,[X|L2]) :- X > Y, partition(L,Y,L1,L2).\n\
                   partition([],_,[],[]).";
        let out = run(src, "partition([4,3,5],2,A,B)");
        assert_eq!(answers(&out), ["A = [], B = [4,3,5]"]);
        assert_eq!(out.stats.splits, 0, "partition must not split");
        assert!(out.stats.suspensions > 0, "clause 1 suspends before failing");
    }

    #[test]
    fn nreverse_runs_deterministically() {
        let src = "nreverse([],[]).\n\
                   nreverse([X|L0],L) :- nreverse(L0,L1), concatenate(L1,[X],L).\n\
                   concatenate([],L,L).\n\
                   concatenate([X|L1],L2,[X|L3]) :- concatenate(L1,L2,L3).";
        let out = run(src, "nreverse([1,2,3,4,5], R)");
        assert_eq!(answers(&out), ["R = [5,4,3,2,1]"]);
        assert_eq!(out.stats.splits, 0);
    }

    #[test]
    fn builtin_unify_and_tests() {
        let out = run("p.", "X = f(1,Y), Y = 2, 3 > 2, 4 =< 4, X = f(1,2)");
        assert_eq!(out.answers.len(), 1);
        let out = run("p.", "X = 1, X = 2");
        assert!(out.answers.is_empty());
    }

    #[test]
    fn waiting_ground_wakes_on_binding() {
        // The test runs before X is bound (early execution), suspends on
        // groundness, and is woken when the producer binds X.
        let src = "p(X) :- X > 3, q(X).\nq(5).\np2(X) :- check(X), gen(X).\n\
                   check(X) :- X > 3.\ngen(5).\ngen(1).";
        let out = run(src, "p2(V)");
        assert_eq!(answers(&out), ["V = 5"]);
    }

    #[test]
    fn write_waits_for_leftmost() {
        let src = "a(1).\nb(X) :- write(done), nl.";
        let out = run(src, "a(X), b(X)");
        assert_eq!(out.output, "done\n");
    }

    #[test]
    fn cut_commits_to_first_solution() {
        let src = "max(X,Y,X) :- X >= Y, !.\nmax(X,Y,Y) :- X < Y.\n";
        let out = run(src, "max(3,2,M)");
        assert_eq!(answers(&out), ["M = 3"]);
        let out = run(src, "max(2,3,M)");
        assert_eq!(answers(&out), ["M = 3"]);
    }

    #[test]
    fn cut_prunes_alternatives() {
        let src = "p(X) :- q(X), !, r(X).\np(99).\nq(1).\nq(2).\nr(1).";
        let out = run(src, "p(V)");
        // The cut commits to q(1); p(99) is pruned.
        assert_eq!(answers(&out), ["V = 1"]);
    }

    #[test]
    fn sequential_conjunction_orders_execution() {
        let src = "gen(1).\ngen(2).\ntest(X) :- X > 1.";
        let out = run(src, "gen(X) && test(X)");
        assert_eq!(answers(&out), ["X = 2"]);
    }

    #[test]
    fn step_limit_aborts() {
        let src = "loop :- loop.";
        let mut sink = TraceSink::disabled();
        let mut opts = EngineOpts::default();
        opts.max_steps = Some(1000);
        let out = run_source(src, "loop", &opts, &mut sink).unwrap();
        assert_eq!(out.exit, ExitKind::StepLimit);
    }

    #[test]
    fn undefined_predicate_is_an_error() {
        let mut sink = TraceSink::disabled();
        let opts = EngineOpts::default();
        let err = run_source("p(1).", "q(X)", &opts, &mut sink).unwrap_err();
        assert!(matches!(err, EngineError::Undefined { .. }));
    }

    #[test]
    fn first_solution_mode_stops_early() {
        let src = "g(1).\ng(2).\ng(3).";
        let mut sink = TraceSink::disabled();
        let mut opts = EngineOpts::default();
        opts.first_solution = true;
        opts.validate_every_step = true;
        let out = run_source(src, "g(X)", &opts, &mut sink).unwrap();
        assert_eq!(out.answers.len(), 1);
        assert_eq!(out.answers[0].canonical(), "X = 1");
    }
}
