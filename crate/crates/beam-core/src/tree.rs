//! The And-Or configuration tree: and-boxes, or-boxes, per-call and
//! per-alternative records, depth counters and the suspension list.
//!
//! Box identifiers are generation-tagged indices so stale references are
//! detectable in debug builds.

use std::collections::VecDeque;
use std::fmt;
use std::rc::Rc;

use crate::code::CodeIx;
use crate::term::{ExternalBinding, Term, VarId};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AndId {
    pub index: u32,
    pub gen: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrId {
    pub index: u32,
    pub gen: u32,
}

impl fmt::Debug for AndId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}g{}", self.index, self.gen)
    }
}

impl fmt::Debug for OrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{}g{}", self.index, self.gen)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AltState {
    Ready,
    Running,
    Success,
    Fail,
    Suspend,
    SuspendOnEnd,
    Wake,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CallState {
    Ready,
    Running,
    Success,
    Fail,
    /// A builtin parked until its operand variables become bound or until
    /// the call becomes leftmost.
    Waiting,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SuspendReason {
    /// Quarantined bindings to external variables.
    ExternalConflict(Vec<VarId>),
    /// Side-effect builtin gated until leftmost.
    WaitingLeftmost,
    /// Arithmetic builtin waiting for variables to become bound.
    WaitingGround(Vec<VarId>),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CallKind {
    /// User-predicate goal: a put-block ending in call_pred.
    Goal,
    /// Builtin goal: a put-block ending in call_builtin. Unlike user
    /// goals, builtins may run inside a box holding quarantined bindings.
    Builtin,
    Cut,
    Commit,
    SeqBarrier,
}

/// What a Waiting call is parked on.
#[derive(Clone, Debug)]
pub enum WaitInfo {
    /// Arithmetic builtin waiting for these variables to become bound.
    Ground(Vec<VarId>),
    /// Side-effect builtin waiting to become leftmost.
    Leftmost,
}

pub struct CallRecord {
    pub kind: CallKind,
    /// Start of the put-block (or the cut_op/commit_op/seq_barrier stub).
    pub code: CodeIx,
    pub state: CallState,
    /// Or-box created by call_pred; EMPTY until the call is reduced.
    pub child: Option<OrId>,
    /// Frame (slot table) the block executes against.
    pub frame: u16,
    pub waiting_on: Option<WaitInfo>,
}

/// Per-activation slot table: permanent variables are pre-created cells,
/// temporaries hold terms and never outlive the activation.
pub struct Frame {
    pub perms: Vec<VarId>,
    pub temps: Vec<Option<Term>>,
}

pub struct AndBox {
    /// Parent or-box and alternative index; None for top-level boxes.
    pub parent: Option<(OrId, usize)>,
    pub depth: u32,
    pub calls: Vec<CallRecord>,
    /// Scan cursor: calls left of this are all resolved.
    pub first_pending: usize,
    pub locals: Vec<VarId>,
    pub externals: Vec<ExternalBinding>,
    pub frames: Vec<Frame>,
    pub suspended: Option<SuspendReason>,
    /// Set when the box received a wake signal and has not been
    /// synchronized yet.
    pub woken: bool,
    pub side_effects: bool,
    /// For top-level boxes: the query variables, for answer extraction.
    pub answer_vars: Vec<(Rc<str>, VarId)>,
}

impl AndBox {
    pub fn has_quarantine(&self) -> bool {
        self.externals.iter().any(|e| !e.committed)
    }

    pub fn has_unfired_cut(&self) -> bool {
        self.calls.iter().any(|c| {
            matches!(c.kind, CallKind::Cut | CallKind::Commit) && c.state != CallState::Success
        })
    }

    /// Position of the first unfired pruning operator, if any.
    pub fn unfired_cut_index(&self) -> Option<usize> {
        self.calls.iter().position(|c| {
            matches!(c.kind, CallKind::Cut | CallKind::Commit) && c.state != CallState::Success
        })
    }

    pub fn all_calls_success(&self) -> bool {
        self.calls.iter().all(|c| c.state == CallState::Success)
    }
}

pub struct AltRecord {
    /// And-box for the alternative; None until explored.
    pub and_box: Option<AndId>,
    pub code: CodeIx,
    pub clause_ix: usize,
    pub state: AltState,
}

pub struct OrBox {
    pub parent: AndId,
    pub call_ix: usize,
    pub alts: Vec<AltRecord>,
    /// Shared argument vector built by the caller's put-block.
    pub args: Vec<Term>,
    pub pred_name: Rc<str>,
    /// Predicate is flagged for eager splitting.
    pub eager: bool,
}

impl OrBox {
    pub fn live_count(&self) -> usize {
        self.alts
            .iter()
            .filter(|a| a.state != AltState::Fail)
            .count()
    }

    pub fn live_alt_indices(&self) -> Vec<usize> {
        (0..self.alts.len())
            .filter(|&i| self.alts[i].state != AltState::Fail)
            .collect()
    }
}

enum AndSlot {
    Live(AndBox),
    Free,
}

enum OrSlot {
    Live(OrBox),
    Free,
}

/// Arena for both box kinds plus the suspension list.
pub struct Tree {
    ands: Vec<(u32, AndSlot)>,
    ors: Vec<(u32, OrSlot)>,
    /// Top-level configurations, left to right. Each entry is a live or
    /// already-detached and-box id (detached ids are skipped).
    pub roots: Vec<AndId>,
    /// Woken entries at the front, suspended entries behind.
    pub suspension: VecDeque<AndId>,
    pub reclaimed_boxes: u64,
}

impl Tree {
    pub fn new() -> Self {
        Tree {
            ands: Vec::new(),
            ors: Vec::new(),
            roots: Vec::new(),
            suspension: VecDeque::new(),
            reclaimed_boxes: 0,
        }
    }

    pub fn new_and(&mut self, b: AndBox) -> AndId {
        let index = self.ands.len() as u32;
        self.ands.push((0, AndSlot::Live(b)));
        AndId { index, gen: 0 }
    }

    pub fn new_or(&mut self, b: OrBox) -> OrId {
        let index = self.ors.len() as u32;
        self.ors.push((0, OrSlot::Live(b)));
        OrId { index, gen: 0 }
    }

    pub fn and_alive(&self, id: AndId) -> bool {
        let (gen, slot) = &self.ands[id.index as usize];
        *gen == id.gen && matches!(slot, AndSlot::Live(_))
    }

    pub fn or_alive(&self, id: OrId) -> bool {
        let (gen, slot) = &self.ors[id.index as usize];
        *gen == id.gen && matches!(slot, OrSlot::Live(_))
    }

    pub fn and_box(&self, id: AndId) -> &AndBox {
        let (gen, slot) = &self.ands[id.index as usize];
        debug_assert_eq!(*gen, id.gen, "stale and-box reference");
        match slot {
            AndSlot::Live(b) => b,
            AndSlot::Free => panic!("dead and-box {:?}", id),
        }
    }

    pub fn and_box_mut(&mut self, id: AndId) -> &mut AndBox {
        let (gen, slot) = &mut self.ands[id.index as usize];
        debug_assert_eq!(*gen, id.gen, "stale and-box reference");
        match slot {
            AndSlot::Live(b) => b,
            AndSlot::Free => panic!("dead and-box {:?}", id),
        }
    }

    pub fn or_box(&self, id: OrId) -> &OrBox {
        let (gen, slot) = &self.ors[id.index as usize];
        debug_assert_eq!(*gen, id.gen, "stale or-box reference");
        match slot {
            OrSlot::Live(b) => b,
            OrSlot::Free => panic!("dead or-box {:?}", id),
        }
    }

    pub fn or_box_mut(&mut self, id: OrId) -> &mut OrBox {
        let (gen, slot) = &mut self.ors[id.index as usize];
        debug_assert_eq!(*gen, id.gen, "stale or-box reference");
        match slot {
            OrSlot::Live(b) => b,
            OrSlot::Free => panic!("dead or-box {:?}", id),
        }
    }

    /// Detach an and-box; the slot is tombstoned and the reclaimed-box
    /// counter bumped (the logical stand-in for eager memory recovery).
    pub fn free_and(&mut self, id: AndId) {
        let (gen, slot) = &mut self.ands[id.index as usize];
        debug_assert_eq!(*gen, id.gen);
        *gen += 1;
        *slot = AndSlot::Free;
        self.reclaimed_boxes += 1;
    }

    pub fn free_or(&mut self, id: OrId) {
        let (gen, slot) = &mut self.ors[id.index as usize];
        debug_assert_eq!(*gen, id.gen);
        *gen += 1;
        *slot = OrSlot::Free;
        self.reclaimed_boxes += 1;
    }

    /// Frees without counting: the structure logically moved elsewhere
    /// (splitting keeps one copy of each moved box).
    pub fn free_and_quiet(&mut self, id: AndId) {
        self.free_and(id);
        self.reclaimed_boxes -= 1;
    }

    pub fn free_or_quiet(&mut self, id: OrId) {
        self.free_or(id);
        self.reclaimed_boxes -= 1;
    }

    // ---- suspension list ------------------------------------------------

    pub fn in_suspension_list(&self, b: AndId) -> bool {
        self.suspension.contains(&b)
    }

    /// Appends at the tail. Duplicate insertion is a contract violation.
    pub fn add_suspension(&mut self, b: AndId, reason: SuspendReason) {
        debug_assert!(!self.in_suspension_list(b), "duplicate suspension entry");
        self.and_box_mut(b).suspended = Some(reason);
        self.suspension.push_back(b);
    }

    /// Moves an entry to the front so woken boxes run before suspended ones.
    pub fn wake_entry(&mut self, b: AndId) {
        let pos = self
            .suspension
            .iter()
            .position(|x| *x == b)
            .expect("wake of unlisted box");
        self.suspension.remove(pos);
        self.suspension.push_front(b);
    }

    pub fn remove_suspension(&mut self, b: AndId) {
        if let Some(pos) = self.suspension.iter().position(|x| *x == b) {
            self.suspension.remove(pos);
        }
        if self.and_alive(b) {
            self.and_box_mut(b).suspended = None;
        }
    }

    // ---- structure walks -------------------------------------------------

    /// Depth-first, alternatives and calls left-to-right from the roots;
    /// returns the first and-box satisfying `pred`.
    pub fn dfs_find(&self, pred: &dyn Fn(&Tree, AndId) -> bool) -> Option<AndId> {
        let roots = self.roots.clone();
        for r in roots {
            if !self.and_alive(r) {
                continue;
            }
            if let Some(hit) = self.dfs_find_under(r, pred) {
                return Some(hit);
            }
        }
        None
    }

    pub fn dfs_find_under(&self, b: AndId, pred: &dyn Fn(&Tree, AndId) -> bool) -> Option<AndId> {
        if pred(self, b) {
            return Some(b);
        }
        for call in &self.and_box(b).calls {
            if let Some(o) = call.child {
                if !self.or_alive(o) {
                    continue;
                }
                for alt in &self.or_box(o).alts {
                    if let Some(child) = alt.and_box {
                        if alt.state == AltState::Fail || !self.and_alive(child) {
                            continue;
                        }
                        if let Some(hit) = self.dfs_find_under(child, pred) {
                            return Some(hit);
                        }
                    }
                }
            }
        }
        None
    }

    /// The leftmost and-box suspended with an ExternalConflict reason.
    pub fn leftmost_suspended(&self) -> Option<AndId> {
        self.dfs_find(&|t, b| {
            matches!(
                t.and_box(b).suspended,
                Some(SuspendReason::ExternalConflict(_))
            )
        })
    }

    /// True iff on the path from a root to `b` every ancestor and-box call
    /// left of the path is success and every or-alternative left of the
    /// path has failed. An unfired pruning operator left of the path also
    /// blocks leftmostness.
    pub fn is_leftmost(&self, b: AndId) -> bool {
        let mut cur = b;
        loop {
            let node = self.and_box(cur);
            let Some((or_id, alt_ix)) = node.parent else {
                // Top-level box: leftmost iff no earlier live root exists.
                for r in &self.roots {
                    if *r == cur {
                        return true;
                    }
                    if self.and_alive(*r) {
                        return false;
                    }
                }
                return true;
            };
            let or = self.or_box(or_id);
            for (i, alt) in or.alts.iter().enumerate() {
                if i >= alt_ix {
                    break;
                }
                if alt.state != AltState::Fail {
                    return false;
                }
            }
            let parent = self.or_box(or_id).parent;
            let pbox = self.and_box(parent);
            for (i, call) in pbox.calls.iter().enumerate() {
                if i >= or.call_ix {
                    break;
                }
                if call.state != CallState::Success {
                    return false;
                }
            }
            cur = parent;
        }
    }

    /// Counts live boxes in the subtree rooted at `b` (including `b`).
    pub fn subtree_box_count(&self, b: AndId) -> u64 {
        let mut n = 1;
        for call in &self.and_box(b).calls {
            if let Some(o) = call.child {
                if !self.or_alive(o) {
                    continue;
                }
                n += 1;
                for alt in &self.or_box(o).alts {
                    if let Some(child) = alt.and_box {
                        if alt.state != AltState::Fail && self.and_alive(child) {
                            n += self.subtree_box_count(child);
                        }
                    }
                }
            }
        }
        n
    }

    /// True if any box in the subtree (including `b`) carries an unfired
    /// cut or commit. Such subtrees must never be duplicated by splitting.
    pub fn subtree_has_unfired_cut(&self, b: AndId) -> bool {
        self.dfs_find_under(b, &|t, x| t.and_box(x).has_unfired_cut())
            .is_some()
    }

    // ---- invariants -------------------------------------------------------

    /// Tree well-formedness: mutual parent/child consistency, the depth law,
    /// and suspension-list consistency. Returns the first violation found.
    pub fn validate(&self, store: &crate::term::VarStore) -> Result<(), String> {
        for r in &self.roots {
            if !self.and_alive(*r) {
                continue;
            }
            let b = self.and_box(*r);
            if b.depth != 0 {
                return Err(format!("root {:?} has depth {}", r, b.depth));
            }
            self.validate_and(*r, store)?;
        }
        // Suspension-list consistency: listed iff marked.
        for b in &self.suspension {
            if !self.and_alive(*b) {
                return Err(format!("suspension list holds dead box {:?}", b));
            }
            if self.and_box(*b).suspended.is_none() {
                return Err(format!("listed box {:?} has no suspend reason", b));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.suspension {
            if !seen.insert(*b) {
                return Err(format!("duplicate suspension entry {:?}", b));
            }
        }
        Ok(())
    }

    fn validate_and(&self, id: AndId, store: &crate::term::VarStore) -> Result<(), String> {
        let b = self.and_box(id);
        if b.suspended.is_some() && !self.in_suspension_list(id) {
            return Err(format!("{:?} suspended but not listed", id));
        }
        for v in &b.locals {
            let cell = store.cell(*v);
            if cell.home != id {
                return Err(format!("local {:?} of {:?} homed at {:?}", v, id, cell.home));
            }
            if cell.home_depth != b.depth {
                return Err(format!(
                    "local {:?} depth {} != box depth {}",
                    v, cell.home_depth, b.depth
                ));
            }
        }
        for (ci, call) in b.calls.iter().enumerate() {
            if let Some(o) = call.child {
                if !self.or_alive(o) {
                    return Err(format!("{:?} call {} points at dead or-box", id, ci));
                }
                let or = self.or_box(o);
                if or.parent != id || or.call_ix != ci {
                    return Err(format!("or-box {:?} back-reference mismatch", o));
                }
                for (ai, alt) in or.alts.iter().enumerate() {
                    if let Some(child) = alt.and_box {
                        if alt.state == AltState::Fail {
                            continue;
                        }
                        if !self.and_alive(child) {
                            return Err(format!("alt {} of {:?} points at dead box", ai, o));
                        }
                        let cb = self.and_box(child);
                        if cb.parent != Some((o, ai)) {
                            return Err(format!("{:?} parent mismatch", child));
                        }
                        if cb.depth != b.depth + 1 {
                            return Err(format!(
                                "depth law violated at {:?}: {} vs parent {}",
                                child, cb.depth, b.depth
                            ));
                        }
                        self.validate_and(child, store)?;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Tree {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_box(depth: u32) -> AndBox {
        AndBox {
            parent: None,
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
        }
    }

    #[test]
    fn suspension_list_appends_at_tail() {
        let mut t = Tree::new();
        let b1 = t.new_and(empty_box(0));
        let b2 = t.new_and(empty_box(0));
        t.add_suspension(b1, SuspendReason::WaitingLeftmost);
        t.add_suspension(b2, SuspendReason::WaitingLeftmost);
        assert_eq!(t.suspension.iter().copied().collect::<Vec<_>>(), [b1, b2]);
    }

    #[test]
    fn wake_moves_to_front() {
        let mut t = Tree::new();
        let b1 = t.new_and(empty_box(0));
        let b2 = t.new_and(empty_box(0));
        let b3 = t.new_and(empty_box(0));
        t.add_suspension(b1, SuspendReason::WaitingLeftmost);
        t.add_suspension(b2, SuspendReason::WaitingLeftmost);
        t.add_suspension(b3, SuspendReason::WaitingLeftmost);
        t.wake_entry(b3);
        assert_eq!(
            t.suspension.iter().copied().collect::<Vec<_>>(),
            [b3, b1, b2]
        );
        // singleton stays put
        let mut t2 = Tree::new();
        let only = t2.new_and(empty_box(0));
        t2.add_suspension(only, SuspendReason::WaitingLeftmost);
        t2.wake_entry(only);
        assert_eq!(t2.suspension.iter().copied().collect::<Vec<_>>(), [only]);
    }

    #[test]
    fn resuspension_after_wake_keeps_single_entry() {
        let mut t = Tree::new();
        let b1 = t.new_and(empty_box(0));
        let b2 = t.new_and(empty_box(0));
        t.add_suspension(b1, SuspendReason::WaitingLeftmost);
        t.add_suspension(b2, SuspendReason::WaitingLeftmost);
        t.wake_entry(b1);
        t.remove_suspension(b1);
        t.add_suspension(b1, SuspendReason::WaitingLeftmost);
        assert_eq!(t.suspension.iter().copied().collect::<Vec<_>>(), [b2, b1]);
    }

    #[test]
    fn leftmost_suspended_none_when_empty() {
        let t = Tree::new();
        assert_eq!(t.leftmost_suspended(), None);
    }

    #[test]
    fn generation_tag_detects_staleness() {
        let mut t = Tree::new();
        let b = t.new_and(empty_box(0));
        t.free_and(b);
        assert!(!t.and_alive(b));
        assert_eq!(t.reclaimed_boxes, 1);
    }
}
