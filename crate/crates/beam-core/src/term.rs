//! Herbrand terms, permanent-variable cells and the direction-disciplined
//! unification used by the engine.
//!
//! Variables are permanent cells owned by an and-box (`home`). Binding a
//! variable whose home lies above the binding box is an *external* binding:
//! it is recorded on the binding box so it can be undone (quarantined) when
//! the box suspends and replayed when its bindings are promoted.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::tree::AndId;

/// Interned functor/atom symbol.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Sym(pub u32);

#[derive(Default)]
pub struct Interner {
    names: Vec<String>,
    map: HashMap<String, Sym>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> Sym {
        if let Some(&s) = self.map.get(name) {
            return s;
        }
        let s = Sym(self.names.len() as u32);
        self.names.push(name.to_string());
        self.map.insert(name.to_string(), s);
        s
    }

    pub fn name(&self, s: Sym) -> &str {
        &self.names[s.0 as usize]
    }
}

/// Variable identifier into the store. Cells are never reused within a run.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub u32);

impl fmt::Debug for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "_V{}", self.0)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub enum Term {
    Var(VarId),
    Atom(Sym),
    Int(i64),
    Compound(Sym, Rc<[Term]>),
}

impl Term {
    pub fn compound(f: Sym, args: Vec<Term>) -> Term {
        debug_assert!(!args.is_empty(), "arity 0 is always an Atom");
        Term::Compound(f, args.into())
    }

    pub fn is_var(&self) -> bool {
        matches!(self, Term::Var(_))
    }
}

impl fmt::Debug for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => write!(f, "{:?}", v),
            Term::Atom(s) => write!(f, "atom#{}", s.0),
            Term::Int(n) => write!(f, "{}", n),
            Term::Compound(s, args) => {
                write!(f, "f#{}(", s.0)?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{:?}", a)?;
                }
                write!(f, ")")
            }
        }
    }
}

/// One permanent-variable cell.
pub struct VarCell {
    pub value: Option<Term>,
    pub home: AndId,
    /// Depth of the home box; kept on the cell so locality checks do not
    /// need the tree. Updated together with `home` on promotion.
    pub home_depth: u32,
    /// And-boxes suspended on this variable (quarantined bindings or
    /// builtins waiting for it to become ground). No duplicates.
    pub suspensions: Vec<AndId>,
    pub name: Option<Rc<str>>,
}

/// A binding made by a box to a variable homed above it.
#[derive(Clone)]
pub struct ExternalBinding {
    pub var: VarId,
    pub value: Term,
    /// True while the value is present in the store; false once quarantined.
    pub committed: bool,
    /// Index of the call in the owning box the binding came through, used to
    /// gate exports across an unfired cut. `None` means head unification.
    pub from_call: Option<u16>,
}

pub struct VarStore {
    cells: Vec<VarCell>,
}

impl VarStore {
    pub fn new() -> Self {
        VarStore { cells: Vec::new() }
    }

    pub fn fresh(&mut self, home: AndId, home_depth: u32, name: Option<Rc<str>>) -> VarId {
        let id = VarId(self.cells.len() as u32);
        self.cells.push(VarCell {
            value: None,
            home,
            home_depth,
            suspensions: Vec::new(),
            name,
        });
        id
    }

    pub fn cell(&self, v: VarId) -> &VarCell {
        &self.cells[v.0 as usize]
    }

    pub fn cell_mut(&mut self, v: VarId) -> &mut VarCell {
        &mut self.cells[v.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Follows bound-variable indirections; the result is an unbound var,
    /// atom, int or compound. Idempotent. No path compression: bindings are
    /// undone on suspension, so shortcuts must not outlive them.
    pub fn deref(&self, t: &Term) -> Term {
        let mut cur = t.clone();
        loop {
            match cur {
                Term::Var(v) => match &self.cells[v.0 as usize].value {
                    Some(next) => cur = next.clone(),
                    None => return Term::Var(v),
                },
                other => return other,
            }
        }
    }

    pub fn is_unbound(&self, v: VarId) -> bool {
        self.cells[v.0 as usize].value.is_none()
    }

    /// True iff the variable's home depth differs from the given box depth.
    /// Equal depth means local.
    pub fn is_external(&self, v: VarId, box_depth: u32) -> bool {
        self.cell(v).home_depth != box_depth
    }

    pub fn add_suspension(&mut self, v: VarId, b: AndId) {
        let cell = self.cell_mut(v);
        if !cell.suspensions.contains(&b) {
            cell.suspensions.push(b);
        }
    }

    pub fn remove_suspension(&mut self, v: VarId, b: AndId) {
        self.cell_mut(v).suspensions.retain(|x| *x != b);
    }
}

impl Default for VarStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Trail of variables bound during one unification, so a failing (or
/// speculative) attempt can be rolled back to a net-zero state.
#[derive(Default)]
pub struct Trail(pub Vec<VarId>);

impl Trail {
    pub fn undo(&mut self, store: &mut VarStore) {
        for v in self.0.drain(..).rev() {
            store.cell_mut(v).value = None;
        }
    }
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub enum UnifyOutcome {
    Success,
    Failure,
}

pub struct Unifier {
    /// Depth of the context and-box; bindings to variables whose home depth
    /// differs are external.
    pub ctx_depth: u32,
    pub trail: Trail,
    /// (var, value) pairs external to the context, in binding order.
    pub externals: Vec<(VarId, Term)>,
}

impl Unifier {
    pub fn new(ctx_depth: u32) -> Self {
        Unifier {
            ctx_depth,
            trail: Trail::default(),
            externals: Vec::new(),
        }
    }

    pub fn bind(&mut self, store: &mut VarStore, v: VarId, t: Term) {
        debug_assert!(store.is_unbound(v));
        store.cell_mut(v).value = Some(t.clone());
        self.trail.0.push(v);
        let home_depth = store.cell(v).home_depth;
        if home_depth != self.ctx_depth {
            debug_assert!(
                home_depth < self.ctx_depth,
                "binding can only cross ancestor lines"
            );
            self.externals.push((v, t));
        }
    }

    /// Structural unification without occurs-check. Variable-variable
    /// bindings make the deeper-home variable reference the shallower one.
    pub fn unify(&mut self, store: &mut VarStore, a: &Term, b: &Term) -> UnifyOutcome {
        let mut work = vec![(a.clone(), b.clone())];
        while let Some((x, y)) = work.pop() {
            let x = store.deref(&x);
            let y = store.deref(&y);
            match (x, y) {
                (Term::Var(v), Term::Var(w)) => {
                    if v == w {
                        continue;
                    }
                    let dv = store.cell(v).home_depth;
                    let dw = store.cell(w).home_depth;
                    if dv > dw {
                        self.bind(store, v, Term::Var(w));
                    } else if dw > dv {
                        self.bind(store, w, Term::Var(v));
                    } else {
                        // Same depth: only reachable within one box; bind the
                        // younger cell so references point at older ones.
                        if v.0 > w.0 {
                            self.bind(store, v, Term::Var(w));
                        } else {
                            self.bind(store, w, Term::Var(v));
                        }
                    }
                }
                (Term::Var(v), t) | (t, Term::Var(v)) => {
                    self.bind(store, v, t);
                }
                (Term::Atom(p), Term::Atom(q)) => {
                    if p != q {
                        return UnifyOutcome::Failure;
                    }
                }
                (Term::Int(p), Term::Int(q)) => {
                    if p != q {
                        return UnifyOutcome::Failure;
                    }
                }
                (Term::Compound(f, xs), Term::Compound(g, ys)) => {
                    if f != g || xs.len() != ys.len() {
                        return UnifyOutcome::Failure;
                    }
                    for (xi, yi) in xs.iter().zip(ys.iter()).rev() {
                        work.push((xi.clone(), yi.clone()));
                    }
                }
                _ => return UnifyOutcome::Failure,
            }
        }
        UnifyOutcome::Success
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::AndId;

    const BOX0: AndId = AndId { index: 0, gen: 0 };

    fn unify_at(
        store: &mut VarStore,
        depth: u32,
        a: &Term,
        b: &Term,
    ) -> (UnifyOutcome, Vec<(VarId, Term)>, Trail) {
        let mut u = Unifier::new(depth);
        let out = u.unify(store, a, b);
        (out, u.externals, u.trail)
    }

    #[test]
    fn deref_unbound_is_identity() {
        let mut store = VarStore::new();
        let x = store.fresh(BOX0, 0, None);
        assert_eq!(store.deref(&Term::Var(x)), Term::Var(x));
    }

    #[test]
    fn deref_collapses_chains() {
        let mut store = VarStore::new();
        let mut i = Interner::default();
        let f = i.intern("f");
        let x = store.fresh(BOX0, 0, None);
        let y = store.fresh(BOX0, 0, None);
        let t = Term::compound(f, vec![Term::Int(1)]);
        store.cell_mut(y).value = Some(t.clone());
        store.cell_mut(x).value = Some(Term::Var(y));
        assert_eq!(store.deref(&Term::Var(x)), t);
        let d = store.deref(&Term::Var(x));
        assert_eq!(store.deref(&d), d);
    }

    #[test]
    fn atoms_unify_and_clash() {
        let mut store = VarStore::new();
        let mut i = Interner::default();
        let a = Term::Atom(i.intern("a"));
        let b = Term::Atom(i.intern("b"));
        let (out, ext, _) = unify_at(&mut store, 0, &a, &a);
        assert_eq!(out, UnifyOutcome::Success);
        assert!(ext.is_empty());
        let (out, _, _) = unify_at(&mut store, 0, &a, &b);
        assert_eq!(out, UnifyOutcome::Failure);
    }

    #[test]
    fn failure_rolls_back_everything() {
        let mut store = VarStore::new();
        let mut i = Interner::default();
        let f = i.intern("f");
        let x = store.fresh(BOX0, 0, None);
        let y = store.fresh(BOX0, 0, None);
        // f(X, a) vs f(1, b): X:=1 then clash; trail undo must clear X.
        let a = Term::compound(f, vec![Term::Var(x), Term::Atom(i.intern("a"))]);
        let b = Term::compound(f, vec![Term::Int(1), Term::Atom(i.intern("b"))]);
        let (out, _, mut trail) = unify_at(&mut store, 0, &a, &b);
        assert_eq!(out, UnifyOutcome::Failure);
        trail.undo(&mut store);
        assert!(store.is_unbound(x));
        assert!(store.is_unbound(y));
    }

    #[test]
    fn compound_unification_binds_both_sides() {
        let mut store = VarStore::new();
        let mut i = Interner::default();
        let f = i.intern("f");
        let x = store.fresh(BOX0, 0, None);
        let y = store.fresh(BOX0, 0, None);
        // unify(f(X,1), f(2,Y)) => X=2, Y=1
        let a = Term::compound(f, vec![Term::Var(x), Term::Int(1)]);
        let b = Term::compound(f, vec![Term::Int(2), Term::Var(y)]);
        let (out, ext, _) = unify_at(&mut store, 0, &a, &b);
        assert_eq!(out, UnifyOutcome::Success);
        assert!(ext.is_empty());
        assert_eq!(store.deref(&Term::Var(x)), Term::Int(2));
        assert_eq!(store.deref(&Term::Var(y)), Term::Int(1));
    }

    #[test]
    fn deeper_home_references_shallower() {
        let mut store = VarStore::new();
        // X at depth 1, Y at depth 2; unifying in a depth-2 box binds Y := X.
        let x = store.fresh(BOX0, 1, None);
        let y = store.fresh(AndId { index: 1, gen: 0 }, 2, None);
        let (out, ext, _) = unify_at(&mut store, 2, &Term::Var(x), &Term::Var(y));
        assert_eq!(out, UnifyOutcome::Success);
        assert!(ext.is_empty(), "binding the local variable is not external");
        assert!(store.is_unbound(x));
        assert_eq!(store.cell(y).value, Some(Term::Var(x)));
    }

    #[test]
    fn binding_shallower_var_is_external() {
        let mut store = VarStore::new();
        let x = store.fresh(BOX0, 1, None);
        let (out, ext, _) = unify_at(&mut store, 3, &Term::Var(x), &Term::Int(7));
        assert_eq!(out, UnifyOutcome::Success);
        assert_eq!(ext.len(), 1);
        assert_eq!(ext[0].0, x);
    }
}
