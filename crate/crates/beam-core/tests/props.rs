//! Property suites for the term store and the tree machinery.

use proptest::prelude::*;

use beam_core::term::{Term, Trail, Unifier, UnifyOutcome, VarId, VarStore};
use beam_core::tree::AndId;

const BOXES: [AndId; 4] = [
    AndId { index: 0, gen: 0 },
    AndId { index: 1, gen: 0 },
    AndId { index: 2, gen: 0 },
    AndId { index: 3, gen: 0 },
];

/// A small random term over up to `nvars` pre-created variables.
fn arb_term(nvars: usize) -> impl Strategy<Value = TermSpec> {
    let leaf = prop_oneof![
        (0..nvars).prop_map(TermSpec::Var),
        (0..3u32).prop_map(TermSpec::Atom),
        (-5i64..5).prop_map(TermSpec::Int),
    ];
    leaf.prop_recursive(3, 16, 3, |inner| {
        (0..2u32, prop::collection::vec(inner, 1..3))
            .prop_map(|(f, args)| TermSpec::Comp(f, args))
    })
}

#[derive(Clone, Debug)]
enum TermSpec {
    Var(usize),
    Atom(u32),
    Int(i64),
    Comp(u32, Vec<TermSpec>),
}

fn build(spec: &TermSpec, vars: &[VarId]) -> Term {
    match spec {
        TermSpec::Var(i) => Term::Var(vars[*i % vars.len()]),
        TermSpec::Atom(a) => Term::Atom(beam_core::term::Sym(*a)),
        TermSpec::Int(n) => Term::Int(*n),
        TermSpec::Comp(f, args) => Term::Compound(
            beam_core::term::Sym(100 + *f),
            args.iter().map(|a| build(a, vars)).collect::<Vec<_>>().into(),
        ),
    }
}

proptest! {
    /// Rollback totality: after undoing every trail in reverse creation
    /// order, the store equals its initial (all-unbound) state.
    #[test]
    fn rollback_totality(pairs in prop::collection::vec((arb_term(8), arb_term(8)), 1..8)) {
        let mut store = VarStore::new();
        let vars: Vec<VarId> = (0..8)
            .map(|i| store.fresh(BOXES[i % 4], (i % 4) as u32, None))
            .collect();
        let mut trails: Vec<Trail> = Vec::new();
        for (a, b) in &pairs {
            let ta = build(a, &vars);
            let tb = build(b, &vars);
            // Bindings cross ancestor lines only; use the deepest context.
            let mut u = Unifier::new(8);
            let _ = u.unify(&mut store, &ta, &tb);
            trails.push(u.trail);
        }
        for mut t in trails.into_iter().rev() {
            t.undo(&mut store);
        }
        for v in &vars {
            prop_assert!(store.is_unbound(*v), "{:?} still bound", v);
        }
    }

    /// Direction discipline: after any successful unification, no variable
    /// with a shallower home references one with a deeper home.
    #[test]
    fn direction_discipline(pairs in prop::collection::vec((arb_term(8), arb_term(8)), 1..8)) {
        let mut store = VarStore::new();
        let vars: Vec<VarId> = (0..8)
            .map(|i| store.fresh(BOXES[i % 4], (i % 4) as u32, None))
            .collect();
        for (a, b) in &pairs {
            let ta = build(a, &vars);
            let tb = build(b, &vars);
            let mut u = Unifier::new(8);
            if u.unify(&mut store, &ta, &tb) == UnifyOutcome::Failure {
                u.trail.undo(&mut store);
            }
        }
        for v in &vars {
            let cell = store.cell(*v);
            if let Some(Term::Var(w)) = &cell.value {
                let wd = store.cell(*w).home_depth;
                prop_assert!(
                    wd <= cell.home_depth,
                    "{:?} (depth {}) references deeper {:?} (depth {})",
                    v, cell.home_depth, w, wd
                );
            }
        }
    }

    /// The engine's unifier agrees with the independent reference
    /// interpreter on success/failure and on the resulting substitution,
    /// checked through `=`/2 queries over ground-or-local terms.
    #[test]
    fn unify_equivalence_via_queries(a in arb_term(4), b in arb_term(4)) {
        fn spec_to_text(s: &TermSpec, buf: &mut String) {
            match s {
                TermSpec::Var(i) => buf.push_str(&format!("V{}", i % 4)),
                TermSpec::Atom(a) => buf.push_str(&format!("k{}", a)),
                TermSpec::Int(n) => buf.push_str(&format!("({})", n)),
                TermSpec::Comp(f, args) => {
                    buf.push_str(&format!("f{}(", f));
                    for (i, x) in args.iter().enumerate() {
                        if i > 0 { buf.push(','); }
                        spec_to_text(x, buf);
                    }
                    buf.push(')');
                }
            }
        }
        let mut goal = String::new();
        spec_to_text(&a, &mut goal);
        goal.push_str(" = ");
        spec_to_text(&b, &mut goal);
        let db = beam_core::parse_program("t.").unwrap();
        let q = beam_core::parse_query(&goal).unwrap();
        let mut sink = beam_core::trace::TraceSink::disabled();
        let opts = beam_core::manager::EngineOpts::default();
        let out = beam_core::manager::run_query(&db, &q, &opts, &mut sink).unwrap();
        let got: Vec<String> = out.answers.iter().map(|x| x.canonical()).collect();
        let sld = beam_core::oracle::sld_solve(&db, &q, &beam_core::oracle::SldOpts::default());
        let beam_core::oracle::SldResult::Answers(expected) = sld.result else {
            panic!("oracle exceeded");
        };
        prop_assert!(beam_core::oracle::same_answers(got.clone(), expected.clone()),
            "goal {}\nengine {:?}\nsld {:?}", goal, got, expected);
    }
}

/// Reference-model check of the suspension list: adds, wakes and removals
/// against a plain vector model.
#[test]
fn suspension_list_matches_reference_model() {
    use beam_core::tree::{AndBox, SuspendReason, Tree};
    let mut tree = Tree::new();
    let mut boxes = Vec::new();
    for _ in 0..8 {
        boxes.push(tree.new_and(AndBox {
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
        }));
    }
    let mut model: Vec<usize> = Vec::new();
    let ops: [(u8, usize); 12] = [
        (0, 0),
        (0, 1),
        (0, 2),
        (1, 2), // wake 2 -> front
        (0, 3),
        (1, 1), // wake 1 -> front
        (2, 0), // remove 0
        (0, 4),
        (1, 3),
        (2, 2),
        (0, 5),
        (1, 4),
    ];
    for (op, i) in ops {
        match op {
            0 => {
                tree.add_suspension(boxes[i], SuspendReason::WaitingLeftmost);
                model.push(i);
            }
            1 => {
                tree.wake_entry(boxes[i]);
                let pos = model.iter().position(|x| *x == i).unwrap();
                model.remove(pos);
                model.insert(0, i);
            }
            _ => {
                tree.remove_suspension(boxes[i]);
                model.retain(|x| *x != i);
            }
        }
        let got: Vec<usize> = tree
            .suspension
            .iter()
            .map(|b| boxes.iter().position(|x| x == b).unwrap())
            .collect();
        assert_eq!(got, model);
    }
}
