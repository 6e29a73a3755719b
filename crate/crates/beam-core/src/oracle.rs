//! Independent correctness references: a plain SLD-resolution interpreter
//! (depth-bounded, leftmost selection, clause order, standard cut), and a
//! configuration-level checker that replays rule traces against their
//! preconditions.
//!
//! Nothing here shares unification or term machinery with the engine; the
//! interpreter works on its own term representation with its own binding
//! store.

use std::collections::HashMap;
use std::rc::Rc;

use crate::front::{BodyItem, Database, Query, RawTerm};
use crate::trace::TraceEvent;

// ---------------------------------------------------------------------------
// SLD interpreter
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum OTerm {
    Var(usize),
    Atom(Rc<str>),
    Int(i64),
    Comp(Rc<str>, Rc<Vec<OTerm>>),
}

#[derive(Debug)]
pub enum SldResult {
    Answers(Vec<String>),
    DepthExceeded,
}

pub struct SldOpts {
    pub step_bound: u64,
    pub max_answers: Option<usize>,
}

impl Default for SldOpts {
    fn default() -> Self {
        SldOpts {
            step_bound: 1_000_000,
            max_answers: None,
        }
    }
}

struct Clause {
    head: OTerm,
    body: Vec<BodyGoal>,
}

#[derive(Clone)]
enum BodyGoal {
    Call(OTerm),
    Cut,
}

struct Sld<'p> {
    preds: HashMap<(Rc<str>, usize), Vec<Rc<Clause>>>,
    store: Vec<Option<OTerm>>,
    trail: Vec<usize>,
    steps: u64,
    bound: u64,
    answers: Vec<String>,
    output: String,
    qvars: &'p [(String, usize)],
    max_answers: Option<usize>,
    exceeded: bool,
    next_scope: usize,
}

enum Flow {
    /// Keep enumerating alternatives.
    Backtrack,
    /// A cut fired; unwind clause choices up to the given scope.
    CutTo(usize),
    /// Enough answers collected (or the bound was hit).
    Stop,
}

#[derive(Clone)]
enum Item {
    Goal(OTerm, usize),
    CutGoal(usize),
}

type Goals = Option<Rc<GoalsNode>>;

struct GoalsNode {
    item: Item,
    rest: Goals,
}

fn push_goals(rest: &Goals, items: &[Item]) -> Goals {
    let mut out = rest.clone();
    for item in items.iter().rev() {
        out = Some(Rc::new(GoalsNode {
            item: item.clone(),
            rest: out,
        }));
    }
    out
}

impl<'p> Sld<'p> {
    fn walk(&self, t: &OTerm) -> OTerm {
        let mut cur = t.clone();
        while let OTerm::Var(v) = cur {
            match &self.store[v] {
                Some(next) => cur = next.clone(),
                None => return OTerm::Var(v),
            }
        }
        cur
    }

    fn bind(&mut self, v: usize, t: OTerm) {
        self.store[v] = Some(t);
        self.trail.push(v);
    }

    fn undo_to(&mut self, mark: usize) {
        while self.trail.len() > mark {
            let v = self.trail.pop().unwrap();
            self.store[v] = None;
        }
    }

    fn unify(&mut self, a: &OTerm, b: &OTerm) -> bool {
        let a = self.walk(a);
        let b = self.walk(b);
        match (a, b) {
            (OTerm::Var(x), OTerm::Var(y)) => {
                if x != y {
                    self.bind(x, OTerm::Var(y));
                }
                true
            }
            (OTerm::Var(x), t) | (t, OTerm::Var(x)) => {
                self.bind(x, t);
                true
            }
            (OTerm::Atom(p), OTerm::Atom(q)) => p == q,
            (OTerm::Int(p), OTerm::Int(q)) => p == q,
            (OTerm::Comp(f, xs), OTerm::Comp(g, ys)) => {
                if f != g || xs.len() != ys.len() {
                    return false;
                }
                for (x, y) in xs.iter().zip(ys.iter()) {
                    if !self.unify(&x.clone(), &y.clone()) {
                        return false;
                    }
                }
                true
            }
            _ => false,
        }
    }

    fn rename(&mut self, t: &OTerm, map: &mut HashMap<usize, usize>) -> OTerm {
        match t {
            OTerm::Var(v) => {
                let nv = *map.entry(*v).or_insert_with(|| {
                    self.store.push(None);
                    self.store.len() - 1
                });
                OTerm::Var(nv)
            }
            OTerm::Atom(_) | OTerm::Int(_) => t.clone(),
            OTerm::Comp(f, args) => {
                let renamed: Vec<OTerm> = args
                    .iter()
                    .map(|a| {
                        let copy = a.clone();
                        self.rename(&copy, map)
                    })
                    .collect();
                OTerm::Comp(f.clone(), Rc::new(renamed))
            }
        }
    }

    fn eval(&mut self, t: &OTerm) -> Result<Option<i64>, String> {
        match self.walk(t) {
            OTerm::Int(n) => Ok(Some(n)),
            OTerm::Var(_) => Ok(None),
            OTerm::Atom(a) => Err(format!("non-numeric operand `{}`", a)),
            OTerm::Comp(f, args) => {
                if args.len() != 2 {
                    return Err(format!("unknown arithmetic functor `{}`", f));
                }
                let (Some(a), Some(b)) = (self.eval(&args[0].clone())?, self.eval(&args[1].clone())?)
                else {
                    return Ok(None);
                };
                match &*f {
                    "+" => Ok(Some(a.wrapping_add(b))),
                    "-" => Ok(Some(a.wrapping_sub(b))),
                    "*" => Ok(Some(a.wrapping_mul(b))),
                    "//" => {
                        if b == 0 {
                            Err("division by zero".into())
                        } else {
                            Ok(Some(a.wrapping_div(b)))
                        }
                    }
                    "mod" => {
                        if b == 0 {
                            Err("mod by zero".into())
                        } else {
                            Ok(Some(a.rem_euclid(b)))
                        }
                    }
                    other => Err(format!("unknown arithmetic functor `{}`", other)),
                }
            }
        }
    }

    fn solve(&mut self, goals: &Goals) -> Flow {
        if self.exceeded {
            return Flow::Stop;
        }
        let Some(node) = goals else {
            self.record_answer();
            if let Some(max) = self.max_answers {
                if self.answers.len() >= max {
                    return Flow::Stop;
                }
            }
            return Flow::Backtrack;
        };
        let rest = node.rest.clone();
        match &node.item {
            Item::CutGoal(scope) => {
                let scope = *scope;
                match self.solve(&rest) {
                    Flow::Backtrack => Flow::CutTo(scope),
                    Flow::CutTo(s) => Flow::CutTo(s.min(scope)),
                    Flow::Stop => Flow::Stop,
                }
            }
            Item::Goal(t, scope) => {
                let scope = *scope;
                let t = self.walk(t);
                match &t {
                    OTerm::Atom(name) => {
                        let name = name.clone();
                        self.solve_call(name, &[], &t, scope, &rest)
                    }
                    OTerm::Comp(name, args) => {
                        let name = name.clone();
                        let args = args.as_ref().clone();
                        self.solve_call(name, &args, &t, scope, &rest)
                    }
                    _ => Flow::Backtrack,
                }
            }
        }
    }

    fn solve_call(
        &mut self,
        name: Rc<str>,
        args: &[OTerm],
        goal: &OTerm,
        _scope: usize,
        rest: &Goals,
    ) -> Flow {
        match (&*name, args.len()) {
            ("true", 0) => return self.solve(rest),
            ("fail", 0) => return Flow::Backtrack,
            ("=", 2) => {
                let mark = self.trail.len();
                let (a, b) = (args[0].clone(), args[1].clone());
                let r = if self.unify(&a, &b) {
                    self.solve(rest)
                } else {
                    Flow::Backtrack
                };
                self.undo_to(mark);
                return r;
            }
            ("is", 2) => {
                let rhs = match self.eval(&args[1]) {
                    Ok(Some(n)) => n,
                    _ => return Flow::Backtrack,
                };
                let mark = self.trail.len();
                let lhs = args[0].clone();
                let r = if self.unify(&lhs, &OTerm::Int(rhs)) {
                    self.solve(rest)
                } else {
                    Flow::Backtrack
                };
                self.undo_to(mark);
                return r;
            }
            ("<", 2) | (">", 2) | ("=<", 2) | (">=", 2) | ("=:=", 2) | ("=\\=", 2) => {
                let (Ok(Some(a)), Ok(Some(b))) = (self.eval(&args[0]), self.eval(&args[1]))
                else {
                    return Flow::Backtrack;
                };
                let ok = match &*name {
                    "<" => a < b,
                    ">" => a > b,
                    "=<" => a <= b,
                    ">=" => a >= b,
                    "=:=" => a == b,
                    "=\\=" => a != b,
                    _ => unreachable!(),
                };
                return if ok { self.solve(rest) } else { Flow::Backtrack };
            }
            ("write", 1) => {
                let s = self.print(&args[0], &mut HashMap::new());
                self.output.push_str(&s);
                return self.solve(rest);
            }
            ("nl", 0) => {
                self.output.push('\n');
                return self.solve(rest);
            }
            _ => {}
        }
        let key = (name.clone(), args.len());
        let Some(clauses) = self.preds.get(&key).cloned() else {
            return Flow::Backtrack;
        };
        self.next_scope += 1;
        let my_scope = self.next_scope;
        for clause in clauses {
            self.steps += 1;
            if self.steps > self.bound {
                self.exceeded = true;
                return Flow::Stop;
            }
            let mark = self.trail.len();
            let mut map = HashMap::new();
            let head = self.rename(&clause.head, &mut map);
            if self.unify(&head, goal) {
                let items: Vec<Item> = clause
                    .body
                    .iter()
                    .map(|g| match g {
                        BodyGoal::Call(t) => {
                            let t = t.clone();
                            let renamed = self.rename(&t, &mut map);
                            Item::Goal(renamed, my_scope)
                        }
                        BodyGoal::Cut => Item::CutGoal(my_scope),
                    })
                    .collect();
                let goals = push_goals(rest, &items);
                match self.solve(&goals) {
                    Flow::Backtrack => {}
                    Flow::CutTo(s) if s == my_scope => {
                        self.undo_to(mark);
                        return Flow::Backtrack;
                    }
                    Flow::CutTo(s) => {
                        self.undo_to(mark);
                        return Flow::CutTo(s);
                    }
                    Flow::Stop => return Flow::Stop,
                }
            }
            self.undo_to(mark);
        }
        Flow::Backtrack
    }

    fn record_answer(&mut self) {
        let mut names: HashMap<usize, String> = HashMap::new();
        if self.qvars.is_empty() {
            self.answers.push("true".to_string());
            return;
        }
        let parts: Vec<String> = self
            .qvars
            .iter()
            .map(|(n, v)| format!("{} = {}", n, self.print(&OTerm::Var(*v), &mut names)))
            .collect();
        self.answers.push(parts.join(", "));
    }

    fn print(&self, t: &OTerm, names: &mut HashMap<usize, String>) -> String {
        fn var_name(k: usize) -> String {
            let letter = (b'A' + (k % 26) as u8) as char;
            if k < 26 {
                format!("_{}", letter)
            } else {
                format!("_{}{}", letter, k / 26)
            }
        }
        match self.walk(t) {
            OTerm::Var(v) => {
                let k = names.len();
                names.entry(v).or_insert_with(|| var_name(k)).clone()
            }
            OTerm::Int(n) => n.to_string(),
            OTerm::Atom(a) => a.to_string(),
            OTerm::Comp(f, args) => {
                if &*f == "." && args.len() == 2 {
                    let mut out = String::from("[");
                    out.push_str(&self.print(&args[0], names));
                    let mut tail = self.walk(&args[1]);
                    loop {
                        match tail {
                            OTerm::Atom(ref a) if &**a == "[]" => break,
                            OTerm::Comp(ref f2, ref a2) if &**f2 == "." && a2.len() == 2 => {
                                out.push(',');
                                let head = a2[0].clone();
                                out.push_str(&self.print(&head, names));
                                tail = self.walk(&a2[1].clone());
                            }
                            other => {
                                out.push('|');
                                out.push_str(&self.print(&other, names));
                                break;
                            }
                        }
                    }
                    out.push(']');
                    out
                } else {
                    let mut out = format!("{}(", f);
                    for (i, a) in args.iter().enumerate() {
                        if i > 0 {
                            out.push(',');
                        }
                        out.push_str(&self.print(a, names));
                    }
                    out.push(')');
                    out
                }
            }
        }
    }
}

fn convert(
    t: &RawTerm,
    vars: &mut HashMap<String, usize>,
    store: &mut Vec<Option<OTerm>>,
) -> OTerm {
    match t {
        RawTerm::Var(v) => {
            let id = *vars.entry(v.clone()).or_insert_with(|| {
                store.push(None);
                store.len() - 1
            });
            OTerm::Var(id)
        }
        RawTerm::Atom(a) => OTerm::Atom(Rc::from(a.as_str())),
        RawTerm::Int(n) => OTerm::Int(*n),
        RawTerm::Compound(f, args) => OTerm::Comp(
            Rc::from(f.as_str()),
            Rc::new(args.iter().map(|a| convert(a, vars, store)).collect()),
        ),
    }
}

pub struct SldOutcome {
    pub result: SldResult,
    pub output: String,
}

/// Complete enumeration (leftmost selection, clause order, standard cut
/// semantics) within the step bound.
pub fn sld_solve(db: &Database, query: &Query, opts: &SldOpts) -> SldOutcome {
    let mut store: Vec<Option<OTerm>> = Vec::new();
    let mut preds: HashMap<(Rc<str>, usize), Vec<Rc<Clause>>> = HashMap::new();
    for key in &db.order {
        let p = &db.preds[key];
        let mut list = Vec::new();
        for c in &p.clauses {
            let mut vars = HashMap::new();
            let head = convert(&c.head, &mut vars, &mut store);
            let body: Vec<BodyGoal> = c
                .body
                .iter()
                .filter_map(|item| match item {
                    BodyItem::Goal(g) => Some(BodyGoal::Call(convert(g, &mut vars, &mut store))),
                    BodyItem::Cut | BodyItem::Commit => Some(BodyGoal::Cut),
                    BodyItem::SeqBarrier => None,
                })
                .collect();
            list.push(Rc::new(Clause { head, body }));
        }
        preds.insert((Rc::from(p.name.as_str()), p.arity), list);
    }
    let mut qvar_map: HashMap<String, usize> = HashMap::new();
    let mut items: Vec<Item> = Vec::new();
    for item in &query.body {
        match item {
            BodyItem::Goal(g) => {
                items.push(Item::Goal(convert(g, &mut qvar_map, &mut store), 0));
            }
            BodyItem::Cut | BodyItem::Commit => items.push(Item::CutGoal(0)),
            BodyItem::SeqBarrier => {}
        }
    }
    let qvars: Vec<(String, usize)> = query
        .vars
        .iter()
        .map(|n| (n.clone(), qvar_map[n]))
        .collect();
    let mut sld = Sld {
        preds,
        store,
        trail: Vec::new(),
        steps: 0,
        bound: opts.step_bound,
        answers: Vec::new(),
        output: String::new(),
        qvars: &qvars,
        max_answers: opts.max_answers,
        exceeded: false,
        next_scope: 0,
    };
    let goals = push_goals(&None, &items);
    let _ = sld.solve(&goals);
    let result = if sld.exceeded {
        SldResult::DepthExceeded
    } else {
        SldResult::Answers(sld.answers)
    };
    SldOutcome {
        result,
        output: sld.output,
    }
}

/// Canonical multiset comparison of answer sets.
pub fn same_answers(mut a: Vec<String>, mut b: Vec<String>) -> bool {
    a.sort();
    b.sort();
    a == b
}

// ---------------------------------------------------------------------------
// Trace auditor
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Violation {
    pub step: u64,
    pub rule: String,
    pub message: String,
}

struct MBox {
    has_unfired_cut: bool,
    parent_or: Option<u64>,
    children: Vec<u64>, // or-boxes
}

struct MOr {
    parent_box: u64,
    live: usize,
    children: Vec<u64>, // and-boxes
}

#[derive(Default)]
struct Mirror {
    boxes: HashMap<u64, MBox>,
    ors: HashMap<u64, MOr>,
    /// Or-box emptied by the previous event; its parent must fail next.
    fail_obligation: Option<u64>,
}

impl Mirror {
    fn remove_box(&mut self, b: u64) {
        if let Some(mb) = self.boxes.remove(&b) {
            for o in mb.children {
                self.remove_or(o);
            }
        }
    }

    fn remove_or(&mut self, o: u64) {
        if let Some(mo) = self.ors.remove(&o) {
            for b in mo.children {
                self.remove_box(b);
            }
        }
    }

    fn subtree_has_cut(&self, b: u64) -> bool {
        let Some(mb) = self.boxes.get(&b) else {
            return false;
        };
        if mb.has_unfired_cut {
            return true;
        }
        for o in &mb.children {
            if let Some(mo) = self.ors.get(o) {
                for c in &mo.children {
                    if self.subtree_has_cut(*c) {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn clone_subtree(
        &mut self,
        old_b: u64,
        and_map: &HashMap<u64, u64>,
        or_map: &HashMap<u64, u64>,
    ) {
        let Some(mb) = self.boxes.get(&old_b) else {
            return;
        };
        let new_b = *and_map.get(&old_b).unwrap_or(&old_b);
        let new_box = MBox {
            has_unfired_cut: mb.has_unfired_cut,
            parent_or: mb.parent_or.map(|o| *or_map.get(&o).unwrap_or(&o)),
            children: mb
                .children
                .iter()
                .map(|o| *or_map.get(o).unwrap_or(o))
                .collect(),
        };
        let child_ors = mb.children.clone();
        self.boxes.insert(new_b, new_box);
        for o in child_ors {
            if let Some(mo) = self.ors.get(&o) {
                let new_o = *or_map.get(&o).unwrap_or(&o);
                let cloned = MOr {
                    parent_box: new_b,
                    live: mo.live,
                    children: mo
                        .children
                        .iter()
                        .map(|c| *and_map.get(c).unwrap_or(c))
                        .collect(),
                };
                let grand = mo.children.clone();
                self.ors.insert(new_o, cloned);
                for c in grand {
                    self.clone_subtree(c, and_map, or_map);
                }
            }
        }
    }
}

fn get_u64(v: &serde_json::Value, key: &str) -> Option<u64> {
    v.get(key).and_then(|x| x.as_u64())
}

fn get_bool(v: &serde_json::Value, key: &str) -> Option<bool> {
    v.get(key).and_then(|x| x.as_bool())
}

fn get_pairs(v: &serde_json::Value, key: &str) -> HashMap<u64, u64> {
    v.get(key)
        .and_then(|x| x.as_array())
        .map(|pairs| {
            pairs
                .iter()
                .filter_map(|p| {
                    let a = p.as_array()?;
                    Some((a.first()?.as_u64()?, a.get(1)?.as_u64()?))
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Replays each trace event against the rewrite-rule preconditions on a
/// shadow configuration; reports every illegal application found.
pub fn audit_trace(events: &[TraceEvent], _db: &Database, lazy_strategy: bool) -> Vec<Violation> {
    let mut m = Mirror::default();
    let mut violations: Vec<Violation> = Vec::new();
    for ev in events {
        let mut report = |rule: &str, msg: String| {
            violations.push(Violation {
                step: ev.step,
                rule: rule.to_string(),
                message: msg,
            });
        };
        // Rule priority: once an or-box empties, the parent's failure may
        // not be deferred behind another rule (a gated call_fail is the
        // explicit leftmost-deferral path).
        if let Some(ob) = m.fail_obligation.take() {
            let ok = matches!(ev.rule.as_str(), "fail" | "call_fail");
            if !ok {
                report(
                    &ev.rule,
                    format!(
                        "failure of or-box {}'s parent deferred behind `{}`",
                        ob, ev.rule
                    ),
                );
            }
        }
        match ev.rule.as_str() {
            "reduce" => {
                if let Some(o) = get_u64(&ev.detail, "or_box") {
                    let survivors = get_u64(&ev.detail, "survivors").unwrap_or(0) as usize;
                    let parent = ev.box_id;
                    m.ors.insert(
                        o,
                        MOr {
                            parent_box: parent,
                            live: survivors,
                            children: Vec::new(),
                        },
                    );
                    m.boxes.entry(parent).or_insert(MBox {
                        has_unfired_cut: false,
                        parent_or: None,
                        children: Vec::new(),
                    });
                    m.boxes.get_mut(&parent).unwrap().children.push(o);
                }
            }
            "explore" => {
                let o = get_u64(&ev.detail, "or_box").unwrap_or(0);
                let has_cut = get_bool(&ev.detail, "has_cut").unwrap_or(false);
                m.boxes.insert(
                    ev.box_id,
                    MBox {
                        has_unfired_cut: has_cut,
                        parent_or: Some(o),
                        children: Vec::new(),
                    },
                );
                if let Some(mo) = m.ors.get_mut(&o) {
                    mo.children.push(ev.box_id);
                }
            }
            "suspend" => {
                let sib = get_u64(&ev.detail, "live_siblings").unwrap_or(0);
                if sib < 2 {
                    let gated = m
                        .boxes
                        .get(&ev.box_id)
                        .map(|b| b.has_unfired_cut)
                        .unwrap_or(false);
                    if !gated {
                        report(
                            "suspend",
                            format!("box {} suspended with {} live siblings", ev.box_id, sib),
                        );
                    }
                }
            }
            "fail" => {
                let or = get_u64(&ev.detail, "or_box");
                m.remove_box(ev.box_id);
                if let Some(o) = or {
                    let emptied = {
                        if let Some(mo) = m.ors.get_mut(&o) {
                            mo.children.retain(|c| *c != ev.box_id);
                            mo.live = mo.live.saturating_sub(1);
                            mo.live == 0
                        } else {
                            false
                        }
                    };
                    if emptied {
                        m.fail_obligation = Some(o);
                        let parent = m.ors.get(&o).map(|mo| mo.parent_box);
                        m.remove_or(o);
                        if let Some(p) = parent {
                            if let Some(pb) = m.boxes.get_mut(&p) {
                                pb.children.retain(|c| *c != o);
                            }
                        }
                    }
                }
            }
            "call_fail" => {}
            "promote" => {
                let o = get_u64(&ev.detail, "or_box").unwrap_or(0);
                let claimed = get_u64(&ev.detail, "live_count").unwrap_or(0);
                if claimed != 1 {
                    report("promote", format!("claimed live_count {}", claimed));
                }
                if let Some(mo) = m.ors.get(&o) {
                    if mo.live != 1 {
                        report(
                            "promote",
                            format!(
                                "promotion at or-box {} with {} live alternatives",
                                o, mo.live
                            ),
                        );
                    }
                }
                let compress = get_bool(&ev.detail, "compress").unwrap_or(false);
                if compress {
                    if m.boxes
                        .get(&ev.box_id)
                        .map(|b| b.has_unfired_cut)
                        .unwrap_or(false)
                    {
                        report(
                            "promote",
                            format!("and-compression of cut-carrying box {}", ev.box_id),
                        );
                    }
                    let into = get_u64(&ev.detail, "into").unwrap_or(0);
                    let moved: Vec<u64> = m
                        .boxes
                        .get(&ev.box_id)
                        .map(|b| b.children.clone())
                        .unwrap_or_default();
                    m.boxes.remove(&ev.box_id);
                    let parent = m.ors.get(&o).map(|mo| mo.parent_box);
                    m.ors.remove(&o);
                    if let Some(p) = parent {
                        if let Some(pb) = m.boxes.get_mut(&p) {
                            pb.children.retain(|c| *c != o);
                        }
                    }
                    if let Some(pb) = m.boxes.get_mut(&into) {
                        pb.children.extend(moved.iter().copied());
                    }
                    for oc in moved {
                        if let Some(moo) = m.ors.get_mut(&oc) {
                            moo.parent_box = into;
                        }
                    }
                }
            }
            "true_in_or" => {
                let o = get_u64(&ev.detail, "or_box").unwrap_or(0);
                if let Some(pruned) = ev.detail.get("pruned").and_then(|x| x.as_array()) {
                    for p in pruned {
                        if let Some(pb) = p.as_u64() {
                            m.remove_box(pb);
                            if let Some(mo) = m.ors.get_mut(&o) {
                                mo.children.retain(|c| *c != pb);
                                mo.live = mo.live.saturating_sub(1);
                            }
                        }
                    }
                }
            }
            "success" => {
                let sole = get_bool(&ev.detail, "sole").unwrap_or(true);
                if sole {
                    if let Some(o) = get_u64(&ev.detail, "or_box") {
                        let parent = m.ors.get(&o).map(|mo| mo.parent_box);
                        m.remove_or(o);
                        if let Some(p) = parent {
                            if let Some(pb) = m.boxes.get_mut(&p) {
                                pb.children.retain(|c| *c != o);
                            }
                        }
                    } else {
                        m.remove_box(ev.box_id);
                    }
                }
            }
            "cut" | "commit" => {
                if let Some(mb) = m.boxes.get_mut(&ev.box_id) {
                    mb.has_unfired_cut = false;
                }
                if let Some(pruned) = ev.detail.get("pruned_siblings").and_then(|x| x.as_array()) {
                    for p in pruned {
                        if let Some(pb) = p.as_u64() {
                            let parent_or = m.boxes.get(&pb).and_then(|b| b.parent_or);
                            m.remove_box(pb);
                            if let Some(o) = parent_or {
                                if let Some(mo) = m.ors.get_mut(&o) {
                                    mo.children.retain(|c| *c != pb);
                                    mo.live = mo.live.saturating_sub(1);
                                }
                            }
                        }
                    }
                }
            }
            "split" => {
                if lazy_strategy {
                    let pending = get_bool(&ev.detail, "pending_other_work").unwrap_or(true);
                    let woken = get_bool(&ev.detail, "woken_pending").unwrap_or(true);
                    if pending || woken {
                        report(
                            "split",
                            "split while a non-split rule was applicable".to_string(),
                        );
                    }
                }
                if m.subtree_has_cut(ev.box_id) {
                    report(
                        "split",
                        format!(
                            "split duplicates cut-carrying subtree of box {}",
                            ev.box_id
                        ),
                    );
                }
                if !get_bool(&ev.detail, "subtree_cut_free").unwrap_or(false) {
                    report("split", "split of a cut-carrying box".to_string());
                }
                let and_map = get_pairs(&ev.detail, "copies_and");
                let or_map = get_pairs(&ev.detail, "copies_or");
                m.clone_subtree(ev.box_id, &and_map, &or_map);
                // The copy becomes a new alternative of the split box's
                // parent or-box (or a new top-level configuration).
                if let Some(copy) = get_u64(&ev.detail, "copy") {
                    let parent_or = m.boxes.get(&copy).and_then(|b| b.parent_or);
                    if let Some(po) = parent_or {
                        if let Some(mo) = m.ors.get_mut(&po) {
                            mo.live += 1;
                            mo.children.push(copy);
                        }
                    }
                }
                let o = get_u64(&ev.detail, "or_box").unwrap_or(0);
                let old_live = m.ors.get(&o).map(|mo| mo.live).unwrap_or(1);
                let kept_children: Vec<u64> = m
                    .ors
                    .get(&o)
                    .map(|mo| mo.children.clone())
                    .unwrap_or_default();
                for (i, c) in kept_children.iter().enumerate() {
                    if i > 0 {
                        m.remove_box(*c);
                        if let Some(mo) = m.ors.get_mut(&o) {
                            mo.children.retain(|x| x != c);
                        }
                    }
                }
                if let Some(mo) = m.ors.get_mut(&o) {
                    mo.live = 1;
                }
                if let Some(new_o) = or_map.get(&o) {
                    if let Some(mo) = m.ors.get_mut(new_o) {
                        mo.live = old_live.saturating_sub(1);
                    }
                }
            }
            "det_reduce_promote" | "wake" | "propagate" | "answer" | "deadlock" => {}
            other => {
                report(other, format!("unknown rule `{}`", other));
            }
        }
    }
    violations
}

/// Parses a JSON-lines trace file.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent =
            serde_json::from_str(line).map_err(|e| format!("trace line {}: {}", i + 1, e))?;
        out.push(ev);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::front::{parse_program, parse_query};

    fn solve(src: &str, goal: &str) -> Vec<String> {
        let db = parse_program(src).unwrap();
        let q = parse_query(goal).unwrap();
        match sld_solve(&db, &q, &SldOpts::default()).result {
            SldResult::Answers(mut a) => {
                a.sort();
                a
            }
            SldResult::DepthExceeded => panic!("depth exceeded"),
        }
    }

    const PARENT_DB: &str = "parent(john, richard).\nparent(john, mary).\n\
                             parent(patrick, paul).\nparent(patrick, susan).";

    #[test]
    fn single_answer() {
        assert_eq!(solve(PARENT_DB, "parent(X, mary)"), ["X = john"]);
    }

    #[test]
    fn ancestor_two_answers() {
        let src = "ancestor(X,Y) :- parent(X,Y).\n\
                   ancestor(X,Z) :- parent(X,Y), ancestor(Y,Z).\n\
                   parent(a,fa).\nparent(a,ma).";
        assert_eq!(solve(src, "ancestor(a, Z)"), ["Z = fa", "Z = ma"]);
    }

    #[test]
    fn unsatisfiable_query_is_empty() {
        assert_eq!(solve(PARENT_DB, "parent(mary, X)"), Vec::<String>::new());
    }

    #[test]
    fn cut_semantics_standard() {
        let src = "max(X,Y,X) :- X >= Y, !.\nmax(X,Y,Y) :- X < Y.";
        assert_eq!(solve(src, "max(3,2,M)"), ["M = 3"]);
        let src2 = "p(X) :- q(X), !, r(X).\np(99).\nq(1).\nq(2).\nr(1).";
        assert_eq!(solve(src2, "p(V)"), ["V = 1"]);
    }

    #[test]
    fn arithmetic() {
        assert_eq!(solve("d(X,Y) :- Y is X*2+1.", "d(4, R)"), ["R = 9"]);
    }

    #[test]
    fn depth_bound_reported() {
        let db = parse_program("loop :- loop.").unwrap();
        let q = parse_query("loop").unwrap();
        let opts = SldOpts {
            step_bound: 1000,
            max_answers: None,
        };
        assert!(matches!(
            sld_solve(&db, &q, &opts).result,
            SldResult::DepthExceeded
        ));
    }

    #[test]
    fn forged_promotion_at_two_alternatives_is_violation() {
        let mk = |rule: &str, box_id: u64, detail: serde_json::Value, step: u64| TraceEvent {
            step,
            rule: rule.into(),
            box_id,
            detail,
            stats: Default::default(),
        };
        let events = vec![
            mk(
                "reduce",
                1,
                serde_json::json!({"or_box": 10, "survivors": 2, "pred": "p/1", "call": 0,
                                   "candidates": 2}),
                1,
            ),
            mk(
                "promote",
                2,
                serde_json::json!({"or_box": 10, "into": 1, "live_count": 1, "compress": false}),
                2,
            ),
        ];
        let db = parse_program("p(1).\np(2).").unwrap();
        let v = audit_trace(&events, &db, true);
        assert!(
            v.iter().any(|x| x.message.contains("2 live alternatives")),
            "{:?}",
            v
        );
    }

    #[test]
    fn forged_split_of_cut_box_is_violation() {
        let mk = |rule: &str, box_id: u64, detail: serde_json::Value, step: u64| TraceEvent {
            step,
            rule: rule.into(),
            box_id,
            detail,
            stats: Default::default(),
        };
        let events = vec![
            mk(
                "explore",
                5,
                serde_json::json!({"or_box": 10, "alt": 0, "clause": 0, "has_cut": true}),
                1,
            ),
            mk(
                "split",
                5,
                serde_json::json!({"or_box": 11, "subtree_cut_free": false,
                                   "pending_other_work": false, "woken_pending": false}),
                2,
            ),
        ];
        let db = parse_program("p(1).").unwrap();
        let v = audit_trace(&events, &db, true);
        assert!(v.iter().any(|x| x.message.contains("cut")), "{:?}", v);
    }
}
