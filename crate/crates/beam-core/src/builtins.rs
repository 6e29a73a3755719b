//! The builtin predicates needed by the benchmark corpus, with
//! suspension-aware evaluation: arithmetic waits for ground operands,
//! write/nl wait until their box is leftmost.

use std::fmt;

use crate::term::{Sym, Term, VarId, VarStore};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BuiltinTag {
    Unify,   // =
    Le,      // =<
    Lt,      // <
    Gt,      // >
    Ge,      // >=
    ArithEq, // =:=
    ArithNe, // =\=
    Is,
    True,
    Fail,
    Write,
    Nl,
}

impl BuiltinTag {
    pub fn lookup(name: &str, arity: usize) -> Option<BuiltinTag> {
        use BuiltinTag::*;
        Some(match (name, arity) {
            ("=", 2) => Unify,
            ("=<", 2) => Le,
            ("<", 2) => Lt,
            (">", 2) => Gt,
            (">=", 2) => Ge,
            ("=:=", 2) => ArithEq,
            ("=\\=", 2) => ArithNe,
            ("is", 2) => Is,
            ("true", 0) => True,
            ("fail", 0) => Fail,
            ("write", 1) => Write,
            ("nl", 0) => Nl,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        use BuiltinTag::*;
        match self {
            Unify => "=",
            Le => "=<",
            Lt => "<",
            Gt => ">",
            Ge => ">=",
            ArithEq => "=:=",
            ArithNe => "=\\=",
            Is => "is",
            True => "true",
            Fail => "fail",
            Write => "write",
            Nl => "nl",
        }
    }

    pub fn arity(&self) -> usize {
        use BuiltinTag::*;
        match self {
            True | Fail | Nl => 0,
            Write => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for BuiltinTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of evaluating an arithmetic expression.
pub enum Eval {
    Int(i64),
    /// Unbound variables found while evaluating; caller suspends on them.
    Unbound(Vec<VarId>),
    /// Non-numeric ground operand: aborts the run with a diagnostic.
    TypeError(String),
}

/// Evaluates an integer expression over + - * // mod.
pub fn eval_arith(store: &VarStore, names: &dyn Fn(Sym) -> String, t: &Term) -> Eval {
    match store.deref(t) {
        Term::Int(n) => Eval::Int(n),
        Term::Var(v) => Eval::Unbound(vec![v]),
        Term::Atom(a) => Eval::TypeError(format!("non-numeric operand `{}`", names(a))),
        Term::Compound(f, args) => {
            let fname = names(f);
            if args.len() != 2 {
                return Eval::TypeError(format!("unknown arithmetic functor `{}`", fname));
            }
            let lhs = eval_arith(store, names, &args[0]);
            let rhs = eval_arith(store, names, &args[1]);
            match (lhs, rhs) {
                (Eval::TypeError(e), _) | (_, Eval::TypeError(e)) => Eval::TypeError(e),
                (Eval::Unbound(mut a), Eval::Unbound(b)) => {
                    for v in b {
                        if !a.contains(&v) {
                            a.push(v);
                        }
                    }
                    Eval::Unbound(a)
                }
                (Eval::Unbound(a), _) | (_, Eval::Unbound(a)) => Eval::Unbound(a),
                (Eval::Int(a), Eval::Int(b)) => match fname.as_str() {
                    "+" => Eval::Int(a.wrapping_add(b)),
                    "-" => Eval::Int(a.wrapping_sub(b)),
                    "*" => Eval::Int(a.wrapping_mul(b)),
                    "//" => {
                        if b == 0 {
                            Eval::TypeError("integer division by zero".into())
                        } else {
                            Eval::Int(a.wrapping_div(b))
                        }
                    }
                    "mod" => {
                        if b == 0 {
                            Eval::TypeError("mod by zero".into())
                        } else {
                            Eval::Int(a.rem_euclid(b))
                        }
                    }
                    other => Eval::TypeError(format!("unknown arithmetic functor `{}`", other)),
                },
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::Interner;
    use crate::tree::AndId;

    #[test]
    fn ground_arithmetic() {
        let store = VarStore::new();
        let mut i = Interner::default();
        let plus = i.intern("+");
        let t = Term::compound(plus, vec![Term::Int(3), Term::Int(4)]);
        match eval_arith(&store, &|s| i.name(s).to_string(), &t) {
            Eval::Int(7) => {}
            _ => panic!("expected 7"),
        }
    }

    #[test]
    fn unbound_collects_vars() {
        let mut store = VarStore::new();
        let mut i = Interner::default();
        let plus = i.intern("+");
        let x = store.fresh(AndId { index: 0, gen: 0 }, 0, None);
        let t = Term::compound(plus, vec![Term::Var(x), Term::Int(4)]);
        match eval_arith(&store, &|s| i.name(s).to_string(), &t) {
            Eval::Unbound(vs) => assert_eq!(vs, vec![x]),
            _ => panic!("expected unbound"),
        }
    }

    #[test]
    fn type_error_on_atom() {
        let store = VarStore::new();
        let mut i = Interner::default();
        let t = Term::Atom(i.intern("a"));
        assert!(matches!(
            eval_arith(&store, &|s| i.name(s).to_string(), &t),
            Eval::TypeError(_)
        ));
    }
}
