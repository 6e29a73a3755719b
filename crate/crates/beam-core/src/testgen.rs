//! Seeded generator of small random Datalog-like programs, used by the
//! property suites (rule-priority audits and oracle-equivalence checks).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomProgram {
    pub source: String,
    pub goal: String,
}

/// Up to three predicates with up to three clauses each; bodies call only
/// defined predicates so runs fail closed-world rather than erroring.
pub fn random_program(seed: u64) -> RandomProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let consts = ["a", "b", "c"];
    let n_preds = rng.gen_range(1..=3);
    let preds: Vec<(String, usize)> = (0..n_preds)
        .map(|i| {
            let name = ["p", "q", "r"][i].to_string();
            let arity = rng.gen_range(1..=2);
            (name, arity)
        })
        .collect();
    let mut src = String::new();
    for (pi, (name, arity)) in preds.iter().enumerate() {
        let n_clauses = rng.gen_range(1..=3);
        for _ in 0..n_clauses {
            let is_fact = pi == preds.len() - 1 || rng.gen_bool(0.5);
            let head_args: Vec<String> = (0..*arity)
                .map(|k| {
                    if is_fact || rng.gen_bool(0.5) {
                        consts[rng.gen_range(0..consts.len())].to_string()
                    } else {
                        format!("X{}", k)
                    }
                })
                .collect();
            let head = format!("{}({})", name, head_args.join(","));
            if is_fact {
                src.push_str(&head);
                src.push_str(".\n");
                continue;
            }
            // Bodies call strictly later predicates, so the call graph is
            // acyclic and every run terminates.
            let n_goals = rng.gen_range(1..=3);
            let mut goals = Vec::new();
            for _ in 0..n_goals {
                let qi = rng.gen_range(pi + 1..preds.len().max(pi + 2)).min(preds.len() - 1);
                let (qname, qarity) = &preds[qi.max(pi.min(preds.len() - 1))];
                let (qname, qarity) = if qi <= pi {
                    // Fall back to self-free choice: last predicate.
                    let last = preds.last().unwrap();
                    (&last.0, &last.1)
                } else {
                    (qname, qarity)
                };
                let args: Vec<String> = (0..*qarity)
                    .map(|_| {
                        let roll = rng.gen_range(0..3);
                        match roll {
                            0 => consts[rng.gen_range(0..consts.len())].to_string(),
                            1 => format!("X{}", rng.gen_range(0..2)),
                            _ => format!("Y{}", rng.gen_range(0..2)),
                        }
                    })
                    .collect();
                goals.push(format!("{}({})", qname, args.join(",")));
            }
            src.push_str(&format!("{} :- {}.\n", head, goals.join(", ")));
        }
    }
    let (gname, garity) = &preds[0];
    let goal_args: Vec<String> = (0..*garity)
        .map(|k| {
            if rng.gen_bool(0.6) {
                format!("Q{}", k)
            } else {
                consts[rng.gen_range(0..consts.len())].to_string()
            }
        })
        .collect();
    let goal = format!("{}({})", gname, goal_args.join(","));
    RandomProgram { source: src, goal }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_programs_parse() {
        for seed in 0..50 {
            let p = random_program(seed);
            crate::front::parse_program(&p.source)
                .unwrap_or_else(|e| panic!("seed {}: {}\n{}", seed, e, p.source));
            crate::front::parse_query(&p.goal).unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = random_program(42);
        let b = random_program(42);
        assert_eq!(a.source, b.source);
        assert_eq!(a.goal, b.goal);
    }
}
