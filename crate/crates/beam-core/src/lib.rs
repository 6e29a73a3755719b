//! An executable engine for logic programs based on and-or tree rewriting
//! with implicit control: programs compile to an abstract instruction set,
//! execution rewrites a tree of and-boxes and or-boxes (reduction,
//! promotion, propagation, splitting), and runs report answers together
//! with search-space statistics.

pub mod builtins;
pub mod code;
pub mod compile;
pub mod front;
pub mod machine;
pub mod manager;
pub mod oracle;
pub mod term;
pub mod testgen;
pub mod trace;
pub mod tree;

pub use compile::{compile_program, Program};
pub use front::{parse_program, parse_query, Database, Query};
pub use manager::{run_query, Answer, EngineError, EngineOpts, ImplicitPruning, RunOutcome, Strategy};
pub use trace::{RunStats, TraceSink};
