use std::time::Instant;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let file = &args[1];
    let goal = &args[2];
    let first = args.iter().any(|a| a == "--first");
    let eager = args.iter().any(|a| a == "--eager");
    let full = args.iter().any(|a| a == "--full");
    let src = std::fs::read_to_string(file).unwrap();
    let db = beam_core::parse_program(&src).unwrap();
    let q = beam_core::parse_query(goal).unwrap();
    let mut sink = beam_core::trace::TraceSink::disabled();
    let mut opts = beam_core::manager::EngineOpts::default();
    opts.first_solution = first;
    if eager { opts.strategy = beam_core::manager::Strategy::Eager; }
    if full { opts.implicit_pruning = beam_core::manager::ImplicitPruning::Full; }
    opts.max_steps = Some(100_000_000);
    let t = Instant::now();
    let out = beam_core::manager::run_query(&db, &q, &opts, &mut sink).unwrap();
    println!("exit={:?} answers={} splits={} reductions={} promotions={} compress={} susp={} wakes={} pruned={} reclaimed={} ms={}",
        out.exit, out.answers.len(), out.stats.splits, out.stats.reductions, out.stats.promotions,
        out.stats.and_compressions, out.stats.suspensions, out.stats.wakes, out.stats.pruned_boxes,
        out.stats.reclaimed_boxes, t.elapsed().as_millis());
    for a in out.answers.iter().take(4) { println!("  {}", a.canonical()); }
}
