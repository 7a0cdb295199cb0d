//! Greedy expansion from the tiny network with a cheap surrogate evaluator,
//! showing each step's choice and the candidate table of the first step.

use lpsnet::archspec::initial_spec;
use lpsnet::expander::{expand, surrogate_oracle, Memoized, SearchOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut eval = Memoized::new(surrogate_oracle(0));
    let traj = expand(&initial_spec(), 8, &mut eval, SearchOptions::default())?;
    println!("origin {}  lat {:.3} ms", traj.origin, traj.origin_lat_ms);
    for s in &traj.steps {
        println!(
            "step {:2} {:10} op {} k={:<2} lat {:7.3} ms (target {:7.3})  perf {:5.2}  {}",
            s.index,
            s.op.dimension(),
            s.op.index(),
            s.k,
            s.lat_ms,
            s.target_lat_ms,
            s.perf_pct,
            s.spec
        );
    }
    println!("\nstep 1 candidates:");
    for c in &traj.steps[0].candidates {
        println!("  op {} k={:?} ratio={:?} excluded={:?}", c.op_index, c.k, c.ratio, c.excluded);
    }
    println!("\n{} evaluator calls for {} cached results", eval.inner_calls, eval.cached());

    let dir = std::env::temp_dir().join("lpsnet_surrogate_run");
    traj.write_dir(&dir)?;
    println!("trajectory files in {}", dir.display());
    Ok(())
}
