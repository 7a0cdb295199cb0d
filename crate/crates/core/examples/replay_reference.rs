//! Replay the published 14-step expansion through the lookup evaluator and
//! compare the chosen dimensions and stepsizes with the recorded ones.

use lpsnet::archspec::initial_spec;
use lpsnet::expander::{expand, LookupEvaluator, Memoized, SearchOptions};

const RECORDED: [(&str, usize, u32); 14] = [
    ("Depth", 2, 7),
    ("Width", 4, 1),
    ("Width", 3, 1),
    ("Resolution", 7, 1),
    ("Depth", 0, 2),
    ("Resolution", 8, 2),
    ("Resolution", 7, 1),
    ("Resolution", 7, 2),
    ("Width", 5, 1),
    ("Width", 6, 1),
    ("Resolution", 7, 1),
    ("Resolution", 7, 2),
    ("Width", 4, 1),
    ("Width", 5, 1),
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/expansion_reference.csv");
    let lookup = LookupEvaluator::from_csv(table)?;
    println!("latency model coefficients {:?}", lookup.coefficients());
    let mut eval = Memoized::new(lookup);
    let traj = expand(&initial_spec(), 14, &mut eval, SearchOptions::default())?;
    for (s, (dim, op, k)) in traj.steps.iter().zip(RECORDED) {
        let same = s.op.dimension().to_string() == dim;
        println!(
            "step {:2}: {:10} op {} k={}  recorded {dim:10} op {op} k={k}  {}",
            s.index,
            s.op.dimension(),
            s.op.index(),
            s.k,
            if same { "" } else { "<- differs" }
        );
    }
    Ok(())
}
