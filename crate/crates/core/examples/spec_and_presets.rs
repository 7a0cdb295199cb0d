//! Build specs by hand, apply catalog expansions and round-trip them through
//! the JSON and compact forms.

use lpsnet::archspec::{catalog, initial_spec, preset, NetworkSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tiny = initial_spec();
    println!("tiny network: {tiny}");

    for op in catalog() {
        match tiny.apply(op, 2) {
            Ok(next) => println!("op {} ({}) x2 -> {next}", op.index(), op.dimension()),
            Err(e) => println!("op {} ({}) x2 -> not applicable: {e}", op.index(), op.dimension()),
        }
    }

    let m = preset("M")?;
    let json = m.serialize();
    assert_eq!(NetworkSpec::parse(&json)?, m);
    println!("\nM as JSON:\n{json}");
    println!("M compact: {}", m.to_compact());

    // Bound violations are reported rather than clamped.
    let too_deep = NetworkSpec::new([1, 1, 1, 65, 1], [4, 8, 16, 32, 32], [4, 0, 0]);
    println!("\ndepth 65: {:?}", too_deep.err().map(|e| e.to_string()));
    Ok(())
}
