//! Exact FLOPs and parameters for the presets, plus the per-layer breakdown of
//! one network written as CSV.

use lpsnet::archspec::preset;
use lpsnet::costmodel::count_flops;
use lpsnet::netcore::{interaction_for, BlockKind, InteractionKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let res = (1024, 2048);
    for name in ["S", "M", "L"] {
        let spec = preset(name)?;
        let kind = interaction_for(&spec, InteractionKind::BilateralB);
        let r = count_flops(&spec, BlockKind::Conv3x3, kind, 19, res)?;
        println!("{name}: {:.3} GFLOPs, {} params, {} layers", r.total_flops as f64 / 1e9, r.total_params, r.per_layer.len());
    }

    let s = preset("S")?;
    let r = count_flops(&s, BlockKind::Conv3x3, InteractionKind::BilateralB, 19, (256, 512))?;
    let mut top: Vec<_> = r.per_layer.iter().collect();
    top.sort_by_key(|l| std::cmp::Reverse(l.flops));
    println!("\nheaviest layers of S at 256x512:");
    for l in top.iter().take(5) {
        println!("  {:32} {:>12} FLOPs", l.layer_id, l.flops);
    }

    let path = std::env::temp_dir().join("lpsnet_s_layers.csv");
    r.write_csv(std::fs::File::create(&path)?)?;
    println!("\nfull breakdown written to {}", path.display());
    Ok(())
}
