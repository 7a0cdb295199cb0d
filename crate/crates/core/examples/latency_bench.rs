//! Measured latency of a preset next to the estimate from a calibrated device
//! profile.

use lpsnet::archspec::preset;
use lpsnet::costmodel::{calibrate_profile, count_flops, estimate_latency, flops_efficiency, measure_latency};
use lpsnet::netcore::{interaction_for, BlockKind, InteractionKind, NetworkInstance};
use lpsnet::tensor::{Shape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (h, w) = (256, 512);
    let spec = preset("S")?;
    let kind = interaction_for(&spec, InteractionKind::BilateralB);
    let net = NetworkInstance::<f32>::build(&spec, BlockKind::Conv3x3, kind, 19, 0)?;
    let x = Tensor::full(Shape::new(1, 3, h, w), 0.5f32);

    let m = measure_latency(|| net.forward(&x).map(drop), 3, 15)?;
    let report = count_flops(&spec, BlockKind::Conv3x3, kind, 19, (h, w))?;
    println!("S at {h}x{w}: {m}");
    println!("FLOPs-efficiency {:.1} MFLOPs/ms", flops_efficiency(report.total_flops, m.median_ms)?);

    let profile = calibrate_profile(&report, 1, 5)?;
    println!("profiled {} layer signatures", profile.layers.len());
    println!("estimated {:.2} ms from isolated layer timings", estimate_latency(&report, &profile)?);
    Ok(())
}
