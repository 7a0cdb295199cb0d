//! FLOPs, parameters and FLOPs-efficiency of every block kind on one feature
//! map shape.

use lpsnet::costmodel::{block_cost, flops_efficiency, measure_latency};
use lpsnet::netcore::{BlockKind, BlockModule};
use lpsnet::tensor::{Shape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (c, h, w) = (32, 128, 128);
    let x = Tensor::full(Shape::new(1, c, h, w), 0.5f32);
    println!("{:18} {:>12} {:>8} {:>10} {:>12}", "block", "FLOPs", "params", "median ms", "MFLOPs/ms");
    for kind in BlockKind::ALL {
        let cost = block_cost(kind, (c, h, w))?;
        let block = BlockModule::<f32>::new(kind, c, 0)?;
        let m = measure_latency(|| block.forward(&x).map(drop), 3, 15)?;
        let eff = flops_efficiency(cost.total_flops, m.median_ms)?;
        println!("{:18} {:>12} {:>8} {:>10.3} {:>12.1}", kind, cost.total_flops, cost.total_params, m.median_ms, eff);
    }
    Ok(())
}
