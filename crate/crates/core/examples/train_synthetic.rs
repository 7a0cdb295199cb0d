//! Train the tiny network on synthetic shapes and report validation mIoU.
//! Pass an iteration count as the first argument (default 300).

use lpsnet::archspec::initial_spec;
use lpsnet::evaluation::{evaluate_miou, synth_shapes, train, TrainConfig};
use lpsnet::netcore::{checkpoint, BlockKind, InteractionKind, NetworkInstance};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iters = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let data = synth_shapes(100, 3, (96, 96), 1)?;
    let net = NetworkInstance::build(&initial_spec(), BlockKind::Conv3x3, InteractionKind::None, 3, 0)?;
    let cfg = TrainConfig {
        total_iters: iters,
        batch_size: 4,
        crop: (96, 96),
        scale_range: (0.75, 1.5),
        base_lr: 0.02,
        ..Default::default()
    };
    let (net, history) = train(net, &data.train, &cfg)?;
    for (i, loss) in history.losses.iter().enumerate().step_by((iters / 10).max(1)) {
        println!("iter {i:5}  lr {:.5}  loss {loss:.4}", history.lrs[i]);
    }
    let (miou, per_class) = evaluate_miou(&net, &data.val)?;
    println!("val mIoU {miou:.4}, per class {per_class:.3?}");

    let path = std::env::temp_dir().join("lpsnet_tiny.ckpt");
    checkpoint::save(&net, &path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
