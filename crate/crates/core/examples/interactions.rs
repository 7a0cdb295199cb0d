//! The six cross-resolution interaction modules on one pair of feature maps.

use lpsnet::netcore::{InteractionKind, InteractionModule};
use lpsnet::tensor::{Shape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let c = 16;
    let high = Tensor::from_vec(Shape::new(1, c, 32, 64), (0..c * 32 * 64).map(|i| (i % 7) as f32 / 7.0).collect());
    let low = Tensor::full(Shape::new(1, c, 8, 16), 1.0f32);
    for kind in &InteractionKind::ALL[1..] {
        let module = InteractionModule::<f32>::new(*kind, c, 0)?;
        let (h, l) = module.forward(&high, &low)?;
        let mean = |t: &Tensor<f32>| t.data().iter().sum::<f32>() / t.data().len() as f32;
        println!(
            "{:12} params {:5}  high {:?} mean {:.3}  low {:?} mean {:.3}",
            kind.name(),
            module.num_params(),
            (h.shape().c, h.shape().h, h.shape().w),
            mean(&h),
            (l.shape().c, l.shape().h, l.shape().w),
            mean(&l)
        );
    }
    Ok(())
}
