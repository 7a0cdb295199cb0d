//! Compare backpropagated gradients with central finite differences on a few
//! parameters of the tiny network, in double precision.

use lpsnet::archspec::initial_spec;
use lpsnet::autograd::cross_entropy;
use lpsnet::netcore::{BlockKind, InteractionKind, NetworkInstance};
use lpsnet::tensor::{Shape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = NetworkInstance::<f32>::build(&initial_spec(), BlockKind::Conv3x3, InteractionKind::None, 2, 1)?.cast::<f64>();
    let x = Tensor::from_vec(Shape::new(2, 3, 64, 64), (0..2 * 3 * 64 * 64).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect());
    let labels: Vec<u8> = (0..2 * 64 * 64).map(|i| (i / 64 % 2) as u8).collect();
    let loss = |n: &NetworkInstance<f64>| -> Result<f64, Box<dyn std::error::Error>> {
        let (out, _) = n.forward_train(&x)?;
        Ok(cross_entropy(&out, &labels).value().data()[0])
    };
    let grads = {
        let (out, exec) = net.forward_train(&x)?;
        cross_entropy(&out, &labels).backward();
        exec.gradients()
    };
    // The periodic input puts many pre-activations near ReLU kinks, so a small
    // step keeps the difference quotient on one side of them.
    let step = 1e-5;
    for (t, name) in net.param_names().enumerate().step_by(4) {
        let (mut plus, mut minus) = (net.clone(), net.clone());
        plus.weights.params[t].data_mut()[0] += step;
        minus.weights.params[t].data_mut()[0] -= step;
        let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * step);
        let analytic = grads[t].as_ref().map_or(0.0, |g| g.data()[0]);
        println!("{name:32} analytic {analytic:+.6e}  numeric {numeric:+.6e}");
    }
    Ok(())
}
