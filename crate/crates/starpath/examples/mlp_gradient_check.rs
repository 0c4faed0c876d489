//! Verifies the MLP backpropagation against central finite differences for
//! every activation/loss combination, printing the worst relative error.
//!
//!     cargo run --example mlp_gradient_check

use starpath::model::{
    batch_grad, batch_loss, init_params, Activation, Batch, LossKind, MlpSpec, Targets,
};
use starpath::rng::Stream;

fn main() {
    let h = 1e-5;
    for (activation, loss_kind) in [
        (Activation::Relu, LossKind::Mse),
        (Activation::Relu, LossKind::SoftmaxCrossentropy),
        (Activation::Tanh, LossKind::Mse),
        (Activation::Tanh, LossKind::SoftmaxCrossentropy),
    ] {
        let spec = MlpSpec {
            layer_sizes: vec![12, 8, 5],
            activation,
            loss_kind,
            init_seed: 3,
        };
        let mut stream = Stream::keyed(&[0xf00d, activation as u64, loss_kind as u64]);
        let b = 4;
        let inputs: Vec<f64> = (0..b * 12).map(|_| stream.next_f64()).collect();
        let targets = match loss_kind {
            LossKind::SoftmaxCrossentropy => {
                Targets::Classes((0..b).map(|_| stream.below(5) as usize).collect())
            }
            LossKind::Mse => Targets::Values((0..b * 5).map(|_| stream.next_f64()).collect()),
        };
        let batch = Batch::new(inputs, b, 12, targets).unwrap();
        let mut params = init_params(&spec);
        for v in params.as_mut_slice() {
            *v += 0.05 * stream.next_normal();
        }
        let grad = batch_grad(&spec, &params, &batch).unwrap();

        let mut worst = 0.0f64;
        for j in 0..spec.param_count() {
            let mut plus = params.clone();
            plus.as_mut_slice()[j] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[j] -= h;
            let fd = (batch_loss(&spec, &plus, &batch).unwrap()
                - batch_loss(&spec, &minus, &batch).unwrap())
                / (2.0 * h);
            let g = grad.as_slice()[j];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1.0));
        }
        println!(
            "{activation:?} + {loss_kind:?}: worst relative error over {} coordinates = {worst:.3e}",
            spec.param_count()
        );
        assert!(worst <= 1e-6);
    }
}
