//! Times one training step of the desk-scale feedback network.

use std::time::Instant;

use fbnet::network::{training_loss, FeedbackNet, FeedbackNetSpec};
use fbnet::tensor::{Mode, Rng, Sgd, Tape};

fn main() -> fbnet::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(32);
    let base: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(16);
    let mut spec = FeedbackNetSpec::desk_default(16, 12);
    spec.stem.out_channels = base;
    spec.modules[0].in_channels = base;
    spec.modules[0].out_channels = 2 * base;
    spec.modules[1].in_channels = 2 * base;
    spec.modules[1].out_channels = 4 * base;
    let mut net = FeedbackNet::<f32>::new(spec.clone(), 0)?;
    let mut rng = Rng::new(1);
    let images = rng.uniform_tensor(&[batch, 3, 16, 16], 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % 12).collect();
    let mut opt = Sgd::new(0.9, 1e-4);
    let steps = 5;
    let start = Instant::now();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let trace = net.unroll_forward(&mut tape, x, &labels, Mode::Train)?;
        let loss = training_loss(&mut tape, &trace, spec.gamma, spec.loss_mode)?;
        net.params.zero_grad();
        tape.backward(loss, &mut net.params)?;
        opt.step(&mut net.params, 0.05);
    }
    let per_step = start.elapsed().as_secs_f64() / steps as f64;
    println!(
        "batch {batch}: {:.1} ms/step, {:.2} ms/sample, {} params",
        per_step * 1e3,
        per_step * 1e3 / batch as f64,
        net.parameter_count()
    );
    Ok(())
}
