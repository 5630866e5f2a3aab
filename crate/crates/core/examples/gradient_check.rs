//! Central-difference check of reverse-mode gradients on a small conv net.
//!
//! Usage: `cargo run --release --example gradient_check`

use fednas::autodiff::{finite_diff_check_with, FiniteDiffOptions, ParamStore, Section, Window};
use fednas::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images = randn(&mut rng, &[3, 3, 8, 8]);
    let labels = [0, 2, 1];
    let mut store = ParamStore::new();
    let stem = store.register("stem", Section::Weight, randn(&mut rng, &[4, 3, 3, 3]));
    let dw = store.register("dw", Section::Weight, randn(&mut rng, &[4, 1, 3, 3]));
    let cw = store.register("classifier.weight", Section::Weight, randn(&mut rng, &[3, 4]));
    let cb = store.register("classifier.bias", Section::Weight, randn(&mut rng, &[3]));

    let report = finite_diff_check_with(
        |g, s| {
            let x = g.input(images.clone());
            let w = g.param(s, stem)?;
            let y = g.conv2d(x, w, Window::new(3, 1, 1, 1))?;
            let y = g.batch_norm(y)?;
            let y = g.relu(y);
            let d = g.param(s, dw)?;
            let y = g.depthwise_conv2d(y, d, Window::new(3, 2, 2, 2))?;
            let y = g.max_pool(y, Window::new(3, 1, 1, 1))?;
            let pooled = g.global_avg_pool(y)?;
            let (w, b) = (g.param(s, cw)?, g.param(s, cb)?);
            let logits = g.linear(pooled, w, b)?;
            g.softmax_cross_entropy(logits, &labels)
        },
        &store,
        &FiniteDiffOptions::default(),
    )?;
    println!(
        "{} parameters, worst relative error {:.3e}",
        store.parameter_count(),
        report.max_rel_error
    );
    Ok(())
}
