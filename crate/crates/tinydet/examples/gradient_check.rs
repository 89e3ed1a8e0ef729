//! Verify analytic gradients against central finite differences, in
//! 64-bit mode: a convolution stack, the fused losses, and a block with
//! rectangular receptive fields.
//!
//!     cargo run --release --example gradient_check

use tinydet::autodiff::Tensor;
use tinydet::gradcheck;
use tinydet::losses::{focal_loss_sum, smooth_l1_sum};
use tinydet::rng::Rng;

fn main() {
    let mut rng = Rng::new(2024);

    // conv -> bias -> sigmoid -> sum
    let input = Tensor::<f64>::param(&[1, 3, 6, 6], (0..108).map(|_| rng.normal()).collect());
    let kernel = Tensor::<f64>::param(&[4, 3, 3, 3], (0..108).map(|_| rng.normal()).collect());
    let bias = Tensor::<f64>::param(&[4], (0..4).map(|_| rng.normal()).collect());
    let report = gradcheck::check(
        &[&input, &kernel, &bias],
        || input.conv2d(&kernel, 1, (1, 1)).bias_add(&bias).sigmoid().sum(),
        1e-4,
    );
    println!(
        "conv/bias/sigmoid: {} coordinates, max relative error {:.2e}",
        report.checked, report.max_rel_err
    );

    // focal loss with margins
    let logits = Tensor::<f64>::param(&[24], (0..24).map(|_| rng.range(-3.0, 3.0)).collect());
    let labels: Vec<bool> = (0..24).map(|_| rng.flip()).collect();
    let margins: Vec<f64> = (0..24).map(|_| rng.range(0.0, 1.5)).collect();
    let report = gradcheck::check(
        &[&logits],
        || focal_loss_sum(&logits, &labels, &margins, 2.0, Some(0.25)),
        1e-4,
    );
    println!("margined focal loss: max relative error {:.2e}", report.max_rel_err);

    // smooth-L1 across both branches
    let preds = Tensor::<f64>::param(&[16], (0..16).map(|_| rng.range(-3.0, 3.0)).collect());
    let targets: Vec<f64> = (0..16).map(|_| rng.range(-3.0, 3.0)).collect();
    let report = gradcheck::check(&[&preds], || smooth_l1_sum(&preds, &targets), 1e-4);
    println!("smooth-L1: max relative error {:.2e}", report.max_rel_err);

    // RoI sampling through a feature map
    let feat = Tensor::<f64>::param(&[4, 8, 8], (0..256).map(|_| rng.normal()).collect());
    let report = gradcheck::check(
        &[&feat],
        || feat.roi_align(1.0, 0.5, 6.5, 7.0, 5).sigmoid().sum(),
        1e-4,
    );
    println!("roi_align: max relative error {:.2e}", report.max_rel_err);
}
