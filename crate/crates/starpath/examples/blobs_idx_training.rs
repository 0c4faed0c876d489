//! Full pipeline over an image-style dataset: generate Gaussian blobs,
//! round-trip them through IDX files, train a small MLP with reshuffled
//! SGD, and inspect the path diagnostics (epoch residuals and star-convex
//! step fractions) toward the final iterate.
//!
//!     cargo run --example blobs_idx_training

use starpath::analyzer::{compute_report, AnalysisOptions, ReferencePoint};
use starpath::dataio::{load_idx, make_blobs, save_idx, subset};
use starpath::model::{as_finite_sum, init_params, Activation, LossKind, MlpSpec};
use starpath::sgdrun::{run, RecordPolicy, ReferenceMode, RunConfig};

fn main() {
    // 5 classes of 28x28 "images", saved and re-read in IDX format
    let full = make_blobs(60, 5, 784, 4.0, 11);
    let dir = std::env::temp_dir().join("starpath_blobs_example");
    std::fs::create_dir_all(&dir).unwrap();
    let images = dir.join("images.idx");
    let labels = dir.join("labels.idx");
    save_idx(&full, &images, &labels).unwrap();
    let ds = load_idx(&images, &labels).unwrap();
    let ds = subset(&ds, 200, 5, true).unwrap();
    println!("dataset: {} samples, {} classes, d_in = {}", ds.n, ds.num_classes, ds.d_in);

    let spec = MlpSpec {
        layer_sizes: vec![784, 32, 5],
        activation: Activation::Relu,
        loss_kind: LossKind::SoftmaxCrossentropy,
        init_seed: 21,
    };
    let problem = as_finite_sum(&spec, &ds, 10).unwrap();
    let cfg = RunConfig {
        eta: 0.01,
        epochs: 40,
        seed: 2,
        record_policy: RecordPolicy::EpochBoundaries,
        reference_mode: ReferenceMode::FinalIterate,
    };
    let trace = run(&problem, &init_params(&spec), &cfg).unwrap();

    let rp =
        ReferencePoint::from_trace(&trace, &problem, ReferenceMode::FinalIterate, 1e-3).unwrap();
    if rp.loss_warning {
        println!(
            "note: f(x*) = {:.4e} > 1e-3, reference point is approximate",
            rp.achieved_loss
        );
    }
    let report = compute_report(&trace, &problem, &rp, &AnalysisOptions::default()).unwrap();

    println!("\nepoch   f(x)          e_B           sc_fraction");
    for step in (0..report.epoch_residuals.len()).step_by(5) {
        let (b, e_b) = report.epoch_residuals[step];
        println!(
            "{b:>5}  {:>12.5e} {e_b:>13.5e} {:>8.2}",
            report.full_loss_series[step + 1].1,
            report.sc_fractions[step].1
        );
    }
    let negative = report.epoch_residuals.iter().filter(|&&(_, e)| e < 0.0).count();
    println!(
        "\n{negative}/{} epochs have e_B < 0 toward the final iterate",
        report.epoch_residuals.len()
    );
}
