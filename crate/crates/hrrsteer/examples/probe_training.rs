//! Fit the linear encoder and decoder at every layer and print how well
//! each layer's state can be read as a symbolic problem vector.
//!
//! ```text
//! cargo run --release --example probe_training -- [per_type]
//! ```

use hrrsteer::config::RunConfig;
use hrrsteer::probe::{self, FitMode};
use hrrsteer::workflow;

fn main() -> hrrsteer::Result<()> {
    let per_type: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let cfg = RunConfig::from_toml(
        "",
        &[format!("data.train_per_type={per_type}"), "data.eval_per_type=50".into(), "data.readout_per_type=500".into()],
    )?;
    let cb = workflow::codebook(&cfg)?;
    let data = workflow::dataset(&cfg);
    let mut model = workflow::surrogate(&cfg)?;
    workflow::train_readout(&mut model, &data)?;

    let layers: Vec<usize> = (0..=cfg.surrogate.layers).collect();
    let curves = probe::layer_curves(&model, &data.train, &data.eval, &cb, cfg.probe.lambda, &layers)?;
    println!("layer  encoder rmse  decoder rmse  digit error (h, t, o)");
    for r in &curves {
        println!(
            "{:5}  {:12.5}  {:12.5}  {:.3} {:.3} {:.3}",
            r.layer, r.encoder_rmse, r.decoder_rmse, r.digit_error[0], r.digit_error[1], r.digit_error[2]
        );
    }

    // Closed form against minibatch descent at the intervention layer.
    let traces = workflow::probe_traces(&cfg, &model, &data.train)?;
    let (_, cf) = probe::train_encoder(&traces, &cb, cfg.probe.lambda, FitMode::ClosedForm)?;
    let (_, sgd) = probe::train_encoder(&traces, &cb, cfg.probe.lambda, FitMode::Sgd { epochs: 100, batch: 256, seed: 1 })?;
    println!(
        "encoder rmse: closed form {:.5}, sgd {:.5}",
        cf.epochs.last().unwrap().loss,
        sgd.epochs.last().unwrap().loss
    );
    Ok(())
}
