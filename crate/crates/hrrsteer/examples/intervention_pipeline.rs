//! The whole loop on the surrogate: fit the readout, train the probes,
//! fine-tune the decoder, then score every problem type with and without
//! the intervention, reading the problem through the encoder and through
//! the exact symbolic encoding.
//!
//! Arguments are config overrides, for example
//!
//! ```text
//! cargo run --release --example intervention_pipeline -- finetune.epochs=200 data.eval_per_type=100
//! ```

use std::time::Instant;

use hrrsteer::config::RunConfig;
use hrrsteer::pipeline::{self, SymbolSource};
use hrrsteer::{probe, workflow};

fn main() -> hrrsteer::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::from_toml("", &overrides)?;
    let t = Instant::now();
    let run = workflow::train_all(&cfg)?;
    println!("trained in {:.1?} (readout sharpness {:.3e})", t.elapsed(), run.readout.readout.sharpness);

    let eval_traces = workflow::probe_traces(&cfg, &run.model, &run.data.eval)?;
    let de = probe::digit_error(&run.encoder, &eval_traces, &run.codebook)?;
    println!("held-out digit error per slot: {:?}", de.per_slot);
    for e in run.finetune_report.epochs.iter().filter(|e| e.eval_score.is_some()) {
        println!(
            "epoch {:4}  train ce {:10.4}  eval score {:6.2}  eval ce {:10.4}  step {:.1e}",
            e.epoch,
            e.loss,
            e.eval_score.unwrap(),
            e.eval_ce.unwrap(),
            e.step.unwrap()
        );
    }

    let gate = cfg.intervention();
    for source in [SymbolSource::Encoder, SymbolSource::Exact] {
        let t = Instant::now();
        let rep = pipeline::evaluate(&run.model, &run.encoder, &run.tuned, &run.codebook, &gate, &run.data.eval, source)?;
        println!("\n{source:?} symbols ({:.1?}):", t.elapsed());
        println!("{:18} {:>9} {:>11} {:>9} {:>11} {:>6}", "type", "base %", "base ce", "score %", "ce", "fired");
        for r in &rep.per_type {
            println!(
                "{:18} {:9.1} {:11.3} {:9.1} {:11.3} {:6.2}",
                r.ptype.to_string(),
                r.baseline_score,
                r.baseline_ce,
                r.score,
                r.ce,
                r.intervention_rate
            );
        }
        println!("bypassed {} (bit-identical {})", rep.bypassed, rep.bypass_identical);
    }
    Ok(())
}
