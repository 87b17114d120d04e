//! Build the surrogate, fit its readout, and record hidden states.
//!
//! Shows the baseline the intervention has to beat: addition is read off
//! the value channels, everything else is guessed.
//!
//! ```text
//! cargo run --release --example surrogate_traces -- [out.hst]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};

use hrrsteer::config::RunConfig;
use hrrsteer::trace::{self, TraceHeader};
use hrrsteer::workflow;

fn main() -> hrrsteer::Result<()> {
    let cfg = RunConfig::from_toml("", &["data.eval_per_type=100".into(), "data.readout_per_type=500".into()])?;
    let data = workflow::dataset(&cfg);
    let mut model = workflow::surrogate(&cfg)?;
    let rep = workflow::train_readout(&mut model, &data)?;
    println!("readout sharpness {:.4e}, ce trace {:?}", rep.readout.sharpness, rep.ce_trace.len());

    for m in model.baseline_metrics(&data.eval)? {
        println!("{:18} score {:6.1}%  ce {:10.3}", m.ptype.to_string(), m.score, m.ce);
    }

    let p = &data.eval[0];
    let f = model.forward(&p.prompt)?;
    let norms: Vec<String> = f.states.iter().map(|h| format!("{:.2}", h.norm())).collect();
    println!("\"{}\": state norms by layer {}", p.prompt, norms.join(" "));

    let layers: Vec<u16> = (0..=cfg.surrogate.layers as u16).collect();
    let traces = trace::export_traces(&model, &data.eval[..20], &layers)?;
    let header = TraceHeader {
        d_h: cfg.surrogate.d_h,
        layers: cfg.surrogate.layers,
        seed: model.seed(),
        layer_list: layers,
        provenance: Some(cfg.provenance()),
    };
    let path = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("surrogate_traces.hst").display().to_string());
    trace::write_traces(&mut BufWriter::new(File::create(&path)?), &header, &traces)?;
    let (_, back) = trace::read_traces(&mut BufReader::new(File::open(&path)?))?;
    println!("{} records written to {path}, {} read back", traces.len(), back.len());
    Ok(())
}
