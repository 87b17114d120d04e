//! Generate a small dataset, print a few problems per type and write JSONL.
//!
//! ```text
//! cargo run --release --example problem_bank -- [per_type] [out.jsonl]
//! ```

use std::fs::File;
use std::io::BufWriter;

use hrrsteer::problems::{self, DatasetSpec, ProblemType};

fn main() -> hrrsteer::Result<()> {
    let mut args = std::env::args().skip(1);
    let per_type: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let out = args.next();

    let data = problems::gen_dataset(&DatasetSpec::uniform(per_type, per_type), 7);
    for t in ProblemType::ALL {
        let p = data.eval.iter().find(|p| p.ptype == t).expect("every type is drawn");
        println!("{:18} {:45} -> {}", t.to_string(), p.prompt, p.answer);
    }
    println!(
        "train {} (trained types only), eval {}, readout {}",
        data.train.len(),
        data.eval.len(),
        data.readout.len()
    );
    // The solver refuses what the templates cannot express.
    println!("7 mod 0: {}", problems::solve(ProblemType::Modulo, 7, 0).unwrap_err());

    if let Some(path) = out {
        problems::write_jsonl(&mut BufWriter::new(File::create(&path)?), &data.eval)?;
        println!("wrote {path}");
    }
    Ok(())
}
