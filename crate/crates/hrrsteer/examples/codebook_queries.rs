//! Encode a problem as one vector and read every field back.
//!
//! ```text
//! cargo run --release --example codebook_queries -- [n1] [n2] [type]
//! ```

use hrrsteer::codebook::{Codebook, Place, Role};
use hrrsteer::problems::ProblemType;

fn main() -> hrrsteer::Result<()> {
    let mut args = std::env::args().skip(1);
    let n1: u32 = args.next().and_then(|a| a.parse().ok()).unwrap_or(842);
    let n2: u32 = args.next().and_then(|a| a.parse().ok()).unwrap_or(910);
    let ptype: ProblemType = match args.next() {
        Some(t) => t.parse()?,
        None => ProblemType::Modulo,
    };

    let cb = Codebook::build(2048, 1)?;
    println!("codebook d={} digit separation {:.4}", cb.dim(), cb.digit_separation());
    let v = cb.encode_problem(n1, n2, ptype)?;
    println!("problem vector self-similarity {:.4}", hrrsteer::hrr::similarity(&v, &v)?);

    for role in [Role::N1, Role::N2] {
        let q = cb.query_number(&v, Some(role))?;
        print!("{:>2}: {:3}   ", role.name(), q.value);
        for c in &q.places {
            print!("{}={} ({:.3} vs {:.3})  ", c.name, c.index, c.score, c.runner_up_score);
        }
        println!();
    }
    let hundreds = cb.query_digit(&v, Some(Role::N2), Place::Hundreds)?;
    println!("n2 hundreds digit: {} (score {:.3})", hundreds.index, hundreds.score);

    println!("type scores over the trained tags:");
    for (t, s) in cb.problem_type_scores(&v, &ProblemType::TRAINED)? {
        println!("  {:16} {s:+.4}", t.to_string());
    }
    Ok(())
}
