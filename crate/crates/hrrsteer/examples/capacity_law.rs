//! How many nearly orthogonal random vectors fit in d dimensions?
//!
//! Measures the exact largest |similarity| among N random vectors for a few
//! dimensions, prints the median over seeds and the per-doubling shrink
//! factor, then fits ln N = α·d·ε² + c.
//!
//! ```text
//! cargo run --release --example capacity_law -- [N] [seeds]
//! ```

use std::time::Instant;

use hrrsteer::capacity::{self, DEFAULT_BUDGET};

fn main() -> hrrsteer::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let dims = [1024, 2048, 4096];
    let seeds: Vec<u64> = (0..seeds).collect();

    let t = Instant::now();
    let table = capacity::capacity_curve(&dims, &[n / 10, n], &seeds, DEFAULT_BUDGET)?;
    println!("swept {} draws in {:.1?}", table.rows.len(), t.elapsed());

    let mut prev = None;
    for d in dims {
        let eps = capacity::median_epsilon(&table.rows, d, n).expect("grid point");
        match prev {
            Some(p) => println!("d={d:5}  median eps_max={eps:.4}  shrink={:.3}", p / eps),
            None => println!("d={d:5}  median eps_max={eps:.4}"),
        }
        prev = Some(eps);
    }
    println!(
        "fit: ln N = {:.4}·d·eps² + {:.3}   (R² = {:.4})",
        table.alpha_fit, table.intercept, table.r_squared
    );
    Ok(())
}
