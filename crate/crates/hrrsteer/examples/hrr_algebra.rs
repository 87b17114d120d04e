//! Binding, unbinding and bundling on random and unitary vectors, plus a
//! timing of the naive and FFT convolution paths.
//!
//! ```text
//! cargo run --release --example hrr_algebra -- [d]
//! ```

use std::time::Instant;

use hrrsteer::hrr::{self, HrrVector};

fn max_abs_diff(a: &HrrVector, b: &HrrVector) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> hrrsteer::Result<()> {
    let d: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1024);

    let x = hrr::random_vector(d, 1)?;
    let y = hrr::random_vector(d, 2)?;
    let u = hrr::unitary_vector(d, 3)?;
    println!("d = {d}");
    println!("‖x‖² = {:.4}, x·y = {:+.4}", x.norm_sq(), hrr::similarity(&x, &y)?);

    // Unitary keys invert exactly; random ones only approximately.
    let exact = hrr::unbind(&hrr::bind_fast(&x, &u)?, &u)?;
    let rough = hrr::unbind(&hrr::bind_fast(&x, &y)?, &y)?;
    let cos = |a: &HrrVector| hrr::similarity(a, &x).unwrap() / (a.norm_sq() * x.norm_sq()).sqrt();
    println!("unbind with unitary key: cosine {:.6}", cos(&exact));
    println!("unbind with random key:  cosine {:.4}", cos(&rough));

    // A bundle of three role-filler pairs; each filler comes back by unbinding.
    let roles: Vec<HrrVector> = (10..13).map(|s| hrr::unitary_vector(d, s)).collect::<Result<_, _>>()?;
    let fillers: Vec<HrrVector> = (20..23).map(|s| hrr::random_vector(d, s)).collect::<Result<_, _>>()?;
    let pairs = roles.iter().zip(&fillers).map(|(r, f)| hrr::bind_fast(r, f)).collect::<Result<Vec<_>, _>>()?;
    let record = hrr::bundle(&pairs)?;
    for (i, r) in roles.iter().enumerate() {
        let probe = hrr::unbind(&record, r)?;
        let scores: Vec<f64> = fillers.iter().map(|f| hrr::similarity(&probe, f).unwrap()).collect();
        println!("role {i}: filler scores {:?}", scores.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>());
    }

    let a = hrr::bind(&x, &y)?;
    let b = hrr::bind_fast(&x, &y)?;
    println!("naive vs fft max |diff| = {:.2e}", max_abs_diff(&a, &b));

    let t = Instant::now();
    let _ = hrr::bind(&x, &y)?;
    let naive = t.elapsed();
    let t = Instant::now();
    let _ = hrr::bind_fast(&x, &y)?;
    let fast = t.elapsed();
    println!("naive {naive:.2?}, fft {fast:.2?}");
    Ok(())
}
