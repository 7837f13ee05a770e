//! How many replicate simulations a confidence interval needs.
//!
//!     cargo run --example sample_size

use storesim::stats::{min_samples, sigma_from_range, z_from_alpha, Population, SampleSizeParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = SampleSizeParams::new(1.96, 200.0, 50.0, Population::Infinite)?;
    let n = min_samples(&p)?;
    println!("z 1.96, sigma 200, halfwidth 50: {:.4} -> {}", n.n_raw, n.n);

    for alpha in [0.10, 0.05, 0.01] {
        let p = SampleSizeParams::from_alpha(alpha, sigma_from_range(1200.0)?, 50.0, Population::Infinite)?;
        println!("alpha {alpha}: z {:.4}, n {}", z_from_alpha(alpha)?, min_samples(&p)?.n);
    }
    for big_n in [100, 1000, 100_000] {
        let p = SampleSizeParams::new(1.96, 200.0, 50.0, Population::Finite(big_n))?;
        println!("population {big_n}: n {}", min_samples(&p)?.n);
    }
    Ok(())
}
