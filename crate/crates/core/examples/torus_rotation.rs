//! Rotation numbers of circle maps, torus embeddings and flow intersections.
//!
//!     cargo run --example torus_rotation

use std::f64::consts::TAU;

use storesim::torus::{
    classify_alpha, convergents, count_intersections, embed, rotation_number, TorusFlow, TorusGeometry, TorusPoint,
    DEFAULT_ITERATIONS,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    // a nonlinear map's estimate is only good to about 1/iterations
    for (name, omega, k, tol) in [
        ("3/7 rigid", 3.0 / 7.0, 0.0, 1e-9),
        ("golden rigid", golden, 0.0, 1e-9),
        ("sine map, 1:2 tongue", 0.5, 0.9, 1e-4),
    ] {
        let lift = move |x: f64| x + omega - k / TAU * (TAU * x).sin();
        let rn = rotation_number(lift, 0.1, DEFAULT_ITERATIONS, tol)?;
        println!(
            "{name}: alpha {:.9} {:?} period {:?}",
            rn.alpha,
            rn.classification,
            rn.period()
        );
    }
    println!("convergents of the golden ratio: {:?}", convergents(golden, 100));
    println!("0.25 at tol 1e-9: {:?}", classify_alpha(0.25, 1e-9).rational_approx);

    let g = TorusGeometry::new(2.0, 1.0)?;
    let p = embed(&g, &TorusPoint::from_angles(TAU / 8.0, TAU / 3.0));
    let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - g.major;
    println!("embedded point {p:?}, tube residual {:.1e}", ring * ring + p[2] * p[2] - g.minor * g.minor);

    let a = TorusFlow::new(0.0, 0.0, 1.0, 0.0)?;
    let b = TorusFlow::new(0.0, 0.0, 0.0, 1.0)?;
    let hits = count_intersections(&g, &a, &b, 0.0, 4.0 * TAU, 0.01, 0.2)?;
    println!("a tube-circling and a ring-circling flow meet {} times in 4 turns", hits.len());
    Ok(())
}
