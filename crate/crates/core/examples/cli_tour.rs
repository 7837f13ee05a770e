//! Drives the command-line front end in-process.
//!
//!     cargo run --example cli_tour

fn main() {
    let layout = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/grid_3x3.layout.json");
    let runs: [&[&str]; 4] = [
        &["samplesize", "--z", "1.96", "--sigma", "200", "--halfwidth", "50"],
        &["torus", "rotation", "--p", "3", "--q", "7"],
        &["--json", "torus", "embed", "--theta", "0", "--phi", "1.5"],
        &["simulate", "--layout", layout, "--seed", "1"],
    ];
    for args in runs {
        println!("$ storesim {}", args.join(" "));
        let code = storesim::cli::run(
            std::iter::once("storesim").chain(args.iter().copied()),
            &mut std::io::stdout(),
            &mut std::io::stderr(),
        );
        println!("(exit {code})\n");
    }
}
