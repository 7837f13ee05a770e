//! Run the default scenario, write the record stream and print the summary.
//!
//!     cargo run --release --example simulate_store [seed]

use std::io::BufWriter;

use storesim::layout::load_layout;
use storesim::sim::{run_to_writer, standalone_sim_id, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(42);
    let layout = load_layout(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/grid_3x3.layout.json"))?;
    let mut cfg = SimConfig { seed, ..SimConfig::default() };
    cfg.features.variable_speed = true;
    let out = std::env::temp_dir().join(format!("storesim-{seed}.jsonl"));
    let mut w = BufWriter::new(std::fs::File::create(&out)?);
    let r = run_to_writer(&layout, cfg.clone(), standalone_sim_id(&cfg), &mut w)?;
    let s = &r.summary;
    println!("records written to {}", out.display());
    println!(
        "{} agents in {:.0} s: {} collisions, {} near misses, peak {} in store, half empty at {:?} s",
        s.despawned, s.sim_time_s, s.total_collisions, s.near_misses, s.peak_in_store, s.half_empty_s
    );
    println!("at risk (>= {} s of contact): {} agents", cfg.at_risk_exposure, s.at_risk.len());
    let mean = |f: fn(&storesim::sim::AgentTimers) -> f64| s.timers.values().map(f).sum::<f64>() / s.timers.len() as f64;
    println!(
        "mean seconds: shopping {:.0}, waiting {:.0}, checkout {:.0}, idle {:.0}, total {:.0}",
        mean(|t| t.shopping),
        mean(|t| t.waiting),
        mean(|t| t.checkout),
        mean(|t| t.idle),
        mean(|t| t.total)
    );
    println!("bay visits {:?}", s.location_visits);
    Ok(())
}
