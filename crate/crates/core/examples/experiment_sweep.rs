//! Sweep a feature flag and crowd size, then read the sink back.
//!
//!     cargo run --release --example experiment_sweep

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::json;
use storesim::experiment::{aggregate, execute, expand, ExperimentManifest};
use storesim::sim::SimConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sink = std::env::temp_dir().join("storesim-sweep");
    let _ = std::fs::remove_dir_all(&sink);
    let m = ExperimentManifest {
        experiment_id: "distancing".into(),
        layout: concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/grid_3x3.layout.json").into(),
        grid: BTreeMap::from([
            ("agents_total".to_string(), vec![json!(20), json!(40)]),
            ("features.violate_social_distancing".to_string(), vec![json!(false), json!(true)]),
        ]),
        replicates: 4,
        base_seed: 2020,
        parallelism: 4,
        sink,
        base_config: SimConfig::default(),
        analysis: Default::default(),
    };
    let jobs = expand(&m)?;
    let report = execute(&m, &jobs, Duration::from_millis(500), |p| eprintln!("{p}"))?;
    println!("{} sims, {} failed", report.sims, report.failed.len());
    let agg = aggregate(m.experiment_dir())?;
    for j in &agg.jobs {
        println!(
            "job {} {:?}: collisions {:.1} ± {:.1}, lambda {:.4}/s",
            j.job_id,
            j.params,
            j.collisions_mean.unwrap_or(f64::NAN),
            j.collisions_sd.unwrap_or(f64::NAN),
            j.lambda_hat.unwrap_or(f64::NAN)
        );
    }
    println!("orphans: {}", agg.orphans.len());
    Ok(())
}
