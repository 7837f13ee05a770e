//! Load a store layout and print shortest routes between points of interest.
//!
//!     cargo run --example store_routes [layout.json]

use storesim::layout::load_layout;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/grid_3x3.layout.json").into());
    let layout = load_layout(&path)?;
    println!(
        "layout {}: {} nodes, {} edges, {} bays, {} tills",
        layout.id(),
        layout.nodes().len(),
        layout.edges().len(),
        layout.bays().len(),
        layout.tills().len()
    );
    let spawn = layout.node_id(layout.spawn()).to_string();
    for bay in layout.bays() {
        let route = layout.route(&spawn, layout.node_id(bay.node))?;
        let names: Vec<&str> = route.nodes.iter().map(|&n| layout.node_id(n)).collect();
        println!("{spawn} -> {} ({}): {:.1} m via {}", bay.id, bay.products.iter().cloned().collect::<Vec<_>>().join(","), route.length, names.join(" > "));
    }
    for &till in layout.tills() {
        let out = layout.route_idx(till, layout.despawn())?;
        println!("till {} -> exit: {:.1} m", layout.node_id(till), out.length);
    }
    Ok(())
}
