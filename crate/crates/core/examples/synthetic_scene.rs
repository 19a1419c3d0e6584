//! Generates one synthetic road scene, prints a summary of its actors, lane
//! graph and boundaries, and round-trips it through the JSON scene format.
//!
//! cargo run --example synthetic_scene -- [seed]

use banet::scene::{generate_synthetic, load_scene, normalize, save_scene, Adjacency, SceneGenConfig};

fn main() -> banet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let scene = generate_synthetic(&SceneGenConfig::desk(), seed)?;
    println!(
        "{}: {} lanes, {} boundaries",
        scene.id,
        scene.lanes.len(),
        scene.boundaries.len()
    );
    for a in &scene.actors {
        let p = a.current_position();
        let seen = a.observed.iter().filter(|o| **o).count();
        println!(
            "  {:<8} {:?} at ({:6.2}, {:6.2}), {seen}/{} steps observed{}",
            a.id,
            a.kind,
            p[0],
            p[1],
            a.observed.len(),
            if a.is_focal { ", focal" } else { "" }
        );
    }
    let g = &scene.lane_graph;
    print!("lane graph: {} nodes", g.len());
    for kind in Adjacency::ALL {
        print!(", {} {}", g.edges(kind).len(), kind.name());
    }
    println!();

    let bytes = save_scene(&scene);
    let back = load_scene(&bytes)?;
    println!("JSON round trip: {} bytes, equal = {}", bytes.len(), back == scene);

    let focal = scene.focal_actors().next().expect("one focal actor");
    let local = normalize(&scene, &focal.id)?;
    let p = local.actor(&focal.id).expect("same actor").current_position();
    println!(
        "in {}'s frame the focal actor sits at ({:.1e}, {:.1e})",
        focal.id, p[0], p[1]
    );
    Ok(())
}
