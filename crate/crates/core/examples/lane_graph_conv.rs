//! Runs the lane encoder's gated graph convolutions over a synthetic lane
//! graph and shows how far one node's features spread per layer.
//!
//! cargo run --example lane_graph_conv

use banet::diffcore::{ParamStore, Tape};
use banet::net_encoder::{lane_inputs, GatedGraphConv};
use banet::nn::{Fwd, Init};
use banet::scene::{generate_synthetic, SceneGenConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> banet::Result<()> {
    let scene = generate_synthetic(&SceneGenConfig::desk(), 4)?;
    let lanes = lane_inputs(&scene.lane_graph, 10.0);
    let (n, d) = (lanes.count, 8);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layers: Vec<GatedGraphConv> = (0..4)
        .map(|i| {
            GatedGraphConv::new(
                &mut Init {
                    store: &mut store,
                    rng: &mut rng,
                },
                &format!("g{i}"),
                d,
            )
        })
        .collect::<banet::Result<_>>()?;

    // a one-hot bump on node 0; every layer moves it one hop further
    let mut x = vec![0.0; n * d];
    x[0] = 1.0;
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &store);
    let base = f.constant(&[n, d], &x)?;
    let mut h = base;
    for (i, layer) in layers.iter().enumerate() {
        // subtract the response to an all-zero input so only the bump's spread counts
        let zero = f.constant(&[n, d], &vec![0.0; n * d])?;
        let mut z = zero;
        for l in &layers[..=i] {
            z = l.forward(&mut f, z, &lanes.adjacency)?;
        }
        h = layer.forward(&mut f, h, &lanes.adjacency)?;
        let (hv, zv) = (f.tape.value(h).to_f64(), f.tape.value(z).to_f64());
        let touched = (0..n)
            .filter(|&j| (0..d).any(|k| (hv[j * d + k] - zv[j * d + k]).abs() > 1e-12))
            .count();
        println!("after layer {}: {touched} of {n} nodes depend on node 0", i + 1);
    }
    Ok(())
}
