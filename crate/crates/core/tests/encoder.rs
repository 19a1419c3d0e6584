mod common;

use banet::diffcore::{ParamStore, Tape};
use banet::net_encoder::{
    actor_inputs, boundary_inputs, lane_inputs, ActorEncoder, BoundaryEncoder, BoundaryInputs, GatedGraphConv,
    LaneEncoder, BOUNDARY_FEATURES,
};
use banet::nn::{Fwd, Init};
use banet::scene::{generate_synthetic, Adjacency, Marking, SceneGenConfig};
use banet::Error;
use common::dense::dense_gconv;
use common::*;
use proptest::prelude::*;
use rand::Rng;

type Graph = [Vec<(usize, usize)>; 4];

fn gconv(d: usize, seed: u64) -> (GatedGraphConv, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = GatedGraphConv::new(
        &mut Init {
            store: &mut store,
            rng: &mut r,
        },
        "g",
        d,
    )
    .unwrap();
    (layer, store)
}

fn random_graph(r: &mut impl Rng, n: usize, edges: usize) -> Graph {
    let mut g: Graph = Default::default();
    for list in g.iter_mut() {
        for _ in 0..edges {
            let i = r.random_range(0..n);
            let j = (i + r.random_range(1..n)) % n;
            list.push((i, j));
        }
    }
    g
}

fn run_gconv(
    layer: &GatedGraphConv,
    store: &ParamStore<f64>,
    x: &[f64],
    n: usize,
    d: usize,
    g: &Graph,
    gated: bool,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, store);
    let xv = f.constant(&[n, d], x).unwrap();
    let y = if gated {
        layer.forward(&mut f, xv, g).unwrap()
    } else {
        layer.forward_ungated(&mut f, xv, g).unwrap()
    };
    tape.value(y).to_f64()
}

#[test]
fn gated_conv_matches_dense_oracle() {
    let (n, d) = (20, 8);
    for seed in 0..20 {
        let (layer, store) = gconv(d, seed);
        let mut r = rng(1000 + seed);
        let x = uniform(&mut r, n * d, 1.0);
        let g = random_graph(&mut r, n, 30);
        let sparse = run_gconv(&layer, &store, &x, n, d, &g, true);
        let dense = dense_gconv(&layer, &store, &x, n, d, &g);
        assert!(max_abs_diff(&sparse, &dense) < 1e-6);
    }
}

#[test]
fn empty_adjacency_uses_only_the_self_path() {
    let (n, d) = (7, 6);
    let (layer, mut store) = gconv(d, 3);
    let x = uniform(&mut rng(4), n * d, 1.0);
    let empty: Graph = Default::default();
    let before = run_gconv(&layer, &store, &x, n, d, &empty, true);
    for c in 0..4 {
        store.get_mut(layer.w[c]).data_mut().iter_mut().for_each(|v| *v *= -3.0);
    }
    assert_eq!(before, run_gconv(&layer, &store, &x, n, d, &empty, true));
    let xw0 = matmul(&x, store.get(layer.w0).data(), n, d, d);
    let relu: Vec<f64> = xw0.iter().map(|v| v.max(0.0)).collect();
    let expect: Vec<f64> = layer_norm_rows(&relu, d).iter().zip(&x).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(&before, &expect) < 1e-12);
}

#[test]
fn saturated_gates_reduce_to_empty_and_ungated_convs() {
    let (n, d) = (20, 8);
    let (layer, mut store) = gconv(d, 8);
    let mut r = rng(9);
    let x = uniform(&mut r, n * d, 1.0);
    let g = random_graph(&mut r, n, 25);
    let empty: Graph = Default::default();

    for c in 0..4 {
        store.get_mut(layer.b[c]).data_mut()[0] = -30.0;
    }
    let closed = run_gconv(&layer, &store, &x, n, d, &g, true);
    assert!(max_abs_diff(&closed, &run_gconv(&layer, &store, &x, n, d, &empty, true)) < 1e-5);

    for c in 0..4 {
        store.get_mut(layer.b[c]).data_mut()[0] = 30.0;
    }
    let open = run_gconv(&layer, &store, &x, n, d, &g, true);
    assert!(max_abs_diff(&open, &run_gconv(&layer, &store, &x, n, d, &g, false)) < 1e-5);
}

#[test]
fn gates_lie_strictly_inside_the_unit_interval() {
    let (n, d) = (30, 8);
    let (layer, store) = gconv(d, 10);
    let x = uniform(&mut rng(11), n * d, 2.0);
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &store);
    let xv = f.constant(&[n, d], &x).unwrap();
    for kind in Adjacency::ALL {
        let g = layer.gate(&mut f, xv, kind).unwrap();
        assert_eq!(f.tape.shape(g), &[n, 1]);
        assert!(f.tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn gated_conv_gradients_match_finite_differences() {
    let (n, d) = (12, 6);
    let (layer, store) = gconv(d, 12);
    let mut r = rng(13);
    let x = uniform(&mut r, n * d, 1.0);
    let g = random_graph(&mut r, n, 15);
    let report = check_block(&store, 8, |f| {
        let xv = f.constant(&[n, d], &x)?;
        layer.forward(f, xv, &g)
    });
    assert!(report.max_rel_error < GRAD_TOL, "{report:?}");
}

fn lane_encoder(d: usize, layers: usize, seed: u64) -> (LaneEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let enc = LaneEncoder::new(
        &mut Init {
            store: &mut store,
            rng: &mut r,
        },
        "lane",
        d,
        layers,
    )
    .unwrap();
    (enc, store)
}

fn encode_lanes(enc: &LaneEncoder, store: &ParamStore<f64>, graph: &banet::scene::LaneGraph) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, store);
    let y = enc.forward(&mut f, &lane_inputs(graph, 10.0)).unwrap();
    tape.value(y).to_f64()
}

#[test]
fn lane_encoder_is_permutation_equivariant() {
    let scene = generate_synthetic(
        &SceneGenConfig {
            lane_length: 30.0,
            ..SceneGenConfig::desk()
        },
        2,
    )
    .unwrap();
    let graph = &scene.lane_graph;
    let n = graph.len();
    let d = 8;
    let (enc, store) = lane_encoder(d, 2, 3);
    let base = encode_lanes(&enc, &store, graph);
    assert_eq!(base.len(), n * d);
    let mut r = rng(4);
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = encode_lanes(&enc, &store, &graph.permuted(&perm));
        for old in 0..n {
            let a = &base[old * d..(old + 1) * d];
            let b = &permuted[perm[old] * d..(perm[old] + 1) * d];
            assert!(max_abs_diff(a, b) < 1e-9);
        }
    }
}

#[test]
fn lane_encoder_gradients_and_empty_graph() {
    let scene = generate_synthetic(
        &SceneGenConfig {
            lane_length: 16.0,
            num_lanes: 2,
            ..SceneGenConfig::desk()
        },
        6,
    )
    .unwrap();
    let inputs = lane_inputs(&scene.lane_graph, 10.0);
    let (enc, store) = lane_encoder(6, 2, 7);
    let report = check_block(&store, 6, |f| enc.forward(f, &inputs));
    assert!(report.max_rel_error < GRAD_TOL, "{report:?}");

    let empty = lane_inputs(&Default::default(), 10.0);
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &store);
    assert!(matches!(enc.forward(&mut f, &empty), Err(Error::Encoding(_))));
}

fn actor_encoder(d: usize, seed: u64) -> (ActorEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let enc = ActorEncoder::new(
        &mut Init {
            store: &mut store,
            rng: &mut r,
        },
        "actor",
        d,
    )
    .unwrap();
    (enc, store)
}

#[test]
fn actor_encoder_shape_and_purity() {
    let mut scene = generate_synthetic(&SceneGenConfig::desk(), 1).unwrap();
    assert_eq!(scene.actors.len(), 3);
    let (enc, store) = actor_encoder(64, 2);
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &store);
    let y = enc.forward(&mut f, &actor_inputs(&scene, 10.0).unwrap()).unwrap();
    assert_eq!(tape.shape(y), &[3, 64]);

    scene.actors[1].history = scene.actors[0].history.clone();
    scene.actors[1].observed = scene.actors[0].observed.clone();
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &store);
    let y = enc.forward(&mut f, &actor_inputs(&scene, 10.0).unwrap()).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[..64], v[64..128]);
}

#[test]
fn actor_encoder_ignores_unobserved_steps() {
    let mut scene = generate_synthetic(&SceneGenConfig::desk(), 3).unwrap();
    scene.actors[1].observed[..4].iter_mut().for_each(|o| *o = false);
    let (enc, store) = actor_encoder(16, 4);
    let run = |scene: &banet::scene::Scene| {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store);
        let y = enc.forward(&mut f, &actor_inputs(scene, 10.0).unwrap()).unwrap();
        tape.value(y).to_f64()
    };
    let before = run(&scene);
    scene.actors[1].history[0].position = [1e3, -1e3];
    assert_eq!(before, run(&scene));
}

#[test]
fn actor_encoder_gradients_match_finite_differences() {
    let mut scene = generate_synthetic(
        &SceneGenConfig {
            num_actors: 2,
            ..SceneGenConfig::desk()
        },
        5,
    )
    .unwrap();
    scene.actors[1].observed[..3].iter_mut().for_each(|o| *o = false);
    let inputs = actor_inputs(&scene, 10.0).unwrap();
    let (enc, store) = actor_encoder(6, 6);
    let report = check_block(&store, 4, |f| enc.forward(f, &inputs));
    assert!(report.max_rel_error < GRAD_TOL, "{report:?}");
}

#[test]
fn actor_without_observations_is_an_encoding_error() {
    let mut scene = generate_synthetic(&SceneGenConfig::desk(), 3).unwrap();
    scene.actors[2].observed.iter_mut().for_each(|o| *o = false);
    assert!(matches!(actor_inputs(&scene, 10.0), Err(Error::Encoding(_))));

    let mut short = generate_synthetic(
        &SceneGenConfig {
            history: 3,
            ..SceneGenConfig::desk()
        },
        3,
    )
    .unwrap();
    short.actors.truncate(1);
    let (enc, store) = actor_encoder(4, 1);
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &store);
    assert!(matches!(
        enc.forward(&mut f, &actor_inputs(&short, 10.0).unwrap()),
        Err(Error::Encoding(_))
    ));
}

fn boundary_encoder(d: usize, seed: u64) -> (BoundaryEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let enc = BoundaryEncoder::new(
        &mut Init {
            store: &mut store,
            rng: &mut r,
        },
        "boundary",
        d,
    )
    .unwrap();
    (enc, store)
}

#[test]
fn boundary_encoder_handles_empty_sets_and_markings() {
    let (enc, store) = boundary_encoder(8, 1);
    let empty = BoundaryInputs {
        count: 0,
        features: vec![],
        positions: vec![],
        polyline: vec![],
    };
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &store);
    let y = enc.forward(&mut f, &empty).unwrap();
    assert_eq!(tape.shape(y), &[0, 8]);

    let mut scene = generate_synthetic(
        &SceneGenConfig {
            num_lanes: 1,
            ..SceneGenConfig::desk()
        },
        2,
    )
    .unwrap();
    scene.boundaries[0].marking = Marking::Solid;
    let solid = boundary_inputs(&scene, 10.0);
    scene.boundaries[0].marking = Marking::Dashed;
    let dashed = boundary_inputs(&scene, 10.0);
    assert_eq!(solid.positions, dashed.positions);
    let embed = |x: &BoundaryInputs| {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &store);
        let y = enc.forward(&mut f, x).unwrap();
        tape.value(y).to_f64()
    };
    let (a, b) = (embed(&solid), embed(&dashed));
    assert!(max_abs_diff(&a[..8], &b[..8]) > 1e-6);
}

#[test]
fn boundary_encoder_gradients_match_finite_differences() {
    let scene = generate_synthetic(
        &SceneGenConfig {
            lane_length: 12.0,
            num_lanes: 1,
            ..SceneGenConfig::desk()
        },
        2,
    )
    .unwrap();
    let inputs = boundary_inputs(&scene, 10.0);
    assert_eq!(inputs.features.len(), inputs.count * BOUNDARY_FEATURES);
    let (enc, store) = boundary_encoder(6, 3);
    let report = check_block(&store, 8, |f| enc.forward(f, &inputs));
    assert!(report.max_rel_error < GRAD_TOL, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gated_conv_is_equivariant_under_random_permutations(seed in any::<u64>()) {
        let (n, d) = (10, 5);
        let (layer, store) = gconv(d, seed);
        let mut r = rng(seed ^ 0x55);
        let x = uniform(&mut r, n * d, 1.0);
        let g = random_graph(&mut r, n, 12);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let mut xp = vec![0.0; n * d];
        for old in 0..n {
            xp[perm[old] * d..(perm[old] + 1) * d].copy_from_slice(&x[old * d..(old + 1) * d]);
        }
        let mut gp: Graph = Default::default();
        for c in 0..4 {
            gp[c] = g[c].iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        }
        let y = run_gconv(&layer, &store, &x, n, d, &g, true);
        let yp = run_gconv(&layer, &store, &xp, n, d, &gp, true);
        for old in 0..n {
            prop_assert!(max_abs_diff(&y[old * d..(old + 1) * d], &yp[perm[old] * d..(perm[old] + 1) * d]) < 1e-9);
        }
    }
}
