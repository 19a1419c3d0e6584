use banet::diffcore::{grad_check, CoordSample, ParamStore, Tape, Tensor, Var};
use banet::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

const ALL: CoordSample = CoordSample {
    per_param: None,
    seed: 0,
};

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let i3 = tape.constant(Tensor::eye(3));
    let x = tape.constant(random(&[3, 4], &mut rng));
    let y = tape.matmul(i3, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv1d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[1, 1, 7], &mut rng));
    let w = tape.constant(t(&[1, 1, 1], &[1.0]));
    let y = tape.conv1d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn softmax_of_symmetric_input() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.7, 0.7]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn square_derivative() {
    let mut store = ParamStore::<f64>::new();
    let x = store.insert("x", t(&[], &[3.0])).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum_all(sq);
    let g = tape.backward(loss, &store).unwrap();
    assert_eq!(g.get(x).data(), &[6.0]);
}

#[test]
fn unused_param_gets_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", t(&[2], &[1.0, 2.0])).unwrap();
    let b = store.insert("b", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let mut tape = Tape::new();
    let av = tape.param(&store, a);
    let loss = tape.sum_all(av);
    let g = tape.backward(loss, &store).unwrap();
    assert_eq!(g.get(b).data(), &[0.0, 0.0, 0.0]);
    assert_eq!(g.get(a).data(), &[1.0, 1.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x, &store), Err(Error::Contract(_))));
}

#[test]
fn shape_and_axis_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(tape.sum(a, 2), Err(Error::Axis { axis: 2, rank: 2, .. })));
    assert!(matches!(tape.softmax(a, 5), Err(Error::Axis { .. })));
}

fn mlp_store(rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let dims = [5, 8, 8, 3];
    for l in 0..3 {
        store
            .insert_uniform(format!("w{l}"), &[dims[l], dims[l + 1]], dims[l], 1.0, rng)
            .unwrap();
        store
            .insert_uniform(format!("b{l}"), &[dims[l + 1]], dims[l], 1.0, rng)
            .unwrap();
    }
    store
}

fn mlp_loss(tape: &mut Tape<f64>, store: &ParamStore<f64>, x: &Tensor<f64>) -> Result<Var> {
    let mut h = tape.constant(x.clone());
    for l in 0..3 {
        let w = tape.param(store, store.id(&format!("w{l}")).unwrap());
        let b = tape.param(store, store.id(&format!("b{l}")).unwrap());
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        h = if l < 2 { tape.tanh(h) } else { h };
    }
    let sq = tape.mul(h, h)?;
    Ok(tape.sum_all(sq))
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = mlp_store(&mut rng);
    let x = random(&[4, 5], &mut rng);
    let report = grad_check(|tape, p| mlp_loss(tape, p, &x), &store, 1e-5, ALL).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.coords_checked, store.flat_len());
}

#[test]
fn quadratic_form_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x = store.insert("x", random(&[4, 1], &mut rng)).unwrap();
    let a = random(&[4, 4], &mut rng);
    let report = grad_check(
        |tape, p| {
            let xv = tape.param(p, x);
            let av = tape.constant(a.clone());
            let ax = tape.matmul(av, xv)?;
            let prod = tape.mul(ax, xv)?;
            Ok(tape.sum_all(prod))
        },
        &store,
        1e-5,
        ALL,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn constant_objective_has_zero_gradients() {
    let mut store = ParamStore::<f64>::new();
    store.insert_const("x", &[3], 1.0).unwrap();
    let report = grad_check(
        |tape, _| {
            let c = tape.constant(t(&[], &[2.5]));
            Ok(tape.sum_all(c))
        },
        &store,
        1e-5,
        ALL,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
    assert_eq!(report.analytic, 0.0);
    assert_eq!(report.numeric, 0.0);
}

#[test]
fn non_finite_objective_is_a_check_error() {
    let mut store = ParamStore::<f64>::new();
    let x = store.insert_const("x", &[1], 0.0).unwrap();
    let res = grad_check(
        |tape, p| {
            let xv = tape.param(p, x);
            let inf = tape.constant(t(&[1], &[f64::INFINITY]));
            let y = tape.add(xv, inf)?;
            Ok(tape.sum_all(y))
        },
        &store,
        1e-5,
        ALL,
    );
    assert!(matches!(res, Err(Error::Check(_))));
}

/// Each op on its own, differentiated against finite differences through a
/// random linear read-out so every output element matters.
fn check_op(shapes: &[&[usize]], op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.insert(format!("in{i}"), random(s, &mut rng)).unwrap())
        .collect();
    let readout_seed = rng.random::<u64>();
    let report = grad_check(
        |tape, p| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(p, id)).collect();
            let y = op(tape, &vars)?;
            let mut r = ChaCha8Rng::seed_from_u64(readout_seed);
            let w = random(tape.shape(y), &mut r);
            let wv = tape.constant(w);
            let prod = tape.mul(y, wv)?;
            Ok(tape.sum_all(prod))
        },
        &store,
        1e-5,
        ALL,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn op_gradients_match_finite_differences() {
    check_op(&[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check_op(&[&[3, 4]], |t, v| Ok(t.scale(v[0], -2.5)));
    check_op(&[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1]));
    check_op(&[&[2, 3, 4], &[4]], |t, v| t.scale_cols(v[0], v[1]));
    check_op(&[&[3, 4], &[3]], |t, v| t.scale_rows(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 1]], |t, v| t.scale_rows(v[0], v[1]));
    check_op(&[&[2, 3], &[2, 5]], |t, v| t.concat(&[v[0], v[1]], 1));
    check_op(&[&[2, 3, 2], &[2, 1, 2]], |t, v| t.concat(&[v[0], v[1]], 1));
    check_op(&[&[3, 4]], |t, v| Ok(t.sigmoid(v[0])));
    check_op(&[&[3, 4]], |t, v| Ok(t.tanh(v[0])));
    check_op(&[&[3, 4]], |t, v| Ok(t.relu(v[0])));
    check_op(&[&[3, 4]], |t, v| t.softmax(v[0], 1));
    check_op(&[&[3, 4]], |t, v| t.softmax(v[0], 0));
    check_op(&[&[3, 4]], |t, v| t.log_softmax(v[0], 1));
    check_op(&[&[2, 3, 9], &[4, 3, 3], &[4]], |t, v| {
        t.conv1d(v[0], v[1], Some(v[2]), 1, 1)
    });
    check_op(&[&[2, 3, 9], &[4, 3, 3]], |t, v| t.conv1d(v[0], v[1], None, 2, 1));
    check_op(&[&[2, 3, 8]], |t, v| t.maxpool1d(v[0], 2, 2));
    check_op(&[&[2, 3, 8]], |t, v| t.maxpool1d(v[0], 3, 1));
    check_op(&[&[3, 5]], |t, v| t.layer_norm(v[0], 1, 1e-5));
    check_op(&[&[2, 4, 3]], |t, v| t.layer_norm(v[0], 1, 1e-5));
    check_op(&[&[4, 3]], |t, v| t.gather(v[0], &[3, 0, 0, 2]));
    check_op(&[&[4, 3]], |t, v| t.scatter_add(v[0], &[1, 1, 0, 4], 6));
    check_op(&[&[2, 3, 4]], |t, v| t.sum(v[0], 1));
    check_op(&[&[2, 3, 4]], |t, v| t.mean(v[0], 2));
    check_op(&[&[2, 3, 4]], |t, v| t.max(v[0], 1));
    check_op(&[&[4, 3]], |t, v| t.l2_norm_rows(v[0]));
    check_op(&[&[4, 3]], |t, v| {
        let s = t.scale(v[0], 3.0);
        t.smooth_l1(s, 1.0)
    });
    check_op(&[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
    check_op(&[&[2, 6, 2]], |t, v| t.narrow(v[0], 1, 2, 3));
}

#[test]
fn maxpool_routes_gradient_to_lowest_argmax() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[1, 1, 4], &[2.0, 2.0, 1.0, 3.0]));
    let y = tape.maxpool1d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
    let loss = tape.sum_all(y);
    let g = tape.backward_nodes(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn max_ties_go_to_lowest_index() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[3, 1], &[5.0, 5.0, 5.0]));
    let y = tape.max(x, 0).unwrap();
    let loss = tape.sum_all(y);
    let g = tape.backward_nodes(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn smooth_l1_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &[0.5, -0.5, 2.0, -3.0]));
    let y = tape.smooth_l1(x, 1.0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.125, 0.125, 1.5, 2.5]);
}

#[test]
fn frozen_param_gets_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", t(&[2], &[1.0, 2.0])).unwrap();
    let mut tape = Tape::new();
    let av = tape.frozen_param(&store, a);
    let sq = tape.mul(av, av).unwrap();
    let loss = tape.sum_all(sq);
    let g = tape.backward(loss, &store).unwrap();
    assert_eq!(g.get(a).data(), &[0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-20.0f64..20.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 4], &data));
        let y = tape.softmax(x, 1).unwrap();
        let ly = tape.log_softmax(x, 1).unwrap();
        for r in 0..3 {
            let row = &tape.value(y).data()[r * 4..r * 4 + 4];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (c, p) in row.iter().enumerate() {
                let ls = tape.value(ly).data()[r * 4 + c];
                prop_assert!((ls - p.ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = mlp_store(&mut rng);
        let x1 = random(&[3, 5], &mut rng);
        let x2 = random(&[3, 5], &mut rng);
        let grads_of = |f: &dyn Fn(&mut Tape<f64>) -> Var| {
            let mut tape = Tape::new();
            let loss = f(&mut tape);
            tape.backward(loss, &store).unwrap().flat()
        };
        let gf = grads_of(&|tape| mlp_loss(tape, &store, &x1).unwrap());
        let gg = grads_of(&|tape| mlp_loss(tape, &store, &x2).unwrap());
        let gc = grads_of(&|tape| {
            let f = mlp_loss(tape, &store, &x1).unwrap();
            let g = mlp_loss(tape, &store, &x2).unwrap();
            let fa = tape.scale(f, a);
            let gb = tape.scale(g, b);
            tape.add(fa, gb).unwrap()
        });
        for i in 0..gc.len() {
            let expect = a * gf[i] + b * gg[i];
            prop_assert!((gc[i] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }
}
