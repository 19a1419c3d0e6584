//! Dense-matrix versions of the sparse message-passing blocks.

use banet::diffcore::ParamStore;
use banet::net_encoder::GatedGraphConv;
use banet::net_fusion::DistanceAttention;
use banet::scene::{Adjacency, Point};

use super::{layer_norm_rows, matmul};

/// Coordinate scale the oracles assume.
pub const SCALE: f64 = 10.0;

/// Distance attention with an explicit `Q x C` neighbor mask.
pub fn dense_attention(
    block: &DistanceAttention,
    store: &ParamStore<f64>,
    q: &[f64],
    qpos: &[Point],
    c: &[f64],
    cpos: &[Point],
    d: usize,
) -> Vec<f64> {
    let (nq, nc) = (qpos.len(), cpos.len());
    let w_rel = store.get(block.rel.w).data();
    let b_rel = store.get(block.rel.b.unwrap()).data();
    let w_ctx = store.get(block.context.w).data();
    let b_ctx = store.get(block.context.b.unwrap()).data();
    let wq = matmul(q, store.get(block.query.w).data(), nq, d, d);
    let mut agg = vec![0.0; nq * d];
    for i in 0..nq {
        for j in 0..nc {
            let dist = ((qpos[i][0] - cpos[j][0]).powi(2) + (qpos[i][1] - cpos[j][1]).powi(2)).sqrt();
            let mask = dist < block.tau && !(block.exclude_self && i == j);
            if !mask {
                continue;
            }
            let delta = [(cpos[j][0] - qpos[i][0]) / SCALE, (cpos[j][1] - qpos[i][1]) / SCALE];
            let mut input = matmul(&delta, w_rel, 1, 2, d);
            input.iter_mut().zip(b_rel).for_each(|(v, b)| *v += b);
            input.extend_from_slice(&c[j * d..(j + 1) * d]);
            let m = matmul(&input, w_ctx, 1, 2 * d, d);
            for k in 0..d {
                agg[i * d + k] += (m[k] + b_ctx[k] + wq[i * d + k]).max(0.0);
            }
        }
    }
    let out = matmul(&agg, store.get(block.out.w).data(), nq, d, d);
    let sum: Vec<f64> = q.iter().zip(&out).map(|(a, b)| a + b).collect();
    layer_norm_rows(&sum, d)
}

/// The layer written with full `N x N` adjacency matrices.
pub fn dense_gconv(
    layer: &GatedGraphConv,
    store: &ParamStore<f64>,
    x: &[f64],
    n: usize,
    d: usize,
    g: &[Vec<(usize, usize)>; 4],
) -> Vec<f64> {
    let mut y = matmul(x, store.get(layer.w0).data(), n, d, d);
    for kind in Adjacency::ALL {
        let c = kind.index();
        let mut a = vec![0.0; n * n];
        for &(i, j) in &g[c] {
            a[i * n + j] += 1.0;
        }
        let xw = matmul(x, store.get(layer.w[c]).data(), n, d, d);
        let msg = matmul(&a, &xw, n, n, d);
        let z = matmul(x, store.get(layer.u[c]).data(), n, d, 1);
        let b = store.get(layer.b[c]).data()[0];
        for i in 0..n {
            let gate = 1.0 / (1.0 + (-(z[i] + b)).exp());
            for k in 0..d {
                y[i * d + k] += gate * msg[i * d + k];
            }
        }
    }
    let relu: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    layer_norm_rows(&relu, d).iter().zip(x).map(|(a, b)| a + b).collect()
}
