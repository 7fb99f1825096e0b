//! Naive scalar-loop implementations of the attention components and the
//! spatial layer. These deliberately avoid the tape and the tensorized
//! code paths; the verification suite holds the fast implementations to
//! these within 1e-12.

use crate::egcl::EgclParams;
use crate::nn::{Act, Linear, Mlp, ParamSet};

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

fn linear_ref(params: &ParamSet, layer: &Linear, x: &[f64]) -> Vec<f64> {
    let w = params.get(layer.weight).data();
    let mut out = vec![0.0; layer.out_dim];
    for (i, &xi) in x.iter().enumerate() {
        for o in 0..layer.out_dim {
            out[o] += xi * w[i * layer.out_dim + o];
        }
    }
    if let Some(b) = layer.bias {
        for (o, v) in params.get(b).data().iter().enumerate() {
            out[o] += v;
        }
    }
    out
}

fn act_ref(act: Act, x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = match act {
            Act::Silu => *v / (1.0 + (-*v).exp()),
            Act::Relu => v.max(0.0),
        };
    }
}

pub(crate) fn mlp_ref(params: &ParamSet, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut hidden = linear_ref(params, &mlp.l1, x);
    act_ref(mlp.act, &mut hidden);
    let mut out = linear_ref(params, &mlp.l2, &hidden);
    if mlp.final_act {
        act_ref(mlp.act, &mut out);
    }
    out
}

/// Direct per-node, per-edge evaluation of one EGCL layer.
#[allow(clippy::too_many_arguments)]
pub fn egcl_ref(
    params: &ParamSet,
    layer: &EgclParams,
    feats: &[f64],
    coords: &[f64],
    vels: &[f64],
    adjacency: &[f64],
    n: usize,
    d: usize,
    dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c_agg = 1.0 / n.saturating_sub(1).max(1) as f64;
    let mut new_feats = vec![0.0; n * d];
    let mut new_coords = vec![0.0; n * dim];
    let mut new_vels = vec![0.0; n * dim];
    for i in 0..n {
        let mut msg_sum = vec![0.0; layer.hidden_dim];
        let mut coord_sum = vec![0.0; dim];
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut dist2 = 0.0;
            for c in 0..dim {
                let delta = coords[i * dim + c] - coords[j * dim + c];
                dist2 += delta * delta;
            }
            let mut edge_in = Vec::with_capacity(2 * d + 2);
            edge_in.extend_from_slice(&feats[i * d..(i + 1) * d]);
            edge_in.extend_from_slice(&feats[j * d..(j + 1) * d]);
            edge_in.push(adjacency[i * n + j]);
            edge_in.push(dist2);
            let message = mlp_ref(params, &layer.edge_mlp, &edge_in);
            let weight = mlp_ref(params, &layer.coord_mlp, &message)[0];
            for c in 0..dim {
                coord_sum[c] += (coords[i * dim + c] - coords[j * dim + c]) * weight;
            }
            for (acc, m) in msg_sum.iter_mut().zip(&message) {
                *acc += m;
            }
        }
        let gate = mlp_ref(params, &layer.vel_gate, &feats[i * d..(i + 1) * d])[0];
        for c in 0..dim {
            new_vels[i * dim + c] = gate * vels[i * dim + c] + c_agg * coord_sum[c];
            new_coords[i * dim + c] = coords[i * dim + c] + new_vels[i * dim + c];
        }
        let mut node_in = Vec::with_capacity(d + layer.hidden_dim);
        node_in.extend_from_slice(&feats[i * d..(i + 1) * d]);
        node_in.extend_from_slice(&msg_sum);
        let update = mlp_ref(params, &layer.node_mlp, &node_in);
        for k in 0..d {
            new_feats[i * d + k] = feats[i * d + k] + update[k];
        }
    }
    (new_feats, new_coords, new_vels)
}

/// Per-node scaled dot-product attention over time, one (t, s) pair at a
/// time. `theta` is `[N, L, d]`, projections are `[d, d]` row-major.
#[allow(clippy::too_many_arguments)]
pub fn feature_attention_ref(
    theta: &[f64],
    n: usize,
    l: usize,
    d: usize,
    query: &[f64],
    key: &[f64],
    value: &[f64],
) -> Vec<f64> {
    let project = |w: &[f64], node: usize, t: usize| -> Vec<f64> {
        let row = &theta[(node * l + t) * d..(node * l + t + 1) * d];
        let mut out = vec![0.0; d];
        for (i, &xi) in row.iter().enumerate() {
            for o in 0..d {
                out[o] += xi * w[i * d + o];
            }
        }
        out
    };
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * l * d];
    for node in 0..n {
        let qs: Vec<Vec<f64>> = (0..l).map(|t| project(query, node, t)).collect();
        let ks: Vec<Vec<f64>> = (0..l).map(|t| project(key, node, t)).collect();
        let vs: Vec<Vec<f64>> = (0..l).map(|t| project(value, node, t)).collect();
        for t in 0..l {
            let mut logits: Vec<f64> = (0..l)
                .map(|s| {
                    let dot: f64 = qs[t].iter().zip(&ks[s]).map(|(a, b)| a * b).sum();
                    dot * scale
                })
                .collect();
            softmax_row(&mut logits);
            for s in 0..l {
                for c in 0..d {
                    out[(node * l + t) * d + c] += logits[s] * vs[s][c];
                }
            }
        }
    }
    out
}

/// Attention weights for the position component: softmax over source steps
/// of `-|xi(t) - xi(s)|^2 / sqrt(dim)`. Returns `[N, L, L]`.
pub fn position_weights_ref(coords: &[f64], n: usize, l: usize, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut weights = vec![0.0; n * l * l];
    for node in 0..n {
        for t in 0..l {
            let row = &mut weights[(node * l + t) * l..(node * l + t + 1) * l];
            for (s, w) in row.iter_mut().enumerate() {
                let mut dist2 = 0.0;
                for c in 0..dim {
                    let delta =
                        coords[(node * l + t) * dim + c] - coords[(node * l + s) * dim + c];
                    dist2 += delta * delta;
                }
                *w = -dist2 * scale;
            }
            softmax_row(row);
        }
    }
    weights
}

/// Convex-combination-of-differences position update with the self term
/// masked out of the sum.
pub fn position_attention_ref(
    coords: &[f64],
    n: usize,
    l: usize,
    dim: usize,
    b_coef: f64,
) -> Vec<f64> {
    let weights = position_weights_ref(coords, n, l, dim);
    let mut out = coords.to_vec();
    for node in 0..n {
        for t in 0..l {
            for s in 0..l {
                if s == t {
                    continue;
                }
                let w = weights[(node * l + t) * l + s];
                for c in 0..dim {
                    out[(node * l + t) * dim + c] += b_coef
                        * w
                        * (coords[(node * l + s) * dim + c] - coords[(node * l + t) * dim + c]);
                }
            }
        }
    }
    out
}

/// Velocity attention weights: softmax of pairwise dot products. `[N, L, L]`.
pub fn velocity_weights_ref(vels: &[f64], n: usize, l: usize, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut weights = vec![0.0; n * l * l];
    for node in 0..n {
        for t in 0..l {
            let row = &mut weights[(node * l + t) * l..(node * l + t + 1) * l];
            for (s, w) in row.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dim {
                    dot += vels[(node * l + t) * dim + c] * vels[(node * l + s) * dim + c];
                }
                *w = dot * scale;
            }
            softmax_row(row);
        }
    }
    weights
}

pub fn velocity_attention_ref(vels: &[f64], n: usize, l: usize, dim: usize) -> Vec<f64> {
    let weights = velocity_weights_ref(vels, n, l, dim);
    let mut out = vec![0.0; n * l * dim];
    for node in 0..n {
        for t in 0..l {
            for s in 0..l {
                let w = weights[(node * l + t) * l + s];
                for c in 0..dim {
                    out[(node * l + t) * dim + c] += w * vels[(node * l + s) * dim + c];
                }
            }
        }
    }
    out
}

/// Per-slice adjacency attention: left-projected key/query/value matrices,
/// row softmax of `q k^T / sqrt(N)`, applied to `v`. `adjacency` is
/// `[L, N, N]`, projections `[N, N]`.
pub fn adjacency_attention_ref(
    adjacency: &[f64],
    l: usize,
    n: usize,
    query: &[f64],
    key: &[f64],
    value: &[f64],
) -> Vec<f64> {
    let matmul = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let av = a[i * n + k];
                for j in 0..n {
                    out[i * n + j] += av * b[k * n + j];
                }
            }
        }
        out
    };
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = vec![0.0; l * n * n];
    for t in 0..l {
        let slice = &adjacency[t * n * n..(t + 1) * n * n];
        let q = matmul(query, slice);
        let k = matmul(key, slice);
        let v = matmul(value, slice);
        // logits = q k^T
        let mut logits = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for c in 0..n {
                    dot += q[i * n + c] * k[j * n + c];
                }
                logits[i * n + j] = dot * scale;
            }
        }
        for i in 0..n {
            softmax_row(&mut logits[i * n..(i + 1) * n]);
        }
        let applied = matmul(&logits, &v);
        out[t * n * n..(t + 1) * n * n].copy_from_slice(&applied);
    }
    out
}
