//! Equivariant temporal attention: feature, position, velocity and
//! adjacency components in their tensorized forms, plus sinusoidal
//! positional encodings and layer normalization.
//!
//! Attention logits carry 1/sqrt(dim) temperature scalings throughout.
//! The position component attends with softmax of negative squared
//! time-differences (closer frames weigh more) and excludes the self term
//! from its update; the velocity component uses dot-product logits, which
//! are rotation-invariant.

use crate::error::TensorError;
use crate::nn::{Binding, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const CAUSAL_NEG: f64 = -1e30;

/// Shared per-node projections for the feature component.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub dim: usize,
}

impl AttentionParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> AttentionParams {
        let bound = (6.0 / dim.max(1) as f64).sqrt();
        AttentionParams {
            query: params.add(
                format!("{prefix}.query"),
                Tensor::rand_uniform(&[dim, dim], bound, rng),
            ),
            key: params.add(
                format!("{prefix}.key"),
                Tensor::rand_uniform(&[dim, dim], bound, rng),
            ),
            value: params.add(
                format!("{prefix}.value"),
                Tensor::rand_uniform(&[dim, dim], bound, rng),
            ),
            dim,
        }
    }

    pub fn param_count(&self) -> usize {
        3 * self.dim * self.dim
    }
}

fn last_two(shape: &[usize]) -> (usize, usize) {
    let r = shape.len();
    (shape[r - 2], shape[r - 1])
}

/// Additive mask that kills attention to future steps (`s > t`).
fn causal_logit_mask(tape: &mut Tape, l: usize) -> Result<TensorId, TensorError> {
    let mut mask = vec![0.0; l * l];
    for t in 0..l {
        for s in (t + 1)..l {
            mask[t * l + s] = CAUSAL_NEG;
        }
    }
    tape.constant(vec![l, l], mask)
}

fn masked_softmax(
    tape: &mut Tape,
    logits: TensorId,
    l: usize,
    causal: bool,
) -> Result<TensorId, TensorError> {
    let logits = if causal {
        let mask = causal_logit_mask(tape, l)?;
        tape.add(logits, mask)?
    } else {
        logits
    };
    tape.softmax_last(logits)
}

/// Scaled dot-product attention over time with shared Q/K/V, applied to
/// `[..., L, d]`. Returns the contextualized features.
pub fn feature_attention(
    tape: &mut Tape,
    binding: &Binding,
    params: &AttentionParams,
    feats: TensorId,
    causal: bool,
) -> Result<TensorId, TensorError> {
    let (out, _) = feature_attention_full(tape, binding, params, feats, causal)?;
    Ok(out)
}

pub fn feature_attention_full(
    tape: &mut Tape,
    binding: &Binding,
    params: &AttentionParams,
    feats: TensorId,
    causal: bool,
) -> Result<(TensorId, TensorId), TensorError> {
    let (l, d) = last_two(tape.shape(feats));
    if d != params.dim {
        return Err(TensorError::ShapeMismatch {
            op: "feature_attention",
            lhs: tape.shape(feats).to_vec(),
            rhs: vec![params.dim, params.dim],
        });
    }
    let q = tape.matmul(feats, binding.id(params.query))?;
    let k = tape.matmul(feats, binding.id(params.key))?;
    let v = tape.matmul(feats, binding.id(params.value))?;
    let kt = tape.transpose_last(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = masked_softmax(tape, logits, l, causal)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Pairwise squared distances over the time axis: `[..., L, dim]` ->
/// `[..., L, L]` with entry `(t, s) = |x(t) - x(s)|^2`.
fn pairwise_dist2(tape: &mut Tape, coords: TensorId) -> Result<TensorId, TensorError> {
    let shape = tape.shape(coords).to_vec();
    let (l, dim) = last_two(&shape);
    let mut row_shape = shape.clone();
    row_shape.insert(shape.len() - 1, 1); // [..., L, 1, dim]
    let mut col_shape = shape.clone();
    col_shape.insert(shape.len() - 2, 1); // [..., 1, L, dim]
    let rows = tape.reshape(coords, row_shape)?;
    let cols = tape.reshape(coords, col_shape)?;
    let diff = tape.sub(rows, cols)?;
    let sq = tape.square(diff)?;
    let rank = tape.shape(sq).len();
    let d2 = tape.sum_axis(sq, rank - 1, false)?;
    debug_assert_eq!(last_two(tape.shape(d2)), (l, l));
    let _ = dim;
    Ok(d2)
}

/// Position update `x(t) + B sum_{s != t} w(t,s) (x(s) - x(t))` with weights
/// softmax(-|x(t)-x(s)|^2 / sqrt(dim)). E(n)-equivariant.
pub fn position_attention(
    tape: &mut Tape,
    coords: TensorId,
    b_coef: f64,
    causal: bool,
) -> Result<TensorId, TensorError> {
    let (out, _) = position_attention_full(tape, coords, b_coef, causal)?;
    Ok(out)
}

pub fn position_attention_full(
    tape: &mut Tape,
    coords: TensorId,
    b_coef: f64,
    causal: bool,
) -> Result<(TensorId, TensorId), TensorError> {
    let (l, dim) = last_two(tape.shape(coords));
    let d2 = pairwise_dist2(tape, coords)?;
    let logits = tape.scale(d2, -1.0 / (dim as f64).sqrt())?;
    let weights = masked_softmax(tape, logits, l, causal)?;

    // (1 - I) mask, intersected with the causal triangle when active
    let mut mask = vec![1.0; l * l];
    for t in 0..l {
        mask[t * l + t] = 0.0;
        if causal {
            for s in (t + 1)..l {
                mask[t * l + s] = 0.0;
            }
        }
    }
    let mask = tape.constant(vec![l, l], mask)?;
    let masked = tape.mul(weights, mask)?;
    let moved = tape.matmul(masked, coords)?;
    let rank = tape.shape(masked).len();
    let row_sum = tape.sum_axis(masked, rank - 1, true)?;
    let scaled_self = tape.mul(row_sum, coords)?;
    let delta = tape.sub(moved, scaled_self)?;
    let delta = tape.scale(delta, b_coef)?;
    let out = tape.add(coords, delta)?;
    Ok((out, weights))
}

/// Velocity attention with dot-product logits; SO(n)-equivariant.
pub fn velocity_attention(
    tape: &mut Tape,
    vels: TensorId,
    causal: bool,
) -> Result<TensorId, TensorError> {
    let (out, _) = velocity_attention_full(tape, vels, causal)?;
    Ok(out)
}

pub fn velocity_attention_full(
    tape: &mut Tape,
    vels: TensorId,
    causal: bool,
) -> Result<(TensorId, TensorId), TensorError> {
    let (l, dim) = last_two(tape.shape(vels));
    let vt = tape.transpose_last(vels)?;
    let logits = tape.matmul(vels, vt)?;
    let logits = tape.scale(logits, 1.0 / (dim as f64).sqrt())?;
    let weights = masked_softmax(tape, logits, l, causal)?;
    let out = tape.matmul(weights, vels)?;
    Ok((out, weights))
}

/// Per-slice attention over adjacency rows: `K(t) = K_A A(t)` etc., then
/// softmax(q k^T / sqrt(N)) applied to v. `adjacency` is `[..., N, N]`.
pub fn adjacency_attention(
    tape: &mut Tape,
    binding: &Binding,
    params: &AttentionParams,
    adjacency: TensorId,
) -> Result<TensorId, TensorError> {
    let (_, n) = last_two(tape.shape(adjacency));
    if n != params.dim {
        return Err(TensorError::ShapeMismatch {
            op: "adjacency_attention",
            lhs: tape.shape(adjacency).to_vec(),
            rhs: vec![params.dim, params.dim],
        });
    }
    let q = tape.matmul(binding.id(params.query), adjacency)?;
    let k = tape.matmul(binding.id(params.key), adjacency)?;
    let v = tape.matmul(binding.id(params.value), adjacency)?;
    let kt = tape.transpose_last(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (n as f64).sqrt())?;
    let weights = tape.softmax_last(logits)?;
    tape.matmul(weights, v)
}

/// Sinusoidal positional-encoding tables, broadcast over the node axis.
/// Odd widths truncate the final pair to its sine term.
#[derive(Clone, Debug)]
pub struct PositionalEncodings {
    pub feats: Tensor,
    pub coords: Tensor,
    pub vels: Tensor,
    pub adjacency: Tensor,
    pub base: f64,
}

fn sinusoid_table(l: usize, width: usize, base: f64) -> Vec<f64> {
    let mut table = vec![0.0; l * width];
    for t in 0..l {
        for c in 0..width {
            let pair = (c / 2) as f64;
            let angle = t as f64 / base.powf(2.0 * pair / width as f64);
            table[t * width + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

fn broadcast_nodes(table: &[f64], l: usize, n: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; l * n * width];
    for t in 0..l {
        for node in 0..n {
            data[(t * n + node) * width..(t * n + node + 1) * width]
                .copy_from_slice(&table[t * width..(t + 1) * width]);
        }
    }
    Tensor::from_vec(vec![l, n, width], data).expect("table shape")
}

pub fn build_positional_encodings(
    l: usize,
    n_nodes: usize,
    feat_dim: usize,
    spatial_dim: usize,
    base: f64,
) -> PositionalEncodings {
    let feat_table = sinusoid_table(l, feat_dim, base);
    let coord_table = sinusoid_table(l, spatial_dim, base);
    let adj_table = sinusoid_table(l, n_nodes * n_nodes, base);
    PositionalEncodings {
        feats: broadcast_nodes(&feat_table, l, n_nodes, feat_dim),
        coords: broadcast_nodes(&coord_table, l, n_nodes, spatial_dim),
        vels: broadcast_nodes(&coord_table, l, n_nodes, spatial_dim),
        adjacency: Tensor::from_vec(vec![l, n_nodes, n_nodes], adj_table).expect("adj table"),
        base,
    }
}

/// Normalize over the last axis to mean 0, variance 1. The denominator is
/// the exact standard deviation clamped below by `LAYER_NORM_EPS`, so
/// constant slices map to zero instead of dividing by zero.
pub fn layer_norm_last(tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
    let rank = tape.shape(x).len();
    let mu = tape.mean_axis(x, rank - 1, true)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_axis(sq, rank - 1, true)?;
    let std = tape.sqrt(var)?;
    let std = tape.clamp_min(std, LAYER_NORM_EPS)?;
    tape.div(centered, std)
}

pub fn layer_norm_features(tape: &mut Tape, feats: TensorId) -> Result<TensorId, TensorError> {
    layer_norm_last(tape, feats)
}

/// Adjacency layer norm treats each slice's N*N entries as one vector.
pub fn layer_norm_adjacency(tape: &mut Tape, adjacency: TensorId) -> Result<TensorId, TensorError> {
    let shape = tape.shape(adjacency).to_vec();
    let (rows, cols) = last_two(&shape);
    let mut flat = shape[..shape.len() - 2].to_vec();
    flat.push(rows * cols);
    let flattened = tape.reshape(adjacency, flat)?;
    let normed = layer_norm_last(tape, flattened)?;
    tape.reshape(normed, shape)
}
