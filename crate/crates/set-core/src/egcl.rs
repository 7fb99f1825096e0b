//! E(n)-equivariant graph convolution with velocity, its edge-attribute
//! builder, and the K-layer weight-shared spatial stack.
//!
//! Per layer, with messages over the complete graph:
//!   m_ij = edge_mlp(h_i, h_j, attrs_ij)        attrs = (c_i c_j, |x_i-x_j|^2)
//!   v'   = vel_gate(h_i) * v_i + C * sum_j (x_i - x_j) coord_mlp(m_ij)
//!   x'   = x_i + v'                            (the new velocity)
//!   h'   = h_i + node_mlp(h_i, sum_j m_ij)
//!
//! Feature updates use only invariant quantities, coordinate updates only
//! relative vectors, so the layer is E(n)-equivariant on coordinates and
//! SO(n)-equivariant on velocities.

use crate::error::TensorError;
use crate::nn::{Act, Binding, Mlp, ParamSet};
use crate::tensor::{Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

/// Ordered edge lists of the complete graph, source-major: edge
/// `i * (N-1) + k` leaves node `i`.
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub n: usize,
}

pub fn edge_index(n: usize) -> EdgeIndex {
    let mut src = Vec::with_capacity(n * n.saturating_sub(1));
    let mut dst = Vec::with_capacity(src.capacity());
    for i in 0..n {
        for j in 0..n {
            if i != j {
                src.push(i);
                dst.push(j);
            }
        }
    }
    EdgeIndex { src, dst, n }
}

/// Edge attributes of one graph slice, laid out `[N, N-1, 2]` source-major
/// with channels `(c_i c_j, squared distance)`.
#[derive(Clone, Debug)]
pub struct EdgeAttrs {
    pub n: usize,
    pub values: Tensor,
}

/// Builds edge attributes from a charge-product adjacency and positions.
/// The adjacency must be square and symmetric (it errors otherwise); the
/// diagonal is ignored.
pub fn build_edge_attrs(adjacency: &Tensor, positions: &Tensor) -> Result<EdgeAttrs, TensorError> {
    let n = match adjacency.shape() {
        [r, c] if r == c => *r,
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "build_edge_attrs",
                lhs: other.to_vec(),
                rhs: positions.shape().to_vec(),
            })
        }
    };
    if positions.shape().len() != 2 || positions.shape()[0] != n {
        return Err(TensorError::ShapeMismatch {
            op: "build_edge_attrs",
            lhs: adjacency.shape().to_vec(),
            rhs: positions.shape().to_vec(),
        });
    }
    let a = adjacency.data();
    for i in 0..n {
        for j in (i + 1)..n {
            if a[i * n + j] != a[j * n + i] {
                return Err(TensorError::InvalidArgument(format!(
                    "adjacency is asymmetric at ({i}, {j}): {} vs {}",
                    a[i * n + j],
                    a[j * n + i]
                )));
            }
        }
    }
    let dim = positions.shape()[1];
    let x = positions.data();
    let mut values = Vec::with_capacity(n * (n - 1) * 2);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut dist2 = 0.0;
            for c in 0..dim {
                let d = x[i * dim + c] - x[j * dim + c];
                dist2 += d * d;
            }
            values.push(a[i * n + j]);
            values.push(dist2);
        }
    }
    Ok(EdgeAttrs {
        n,
        values: Tensor::from_vec(vec![n, n - 1, 2], values)?,
    })
}

/// Tape-side edge attributes for a batch of slices: adjacency `[S, N, N]`,
/// coords `[S, N, dim]` -> `[S, E, 2]`. No symmetry validation; inside the
/// model the adjacency stream may have evolved into an asymmetric matrix.
pub fn edge_attrs_on_tape(
    tape: &mut Tape,
    adjacency: TensorId,
    coords: TensorId,
) -> Result<TensorId, TensorError> {
    let n = tape.shape(coords)[1];
    let s = tape.shape(coords)[0];
    let idx = edge_index(n);
    let flat: Vec<usize> = idx
        .src
        .iter()
        .zip(&idx.dst)
        .map(|(&i, &j)| i * n + j)
        .collect();
    let adj_flat = tape.reshape(adjacency, vec![s, n * n])?;
    let charge = tape.index_select(adj_flat, 1, &flat)?;
    let charge = tape.reshape(charge, vec![s, flat.len(), 1])?;
    let xi = tape.index_select(coords, 1, &idx.src)?;
    let xj = tape.index_select(coords, 1, &idx.dst)?;
    let diff = tape.sub(xi, xj)?;
    let sq = tape.square(diff)?;
    let rank = tape.shape(sq).len();
    let dist2 = tape.sum_axis(sq, rank - 1, true)?;
    tape.concat_last(&[charge, dist2])
}

/// Learnable pieces of one EGCL layer.
#[derive(Clone, Debug)]
pub struct EgclParams {
    pub edge_mlp: Mlp,
    pub coord_mlp: Mlp,
    pub vel_gate: Mlp,
    pub node_mlp: Mlp,
    pub feat_dim: usize,
    pub hidden_dim: usize,
}

impl EgclParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        feat_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> EgclParams {
        let edge_mlp = Mlp::init(
            params,
            &format!("{prefix}.edge_mlp"),
            2 * feat_dim + 2,
            hidden_dim,
            hidden_dim,
            Act::Silu,
            true,
            true,
            1.0,
            rng,
        );
        // final layer bias-free with shrunk weights: early coordinate
        // updates stay small
        let coord_mlp = Mlp::init(
            params,
            &format!("{prefix}.coord_mlp"),
            hidden_dim,
            hidden_dim,
            1,
            Act::Silu,
            false,
            false,
            1e-3,
            rng,
        );
        let vel_gate = Mlp::init(
            params,
            &format!("{prefix}.vel_gate"),
            feat_dim,
            hidden_dim,
            1,
            Act::Silu,
            false,
            true,
            1.0,
            rng,
        );
        let node_mlp = Mlp::init(
            params,
            &format!("{prefix}.node_mlp"),
            feat_dim + hidden_dim,
            hidden_dim,
            feat_dim,
            Act::Silu,
            false,
            true,
            1.0,
            rng,
        );
        EgclParams {
            edge_mlp,
            coord_mlp,
            vel_gate,
            node_mlp,
            feat_dim,
            hidden_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.edge_mlp.param_count()
            + self.coord_mlp.param_count()
            + self.vel_gate.param_count()
            + self.node_mlp.param_count()
    }
}

/// One EGCL application over a batch of graph slices.
///
/// `feats [S,N,d]`, `coords`/`vels` `[S,N,dim]`, `edges [S,E,2]` with the
/// source-major layout of [`edge_index`]. Aggregation constant is
/// `C = 1/(N-1)` (mean over neighbors).
pub fn egcl_forward(
    tape: &mut Tape,
    binding: &Binding,
    params: &EgclParams,
    feats: TensorId,
    coords: TensorId,
    vels: TensorId,
    edges: TensorId,
) -> Result<(TensorId, TensorId, TensorId), TensorError> {
    let shape = tape.shape(feats).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "egcl_forward",
            lhs: shape,
            rhs: tape.shape(coords).to_vec(),
        });
    }
    let (s, n) = (shape[0], shape[1]);
    let dim = tape.shape(coords)[2];
    let idx = edge_index(n);
    let n_edges = idx.src.len();
    if tape.shape(edges) != [s, n_edges, 2] {
        return Err(TensorError::ShapeMismatch {
            op: "egcl_forward",
            lhs: tape.shape(edges).to_vec(),
            rhs: vec![s, n_edges, 2],
        });
    }

    let h_src = tape.index_select(feats, 1, &idx.src)?;
    let h_dst = tape.index_select(feats, 1, &idx.dst)?;
    let edge_in = tape.concat_last(&[h_src, h_dst, edges])?;
    let messages = params.edge_mlp.forward(tape, binding, edge_in, None)?;

    let coord_w = params.coord_mlp.forward(tape, binding, messages, None)?;
    let x_src = tape.index_select(coords, 1, &idx.src)?;
    let x_dst = tape.index_select(coords, 1, &idx.dst)?;
    let diff = tape.sub(x_src, x_dst)?;
    let weighted = tape.mul(diff, coord_w)?;
    let grouped = tape.reshape(weighted, vec![s, n, n.saturating_sub(1), dim])?;
    let agg = tape.sum_axis(grouped, 2, false)?;
    let c = 1.0 / n.saturating_sub(1).max(1) as f64;
    let agg = tape.scale(agg, c)?;

    let gate = params.vel_gate.forward(tape, binding, feats, None)?;
    let gated = tape.mul(gate, vels)?;
    let new_vels = tape.add(gated, agg)?;
    let new_coords = tape.add(coords, new_vels)?;

    let msg_grouped = tape.reshape(messages, vec![s, n, n.saturating_sub(1), params.hidden_dim])?;
    let msg_sum = tape.sum_axis(msg_grouped, 2, false)?;
    let node_in = tape.concat_last(&[feats, msg_sum])?;
    let node_out = params.node_mlp.forward(tape, binding, node_in, None)?;
    let new_feats = tape.add(feats, node_out)?;

    Ok((new_feats, new_coords, new_vels))
}

/// K sequential EGCL layers over the same slices. With `recompute_edges`
/// the distance channel is rebuilt from the moved coordinates between
/// layers; otherwise the input edge attributes are reused throughout.
pub fn spatial_stack(
    tape: &mut Tape,
    binding: &Binding,
    layers: &[EgclParams],
    feats: TensorId,
    coords: TensorId,
    vels: TensorId,
    adjacency: TensorId,
    recompute_edges: bool,
) -> Result<(TensorId, TensorId, TensorId), TensorError> {
    if layers.is_empty() {
        return Err(TensorError::InvalidArgument(
            "spatial stack needs at least one layer".into(),
        ));
    }
    let mut state = (feats, coords, vels);
    let initial_edges = edge_attrs_on_tape(tape, adjacency, coords)?;
    for (k, layer) in layers.iter().enumerate() {
        let edges = if recompute_edges && k > 0 {
            edge_attrs_on_tape(tape, adjacency, state.1)?
        } else {
            initial_edges
        };
        state = egcl_forward(tape, binding, layer, state.0, state.1, state.2, edges)?;
    }
    Ok(state)
}

/// Non-equivariant counterpart used by the Equiv=False ablation: messages
/// see raw coordinates, velocity updates come from an unconstrained head.
#[derive(Clone, Debug)]
pub struct PlainGclParams {
    pub msg_mlp: Mlp,
    pub vel_head: Mlp,
    pub node_mlp: Mlp,
    pub feat_dim: usize,
    pub hidden_dim: usize,
}

impl PlainGclParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        feat_dim: usize,
        spatial_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> PlainGclParams {
        let msg_mlp = Mlp::init(
            params,
            &format!("{prefix}.msg_mlp"),
            2 * feat_dim + 2 * spatial_dim + 2,
            hidden_dim,
            hidden_dim,
            Act::Silu,
            true,
            true,
            1.0,
            rng,
        );
        let vel_head = Mlp::init(
            params,
            &format!("{prefix}.vel_head"),
            feat_dim + spatial_dim + hidden_dim,
            hidden_dim,
            spatial_dim,
            Act::Silu,
            false,
            true,
            1e-3,
            rng,
        );
        let node_mlp = Mlp::init(
            params,
            &format!("{prefix}.node_mlp"),
            feat_dim + hidden_dim,
            hidden_dim,
            feat_dim,
            Act::Silu,
            false,
            true,
            1.0,
            rng,
        );
        PlainGclParams {
            msg_mlp,
            vel_head,
            node_mlp,
            feat_dim,
            hidden_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.msg_mlp.param_count() + self.vel_head.param_count() + self.node_mlp.param_count()
    }
}

pub fn plain_forward(
    tape: &mut Tape,
    binding: &Binding,
    params: &PlainGclParams,
    feats: TensorId,
    coords: TensorId,
    vels: TensorId,
    edges: TensorId,
) -> Result<(TensorId, TensorId, TensorId), TensorError> {
    let shape = tape.shape(feats).to_vec();
    let (s, n) = (shape[0], shape[1]);
    let idx = edge_index(n);

    let h_src = tape.index_select(feats, 1, &idx.src)?;
    let h_dst = tape.index_select(feats, 1, &idx.dst)?;
    let x_src = tape.index_select(coords, 1, &idx.src)?;
    let x_dst = tape.index_select(coords, 1, &idx.dst)?;
    let edge_in = tape.concat_last(&[h_src, h_dst, x_src, x_dst, edges])?;
    let messages = params.msg_mlp.forward(tape, binding, edge_in, None)?;

    let grouped = tape.reshape(messages, vec![s, n, n.saturating_sub(1), params.hidden_dim])?;
    let msg_sum = tape.sum_axis(grouped, 2, false)?;

    let vel_in = tape.concat_last(&[feats, vels, msg_sum])?;
    let delta = params.vel_head.forward(tape, binding, vel_in, None)?;
    let new_vels = tape.add(vels, delta)?;
    let new_coords = tape.add(coords, new_vels)?;

    let node_in = tape.concat_last(&[feats, msg_sum])?;
    let node_out = params.node_mlp.forward(tape, binding, node_in, None)?;
    let new_feats = tape.add(feats, node_out)?;
    Ok((new_feats, new_coords, new_vels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::verify::random_orthogonal;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn charge_adjacency(charges: &[f64]) -> Tensor {
        let n = charges.len();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a[i * n + j] = charges[i] * charges[j];
                }
            }
        }
        Tensor::from_vec(vec![n, n], a).unwrap()
    }

    #[test]
    fn edge_attrs_hand_example() {
        let adj = charge_adjacency(&[1.0, -1.0]);
        let pos = Tensor::from_vec(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let attrs = build_edge_attrs(&adj, &pos).unwrap();
        assert_eq!(attrs.values.shape(), &[2, 1, 2]);
        // edge 0->1: charge product -1, squared distance 1
        assert_eq!(attrs.values.data()[0], -1.0);
        assert_eq!(attrs.values.data()[1], 1.0);
    }

    #[test]
    fn edge_attrs_coincident_and_translated() {
        let adj = charge_adjacency(&[1.0, 1.0, -1.0]);
        let pos = Tensor::from_vec(vec![3, 3], vec![0.5; 9]).unwrap();
        let attrs = build_edge_attrs(&adj, &pos).unwrap();
        for pair in attrs.values.data().chunks(2) {
            assert_eq!(pair[1], 0.0);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = Tensor::randn(&[3, 3], &mut rng);
        let mut shifted = pos.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            *v += [10.0, -3.0, 0.25][i % 3];
        }
        let a = build_edge_attrs(&adj, &pos).unwrap();
        let b = build_edge_attrs(&adj, &shifted).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let adj = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let pos = Tensor::zeros(&[2, 3]);
        assert!(build_edge_attrs(&adj, &pos).is_err());
    }

    fn setup(
        n: usize,
        d: usize,
        hdim: usize,
        seed: u64,
    ) -> (ParamSet, EgclParams, Tensor, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layer = EgclParams::init(&mut params, "egcl", d, hdim, &mut rng);
        let feats = Tensor::randn(&[1, n, d], &mut rng);
        let coords = Tensor::randn(&[1, n, 3], &mut rng);
        let vels = Tensor::randn(&[1, n, 3], &mut rng);
        let charges: Vec<f64> = (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let adj = charge_adjacency(&charges);
        let mut adj_b = Tensor::zeros(&[1, n, n]);
        adj_b.data_mut().copy_from_slice(adj.data());
        (params, layer, feats, coords, vels, adj_b)
    }

    fn run_forward(
        params: &ParamSet,
        layer: &EgclParams,
        feats: &Tensor,
        coords: &Tensor,
        vels: &Tensor,
        adj: &Tensor,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let f = tape.constant_tensor(feats);
        let x = tape.constant_tensor(coords);
        let v = tape.constant_tensor(vels);
        let a = tape.constant_tensor(adj);
        let edges = edge_attrs_on_tape(&mut tape, a, x).unwrap();
        let (h, xo, vo) = egcl_forward(&mut tape, &binding, layer, f, x, v, edges).unwrap();
        (
            tape.data(h).to_vec(),
            tape.data(xo).to_vec(),
            tape.data(vo).to_vec(),
        )
    }

    #[test]
    fn matches_scalar_reference() {
        let (params, layer, feats, coords, vels, adj) = setup(5, 4, 8, 11);
        let (h, x, v) = run_forward(&params, &layer, &feats, &coords, &vels, &adj);
        let (rh, rx, rv) = reference::egcl_ref(
            &params,
            &layer,
            feats.data(),
            coords.data(),
            vels.data(),
            adj.data(),
            5,
            4,
            3,
        );
        for (a, b) in h.iter().zip(&rh) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in x.iter().zip(&rx) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in v.iter().zip(&rv) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_node_has_empty_aggregation() {
        let (params, layer, feats, coords, vels, adj) = setup(1, 4, 8, 12);
        let (h, x, v) = run_forward(&params, &layer, &feats, &coords, &vels, &adj);
        let (rh, rx, rv) = reference::egcl_ref(
            &params,
            &layer,
            feats.data(),
            coords.data(),
            vels.data(),
            adj.data(),
            1,
            4,
            3,
        );
        assert_eq!(h.len(), 4);
        for (a, b) in h.iter().zip(&rh) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in x.iter().zip(&rx) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in v.iter().zip(&rv) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn equivariant_under_rotation_translation_and_reflection() {
        let (params, layer, feats, coords, vels, adj) = setup(5, 8, 16, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for &det in &[1.0, -1.0] {
            let q = random_orthogonal(3, det, &mut rng);
            let shift: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
            let rotate = |t: &Tensor, translate: bool| -> Tensor {
                let mut out = t.clone();
                for p in 0..5 {
                    for r in 0..3 {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            acc += q[r * 3 + c] * t.data()[p * 3 + c];
                        }
                        out.data_mut()[p * 3 + r] = acc + if translate { shift[r] } else { 0.0 };
                    }
                }
                out
            };
            let (h0, x0, v0) = run_forward(&params, &layer, &feats, &coords, &vels, &adj);
            let moved_x = rotate(&coords, true);
            let moved_v = rotate(&vels, false);
            let (h1, x1, v1) = run_forward(&params, &layer, &feats, &moved_x, &moved_v, &adj);
            let expected_x = rotate(&Tensor::from_vec(vec![1, 5, 3], x0).unwrap(), true);
            let expected_v = rotate(&Tensor::from_vec(vec![1, 5, 3], v0).unwrap(), false);
            let max_h = h0
                .iter()
                .zip(&h1)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let max_x = expected_x
                .data()
                .iter()
                .zip(&x1)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let max_v = expected_v
                .data()
                .iter()
                .zip(&v1)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_h <= 1e-9 && max_x <= 1e-9 && max_v <= 1e-9);
        }
    }

    #[test]
    fn stack_of_one_equals_single_layer_and_zero_errors() {
        let (params, layer, feats, coords, vels, adj) = setup(4, 4, 8, 15);
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let f = tape.constant_tensor(&feats);
        let x = tape.constant_tensor(&coords);
        let v = tape.constant_tensor(&vels);
        let a = tape.constant_tensor(&adj);
        let layers = vec![layer.clone()];
        let (h1, x1, v1) =
            spatial_stack(&mut tape, &binding, &layers, f, x, v, a, true).unwrap();
        let edges = edge_attrs_on_tape(&mut tape, a, x).unwrap();
        let (h2, x2, v2) = egcl_forward(&mut tape, &binding, &layer, f, x, v, edges).unwrap();
        assert_eq!(tape.data(h1), tape.data(h2));
        assert_eq!(tape.data(x1), tape.data(x2));
        assert_eq!(tape.data(v1), tape.data(v2));
        assert!(spatial_stack(&mut tape, &binding, &[], f, x, v, a, true).is_err());
    }

    #[test]
    fn gradient_through_layer_matches_finite_differences() {
        let (params, layer, feats, coords, vels, adj) = setup(3, 4, 8, 16);
        let err = crate::grad_check(
            |tape, x| {
                let binding = params.bind(tape);
                let f = tape.constant_tensor(&feats);
                let v = tape.constant_tensor(&vels);
                let a = tape.constant_tensor(&adj);
                let edges = edge_attrs_on_tape(tape, a, x)?;
                let (h, xo, vo) = egcl_forward(tape, &binding, &layer, f, x, v, edges)?;
                let hs = tape.sum_all(h)?;
                let xs = tape.sum_all(xo)?;
                let vs = tape.sum_all(vo)?;
                let hx = tape.add(hs, xs)?;
                let sq = tape.square(hx)?;
                tape.add(sq, vs)
            },
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "coords gradient error {err}");
    }
}
