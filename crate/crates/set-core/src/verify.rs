//! Runnable property checks: every symmetry, tensorization and physics
//! claim as a randomized test with an explicit tolerance. The CLI `verify`
//! command and the acceptance suite both drive these.

use crate::baselines::{param_count_mlp, LinearBaseline, LinearConfig, MlpConfig};
use crate::dataset::{generate_split, GenConfig, Split};
use crate::egcl::{edge_attrs_on_tape, egcl_forward, EgclParams};
use crate::model::{
    param_count_set, prediction_loss, set_forward_full, GraphSequenceBatch, Mode, SetConfig,
    SetModel,
};
use crate::nbody::{integrate_step, sample_initial_conditions, total_momentum, transform_state};
use crate::nn::{Binding, ParamSet};
use crate::reference;
use crate::temporal::{
    adjacency_attention, feature_attention, position_attention_full, velocity_attention_full,
    AttentionParams,
};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one property check.
#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: String,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl PropertyResult {
    fn new(name: &str, trials: usize, max_deviation: f64, tolerance: f64) -> PropertyResult {
        PropertyResult {
            name: name.to_string(),
            trials,
            max_deviation,
            tolerance,
            passed: max_deviation <= tolerance,
        }
    }
}

/// Haar-ish random orthogonal matrix: orthonormalize a Gaussian matrix by
/// modified Gram-Schmidt (two passes), then fix the determinant sign by
/// negating the first column if needed. Row-major `[n, n]`.
pub fn random_orthogonal(n: usize, det_sign: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // columns as vectors
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
        .collect();
    for _pass in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                for k in 0..n {
                    cols[i][k] -= dot * cols[j][k];
                }
            }
            let norm: f64 = cols[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            for v in cols[i].iter_mut() {
                *v /= norm;
            }
        }
    }
    let mut q = vec![0.0; n * n];
    for c in 0..n {
        for r in 0..n {
            q[r * n + c] = cols[c][r];
        }
    }
    if det_sign_of(&q, n) * det_sign < 0.0 {
        for r in 0..n {
            q[r * n] = -q[r * n];
        }
    }
    q
}

fn det_sign_of(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut sign = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            sign = -sign;
        }
        for row in (col + 1)..n {
            let factor = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
        }
        if a[col * n + col] < 0.0 {
            sign = -sign;
        }
    }
    sign
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Applies `y = Q x (+ b)` to every `dim`-row of `data`.
pub fn rotate_rows(data: &[f64], q: &[f64], dim: usize, translation: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, chunk) in data.chunks(dim).enumerate() {
        for r in 0..dim {
            let mut acc = 0.0;
            for c in 0..dim {
                acc += q[r * dim + c] * chunk[c];
            }
            out[row * dim + r] = acc + translation.map_or(0.0, |t| t[r]);
        }
    }
    out
}

fn random_charges(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

fn charge_adjacency(charges: &[f64]) -> Vec<f64> {
    let n = charges.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[i * n + j] = charges[i] * charges[j];
            }
        }
    }
    a
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Reorders node-major rows: row i of the result is row `perm[i]` of `data`.
fn permute_rows(data: &[f64], perm: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (i, &src) in perm.iter().enumerate() {
        out[i * width..(i + 1) * width].copy_from_slice(&data[src * width..(src + 1) * width]);
    }
    out
}

fn conjugate(matrix: &[f64], perm: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = matrix[perm[i] * n + perm[j]];
        }
    }
    out
}

// ── EGCL properties ─────────────────────────────────────────────────

struct EgclFixture {
    params: ParamSet,
    layers: Vec<EgclParams>,
    feats: Tensor,
    coords: Tensor,
    vels: Tensor,
    adjacency: Tensor,
}

fn egcl_fixture(n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> EgclFixture {
    let mut params = ParamSet::new();
    let layers = (0..k)
        .map(|i| EgclParams::init(&mut params, &format!("egcl{i}"), d, 16, rng))
        .collect();
    let charges = random_charges(n, rng);
    EgclFixture {
        params,
        layers,
        feats: Tensor::randn(&[1, n, d], rng),
        coords: Tensor::randn(&[1, n, 3], rng),
        vels: Tensor::randn(&[1, n, 3], rng),
        adjacency: Tensor::from_vec(vec![1, n, n], charge_adjacency(&charges)).unwrap(),
    }
}

fn egcl_run(fx: &EgclFixture, feats: &[f64], coords: &[f64], vels: &[f64], adjacency: &[f64])
    -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let binding = fx.params.bind_frozen(&mut tape);
    let f = tape
        .constant(fx.feats.shape().to_vec(), feats.to_vec())
        .unwrap();
    let x = tape
        .constant(fx.coords.shape().to_vec(), coords.to_vec())
        .unwrap();
    let v = tape
        .constant(fx.vels.shape().to_vec(), vels.to_vec())
        .unwrap();
    let a = tape
        .constant(fx.adjacency.shape().to_vec(), adjacency.to_vec())
        .unwrap();
    let (h, xo, vo) =
        crate::egcl::spatial_stack(&mut tape, &binding, &fx.layers, f, x, v, a, true).unwrap();
    (
        tape.data(h).to_vec(),
        tape.data(xo).to_vec(),
        tape.data(vo).to_vec(),
    )
}

/// Rotation/translation (and reflection) equivariance of the K-layer stack.
pub fn egcl_equivariance(trials: usize, seed: u64, n: usize, d: usize, k: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let fx = egcl_fixture(n, d, k, &mut rng);
        let det = if trial % 2 == 0 { 1.0 } else { -1.0 };
        let q = random_orthogonal(3, det, &mut rng);
        let b: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let (h0, x0, v0) = egcl_run(
            &fx,
            fx.feats.data(),
            fx.coords.data(),
            fx.vels.data(),
            fx.adjacency.data(),
        );
        let moved_x = rotate_rows(fx.coords.data(), &q, 3, Some(&b));
        let moved_v = rotate_rows(fx.vels.data(), &q, 3, None);
        let (h1, x1, v1) = egcl_run(&fx, fx.feats.data(), &moved_x, &moved_v, fx.adjacency.data());
        worst = worst.max(max_abs_diff(&h0, &h1));
        worst = worst.max(max_abs_diff(&rotate_rows(&x0, &q, 3, Some(&b)), &x1));
        worst = worst.max(max_abs_diff(&rotate_rows(&v0, &q, 3, None), &v1));
    }
    worst
}

/// Node-permutation equivariance of the stack.
pub fn egcl_permutation(trials: usize, seed: u64, n: usize, d: usize, k: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let fx = egcl_fixture(n, d, k, &mut rng);
        let perm = permutation(n, &mut rng);
        let (h0, x0, v0) = egcl_run(
            &fx,
            fx.feats.data(),
            fx.coords.data(),
            fx.vels.data(),
            fx.adjacency.data(),
        );
        let ph = permute_rows(fx.feats.data(), &perm, d);
        let px = permute_rows(fx.coords.data(), &perm, 3);
        let pv = permute_rows(fx.vels.data(), &perm, 3);
        let pa = conjugate(fx.adjacency.data(), &perm, n);
        let (h1, x1, v1) = egcl_run(&fx, &ph, &px, &pv, &pa);
        worst = worst.max(max_abs_diff(&permute_rows(&h0, &perm, d), &h1));
        worst = worst.max(max_abs_diff(&permute_rows(&x0, &perm, 3), &x1));
        worst = worst.max(max_abs_diff(&permute_rows(&v0, &perm, 3), &v1));
    }
    worst
}

/// Finite-difference check of a scalar head through one EGCL layer.
pub fn egcl_gradient(seed: u64, n: usize, d: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = egcl_fixture(n, d, 1, &mut rng);
    crate::grad_check(
        |tape, x| {
            let binding = fx.params.bind(tape);
            let f = tape.constant_tensor(&fx.feats);
            let v = tape.constant_tensor(&fx.vels);
            let a = tape.constant_tensor(&fx.adjacency);
            let edges = edge_attrs_on_tape(tape, a, x)?;
            let (h, xo, vo) = egcl_forward(tape, &binding, &fx.layers[0], f, x, v, edges)?;
            let hs = tape.sum_all(h)?;
            let xs = tape.sum_all(xo)?;
            let vs = tape.sum_all(vo)?;
            let partial = tape.add(hs, xs)?;
            let sq = tape.square(partial)?;
            tape.add(sq, vs)
        },
        &fx.coords,
        1e-5,
    )
    .unwrap()
}

// ── temporal attention properties ───────────────────────────────────

/// Position-component E(n) equivariance, both determinant signs.
pub fn position_equivariance(trials: usize, seed: u64, n: usize, l: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let coords = Tensor::randn(&[n, l, 3], &mut rng);
        let det = if trial % 2 == 0 { 1.0 } else { -1.0 };
        let q = random_orthogonal(3, det, &mut rng);
        let b: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant_tensor(&coords);
        let (base, _) = position_attention_full(&mut tape, x, 0.5, false).unwrap();
        let moved = tape
            .constant(
                vec![n, l, 3],
                rotate_rows(coords.data(), &q, 3, Some(&b)),
            )
            .unwrap();
        let (out, _) = position_attention_full(&mut tape, moved, 0.5, false).unwrap();
        let expected = rotate_rows(tape.data(base), &q, 3, Some(&b));
        worst = worst.max(max_abs_diff(&expected, tape.data(out)));
    }
    worst
}

/// Velocity-component SO(n) equivariance; returns (output deviation,
/// weight deviation) — the attention weights must be insensitive to Q.
pub fn velocity_equivariance(trials: usize, seed: u64, n: usize, l: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_out, mut worst_w) = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let vels = Tensor::randn(&[n, l, 3], &mut rng);
        let det = if trial % 2 == 0 { 1.0 } else { -1.0 };
        let q = random_orthogonal(3, det, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant_tensor(&vels);
        let (base, w0) = velocity_attention_full(&mut tape, v, false).unwrap();
        let rotated = tape
            .constant(vec![n, l, 3], rotate_rows(vels.data(), &q, 3, None))
            .unwrap();
        let (out, w1) = velocity_attention_full(&mut tape, rotated, false).unwrap();
        let expected = rotate_rows(tape.data(base), &q, 3, None);
        worst_out = worst_out.max(max_abs_diff(&expected, tape.data(out)));
        worst_w = worst_w.max(max_abs_diff(tape.data(w0), tape.data(w1)));
    }
    (worst_out, worst_w)
}

/// Attention weight structure: rows sum to one; the masked position update
/// gives the self term an exactly zero coefficient.
pub fn attention_row_sums(trials: usize, seed: u64, n: usize, l: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let coords = Tensor::randn(&[n, l, 3], &mut rng);
        let vels = Tensor::randn(&[n, l, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant_tensor(&coords);
        let (_, beta) = position_attention_full(&mut tape, x, 0.5, false).unwrap();
        let v = tape.constant_tensor(&vels);
        let (_, gamma) = velocity_attention_full(&mut tape, v, false).unwrap();
        for weights in [beta, gamma] {
            for row in tape.data(weights).chunks(l) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        // coefficient of the t = s difference term is exactly zero: verify
        // the masked matrix ((1 - I) .* beta) has zero diagonal
        let mask = {
            let mut m = vec![1.0; l * l];
            for t in 0..l {
                m[t * l + t] = 0.0;
            }
            tape.constant(vec![l, l], m).unwrap()
        };
        let masked = tape.mul(beta, mask).unwrap();
        for node in 0..n {
            for t in 0..l {
                worst = worst.max(tape.data(masked)[(node * l + t) * l + t].abs());
            }
        }
    }
    worst
}

/// Tensorized vs naive-loop agreement for all four attention components.
pub fn tensorization_equivalence(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, l, d) = (4, 5, 6);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut params = ParamSet::new();
        let attn = AttentionParams::init(&mut params, "feat", d, &mut rng);
        let theta = Tensor::randn(&[n, l, d], &mut rng);
        let coords = Tensor::randn(&[n, l, 3], &mut rng);
        let vels = Tensor::randn(&[n, l, 3], &mut rng);

        let mut tape = Tape::new();
        let binding = params.bind_frozen(&mut tape);
        let t_in = tape.constant_tensor(&theta);
        let out = feature_attention(&mut tape, &binding, &attn, t_in, false).unwrap();
        let expected = reference::feature_attention_ref(
            theta.data(),
            n,
            l,
            d,
            params.get(attn.query).data(),
            params.get(attn.key).data(),
            params.get(attn.value).data(),
        );
        worst = worst.max(max_abs_diff(tape.data(out), &expected));

        let x_in = tape.constant_tensor(&coords);
        let (out, _) = position_attention_full(&mut tape, x_in, 0.5, false).unwrap();
        let expected = reference::position_attention_ref(coords.data(), n, l, 3, 0.5);
        worst = worst.max(max_abs_diff(tape.data(out), &expected));

        let v_in = tape.constant_tensor(&vels);
        let (out, _) = velocity_attention_full(&mut tape, v_in, false).unwrap();
        let expected = reference::velocity_attention_ref(vels.data(), n, l, 3);
        worst = worst.max(max_abs_diff(tape.data(out), &expected));

        let mut adj_params = ParamSet::new();
        let adj_attn = AttentionParams::init(&mut adj_params, "adj", n, &mut rng);
        let adjacency = Tensor::randn(&[l, n, n], &mut rng);
        let mut tape = Tape::new();
        let binding = adj_params.bind_frozen(&mut tape);
        let a_in = tape.constant_tensor(&adjacency);
        let out = adjacency_attention(&mut tape, &binding, &adj_attn, a_in).unwrap();
        let expected = reference::adjacency_attention_ref(
            adjacency.data(),
            l,
            n,
            adj_params.get(adj_attn.query).data(),
            adj_params.get(adj_attn.key).data(),
            adj_params.get(adj_attn.value).data(),
        );
        worst = worst.max(max_abs_diff(tape.data(out), &expected));
    }
    worst
}

/// Node-axis permutation equivariance of the temporal components; the
/// adjacency component conjugates both its input and its projections.
pub fn etal_permutation(trials: usize, seed: u64, n: usize, l: usize, d: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let perm = permutation(n, &mut rng);
        // feature / position / velocity: per-node computation
        let mut params = ParamSet::new();
        let attn = AttentionParams::init(&mut params, "feat", d, &mut rng);
        let theta = Tensor::randn(&[n, l, d], &mut rng);
        let mut tape = Tape::new();
        let binding = params.bind_frozen(&mut tape);
        let t_in = tape.constant_tensor(&theta);
        let base = feature_attention(&mut tape, &binding, &attn, t_in, false).unwrap();
        let permuted = tape
            .constant(vec![n, l, d], permute_rows(theta.data(), &perm, l * d))
            .unwrap();
        let out = feature_attention(&mut tape, &binding, &attn, permuted, false).unwrap();
        let expected = permute_rows(tape.data(base), &perm, l * d);
        worst = worst.max(max_abs_diff(&expected, tape.data(out)));

        // adjacency under conjugation with conjugated projections
        let adjacency = Tensor::randn(&[l, n, n], &mut rng);
        let mut params_a = ParamSet::new();
        let attn_a = AttentionParams::init(&mut params_a, "adj", n, &mut rng);
        let mut params_c = ParamSet::new();
        let attn_c = AttentionParams {
            query: params_c.add(
                "q",
                Tensor::from_vec(
                    vec![n, n],
                    conjugate(params_a.get(attn_a.query).data(), &perm, n),
                )
                .unwrap(),
            ),
            key: params_c.add(
                "k",
                Tensor::from_vec(
                    vec![n, n],
                    conjugate(params_a.get(attn_a.key).data(), &perm, n),
                )
                .unwrap(),
            ),
            value: params_c.add(
                "v",
                Tensor::from_vec(
                    vec![n, n],
                    conjugate(params_a.get(attn_a.value).data(), &perm, n),
                )
                .unwrap(),
            ),
            dim: n,
        };
        let mut tape = Tape::new();
        let binding_a = params_a.bind_frozen(&mut tape);
        let a_in = tape.constant_tensor(&adjacency);
        let base = adjacency_attention(&mut tape, &binding_a, &attn_a, a_in).unwrap();
        let conjugated: Vec<f64> = (0..l)
            .flat_map(|t| conjugate(&adjacency.data()[t * n * n..(t + 1) * n * n], &perm, n))
            .collect();
        let binding_c = params_c.bind_frozen(&mut tape);
        let c_in = tape.constant(vec![l, n, n], conjugated).unwrap();
        let out = adjacency_attention(&mut tape, &binding_c, &attn_c, c_in).unwrap();
        let expected: Vec<f64> = (0..l)
            .flat_map(|t| conjugate(&tape.data(base)[t * n * n..(t + 1) * n * n], &perm, n))
            .collect();
        worst = worst.max(max_abs_diff(&expected, tape.data(out)));
    }
    worst
}

// ── full-model properties ───────────────────────────────────────────

fn random_batch(
    config: &SetConfig,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> GraphSequenceBatch {
    let (l, n, d) = (config.seq_len, config.n_particles, config.feat_dim);
    let charges = random_charges(n, rng);
    let mut adjacency = Vec::with_capacity(batch * n * n);
    for _ in 0..batch {
        adjacency.extend_from_slice(&charge_adjacency(&charges));
    }
    GraphSequenceBatch {
        feats: Tensor::randn(&[batch, l, n, d], rng),
        coords: Tensor::randn(&[batch, l, n, 3], rng),
        vels: Tensor::randn(&[batch, l, n, 3], rng),
        adjacency: Tensor::from_vec(vec![batch, n, n], adjacency).unwrap(),
        target_coords: Tensor::zeros(&[batch, n, 3]),
        target_vels: Tensor::zeros(&[batch, n, 3]),
    }
}

fn set_run(
    model: &SetModel,
    batch: &GraphSequenceBatch,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let binding = model.params.bind_frozen(&mut tape);
    let ids = batch.to_tape(&mut tape);
    let (x, v, streams) =
        set_forward_full(&mut tape, &binding, model, &ids, &mut Mode::Eval).unwrap();
    (
        tape.data(x).to_vec(),
        tape.data(v).to_vec(),
        tape.data(streams.feats).to_vec(),
    )
}

/// End-to-end equivariance of the assembled model (positional encodings
/// and adjacency attention off). Returns (coordinate/velocity deviation,
/// final-feature invariance deviation).
pub fn set_equivariance(trials: usize, seed: u64, config: &SetConfig) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut worst_feat) = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let model = SetModel::init(config.clone(), seed ^ (trial as u64 + 1)).unwrap();
        let batch = random_batch(config, 2, &mut rng);
        let det = if trial % 2 == 0 { 1.0 } else { -1.0 };
        let q = random_orthogonal(3, det, &mut rng);
        let b: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let (x0, v0, f0) = set_run(&model, &batch);
        let moved = GraphSequenceBatch {
            coords: Tensor::from_vec(
                batch.coords.shape().to_vec(),
                rotate_rows(batch.coords.data(), &q, 3, Some(&b)),
            )
            .unwrap(),
            vels: Tensor::from_vec(
                batch.vels.shape().to_vec(),
                rotate_rows(batch.vels.data(), &q, 3, None),
            )
            .unwrap(),
            ..batch.clone()
        };
        let (x1, v1, f1) = set_run(&model, &moved);
        worst = worst.max(max_abs_diff(&rotate_rows(&x0, &q, 3, Some(&b)), &x1));
        worst = worst.max(max_abs_diff(&rotate_rows(&v0, &q, 3, None), &v1));
        worst_feat = worst_feat.max(max_abs_diff(&f0, &f1));
    }
    (worst, worst_feat)
}

/// End-to-end node-permutation equivariance of the assembled model.
pub fn set_permutation(trials: usize, seed: u64, config: &SetConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (config.n_particles, config.feat_dim);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let model = SetModel::init(config.clone(), seed ^ (trial as u64 + 101)).unwrap();
        let batch = random_batch(config, 2, &mut rng);
        let perm = permutation(n, &mut rng);
        let (x0, v0, _) = set_run(&model, &batch);
        let permute_stream = |t: &Tensor, width: usize| -> Tensor {
            let mut out = t.clone();
            let bl = t.numel() / (n * width);
            for s in 0..bl {
                let base = s * n * width;
                let slice = permute_rows(&t.data()[base..base + n * width], &perm, width);
                out.data_mut()[base..base + n * width].copy_from_slice(&slice);
            }
            out
        };
        let mut adjacency = batch.adjacency.clone();
        for bi in 0..2 {
            let c = conjugate(&batch.adjacency.data()[bi * n * n..(bi + 1) * n * n], &perm, n);
            adjacency.data_mut()[bi * n * n..(bi + 1) * n * n].copy_from_slice(&c);
        }
        let permuted = GraphSequenceBatch {
            feats: permute_stream(&batch.feats, d),
            coords: permute_stream(&batch.coords, 3),
            vels: permute_stream(&batch.vels, 3),
            adjacency,
            ..batch.clone()
        };
        let (x1, v1, _) = set_run(&model, &permuted);
        // readouts are [B, N, dim]
        let expected_x = permute_stream(
            &Tensor::from_vec(vec![2, n, 3], x0).unwrap(),
            3,
        );
        let expected_v = permute_stream(&Tensor::from_vec(vec![2, n, 3], v0).unwrap(), 3);
        worst = worst.max(max_abs_diff(expected_x.data(), &x1));
        worst = worst.max(max_abs_diff(expected_v.data(), &v1));
    }
    worst
}

/// Finite-difference check of the full loss through a tiny assembled model,
/// probing every parameter tensor. Returns the worst relative error.
pub fn set_loss_gradient(seed: u64) -> f64 {
    let config = SetConfig {
        n_particles: 3,
        seq_len: 3,
        feat_dim: 4,
        hidden_dim: 8,
        egcl_layers: 1,
        blocks: 1,
        ..SetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SetModel::init(config.clone(), seed).unwrap();
    let mut batch = random_batch(&config, 2, &mut rng);
    batch.target_coords = Tensor::randn(&[2, 3, 3], &mut rng);
    batch.target_vels = Tensor::randn(&[2, 3, 3], &mut rng);
    let mut worst = 0.0f64;
    let n_params = model.params.len();
    for probe in 0..n_params {
        let at = model
            .params
            .iter()
            .nth(probe)
            .map(|(_, t)| t.clone())
            .unwrap();
        let err = crate::grad_check(
            |tape, w| {
                let mut ids: Vec<TensorId> = Vec::with_capacity(n_params);
                for (i, (_, tensor)) in model.params.iter().enumerate() {
                    ids.push(if i == probe {
                        w
                    } else {
                        tape.constant_tensor(tensor)
                    });
                }
                let binding = Binding::from_ids(ids);
                let batch_ids = batch.to_tape(tape);
                let (x, v) = crate::model::set_forward(
                    tape,
                    &binding,
                    &model,
                    &batch_ids,
                    &mut Mode::Eval,
                )?;
                prediction_loss(
                    tape,
                    x,
                    v,
                    batch_ids.target_coords,
                    batch_ids.target_vels,
                    config.loss_velocity_weight,
                )
            },
            &at,
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Parameter-count claims: SET (adjacency off), the EGNN reduction and the
/// MLP baseline are constant in N; adjacency-on grows as Theta(N^2);
/// the linear model has exactly 3 parameters. Returns 0.0 when every claim
/// holds, 1.0 otherwise.
pub fn parameter_count_claims() -> f64 {
    let base = SetConfig::default();
    let at = |n: usize, adjacency: bool| {
        param_count_set(&SetConfig {
            n_particles: n,
            adjacency_attention: adjacency,
            ..base.clone()
        })
    };
    let ns = [5usize, 20, 30];
    let set_flat = ns.iter().all(|&n| at(n, false) == at(5, false));
    let egnn_flat = ns
        .iter()
        .map(|&n| {
            param_count_set(
                &SetConfig {
                    n_particles: n,
                    ..base.clone()
                }
                .egnn_baseline(3, 64),
            )
        })
        .collect::<Vec<_>>();
    let egnn_flat = egnn_flat.iter().all(|&c| c == egnn_flat[0]);
    let mlp_const = param_count_mlp(&MlpConfig::default());
    let mlp_flat = mlp_const > 0; // no N in the formula at all
    let quadratic = ns.iter().all(|&n| {
        let nn = n * n;
        let h = base.hidden_dim;
        at(n, true) - at(n, false) == base.blocks * (3 * nn + nn * h + h + h * nn + nn)
    });
    let linear = LinearBaseline::init(LinearConfig { horizon: 100 }, 0)
        .unwrap()
        .param_count()
        == 3;
    if set_flat && egnn_flat && mlp_flat && quadratic && linear {
        0.0
    } else {
        1.0
    }
}

/// Every ablation-grid flag combination runs one batch to a finite loss.
/// Returns 0.0 on success.
pub fn ablation_flags_finite(seed: u64) -> f64 {
    let rows: [(bool, bool, bool, bool); 4] = [
        (true, false, true, true),
        (false, false, true, true),
        (true, true, true, true),
        (true, false, true, false),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (equivariant, adjacency, satt, tatt) in rows {
        let config = SetConfig {
            n_particles: 4,
            seq_len: 4,
            feat_dim: 4,
            hidden_dim: 8,
            egcl_layers: 2,
            blocks: 2,
            equivariant,
            adjacency_attention: adjacency,
            spatial_attention: satt,
            temporal_attention: tatt,
            ..SetConfig::default()
        };
        let model = SetModel::init(config.clone(), seed).unwrap();
        let mut batch = random_batch(&config, 3, &mut rng);
        batch.target_coords = Tensor::randn(&[3, 4, 3], &mut rng);
        batch.target_vels = Tensor::randn(&[3, 4, 3], &mut rng);
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let ids = batch.to_tape(&mut tape);
        let result = crate::model::set_forward(&mut tape, &binding, &model, &ids, &mut Mode::Eval)
            .and_then(|(x, v)| {
                prediction_loss(&mut tape, x, v, ids.target_coords, ids.target_vels, 1.0)
            });
        match result {
            Ok(loss) if tape.value(loss).is_finite() => {
                if tape.backward(loss).is_err() {
                    return 1.0;
                }
            }
            _ => return 1.0,
        }
    }
    0.0
}

// ── simulator properties ────────────────────────────────────────────

pub fn simulator_momentum(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut state = sample_initial_conditions(5, rng.random()).unwrap();
        let p0 = total_momentum(&state);
        for _ in 0..500 {
            state = integrate_step(&state, 1e-3, 0.1);
        }
        let p1 = total_momentum(&state);
        for c in 0..3 {
            worst = worst.max((p1[c] - p0[c]).abs());
        }
    }
    worst
}

pub fn simulator_energy_drift(seed: u64) -> f64 {
    let state = sample_initial_conditions(5, seed).unwrap();
    let softening = 0.1;
    let mut coarse = state.clone();
    for _ in 0..1000 {
        coarse = integrate_step(&coarse, 1e-3, softening);
    }
    let mut fine = state;
    for _ in 0..100_000 {
        fine = integrate_step(&fine, 1e-5, softening);
    }
    let e_coarse = crate::nbody::total_energy(&coarse, softening);
    let e_ref = crate::nbody::total_energy(&fine, softening);
    (e_coarse - e_ref).abs() / e_ref.abs()
}

pub fn simulator_isometry(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let q = random_orthogonal(3, 1.0, &mut rng);
        let b: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let state = sample_initial_conditions(5, rng.random()).unwrap();
        let mut plain = state.clone();
        let mut moved = transform_state(&state, &q, &b);
        for _ in 0..100 {
            plain = integrate_step(&plain, 1e-3, 0.1);
            moved = integrate_step(&moved, 1e-3, 0.1);
            let expected = transform_state(&plain, &q, &b);
            worst = worst.max(max_abs_diff(&moved.positions, &expected.positions));
            worst = worst.max(max_abs_diff(&moved.velocities, &expected.velocities));
        }
    }
    worst
}

pub fn dataset_determinism(seed: u64) -> f64 {
    let config = GenConfig {
        train_count: 3,
        val_count: 0,
        test_count: 0,
        seq_len: 2,
        horizon: 25,
        seed,
        ..GenConfig::default()
    };
    let a = generate_split(&config, Split::Train).unwrap();
    let b = generate_split(&config, Split::Train).unwrap();
    if a == b {
        0.0
    } else {
        1.0
    }
}

// ── the full report ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct VerifySettings {
    pub seed: u64,
    pub trials: Option<usize>,
    pub tolerance: Option<f64>,
    pub n_particles: usize,
    pub seq_len: usize,
    pub feat_dim: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            seed: 0,
            trials: None,
            tolerance: None,
            n_particles: 5,
            seq_len: 10,
            feat_dim: 8,
        }
    }
}

/// Runs every property with its spec tolerance (or the override) and
/// returns one result per property.
pub fn run_all(settings: &VerifySettings) -> Vec<PropertyResult> {
    let s = settings;
    let tol = |default: f64| s.tolerance.unwrap_or(default);
    let trials = |default: usize| s.trials.unwrap_or(default);
    let mut results = Vec::new();

    let t = trials(100);
    results.push(PropertyResult::new(
        "egcl_rotation_translation_reflection",
        t,
        egcl_equivariance(t, s.seed, s.n_particles, s.feat_dim, 2),
        tol(1e-9),
    ));
    let t = trials(25);
    results.push(PropertyResult::new(
        "egcl_permutation",
        t,
        egcl_permutation(t, s.seed + 1, s.n_particles, s.feat_dim, 2),
        tol(1e-10),
    ));
    results.push(PropertyResult::new(
        "egcl_gradient_fd",
        1,
        egcl_gradient(s.seed + 2, 4, s.feat_dim),
        tol(1e-5),
    ));

    let t = trials(100);
    results.push(PropertyResult::new(
        "position_attention_equivariance",
        t,
        position_equivariance(t, s.seed + 3, s.n_particles, s.seq_len),
        tol(1e-9),
    ));
    let (vel_dev, weight_dev) = velocity_equivariance(t, s.seed + 4, s.n_particles, s.seq_len);
    results.push(PropertyResult::new(
        "velocity_attention_equivariance",
        t,
        vel_dev,
        tol(1e-9),
    ));
    results.push(PropertyResult::new(
        "velocity_attention_weight_invariance",
        t,
        weight_dev,
        tol(1e-12),
    ));
    let t = trials(25);
    results.push(PropertyResult::new(
        "attention_row_sums_and_self_mask",
        t,
        attention_row_sums(t, s.seed + 5, s.n_particles, s.seq_len),
        tol(1e-12),
    ));
    let t = trials(10);
    results.push(PropertyResult::new(
        "tensorization_vs_loops",
        t,
        tensorization_equivalence(t, s.seed + 6),
        tol(1e-12),
    ));
    let t = trials(25);
    results.push(PropertyResult::new(
        "etal_permutation",
        t,
        etal_permutation(t, s.seed + 7, s.n_particles, s.seq_len, s.feat_dim),
        tol(1e-10),
    ));

    let e2e_config = SetConfig {
        n_particles: s.n_particles,
        seq_len: s.seq_len,
        feat_dim: s.feat_dim,
        hidden_dim: 16,
        egcl_layers: 2,
        blocks: 2,
        ..SetConfig::default()
    };
    let t = trials(25);
    let (dev, feat_dev) = set_equivariance(t, s.seed + 8, &e2e_config);
    results.push(PropertyResult::new("set_equivariance", t, dev, tol(1e-8)));
    results.push(PropertyResult::new(
        "set_feature_invariance",
        t,
        feat_dev,
        tol(1e-8),
    ));
    results.push(PropertyResult::new(
        "set_permutation",
        t,
        set_permutation(t, s.seed + 9, &e2e_config),
        tol(1e-10),
    ));
    results.push(PropertyResult::new(
        "set_loss_gradient_fd",
        1,
        set_loss_gradient(s.seed + 10),
        tol(1e-4),
    ));
    results.push(PropertyResult::new(
        "parameter_count_claims",
        1,
        parameter_count_claims(),
        tol(0.5),
    ));
    results.push(PropertyResult::new(
        "ablation_flags_finite_loss",
        4,
        ablation_flags_finite(s.seed + 11),
        tol(0.5),
    ));

    let t = trials(5);
    results.push(PropertyResult::new(
        "simulator_momentum",
        t,
        simulator_momentum(t, s.seed + 12),
        tol(1e-8),
    ));
    results.push(PropertyResult::new(
        "simulator_energy_drift",
        1,
        simulator_energy_drift(s.seed + 13),
        tol(0.01),
    ));
    let t = trials(3);
    results.push(PropertyResult::new(
        "simulator_isometry",
        t,
        simulator_isometry(t, s.seed + 14),
        tol(1e-8),
    ));
    results.push(PropertyResult::new(
        "dataset_determinism",
        1,
        dataset_determinism(s.seed + 15),
        tol(0.5),
    ));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_sampler_produces_orthogonal_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &det in &[1.0, -1.0] {
            let q = random_orthogonal(3, det, &mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| q[k * 3 + i] * q[k * 3 + j]).sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() <= 1e-12, "QtQ[{i}{j}] = {dot}");
                }
            }
            assert_eq!(det_sign_of(&q, 3), det);
        }
    }

    #[test]
    fn impossible_tolerance_forces_failures() {
        let settings = VerifySettings {
            trials: Some(2),
            tolerance: Some(0.0),
            ..VerifySettings::default()
        };
        let results = run_all(&settings);
        assert!(results.iter().any(|r| !r.passed));
    }
}
