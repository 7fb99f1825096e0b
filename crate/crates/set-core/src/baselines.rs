//! Comparison baselines: a per-node MLP over flattened trajectories and a
//! three-parameter linear dynamics model.

use crate::error::{DataError, TensorError};
use crate::model::BatchIds;
use crate::nn::{Binding, Linear, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, TensorId};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-node MLP: each particle's stacked position/velocity history maps
/// through shared weights to its predicted target state, so the parameter
/// count is independent of the particle count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub seq_len: usize,
    pub spatial_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            seq_len: 10,
            spatial_dim: 3,
            hidden_dim: 128,
            hidden_layers: 5,
        }
    }
}

impl MlpConfig {
    pub fn input_dim(&self) -> usize {
        2 * self.seq_len * self.spatial_dim
    }

    pub fn output_dim(&self) -> usize {
        2 * self.spatial_dim
    }
}

#[derive(Clone, Debug)]
pub struct MlpBaseline {
    pub config: MlpConfig,
    pub params: ParamSet,
    layers: Vec<Linear>,
}

impl MlpBaseline {
    pub fn init(config: MlpConfig, seed: u64) -> Result<MlpBaseline, DataError> {
        if config.hidden_layers == 0 || config.hidden_dim == 0 {
            return Err(DataError::InvalidConfig(
                "mlp needs at least one hidden layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut in_dim = config.input_dim();
        for k in 0..config.hidden_layers {
            layers.push(Linear::init(
                &mut params,
                &format!("hidden{k}"),
                in_dim,
                config.hidden_dim,
                true,
                1.0,
                &mut rng,
            ));
            in_dim = config.hidden_dim;
        }
        layers.push(Linear::init(
            &mut params,
            "out",
            in_dim,
            config.output_dim(),
            true,
            1.0,
            &mut rng,
        ));
        Ok(MlpBaseline {
            config,
            params,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }
}

pub fn param_count_mlp(config: &MlpConfig) -> usize {
    let h = config.hidden_dim;
    let mut count = config.input_dim() * h + h;
    count += (config.hidden_layers - 1) * (h * h + h);
    count += h * config.output_dim() + config.output_dim();
    count
}

pub fn mlp_forward(
    tape: &mut Tape,
    binding: &Binding,
    model: &MlpBaseline,
    batch: &BatchIds,
) -> Result<(TensorId, TensorId), TensorError> {
    let shape = tape.shape(batch.coords).to_vec();
    let (b, l, n, dim) = (shape[0], shape[1], shape[2], shape[3]);
    if l != model.config.seq_len || dim != model.config.spatial_dim {
        return Err(TensorError::ShapeMismatch {
            op: "mlp_forward",
            lhs: shape,
            rhs: vec![b, model.config.seq_len, n, model.config.spatial_dim],
        });
    }
    // [B, L, N, dim] -> [B, N, L*dim] per stream, concatenated
    let x = tape.swap_axes(batch.coords, 1, 2)?;
    let x = tape.reshape(x, vec![b, n, l * dim])?;
    let v = tape.swap_axes(batch.vels, 1, 2)?;
    let v = tape.reshape(v, vec![b, n, l * dim])?;
    let mut hidden = tape.concat_last(&[x, v])?;
    for (k, layer) in model.layers.iter().enumerate() {
        hidden = layer.forward(tape, binding, hidden)?;
        if k + 1 < model.layers.len() {
            hidden = tape.relu(hidden)?;
        }
    }
    let coords_idx: Vec<usize> = (0..dim).collect();
    let vels_idx: Vec<usize> = (dim..2 * dim).collect();
    let rank = tape.shape(hidden).len();
    let coords_hat = tape.index_select(hidden, rank - 1, &coords_idx)?;
    let vels_hat = tape.index_select(hidden, rank - 1, &vels_idx)?;
    Ok((coords_hat, vels_hat))
}

/// `x(t) = x(t-1) + alpha v(t-1); v(t) = beta v(t-1) + gamma`, iterated over
/// the horizon from the last observed frame. Three learnable scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub horizon: usize,
}

#[derive(Clone, Debug)]
pub struct LinearBaseline {
    pub config: LinearConfig,
    pub params: ParamSet,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
}

impl LinearBaseline {
    pub fn init(config: LinearConfig, _seed: u64) -> Result<LinearBaseline, DataError> {
        if config.horizon == 0 {
            return Err(DataError::InvalidConfig("horizon must be positive".into()));
        }
        let mut params = ParamSet::new();
        let alpha = params.add("alpha", Tensor::zeros(&[1]));
        let beta = params.add("beta", Tensor::zeros(&[1]));
        let gamma = params.add("gamma", Tensor::zeros(&[1]));
        Ok(LinearBaseline {
            config,
            params,
            alpha,
            beta,
            gamma,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }
}

pub fn linear_forward(
    tape: &mut Tape,
    binding: &Binding,
    model: &LinearBaseline,
    batch: &BatchIds,
) -> Result<(TensorId, TensorId), TensorError> {
    let shape = tape.shape(batch.coords).to_vec();
    let (b, l, n, dim) = (shape[0], shape[1], shape[2], shape[3]);
    let last = tape.index_select(batch.coords, 1, &[l - 1])?;
    let mut coords = tape.reshape(last, vec![b, n, dim])?;
    let last_v = tape.index_select(batch.vels, 1, &[l - 1])?;
    let mut vels = tape.reshape(last_v, vec![b, n, dim])?;
    let alpha = binding.id(model.alpha);
    let beta = binding.id(model.beta);
    let gamma = binding.id(model.gamma);
    for _ in 0..model.config.horizon {
        let step = tape.mul(vels, alpha)?;
        coords = tape.add(coords, step)?;
        let damped = tape.mul(vels, beta)?;
        vels = tape.add(damped, gamma)?;
    }
    Ok((coords, vels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_split, GenConfig, Split};
    use crate::model::GraphSequenceBatch;

    fn batch(l: usize, horizon: usize) -> GraphSequenceBatch {
        let gen = GenConfig {
            n_particles: 4,
            seq_len: l,
            horizon,
            train_count: 2,
            val_count: 0,
            test_count: 0,
            ..GenConfig::default()
        };
        let ds = generate_split(&gen, Split::Train).unwrap();
        GraphSequenceBatch::from_dataset(&ds, &[0, 1], 1).unwrap()
    }

    #[test]
    fn mlp_is_deterministic_and_counts_match() {
        let config = MlpConfig {
            seq_len: 3,
            hidden_dim: 16,
            ..MlpConfig::default()
        };
        let model = MlpBaseline::init(config.clone(), 9).unwrap();
        assert_eq!(model.param_count(), param_count_mlp(&config));
        // input 18 -> 16, 4 x (16 -> 16), 16 -> 6
        assert_eq!(
            param_count_mlp(&config),
            18 * 16 + 16 + 4 * (16 * 16 + 16) + 16 * 6 + 6
        );
        let data = batch(3, 40);
        let run = || {
            let mut tape = Tape::new();
            let binding = model.params.bind(&mut tape);
            let ids = data.to_tape(&mut tape);
            let (x, v) = mlp_forward(&mut tape, &binding, &model, &ids).unwrap();
            (tape.data(x).to_vec(), tape.data(v).to_vec())
        };
        let (x1, v1) = run();
        let (x2, v2) = run();
        assert_eq!(x1, x2);
        assert_eq!(v1, v2);
        assert_eq!(x1.len(), 2 * 4 * 3);
    }

    #[test]
    fn mlp_count_independent_of_particle_count() {
        // the same weights serve any N: count formula has no N term
        let config = MlpConfig::default();
        let c = param_count_mlp(&config);
        assert_eq!(c, param_count_mlp(&MlpConfig { ..config }));
    }

    #[test]
    fn mlp_gradient_check() {
        let config = MlpConfig {
            seq_len: 2,
            hidden_dim: 8,
            hidden_layers: 2,
            ..MlpConfig::default()
        };
        let model = MlpBaseline::init(config, 10).unwrap();
        let data = batch(2, 25);
        // probe the first hidden weight matrix
        let at = model.params.get(model.layers[0].weight).clone();
        let err = crate::grad_check(
            |tape, w| {
                // rebind every parameter except the probed weight
                let mut ids = Vec::new();
                for (i, (_, tensor)) in model.params.iter().enumerate() {
                    if i == 0 {
                        ids.push(w);
                    } else {
                        ids.push(tape.constant_tensor(tensor));
                    }
                }
                let binding = Binding::from_ids(ids);
                let batch_ids = data.to_tape(tape);
                let (x, v) = mlp_forward(tape, &binding, &model, &batch_ids)?;
                let xs = tape.sum_all(x)?;
                let vs = tape.sum_all(v)?;
                let total = tape.add(xs, vs)?;
                tape.square(total)
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "gradient error {err}");
    }

    #[test]
    fn linear_unit_dynamics_single_step() {
        let mut model = LinearBaseline::init(LinearConfig { horizon: 1 }, 0).unwrap();
        model.params.get_mut(model.alpha).data_mut()[0] = 1.0;
        model.params.get_mut(model.beta).data_mut()[0] = 1.0;
        let data = batch(3, 40);
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let ids = data.to_tape(&mut tape);
        let (x, v) = linear_forward(&mut tape, &binding, &model, &ids).unwrap();
        // x_hat = x(L) + v(L), v_hat = v(L)
        let l = 3;
        for bi in 0..2 {
            for k in 0..12 {
                let xl = data.coords.data()[(bi * l + l - 1) * 12 + k];
                let vl = data.vels.data()[(bi * l + l - 1) * 12 + k];
                assert!((tape.data(x)[bi * 12 + k] - (xl + vl)).abs() <= 1e-15);
                assert!((tape.data(v)[bi * 12 + k] - vl).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn linear_zero_decay_kills_velocity() {
        let mut model = LinearBaseline::init(LinearConfig { horizon: 3 }, 0).unwrap();
        model.params.get_mut(model.alpha).data_mut()[0] = 0.5;
        let data = batch(2, 25);
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let ids = data.to_tape(&mut tape);
        let (_, v) = linear_forward(&mut tape, &binding, &model, &ids).unwrap();
        assert!(tape.data(v).iter().all(|&x| x == 0.0));
        assert_eq!(model.param_count(), 3);
    }
}
