//! Adam optimization, the training/evaluation loops, metrics and model
//! checkpoints.

use crate::baselines::{
    linear_forward, mlp_forward, LinearBaseline, LinearConfig, MlpBaseline, MlpConfig,
};
use crate::checkpoint;
use crate::dataset::Dataset;
use crate::error::{DataError, TrainError};
use crate::model::{
    prediction_loss, set_forward, BatchIds, GraphSequenceBatch, Mode, SetConfig, SetModel,
};
use crate::nn::{Binding, ParamSet};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Any of the trainable model families.
pub enum Model {
    Set(SetModel),
    Egnn(SetModel),
    Mlp(MlpBaseline),
    Linear(LinearBaseline),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Set(_) => "set",
            Model::Egnn(_) => "egnn",
            Model::Mlp(_) => "mlp",
            Model::Linear(_) => "linear",
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Set(m) | Model::Egnn(m) => &m.params,
            Model::Mlp(m) => &m.params,
            Model::Linear(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Set(m) | Model::Egnn(m) => &mut m.params,
            Model::Mlp(m) => &mut m.params,
            Model::Linear(m) => &mut m.params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().total_scalars()
    }

    /// Feature width expected in batches.
    pub fn feat_dim(&self) -> usize {
        match self {
            Model::Set(m) | Model::Egnn(m) => m.config.feat_dim,
            _ => 1,
        }
    }

    /// Velocity-term weight of the objective.
    pub fn loss_alpha(&self) -> f64 {
        match self {
            Model::Set(m) | Model::Egnn(m) => m.config.loss_velocity_weight,
            _ => 1.0,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &BatchIds,
        mode: &mut Mode,
    ) -> Result<(crate::tensor::TensorId, crate::tensor::TensorId), TrainError> {
        let out = match self {
            Model::Set(m) | Model::Egnn(m) => set_forward(tape, binding, m, batch, mode)?,
            Model::Mlp(m) => mlp_forward(tape, binding, m, batch)?,
            Model::Linear(m) => linear_forward(tape, binding, m, batch)?,
        };
        Ok(out)
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<(), TrainError> {
        let cfg = &dataset.config;
        match self {
            Model::Set(m) | Model::Egnn(m) => {
                if m.config.n_particles != cfg.n_particles || m.config.seq_len != cfg.seq_len {
                    return Err(TrainError::ConfigMismatch(format!(
                        "model expects N={}, L={} but dataset has N={}, L={}",
                        m.config.n_particles, m.config.seq_len, cfg.n_particles, cfg.seq_len
                    )));
                }
            }
            Model::Mlp(m) => {
                if m.config.seq_len != cfg.seq_len {
                    return Err(TrainError::ConfigMismatch(format!(
                        "mlp expects L={} but dataset has L={}",
                        m.config.seq_len, cfg.seq_len
                    )));
                }
            }
            Model::Linear(m) => {
                if m.config.horizon != cfg.horizon {
                    return Err(TrainError::ConfigMismatch(format!(
                        "linear model rolls out H={} but dataset has H={}",
                        m.config.horizon, cfg.horizon
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: None,
        }
    }
}

/// First/second moment estimates mirroring the parameter shapes.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> AdamState {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            m,
            v,
            t: 0,
            config,
        }
    }

    /// One bias-corrected update. `grads` is index-aligned with the
    /// registry; missing entries count as zero gradients.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<f64>>],
    ) -> Result<(), TrainError> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, grad) in grads.iter().enumerate() {
            if let Some(g) = grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::NanGradient {
                        name: names[i].clone(),
                    });
                }
                if g.len() != self.m[i].len() {
                    return Err(TrainError::GradShape {
                        name: names[i].clone(),
                    });
                }
            }
        }
        let scale = match self.config.clip {
            Some(limit) if limit > 0.0 => {
                let norm: f64 = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        self.t += 1;
        let cfg = &self.config;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let zero: Vec<f64> = Vec::new();
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads
                .get(i)
                .and_then(|g| g.as_ref())
                .map(|g| g.as_slice())
                .unwrap_or(&zero);
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let mut gj = if j < g.len() { g[j] * scale } else { 0.0 };
                if cfg.weight_decay != 0.0 {
                    gj += cfg.weight_decay * data[j];
                }
                self.m[i][j] = cfg.beta1 * self.m[i][j] + (1.0 - cfg.beta1) * gj;
                self.v[i][j] = cfg.beta2 * self.v[i][j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                data[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub weight_decay: f64,
    pub clip: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 100,
            lr: 4.45e-5,
            dropout: 0.1,
            seed: 0,
            eval_every: 1,
            weight_decay: 0.0,
            clip: None,
            checkpoint: None,
            metrics_path: None,
        }
    }
}

/// Eq-13-style metrics: per-scalar MSEs of each stream, their mean (the
/// reported test MSE) and the weighted training objective.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub position_mse: f64,
    pub velocity_mse: f64,
    pub mse: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pos_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_vel_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug)]
pub struct TrainResult {
    pub initial_train_loss: f64,
    pub history: Vec<EpochLog>,
    pub best_val_mse: f64,
    pub best_epoch: usize,
}

/// Metric accumulation shared by every evaluation path.
struct MetricAccum {
    pos_sq: f64,
    vel_sq: f64,
    count: usize,
}

impl MetricAccum {
    fn new() -> Self {
        MetricAccum {
            pos_sq: 0.0,
            vel_sq: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, coords_hat: &[f64], vels_hat: &[f64], batch: &GraphSequenceBatch) {
        for (a, b) in coords_hat.iter().zip(batch.target_coords.data()) {
            self.pos_sq += (a - b) * (a - b);
        }
        for (a, b) in vels_hat.iter().zip(batch.target_vels.data()) {
            self.vel_sq += (a - b) * (a - b);
        }
        self.count += coords_hat.len();
    }

    fn finish(&self, alpha: f64) -> Metrics {
        let position_mse = self.pos_sq / self.count as f64;
        let velocity_mse = self.vel_sq / self.count as f64;
        Metrics {
            position_mse,
            velocity_mse,
            mse: 0.5 * (position_mse + velocity_mse),
            loss: position_mse + alpha * velocity_mse,
        }
    }
}

/// Evaluates an arbitrary predictor over a split; the oracle entry point
/// for tests. `predict` returns flat `[B, N, dim]` buffers.
pub fn evaluate_with<F>(
    mut predict: F,
    dataset: &Dataset,
    feat_dim: usize,
    batch_size: usize,
    alpha: f64,
) -> Result<Metrics, TrainError>
where
    F: FnMut(&GraphSequenceBatch) -> Result<(Vec<f64>, Vec<f64>), TrainError>,
{
    if dataset.trajectories.is_empty() {
        return Err(TrainError::EmptySplit(dataset.split.clone()));
    }
    let mut accum = MetricAccum::new();
    let indices: Vec<usize> = (0..dataset.trajectories.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = GraphSequenceBatch::from_dataset(dataset, chunk, feat_dim)?;
        let (coords_hat, vels_hat) = predict(&batch)?;
        accum.add(&coords_hat, &vels_hat, &batch);
    }
    Ok(accum.finish(alpha))
}

/// Dropout-free evaluation; mutates neither the model nor any RNG.
pub fn evaluate(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<Metrics, TrainError> {
    model.check_dataset(dataset)?;
    evaluate_with(
        |batch| {
            let mut tape = Tape::new();
            let binding = model.params().bind_frozen(&mut tape);
            let ids = batch.to_tape(&mut tape);
            let (x, v) = model.forward(&mut tape, &binding, &ids, &mut Mode::Eval)?;
            Ok((tape.data(x).to_vec(), tape.data(v).to_vec()))
        },
        dataset,
        model.feat_dim(),
        batch_size,
        model.loss_alpha(),
    )
}

/// Trains `model` in place. Deterministic given the seed: data order,
/// dropout masks and initialization all flow from seeded generators.
pub fn train(
    model: &mut Model,
    train_split: &Dataset,
    val_split: &Dataset,
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    model.check_dataset(train_split)?;
    model.check_dataset(val_split)?;
    let n_train = train_split.trajectories.len();
    if n_train == 0 {
        return Err(TrainError::EmptySplit(train_split.split.clone()));
    }
    if config.batch_size == 0 || config.batch_size > n_train {
        return Err(TrainError::BatchTooLarge {
            batch: config.batch_size,
            split: n_train,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            clip: config.clip,
            ..AdamConfig::default()
        },
    );
    let alpha = model.loss_alpha();
    let feat_dim = model.feat_dim();
    let initial_train_loss = evaluate(model, train_split, config.batch_size)?.loss;

    let mut metrics_file = match &config.metrics_path {
        Some(path) => Some(BufWriter::new(
            File::create(path).map_err(DataError::from)?,
        )),
        None => None,
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_val_mse = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<ParamSet> = None;
    let mut step = 0usize;
    let started = Instant::now();
    let mut indices: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=config.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            step += 1;
            let batch = GraphSequenceBatch::from_dataset(train_split, chunk, feat_dim)?;
            let mut tape = Tape::new();
            let binding = model.params().bind(&mut tape);
            let ids = batch.to_tape(&mut tape);
            let mut mode = Mode::Train {
                dropout: config.dropout,
                rng: &mut rng,
            };
            let (x, v) = model.forward(&mut tape, &binding, &ids, &mut mode)?;
            let loss = prediction_loss(&mut tape, x, v, ids.target_coords, ids.target_vels, alpha)?;
            let loss_value = tape.value(loss);
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = binding
                .ids()
                .iter()
                .map(|&id| tape.grad(id).map(|g| g.to_vec()))
                .collect();
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss_value * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val = if epoch % config.eval_every.max(1) == 0 || epoch == config.epochs {
            Some(evaluate(model, val_split, config.batch_size)?)
        } else {
            None
        };
        if let Some(metrics) = val {
            if metrics.mse < best_val_mse {
                best_val_mse = metrics.mse;
                best_epoch = epoch;
                best_params = Some(model.params().clone());
            }
        }
        let log = EpochLog {
            epoch,
            train_loss,
            val_pos_mse: val.map(|m| m.position_mse),
            val_vel_mse: val.map(|m| m.velocity_mse),
            val_mse: val.map(|m| m.mse),
            wall_ms: started.elapsed().as_millis(),
        };
        if let Some(file) = metrics_file.as_mut() {
            let line = serde_json::to_string(&log).map_err(|e| {
                TrainError::Data(DataError::Corrupt(format!("metrics encoding: {e}")))
            })?;
            writeln!(file, "{line}").map_err(DataError::from)?;
        }
        history.push(log);
    }
    if let Some(file) = metrics_file.as_mut() {
        file.flush().map_err(DataError::from)?;
    }
    if let Some(path) = &config.checkpoint {
        // persist the best-validation parameters without disturbing the
        // in-memory (final) ones
        match best_params {
            Some(best) => {
                let current = std::mem::replace(model.params_mut(), best);
                save_model(path, model)?;
                *model.params_mut() = current;
            }
            None => save_model(path, model)?,
        }
    }
    Ok(TrainResult {
        initial_train_loss,
        history,
        best_val_mse,
        best_epoch,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ModelSpec {
    Set { config: SetConfig },
    Egnn { config: SetConfig },
    Mlp { config: MlpConfig },
    Linear { config: LinearConfig },
}

/// Model checkpoint: the named-array container followed by a
/// length-prefixed JSON model spec.
pub fn save_model(path: &Path, model: &Model) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path).map_err(DataError::from)?);
    let entries: Vec<(&str, &Tensor)> = model.params().iter().collect();
    checkpoint::write_arrays(&mut w, &entries)?;
    let spec = match model {
        Model::Set(m) => ModelSpec::Set {
            config: m.config.clone(),
        },
        Model::Egnn(m) => ModelSpec::Egnn {
            config: m.config.clone(),
        },
        Model::Mlp(m) => ModelSpec::Mlp {
            config: m.config.clone(),
        },
        Model::Linear(m) => ModelSpec::Linear {
            config: m.config.clone(),
        },
    };
    let json = serde_json::to_vec(&spec)
        .map_err(|e| DataError::Corrupt(format!("model spec encoding: {e}")))?;
    w.write_all(&(json.len() as u32).to_le_bytes())
        .map_err(DataError::from)?;
    w.write_all(&json).map_err(DataError::from)?;
    w.flush().map_err(DataError::from)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, TrainError> {
    let mut r = BufReader::new(File::open(path).map_err(DataError::from)?);
    let entries = checkpoint::read_arrays(&mut r)?;
    let len = checkpoint::read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| DataError::Truncated("model spec".into()))?;
    let spec: ModelSpec = serde_json::from_slice(&json)
        .map_err(|e| DataError::Corrupt(format!("model spec decoding: {e}")))?;
    let mut model = match spec {
        ModelSpec::Set { config } => Model::Set(SetModel::init(config, 0)?),
        ModelSpec::Egnn { config } => Model::Egnn(SetModel::init(config, 0)?),
        ModelSpec::Mlp { config } => Model::Mlp(MlpBaseline::init(config, 0)?),
        ModelSpec::Linear { config } => Model::Linear(LinearBaseline::init(config, 0)?),
    };
    model.params_mut().load_named(&entries)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_split, GenConfig, Split};

    fn quadratic_params(start: &[f64]) -> ParamSet {
        let mut params = ParamSet::new();
        params.add(
            "w",
            Tensor::from_vec(vec![start.len()], start.to_vec()).unwrap(),
        );
        params
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = quadratic_params(&[0.0, 0.0]);
        let mut adam = AdamState::new(
            &params,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        );
        adam.step(&mut params, &[Some(vec![3.0, -0.5])]).unwrap();
        let w = params.tensors_mut()[0].data().to_vec();
        assert!((w[0] + 0.05).abs() <= 0.05 * 1e-6, "{w:?}");
        assert!((w[1] - 0.05).abs() <= 0.05 * 1e-6, "{w:?}");
    }

    #[test]
    fn adam_zero_gradients_leave_params_fixed() {
        let mut params = quadratic_params(&[1.5, -2.5]);
        let mut adam = AdamState::new(&params, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut params, &[Some(vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(params.tensors_mut()[0].data(), &[1.5, -2.5]);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let target = [0.3, -1.2, 2.0];
        let mut params = quadratic_params(&[1.0, 1.0, 1.0]);
        let mut adam = AdamState::new(
            &params,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        );
        for _ in 0..200 {
            let g: Vec<f64> = params.tensors_mut()[0]
                .data()
                .iter()
                .zip(&target)
                .map(|(w, t)| 2.0 * (w - t))
                .collect();
            adam.step(&mut params, &[Some(g)]).unwrap();
        }
        for (w, t) in params.tensors_mut()[0].data().iter().zip(&target) {
            assert!((w - t).abs() <= 1e-3, "{w} vs {t}");
        }
    }

    #[test]
    fn adam_rejects_nan_gradients() {
        let mut params = quadratic_params(&[1.0]);
        let mut adam = AdamState::new(&params, AdamConfig::default());
        let err = adam.step(&mut params, &[Some(vec![f64::NAN])]).unwrap_err();
        assert!(matches!(err, TrainError::NanGradient { .. }));
    }

    fn tiny_data() -> (Dataset, Dataset) {
        let gen = GenConfig {
            n_particles: 3,
            seq_len: 3,
            horizon: 40,
            train_count: 10,
            val_count: 4,
            test_count: 0,
            ..GenConfig::default()
        };
        (
            generate_split(&gen, Split::Train).unwrap(),
            generate_split(&gen, Split::Val).unwrap(),
        )
    }

    fn tiny_model(seed: u64) -> Model {
        Model::Set(
            SetModel::init(
                SetConfig {
                    n_particles: 3,
                    seq_len: 3,
                    feat_dim: 4,
                    hidden_dim: 8,
                    egcl_layers: 1,
                    blocks: 1,
                    ..SetConfig::default()
                },
                seed,
            )
            .unwrap(),
        )
    }

    #[test]
    fn smoke_train_logs_finite_losses() {
        let (train_split, val_split) = tiny_data();
        let mut model = tiny_model(5);
        let result = train(
            &mut model,
            &train_split,
            &val_split,
            &TrainConfig {
                epochs: 1,
                batch_size: 5,
                lr: 1e-3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(result.history.len(), 1);
        assert!(result.history[0].train_loss.is_finite());
        assert!(result.history[0].val_mse.unwrap().is_finite());
        assert!(result.initial_train_loss.is_finite());
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let (train_split, val_split) = tiny_data();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 5,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut a = tiny_model(6);
        let ra = train(&mut a, &train_split, &val_split, &config).unwrap();
        let mut b = tiny_model(6);
        let rb = train(&mut b, &train_split, &val_split, &config).unwrap();
        for (x, y) in ra.history.iter().zip(&rb.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(
                x.val_mse.unwrap().to_bits(),
                y.val_mse.unwrap().to_bits()
            );
        }
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn evaluate_is_pure_and_oracle_predictor_scores_zero() {
        let (train_split, _) = tiny_data();
        let model = tiny_model(7);
        let before: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let m1 = evaluate(&model, &train_split, 4).unwrap();
        let m2 = evaluate(&model, &train_split, 4).unwrap();
        assert_eq!(m1, m2);
        let after: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);

        // feeding the targets back gives exactly zero error
        let oracle = evaluate_with(
            |batch| {
                Ok((
                    batch.target_coords.data().to_vec(),
                    batch.target_vels.data().to_vec(),
                ))
            },
            &train_split,
            1,
            4,
            1.0,
        )
        .unwrap();
        assert_eq!(oracle.mse, 0.0);
        assert_eq!(oracle.loss, 0.0);
    }

    #[test]
    fn zero_predictor_matches_closed_form_second_moment() {
        let (train_split, _) = tiny_data();
        let zero = evaluate_with(
            |batch| {
                Ok((
                    vec![0.0; batch.target_coords.numel()],
                    vec![0.0; batch.target_vels.numel()],
                ))
            },
            &train_split,
            1,
            4,
            1.0,
        )
        .unwrap();
        let mut pos_sq = 0.0;
        let mut vel_sq = 0.0;
        let mut count = 0usize;
        let cfg = &train_split.config;
        let target = cfg.seq_len + cfg.horizon;
        for t in &train_split.trajectories {
            let state = t.state_at(target, cfg.n_particles);
            for v in state.positions {
                pos_sq += v * v;
                count += 1;
            }
            for v in state.velocities {
                vel_sq += v * v;
            }
        }
        assert!((zero.position_mse - pos_sq / count as f64).abs() <= 1e-12);
        assert!((zero.velocity_mse - vel_sq / count as f64).abs() <= 1e-12);
    }

    #[test]
    fn linear_baseline_evaluates_finite_nonzero() {
        let (train_split, _) = tiny_data();
        let model = Model::Linear(LinearBaseline::init(LinearConfig { horizon: 40 }, 0).unwrap());
        let metrics = evaluate(&model, &train_split, 4).unwrap();
        assert!(metrics.mse.is_finite() && metrics.mse > 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.setm");
        let model = tiny_model(8);
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.kind(), "set");
        assert_eq!(back.param_count(), model.param_count());
        for ((na, ta), (nb, tb)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let (train_split, _) = tiny_data();
        let a = evaluate(&model, &train_split, 4).unwrap();
        let b = evaluate(&back, &train_split, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_size_validation() {
        let (train_split, val_split) = tiny_data();
        let mut model = tiny_model(9);
        let err = train(
            &mut model,
            &train_split,
            &val_split,
            &TrainConfig {
                batch_size: 1000,
                ..TrainConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::BatchTooLarge { .. }));
    }
}
