//! Parameter registry and small MLP building blocks.
//!
//! All learnable tensors live in a [`ParamSet`]; layer structs hold
//! [`ParamId`] handles into it. Before each forward pass the whole set is
//! bound onto a fresh tape ([`ParamSet::bind`]), which keeps parameter
//! ordering identical between optimizer state, gradients and checkpoints.

use crate::error::{DataError, TensorError};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to one named parameter tensor.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of learnable scalars.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Leaf every parameter onto `tape` in registry order.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self.tensors.iter().map(|t| tape.leaf(t)).collect();
        Binding { ids }
    }

    /// Like [`ParamSet::bind`] but gradient-free (evaluation passes).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        let ids = self
            .tensors
            .iter()
            .map(|t| tape.constant_tensor(t))
            .collect();
        Binding { ids }
    }

    /// Overwrite parameter values from named arrays (checkpoint load).
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<(), DataError> {
        if entries.len() != self.tensors.len() {
            return Err(DataError::Corrupt(format!(
                "checkpoint has {} arrays, model expects {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, tensor)) in entries.iter().enumerate() {
            if name != &self.names[i] {
                return Err(DataError::Corrupt(format!(
                    "parameter {i} name mismatch: '{name}' vs '{}'",
                    self.names[i]
                )));
            }
            if tensor.shape() != self.tensors[i].shape() {
                return Err(DataError::Corrupt(format!(
                    "parameter '{name}' shape mismatch: {:?} vs {:?}",
                    tensor.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = tensor.clone().with_requires_grad(true);
        }
        Ok(())
    }
}

/// Tape-bound view of a [`ParamSet`].
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    /// Assemble from explicit ids, index-aligned with the registry.
    pub fn from_ids(ids: Vec<TensorId>) -> Binding {
        Binding { ids }
    }

    pub fn id(&self, param: ParamId) -> TensorId {
        self.ids[param.0]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Act {
    Silu,
    Relu,
}

fn apply_act(tape: &mut Tape, act: Act, x: TensorId) -> Result<TensorId, TensorError> {
    match act {
        Act::Silu => tape.silu(x),
        Act::Relu => tape.relu(x),
    }
}

/// Affine map on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Kaiming-style uniform fan-in init, zero biases. `weight_scale`
    /// shrinks the weights after init (used for near-zero output layers).
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        weight_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let bound = (6.0 / in_dim.max(1) as f64).sqrt();
        let mut weight = Tensor::rand_uniform(&[in_dim, out_dim], bound, rng);
        if weight_scale != 1.0 {
            for w in weight.data_mut() {
                *w *= weight_scale;
            }
        }
        let weight = params.add(format!("{name}.weight"), weight);
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: TensorId,
    ) -> Result<TensorId, TensorError> {
        let out = tape.matmul(x, binding.id(self.weight))?;
        match self.bias {
            Some(b) => tape.add(out, binding.id(b)),
            None => Ok(out),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Two-layer MLP: `l2(act(l1(x)))`, optionally with an activation after l2
/// and dropout on the hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Act,
    pub final_act: bool,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        act: Act,
        final_act: bool,
        final_bias: bool,
        final_weight_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Mlp {
        let l1 = Linear::init(params, &format!("{name}.l1"), in_dim, hidden_dim, true, 1.0, rng);
        let l2 = Linear::init(
            params,
            &format!("{name}.l2"),
            hidden_dim,
            out_dim,
            final_bias,
            final_weight_scale,
            rng,
        );
        Mlp {
            l1,
            l2,
            act,
            final_act,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: TensorId,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<TensorId, TensorError> {
        let hidden = self.l1.forward(tape, binding, x)?;
        let mut hidden = apply_act(tape, self.act, hidden)?;
        if let Some((rate, rng)) = dropout {
            hidden = apply_dropout(tape, hidden, rate, rng)?;
        }
        let out = self.l2.forward(tape, binding, hidden)?;
        if self.final_act {
            apply_act(tape, self.act, out)
        } else {
            Ok(out)
        }
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }
}

/// Inverted dropout: keeps each unit with probability `1 - rate` and scales
/// survivors by `1 / (1 - rate)`. No-op for `rate <= 0`.
pub fn apply_dropout(
    tape: &mut Tape,
    x: TensorId,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId, TensorError> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let numel = tape.numel(x);
    let mask: Vec<f64> = (0..numel)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask = tape.constant(shape, mask)?;
    tape.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn binding_preserves_registry_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let lin = Linear::init(&mut params, "lin", 3, 2, true, 1.0, &mut rng);
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        assert_eq!(binding.ids().len(), 2);
        assert_eq!(tape.shape(binding.id(lin.weight)), &[3, 2]);
        assert_eq!(tape.shape(binding.id(lin.bias.unwrap())), &[2]);
        assert_eq!(params.name(lin.weight), "lin.weight");
        assert_eq!(params.total_scalars(), 8);
        assert_eq!(lin.param_count(), 8);
    }

    #[test]
    fn mlp_gradients_flow_to_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let mlp = Mlp::init(
            &mut params, "mlp", 3, 4, 2, Act::Silu, false, true, 1.0, &mut rng,
        );
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let x = tape.constant(vec![5, 3], vec![0.3; 15]).unwrap();
        let y = mlp.forward(&mut tape, &binding, x, None).unwrap();
        assert_eq!(tape.shape(y), &[5, 2]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        for &id in binding.ids() {
            assert!(tape.grad(id).is_some());
        }
    }

    #[test]
    fn dropout_is_identity_at_rate_zero_and_masks_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(vec![1000], vec![1.0; 1000]).unwrap();
        let same = apply_dropout(&mut tape, x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);
        let dropped = apply_dropout(&mut tape, x, 0.5, &mut rng).unwrap();
        let zeros = tape.data(dropped).iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 400 && zeros < 600, "{zeros} zeroed of 1000");
        for &v in tape.data(dropped) {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn load_named_checks_names_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        Linear::init(&mut params, "a", 2, 2, false, 1.0, &mut rng);
        let entries: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        params.load_named(&entries).unwrap();
        let bad = vec![("wrong".to_string(), Tensor::zeros(&[2, 2]))];
        assert!(params.load_named(&bad).is_err());
    }
}
