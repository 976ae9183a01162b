//! Parameters, initialization, and the SGD-with-momentum optimizer.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Trainable tensor with a momentum accumulator and accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Accumulates additively across backward passes until cleared.
    pub grad: Option<Tensor>,
    pub velocity: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let velocity = Tensor::zeros(&value.shape);
        Parameter {
            name: name.into(),
            value,
            grad: None,
            velocity,
        }
    }
}

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// The full parameter collection of one model. Names must be unique.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, p: Parameter) -> ParamId {
        assert!(
            !self.params.iter().any(|q| q.name == p.name),
            "duplicate parameter name {}",
            p.name
        );
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// One model forward recording: the tape plus the parameter leaves bound
/// onto it. A parameter used several times (GRU kernels across timesteps)
/// is bound once so its gradient accumulates naturally.
pub struct Trace {
    pub tape: Tape,
    bindings: Vec<(ParamId, Var)>,
}

impl Trace {
    pub fn new() -> Self {
        Trace {
            tape: Tape::new(),
            bindings: Vec::new(),
        }
    }

    pub fn use_param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|(pid, _)| *pid == id) {
            return v;
        }
        let v = self.tape.param(&set.get(id).value);
        self.bindings.push((id, v));
        v
    }

    /// Runs backward from `loss` and adds dL/dθ into each bound
    /// parameter's grad.
    pub fn backward_into(&self, set: &mut ParamSet, loss: Var) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        for &(pid, var) in &self.bindings {
            if let Some(g) = grads.get(var) {
                let p = set.get_mut(pid);
                let slot = p
                    .grad
                    .get_or_insert_with(|| Tensor::zeros(&p.value.shape));
                for (a, b) in slot.data.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty coupled into the gradient (grad += wd * theta). Decay
    /// of directions no task currently uses is what lets effective rank
    /// actually collapse; without it, initialization noise keeps every
    /// direction alive forever.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Parameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// v <- momentum * v + (grad + wd * theta); theta <- theta - lr * v;
/// grads cleared. A parameter with no grad is left untouched (zero-grad
/// no-op), so untrained heads neither move nor decay.
pub fn sgd_momentum_step(set: &mut ParamSet, cfg: &OptimizerConfig) {
    for p in set.iter_mut() {
        let grad = match p.grad.take() {
            Some(g) => g,
            None => continue,
        };
        for ((v, g), th) in p
            .velocity
            .data
            .iter_mut()
            .zip(&grad.data)
            .zip(&mut p.value.data)
        {
            *v = cfg.momentum * *v + (g + cfg.weight_decay * *th);
            *th -= cfg.learning_rate * *v;
        }
    }
}

/// Fan-in-scaled uniform initialization: U(-b, b) with b = sqrt(1/fan_in).
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Derives an independent seed stream for a named mechanism, so toggling
/// one RNG consumer (replay, shuffling, init) cannot perturb the others.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the base seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ base.wrapping_mul(0x9e3779b97f4a7c15)
}

pub fn seeded_rng(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step_matches_definition() {
        let mut set = ParamSet::new();
        let id = set.add(Parameter::new("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()));
        set.get_mut(id).grad = Some(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_momentum_step(&mut set, &cfg);
        assert_eq!(set.get(id).value.data, vec![1.0 - 0.05, 2.0 + 0.1]);
        assert!(set.get(id).grad.is_none());
    }

    #[test]
    fn two_momentum_steps_with_constant_grad() {
        // displacement after two steps = lr * g * (2 + m)
        let (lr, m, g) = (0.01, 0.9, 3.0);
        let mut set = ParamSet::new();
        let id = set.add(Parameter::new("w", Tensor::new(vec![1], vec![10.0]).unwrap()));
        let cfg = OptimizerConfig {
            learning_rate: lr,
            momentum: m,
            weight_decay: 0.0,
        };
        for _ in 0..2 {
            set.get_mut(id).grad = Some(Tensor::new(vec![1], vec![g]).unwrap());
            sgd_momentum_step(&mut set, &cfg);
        }
        let expect = 10.0 - lr * g * (2.0 + m);
        assert!((set.get(id).value.data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_noop() {
        let mut set = ParamSet::new();
        let id = set.add(Parameter::new("w", Tensor::new(vec![1], vec![4.0]).unwrap()));
        sgd_momentum_step(&mut set, &OptimizerConfig::default());
        assert_eq!(set.get(id).value.data, vec![4.0]);
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        use crate::tape::Var;
        let mut set = ParamSet::new();
        let id = set.add(Parameter::new("w", Tensor::new(vec![1, 1], vec![2.0]).unwrap()));
        let mut total: Option<f64> = None;
        let mut tr = Trace::new();
        let w = tr.use_param(&set, id);
        let loss: Var = {
            let x = tr.tape.input(&Tensor::new(vec![1, 1], vec![3.0]).unwrap());
            tr.tape.matmul(w, x).unwrap()
        };
        tr.backward_into(&mut set, loss).unwrap();
        tr.backward_into(&mut set, loss).unwrap();
        if let Some(g) = &set.get(id).grad {
            total = Some(g.data[0]);
        }
        assert_eq!(total, Some(6.0)); // 3 + 3, accumulated until cleared
        set.clear_grads();
        assert!(set.get(id).grad.is_none());
    }

    #[test]
    fn derived_seeds_differ_per_tag() {
        assert_ne!(derive_seed(0, "init"), derive_seed(0, "shuffle"));
        assert_eq!(derive_seed(7, "init"), derive_seed(7, "init"));
    }

    #[test]
    fn init_is_fan_in_bounded_and_deterministic() {
        let mut r1 = seeded_rng(42, "init");
        let mut r2 = seeded_rng(42, "init");
        let a = init_uniform(&[16, 4], 4, &mut r1);
        let b = init_uniform(&[16, 4], 4, &mut r2);
        assert_eq!(a.data, b.data);
        let bound = 0.5;
        assert!(a.data.iter().all(|v| v.abs() < bound));
    }
}
