//! Parameter storage, the Adam optimizer, and gradient clipping.

use std::collections::HashMap;

use super::Tensor;

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Pretrained-style encoder parameters (fine-tuned at a small rate,
    /// frozen during the first epoch).
    Encoder,
    /// Everything else: task heads, layer attention.
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies. Biases and layer-norm
    /// gains are registered with `decay = false`.
    pub decay: bool,
}

/// All parameters of a model, in registration order (which fixes
/// checkpoint array order and makes training deterministic).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, group: ParamGroup, decay: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            group,
            decay,
        });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Ids of every parameter in a group.
    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }
}

/// Uniformly rescale all gradients so their global L2 norm is at most
/// `max_norm`. Returns the scale factor applied (1 when already within
/// the bound).
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive, got {max_norm}");
    let norm = store
        .params
        .iter()
        .map(|p| p.grad.sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm {
        return 1.0;
    }
    let factor = max_norm / norm;
    for p in &mut store.params {
        for g in p.grad.data_mut() {
            *g *= factor;
        }
    }
    factor
}

/// Adam with bias correction and decoupled weight decay. Moments and step
/// counts are kept per parameter; parameters given a zero learning rate
/// are skipped entirely, so frozen groups accumulate no optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon: 1e-8,
            weight_decay,
            first_moment: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            second_moment: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            steps: vec![0; store.len()],
        }
    }

    /// One update using each parameter's gradient; `lr_for` supplies the
    /// per-parameter learning rate.
    pub fn step(&mut self, store: &mut ParamStore, lr_for: impl Fn(&Parameter) -> f64) {
        for (i, p) in store.params.iter_mut().enumerate() {
            let lr = lr_for(p);
            if lr == 0.0 {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as f64;
            let bias1 = 1.0 - self.beta1.powf(t);
            let bias2 = 1.0 - self.beta2.powf(t);
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            for ((value, &g), (m, v)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *value -= lr * (m_hat / (v_hat.sqrt() + self.epsilon) + decay * *value);
            }
        }
    }
}
