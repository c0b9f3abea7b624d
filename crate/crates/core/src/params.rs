//! Named parameter storage, dense layers and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Token encoder and phrase encoder.
    Encoder,
    /// Similarity, gating, classification and regression heads.
    Reasoning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Xavier-uniform initializer.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Affine map `x W + b` over row-stacked inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, input, output), group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, output), group));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(tape.param(store, self.weight));
        match self.bias {
            Some(b) => y.add_row(tape.param(store, b)),
            None => y,
        }
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        group: ParamGroup,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], true, group))
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("empty mlp")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_reasoning: f64,
    pub lr_encoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_reasoning: 5e-4, lr_encoder: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.rows, p.value.cols)).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> f64 {
        self.step += 1;
        let c = &self.config;
        let norm = grads.grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, param) in store.params.iter_mut().enumerate() {
            let lr = match param.group {
                ParamGroup::Encoder => c.lr_encoder,
                ParamGroup::Reasoning => c.lr_reasoning,
            };
            let g = &grads.grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.data.len() {
                let gj = g.data[j] * clip;
                m.data[j] = c.beta1 * m.data[j] + (1.0 - c.beta1) * gj;
                v.data[j] = c.beta2 * v.data[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                param.value.data[j] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::default();
        let id = store.add("x", Tensor::row(vec![3.0, -2.0]), ParamGroup::Reasoning);
        let mut adam = Adam::new(&store, AdamConfig { lr_reasoning: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let tape = Tape::new();
            let x = tape.param(&store, id);
            let loss = x.square().sum();
            let g = tape.backward(loss);
            let mut acc = ParamGrads::zeros_like(&store);
            g.accumulate_into(&mut acc, 1.0);
            adam.step(&mut store, &acc);
        }
        assert!(store.value(id).data.iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn encoder_group_uses_its_own_rate() {
        let mut store = ParamStore::default();
        let a = store.add("a", Tensor::scalar(1.0), ParamGroup::Encoder);
        let b = store.add("b", Tensor::scalar(1.0), ParamGroup::Reasoning);
        let mut adam = Adam::new(&store, AdamConfig { lr_encoder: 0.0, lr_reasoning: 0.1, ..Default::default() });
        let grads = ParamGrads { grads: vec![Tensor::scalar(1.0), Tensor::scalar(1.0)] };
        adam.step(&mut store, &grads);
        assert_eq!(store.value(a).data[0], 1.0);
        assert!(store.value(b).data[0] < 1.0);
    }

    #[test]
    fn mlp_shapes() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[3, 4, 2], ParamGroup::Reasoning);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(5, 3));
        assert_eq!(mlp.forward(&tape, &store, x).shape(), (5, 2));
        assert_eq!(store.len(), 4);
    }
}
