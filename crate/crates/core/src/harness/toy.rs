//! Small feed-forward stand-in for a pretrained network.
//!
//! A chain of bias-free linear layers with a nonlinearity between them. Some
//! layers carry the `query`/`value` roles and are the ones that get adapted.

use serde::{Deserialize, Serialize};

use crate::approx::Role;
use crate::error::{Error, Result};
use crate::stats::{global_init, layer_stats, GlobalInitParams};
use crate::tensor::{content_hash, derive_seed, matmul, matmul_nt, matmul_tn, sample, DistributionSpec, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Identity,
}

impl Nonlinearity {
    fn apply(self, z: &Matrix) -> Result<Matrix> {
        match self {
            Nonlinearity::Tanh => Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j).tanh()),
            Nonlinearity::Identity => Ok(z.clone()),
        }
    }

    /// `upstream ⊙ f'(z)` given the activation `h = f(z)`.
    fn backprop(self, upstream: &Matrix, h: &Matrix) -> Result<Matrix> {
        match self {
            Nonlinearity::Tanh => Matrix::from_fn(upstream.rows(), upstream.cols(), |i, j| {
                let a = h.get(i, j);
                upstream.get(i, j) * (1.0 - a * a)
            }),
            Nonlinearity::Identity => Ok(upstream.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadSpec {
    Regression { outputs: usize },
    Classification { classes: usize },
}

impl HeadSpec {
    pub fn width(self) -> usize {
        match self {
            HeadSpec::Regression { outputs } => outputs,
            HeadSpec::Classification { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLayerSpec {
    pub name: String,
    pub role: Role,
    /// Output width.
    pub d: usize,
    /// Input width.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    /// Hidden layers in order; the head is appended after them.
    pub layers: Vec<ToyLayerSpec>,
    pub adapted_roles: Vec<Role>,
    pub nonlinearity: Nonlinearity,
    pub head: HeadSpec,
    pub base_seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec::with_head(HeadSpec::Regression { outputs: 8 }, 0)
    }
}

impl ToyModelSpec {
    /// Three 64×64 layers (`embed`, `attn.query`, `attn.value`) and a head.
    pub fn with_head(head: HeadSpec, base_seed: u64) -> Self {
        let layer = |name: &str, role| ToyLayerSpec {
            name: name.into(),
            role,
            d: 64,
            k: 64,
        };
        ToyModelSpec {
            layers: vec![
                layer("embed", Role::Other),
                layer("attn.query", Role::Query),
                layer("attn.value", Role::Value),
            ],
            adapted_roles: vec![Role::Query, Role::Value],
            nonlinearity: Nonlinearity::Tanh,
            head,
            base_seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.k)
    }

    pub fn head_layer(&self) -> ToyLayerSpec {
        ToyLayerSpec {
            name: "head".into(),
            role: Role::Other,
            d: self.head.width(),
            k: self.layers.last().map_or(0, |l| l.d),
        }
    }

    /// Hidden layers followed by the head.
    pub fn all_layers(&self) -> Vec<ToyLayerSpec> {
        let mut v = self.layers.clone();
        v.push(self.head_layer());
        v
    }

    pub fn is_adapted(&self, layer: &ToyLayerSpec) -> bool {
        layer.name != "head" && self.adapted_roles.contains(&layer.role)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("toy model needs at least one hidden layer"));
        }
        if self.head.width() == 0 {
            return Err(Error::invalid("head width must be >= 1"));
        }
        for pair in self.layers.windows(2) {
            if pair[0].d != pair[1].k {
                return Err(Error::invalid(format!(
                    "layer {} outputs {} but {} expects {}",
                    pair[0].name, pair[0].d, pair[1].name, pair[1].k
                )));
            }
        }
        if self.layers.iter().any(|l| l.d == 0 || l.k == 0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if !self.layers.iter().any(|l| self.is_adapted(l)) {
            return Err(Error::invalid("no hidden layer has an adapted role"));
        }
        let mut names: Vec<_> = self.all_layers().into_iter().map(|l| l.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.layers.len() + 1 {
            return Err(Error::invalid("layer names must be unique and not \"head\""));
        }
        Ok(())
    }
}

/// A toy model with its frozen base weights, one per layer incl. the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub spec: ToyModelSpec,
    pub weights: Vec<Matrix>,
}

impl ToyModel {
    /// Base weights `~ N(0, 1/k)`, each layer seeded from its name and role.
    pub fn generate(spec: &ToyModelSpec) -> Result<ToyModel> {
        spec.validate()?;
        let weights = spec
            .all_layers()
            .iter()
            .map(|l| {
                let std = 1.0 / (l.k as f64).sqrt();
                let seed = derive_seed(spec.base_seed, &l.name, l.role.as_str());
                sample(&DistributionSpec::Normal { mean: 0.0, std }, l.d, l.k, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyModel {
            spec: spec.clone(),
            weights,
        })
    }

    /// Identifier used for cache entries.
    pub fn model_id(&self) -> String {
        format!("toy-{}", content_hash_many(&self.weights))
    }

    pub fn layer_specs(&self) -> Vec<ToyLayerSpec> {
        self.spec.all_layers()
    }

    /// `(index, spec, weight)` for each adapted layer.
    pub fn adapted(&self) -> Vec<(usize, ToyLayerSpec, &Matrix)> {
        self.layer_specs()
            .into_iter()
            .enumerate()
            .filter(|(_, l)| self.spec.is_adapted(l))
            .map(|(i, l)| (i, l, &self.weights[i]))
            .collect()
    }

    /// Global (μ̄, σ̄) over the adapted layers.
    pub fn adapted_init_params(&self) -> Result<GlobalInitParams> {
        let stats = self
            .adapted()
            .iter()
            .map(|(_, l, w)| layer_stats(w, &l.name))
            .collect::<Result<Vec<_>>>()?;
        global_init(&stats)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        forward_weights(&self.weights, self.spec.nonlinearity, x)
    }
}

fn content_hash_many(weights: &[Matrix]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for w in weights {
        h.update(content_hash(w).as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Output of a plain chain of linear layers.
pub(crate) fn forward_weights(weights: &[Matrix], act: Nonlinearity, x: &Matrix) -> Result<Matrix> {
    let mut h = x.clone();
    let last = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        let z = matmul_nt(&h, w)?;
        h = if i < last { act.apply(&z)? } else { z };
    }
    Ok(h)
}

/// One layer of a network being fine-tuned.
pub(crate) enum TrainLayer {
    Frozen(Matrix),
    Adapted(crate::adapters::AdaptedLinear),
}

impl TrainLayer {
    fn forward(&self, h: &Matrix) -> Result<Matrix> {
        match self {
            TrainLayer::Frozen(w) => matmul_nt(h, w),
            TrainLayer::Adapted(a) => a.forward(h),
        }
    }
}

/// Gradients for the trainable parts of a [`StudentNet`].
pub(crate) struct NetGrads {
    /// `(layer index, dA, dB)` for each adapted layer.
    pub adapters: Vec<(usize, Matrix, Matrix)>,
    pub head: Option<Matrix>,
}

pub(crate) struct StudentNet {
    pub layers: Vec<TrainLayer>,
    pub act: Nonlinearity,
}

impl StudentNet {
    /// Returns the activations entering each layer and the final output.
    pub fn forward_trace(&self, x: &Matrix) -> Result<(Vec<Matrix>, Matrix)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            h = if i < last { self.act.apply(&z)? } else { z };
        }
        Ok((inputs, h))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.1)
    }

    /// Backpropagates `d_out = dL/d(output)` through the trace.
    pub fn backward(&self, inputs: &[Matrix], d_out: &Matrix, head_grad: bool) -> Result<NetGrads> {
        let mut g = d_out.clone();
        let mut adapters = Vec::new();
        let mut head = None;
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            let h_in = &inputs[i];
            let need_input_grad = i > 0;
            let g_in = match &self.layers[i] {
                TrainLayer::Adapted(layer) => {
                    let grads = layer.grads(h_in, &g)?;
                    adapters.push((i, grads.a, grads.b));
                    grads.x
                }
                TrainLayer::Frozen(w) => {
                    if i == last && head_grad {
                        head = Some(matmul_tn(&g, h_in)?);
                    }
                    if !need_input_grad {
                        break;
                    }
                    matmul(&g, w)?
                }
            };
            if !need_input_grad {
                break;
            }
            // inputs[i] = act(z_{i-1}); undo the nonlinearity.
            g = self.act.backprop(&g_in, h_in)?;
        }
        adapters.reverse();
        Ok(NetGrads { adapters, head })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_shape() {
        let spec = ToyModelSpec::default();
        spec.validate().unwrap();
        let model = ToyModel::generate(&spec).unwrap();
        assert_eq!(model.weights.len(), 4);
        let adapted: Vec<_> = model.adapted().iter().map(|(_, l, _)| l.name.clone()).collect();
        assert_eq!(adapted, ["attn.query", "attn.value"]);
        for (_, l, w) in model.adapted() {
            assert_eq!((l.d, l.k), (64, 64));
            assert_eq!(w.shape(), (64, 64));
        }
        assert_eq!(model.weights[3].shape(), (8, 64));
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let spec = ToyModelSpec::default();
        assert_eq!(ToyModel::generate(&spec).unwrap(), ToyModel::generate(&spec).unwrap());
        let other = ToyModelSpec { base_seed: 1, ..spec.clone() };
        assert_ne!(ToyModel::generate(&spec).unwrap(), ToyModel::generate(&other).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ToyModelSpec::default();
        spec.layers[1].k = 32;
        assert!(spec.validate().is_err());
        let mut spec = ToyModelSpec::default();
        spec.adapted_roles.clear();
        assert!(spec.validate().is_err());
        let mut spec = ToyModelSpec::default();
        spec.layers[0].name = "head".into();
        assert!(spec.validate().is_err());
    }
}
