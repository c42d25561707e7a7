//! The capsule classifier: conv feature extraction, per-capsule transforms
//! and one of three aggregation schemes.

mod capsule;
mod params;

pub use capsule::{
    aggregate_and_squash, argmax, average_votes, build_adjacency, class_norms, dynamic_routing,
    head_attention, head_pool, margin_loss, row_normalize, squash, transform_capsules, LAMBDA,
    M_NEG, M_POS,
};
pub use params::{count_parameters, decoder_layout, init_params, model_layout, ParamSet, ParameterCounts};

use gracaps_tensor::{Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Aggregation, ModelConfig};
use crate::error::{config_err, contract, Result};

/// Parameters placed on a tape, in [`ParamSet`] order.
pub struct Bound<'t, T: Scalar = f32> {
    vars: Vec<(String, Var<'t, T>)>,
    adjacency: Var<'t, T>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn req(&self, name: &str) -> Var<'t, T> {
        self.get(name).unwrap_or_else(|| panic!("bound parameters lack `{name}`"))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var<'t, T>> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }

    /// Accumulated gradients of every parameter, in order.
    pub fn grads(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, v) in &self.vars {
            let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
            out.push(name.clone(), g);
        }
        out
    }
}

/// Result of a forward pass.
pub struct Forward<'t, T: Scalar = f32> {
    /// `[B, M, Dout]`, rows squashed.
    pub capsules: Var<'t, T>,
    /// `[B, L, K², M]` per-head attention; graph-pool only.
    pub attention: Option<Var<'t, T>>,
}

/// Forward results detached from any tape.
#[derive(Debug, Clone)]
pub struct Inference<T: Scalar = f32> {
    pub capsules: Tensor<T>,
    pub attention: Option<Tensor<T>>,
    /// `[B, M]` capsule lengths.
    pub norms: Tensor<T>,
}

impl<T: Scalar> Inference<T> {
    /// Argmax of capsule lengths per example, lowest class on ties.
    pub fn predictions(&self) -> Vec<usize> {
        let m = self.norms.shape()[1];
        self.norms.data().chunks(m).map(argmax).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsNet<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
    adjacency: Tensor<T>,
}

impl<T: Scalar> CapsNet<T> {
    /// Validates `config` and draws seeded initial parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&model_layout(&config), &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&model_layout(&config))?;
        let mut adjacency = build_adjacency(config.grid_side, config.sigma)?;
        if config.normalize_adjacency {
            adjacency = row_normalize(&adjacency);
        }
        Ok(CapsNet {
            config,
            params,
            adjacency,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn adjacency(&self) -> &Tensor<T> {
        &self.adjacency
    }

    pub fn cast<U: Scalar>(&self) -> CapsNet<U> {
        CapsNet {
            config: self.config.clone(),
            params: self.params.cast(),
            adjacency: self.adjacency.cast(),
        }
    }

    /// Places the parameters on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), tape.leaf(t.clone(), trainable)))
                .collect(),
            adjacency: tape.constant(self.adjacency.clone()),
        }
    }

    /// Conv stack to primary capsules `[B, N, Din]`, head-major: capsule
    /// `l·K² + i` holds the `Din` channels of group `l` at grid cell `i`.
    pub fn extract_primary<'t>(&self, bound: &Bound<'t, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let shape = images.shape();
        let expected = [cfg.input_channels, cfg.input_side, cfg.input_side];
        if shape.len() != 4 || shape[1..] != expected {
            let got_k = (shape.len() == 4 && shape[2] == shape[3])
                .then(|| {
                    ModelConfig {
                        input_side: shape[2],
                        ..cfg.clone()
                    }
                    .conv_output_side()
                })
                .flatten();
            return Err(config_err(
                "input",
                format!(
                    "images {shape:?} give K = {}, expected [B, {}, {}, {}] giving K = {}",
                    got_k.map_or("none".to_string(), |k| k.to_string()),
                    expected[0],
                    expected[1],
                    expected[2],
                    cfg.grid_side
                ),
            ));
        }
        let b = shape[0];
        let mut h = images;
        for (i, c) in cfg.conv.iter().enumerate() {
            h = h.conv2d(
                &bound.req(&format!("conv{i}.weight")),
                &bound.req(&format!("conv{i}.bias")),
                c.stride,
            )?;
            if i + 1 < cfg.conv.len() {
                h = h.relu();
            }
        }
        let (l, din, nodes) = (cfg.heads, cfg.capsule_dim_in, cfg.nodes());
        Ok(h.reshape([b, l, din, nodes])?
            .permute(&[0, 1, 3, 2])?
            .reshape([b, l * nodes, din])?)
    }

    /// Primary capsules `[B, N, Din]` to class capsules.
    pub fn classify_primary<'t>(&self, bound: &Bound<'t, T>, primary: Var<'t, T>) -> Result<Forward<'t, T>> {
        let cfg = &self.config;
        let b = primary.shape()[0];
        let (l, nodes, dout, m) = (cfg.heads, cfg.nodes(), cfg.capsule_dim_out, cfg.classes);
        let projected = transform_capsules(primary, bound.req("transform"))?;
        Ok(match cfg.aggregation {
            Aggregation::GraphPool => {
                let x = projected.reshape([b, l, nodes, dout])?;
                let att = head_attention(x, bound.adjacency, bound.req("pool"))?;
                let pooled = head_pool(att, x)?;
                Forward {
                    capsules: aggregate_and_squash(pooled, 1)?,
                    attention: Some(att),
                }
            }
            Aggregation::DynamicRouting => {
                let votes = projected.reshape([b, cfg.num_primary(), m, dout])?;
                Forward {
                    capsules: dynamic_routing(votes, cfg.routing_iterations)?,
                    attention: None,
                }
            }
            Aggregation::Average => {
                let votes = projected.reshape([b, cfg.num_primary(), m, dout])?;
                Forward {
                    capsules: average_votes(votes)?,
                    attention: None,
                }
            }
        })
    }

    /// Images `[B, C, H, W]` to class capsules.
    pub fn forward<'t>(&self, bound: &Bound<'t, T>, images: Var<'t, T>) -> Result<Forward<'t, T>> {
        let primary = self.extract_primary(bound, images)?;
        self.classify_primary(bound, primary)
    }

    /// Forward pass on a non-recording tape.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Inference<T>> {
        let tape = Tape::no_grad();
        let bound = self.bind(&tape, false);
        let fwd = self.forward(&bound, tape.constant(images.clone()))?;
        Ok(Inference {
            capsules: fwd.capsules.value(),
            attention: fwd.attention.map(|a| a.value()),
            norms: class_norms(fwd.capsules)?.value(),
        })
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.infer(images)?.predictions())
    }

    /// Single-image convenience: `[C, H, W]` → class.
    pub fn predict_one(&self, image: &Tensor<T>) -> Result<usize> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        self.predict(&image.reshape(shape)?)?
            .first()
            .copied()
            .ok_or_else(|| contract("empty prediction"))
    }
}

impl CapsNet<f64> {
    /// Worst relative error between tape gradients of the margin loss and
    /// central differences, over every parameter entry and input pixel.
    pub fn gradient_check(&self, images: &Tensor<f64>, labels: &[usize], h: f64) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.bind(&tape, true);
        let x = tape.param(images.clone());
        margin_loss(self.forward(&bound, x)?.capsules, labels)?.backward()?;
        let analytic = bound.grads();
        let input_grad = x.grad().expect("input is trainable");

        let loss_at = |model: &CapsNet<f64>, images: &Tensor<f64>| -> Result<f64> {
            let tape = Tape::no_grad();
            let bound = model.bind(&tape, false);
            let v = model.forward(&bound, tape.constant(images.clone()))?.capsules;
            Ok(margin_loss(v, labels)?.value().item()?)
        };
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);

        let mut worst = 0.0f64;
        let mut probe = self.clone();
        for (name, grad) in analytic.iter() {
            for i in 0..grad.numel() {
                let orig = self.params.get(name).expect("same layout").data()[i];
                probe.params.get_mut(name).expect("same layout").data_mut()[i] = orig + h;
                let plus = loss_at(&probe, images)?;
                probe.params.get_mut(name).expect("same layout").data_mut()[i] = orig - h;
                let minus = loss_at(&probe, images)?;
                probe.params.get_mut(name).expect("same layout").data_mut()[i] = orig;
                worst = worst.max(rel(grad.data()[i], (plus - minus) / (2.0 * h)));
            }
        }
        for i in 0..images.numel() {
            let mut shifted = images.clone();
            shifted.data_mut()[i] += h;
            let plus = loss_at(self, &shifted)?;
            shifted.data_mut()[i] -= 2.0 * h;
            let minus = loss_at(self, &shifted)?;
            worst = worst.max(rel(input_grad.data()[i], (plus - minus) / (2.0 * h)));
        }
        Ok(worst)
    }
}
