use gracaps_tensor::{Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::model::{decoder_layout, init_params, Bound, ParamSet};

/// Weight on the reconstruction term of the training loss.
pub const RECONSTRUCTION_WEIGHT: f64 = 0.0005;

/// Fully connected reconstruction network fed with the target capsule only.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
}

/// Decoder parameters on a tape.
pub struct BoundDecoder<'t, T: Scalar = f32> {
    layers: Vec<(Var<'t, T>, Var<'t, T>)>,
    names: Vec<String>,
}

impl<T: Scalar> BoundDecoder<'_, T> {
    pub fn grads(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        let vars = self.layers.iter().flat_map(|(w, b)| [w, b]);
        for (name, v) in self.names.iter().zip(vars) {
            out.push(name.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())));
        }
        out
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        // Separate stream from the classifier's so changing one architecture
        // does not reshuffle the other's initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0_de00_dec0_de00);
        Decoder {
            config: config.clone(),
            params: init_params(&decoder_layout(config), &mut rng),
        }
    }

    pub fn from_params(config: &ModelConfig, params: ParamSet<T>) -> Result<Self> {
        params.check_layout(&decoder_layout(config))?;
        Ok(Decoder {
            config: config.clone(),
            params,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundDecoder<'t, T> {
        let vars: Vec<Var<'t, T>> = self.params.iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect();
        BoundDecoder {
            layers: vars.chunks(2).map(|p| (p[0], p[1])).collect(),
            names: self.params.names().map(String::from).collect(),
        }
    }

    /// Reconstructs `[B, C·H·W]` pixels in `(0, 1)` from capsules
    /// `[B, M, D]`; every row but `targets[b]` is zeroed first.
    pub fn reconstruct<'t>(
        &self,
        bound: &BoundDecoder<'t, T>,
        capsules: Var<'t, T>,
        targets: &[usize],
    ) -> Result<Var<'t, T>> {
        let shape = capsules.shape();
        let (m, d) = (self.config.classes, self.config.capsule_dim_out);
        if shape.len() != 3 || shape[1..] != [m, d] || targets.len() != shape[0] {
            return Err(contract(format!(
                "decoder expects [B, {m}, {d}] capsules with B targets, got {shape:?} and {} targets",
                targets.len()
            )));
        }
        let b = shape[0];
        let mut mask = vec![T::zero(); b * m * d];
        for (i, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(contract(format!("decoder target {t} outside 0..{m}")));
            }
            mask[(i * m + t) * d..(i * m + t + 1) * d].fill(T::one());
        }
        let mask = capsules.tape().constant(Tensor::new([b, m, d], mask)?);
        let mut h = capsules.mul(&mask)?.reshape([b, m * d])?;
        for (i, (w, bias)) in bound.layers.iter().enumerate() {
            h = h.matmul(w)?.add(bias)?;
            h = if i + 1 < bound.layers.len() { h.relu() } else { h.sigmoid() };
        }
        Ok(h)
    }

    /// No-grad reconstruction as images `[B, C, H, W]`.
    pub fn decode(&self, capsules: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let bound = self.bind(&tape, false);
        let out = self.reconstruct(&bound, tape.constant(capsules.clone()), targets)?.value();
        let c = &self.config;
        Ok(out.reshape([targets.len(), c.input_channels, c.input_side, c.input_side])?)
    }
}

/// `weight · mean((recon - image)²)` over all pixels of the batch.
pub fn reconstruction_loss<'t, T: Scalar>(recon: Var<'t, T>, images: Var<'t, T>, weight: f64) -> Result<Var<'t, T>> {
    let b = recon.shape()[0];
    let flat = images.reshape([b, recon.shape()[1]])?;
    Ok(recon.sub(&flat)?.square().mean_all().scale(T::lit(weight)))
}

/// Bound classifier and decoder gradients concatenated in checkpoint order.
pub fn all_grads<T: Scalar>(model: &Bound<'_, T>, decoder: &BoundDecoder<'_, T>) -> ParamSet<T> {
    let mut out = model.grads();
    for (n, g) in decoder.grads().iter() {
        out.push(n, g.clone());
    }
    out
}
