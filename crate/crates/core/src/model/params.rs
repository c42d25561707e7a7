use std::fmt;

use gracaps_tensor::{Scalar, Tensor};
use rand::Rng;

use crate::config::{Aggregation, ModelConfig};
use crate::error::{contract, Result};

/// Ordered named tensors. Order is part of the contract: checkpoints and
/// optimizer state follow it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Same names, zero tensors.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// Checks names and shapes against a layout, in order.
    pub fn check_layout(&self, layout: &[(String, Vec<usize>)]) -> Result<()> {
        if self.len() != layout.len() {
            return Err(contract(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.len()
            )));
        }
        for ((name, t), (want_name, want_shape)) in self.iter().zip(layout) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(contract(format!(
                    "parameter `{name}` {:?} where `{want_name}` {want_shape:?} was expected",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Names and shapes of the classifier parameters for a configuration.
pub fn model_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut channels = cfg.input_channels;
    for (i, c) in cfg.conv.iter().enumerate() {
        out.push((format!("conv{i}.weight"), vec![c.out_channels, channels, c.kernel, c.kernel]));
        out.push((format!("conv{i}.bias"), vec![c.out_channels]));
        channels = c.out_channels;
    }
    let (n, din, dout, m) = (cfg.num_primary(), cfg.capsule_dim_in, cfg.capsule_dim_out, cfg.classes);
    match cfg.aggregation {
        Aggregation::GraphPool => {
            out.push(("transform".into(), vec![n, din, dout]));
            out.push(("pool".into(), vec![dout, m]));
        }
        Aggregation::DynamicRouting | Aggregation::Average => {
            out.push(("transform".into(), vec![n, din, m * dout]));
        }
    }
    out
}

/// Names and shapes of the reconstruction decoder.
pub fn decoder_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut widths = vec![cfg.classes * cfg.capsule_dim_out];
    widths.extend(&cfg.decoder_hidden);
    widths.push(cfg.image_pixels());
    let mut out = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        out.push((format!("decoder.fc{i}.weight"), vec![w[0], w[1]]));
        out.push((format!("decoder.fc{i}.bias"), vec![w[1]]));
    }
    out
}

/// Fan-in of a parameter for initialization: every axis but the output one.
fn fan_in(name: &str, shape: &[usize], layout: &[(String, Vec<usize>)]) -> usize {
    if let Some(weight) = name.strip_suffix(".bias") {
        let w = &layout
            .iter()
            .find(|(n, _)| n.strip_suffix(".weight") == Some(weight))
            .expect("every bias has a weight")
            .1;
        return fan_in(&format!("{weight}.weight"), w, layout);
    }
    if name.starts_with("conv") {
        shape[1..].iter().product()
    } else {
        // transform [N, Din, Dout], pool [Dout, M], decoder [in, out]
        shape[shape.len() - 2]
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization, drawn in layout order.
pub fn init_params<T: Scalar>(layout: &[(String, Vec<usize>)], rng: &mut impl Rng) -> ParamSet<T> {
    let mut set = ParamSet::new();
    for (name, shape) in layout {
        let bound = 1.0 / (fan_in(name, shape, layout) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        set.push(name.clone(), Tensor::new(shape.clone(), data).expect("layout shape"));
    }
    set
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCounts {
    pub conv: usize,
    pub transform: usize,
    pub pooling: usize,
    pub decoder: usize,
}

impl ParameterCounts {
    /// Everything except the decoder.
    pub fn classifier(&self) -> usize {
        self.conv + self.transform + self.pooling
    }

    pub fn total(&self) -> usize {
        self.classifier() + self.decoder
    }
}

impl fmt::Display for ParameterCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "component,parameters")?;
        writeln!(f, "conv,{}", self.conv)?;
        writeln!(f, "transform,{}", self.transform)?;
        writeln!(f, "pooling,{}", self.pooling)?;
        writeln!(f, "decoder,{}", self.decoder)?;
        write!(f, "total,{}", self.total())
    }
}

pub fn count_parameters(cfg: &ModelConfig) -> ParameterCounts {
    let numel = |s: &Vec<usize>| s.iter().product::<usize>();
    let mut counts = ParameterCounts {
        conv: 0,
        transform: 0,
        pooling: 0,
        decoder: decoder_layout(cfg).iter().map(|(_, s)| numel(s)).sum(),
    };
    for (name, shape) in model_layout(cfg) {
        let slot = match name.as_str() {
            "transform" => &mut counts.transform,
            "pool" => &mut counts.pooling,
            _ => &mut counts.conv,
        };
        *slot += numel(&shape);
    }
    counts
}
