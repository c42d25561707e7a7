use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Result};
use crate::kv::Document;

/// How class capsules are formed from primary-capsule votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    GraphPool,
    DynamicRouting,
    Average,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Self::GraphPool, Self::DynamicRouting, Self::Average];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GraphPool => "graph-pool",
            Self::DynamicRouting => "dynamic-routing",
            Self::Average => "average",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown aggregation `{s}` (graph-pool, dynamic-routing, average)"))
    }
}

/// One valid convolution: `out_channels` filters of `kernel`×`kernel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.out_channels, self.kernel, self.stride)
    }
}

impl FromStr for ConvSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [o, k, st] = parts.as_slice() else {
            return Err(format!("`{s}` is not `out:kernel:stride`"));
        };
        let num = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
        Ok(ConvSpec {
            out_channels: num(o)?,
            kernel: num(k)?,
            stride: num(st)?,
        })
    }
}

/// Architecture of a capsule network. Everything needed to rebuild the
/// parameter shapes lives here; the checkpoint embeds it verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_side: usize,
    pub input_channels: usize,
    /// The conv stack; ReLU follows every layer but the last, whose output
    /// channels are grouped into `heads` × `capsule_dim_in`.
    pub conv: Vec<ConvSpec>,
    pub heads: usize,
    /// Side of the primary-capsule grid; must match what `conv` produces.
    pub grid_side: usize,
    pub capsule_dim_in: usize,
    pub capsule_dim_out: usize,
    pub classes: usize,
    /// Gaussian width of the spatial graph, in grid units.
    pub sigma: f64,
    pub aggregation: Aggregation,
    pub routing_iterations: usize,
    /// Row-normalize the adjacency so each row sums to one.
    pub normalize_adjacency: bool,
    pub decoder_hidden: Vec<usize>,
}

impl ModelConfig {
    /// Full-size MNIST network: two 3×3 convolutions of 256 channels (the
    /// second with stride 2) give a 12×12 grid of 32 heads of 8-D capsules.
    pub fn mnist_reference() -> Self {
        ModelConfig {
            input_side: 28,
            input_channels: 1,
            conv: vec![
                ConvSpec { out_channels: 256, kernel: 3, stride: 1 },
                ConvSpec { out_channels: 256, kernel: 3, stride: 2 },
            ],
            heads: 32,
            grid_side: 12,
            capsule_dim_in: 8,
            capsule_dim_out: 16,
            classes: 10,
            sigma: 1.0,
            aggregation: Aggregation::GraphPool,
            routing_iterations: 3,
            normalize_adjacency: false,
            decoder_hidden: vec![512, 1024],
        }
    }

    /// Reduced network that trains in minutes on one CPU core: 8 heads on a
    /// 12×12 grid behind two 9×9 convolutions.
    pub fn desk() -> Self {
        ModelConfig {
            conv: vec![
                ConvSpec { out_channels: 32, kernel: 9, stride: 1 },
                ConvSpec { out_channels: 64, kernel: 9, stride: 1 },
            ],
            heads: 8,
            ..Self::mnist_reference()
        }
    }

    /// Primary capsules: `heads · grid_side²`.
    pub fn num_primary(&self) -> usize {
        self.heads * self.nodes()
    }

    /// Graph nodes per head: `grid_side²`.
    pub fn nodes(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn image_pixels(&self) -> usize {
        self.input_channels * self.input_side * self.input_side
    }

    /// Output side of the conv stack, or `None` if some layer does not fit.
    pub fn conv_output_side(&self) -> Option<usize> {
        let mut side = self.input_side;
        for c in &self.conv {
            if c.kernel == 0 || c.stride == 0 || c.kernel > side {
                return None;
            }
            side = (side - c.kernel) / c.stride + 1;
        }
        Some(side)
    }

    /// Pixel position of grid cell 0's receptive-field centre and the pixel
    /// distance between neighbouring cells.
    pub fn receptive_field(&self) -> (f32, f32) {
        let (mut centre, mut jump) = (0.0, 1.0);
        for c in &self.conv {
            centre += (c.kernel as f32 - 1.0) / 2.0 * jump;
            jump *= c.stride as f32;
        }
        (centre, jump)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_side", self.input_side),
            ("input_channels", self.input_channels),
            ("heads", self.heads),
            ("grid_side", self.grid_side),
            ("capsule_dim_in", self.capsule_dim_in),
            ("capsule_dim_out", self.capsule_dim_out),
            ("classes", self.classes),
            ("routing_iterations", self.routing_iterations),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(config_err("sigma", format!("must be a positive real, got {}", self.sigma)));
        }
        if self.conv.is_empty() {
            return Err(config_err("conv", "needs at least one layer"));
        }
        if let Some(c) = self.conv.iter().find(|c| c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
            return Err(config_err("conv", format!("layer {c} has a zero extent")));
        }
        let last = self.conv[self.conv.len() - 1].out_channels;
        if last != self.heads * self.capsule_dim_in {
            return Err(config_err(
                "conv",
                format!(
                    "last layer has {last} channels, expected heads × capsule_dim_in = {}",
                    self.heads * self.capsule_dim_in
                ),
            ));
        }
        match self.conv_output_side() {
            None => Err(config_err(
                "conv",
                format!("stack does not fit a {0}×{0} input", self.input_side),
            )),
            Some(k) if k != self.grid_side => Err(config_err(
                "grid_side",
                format!("expected K = {} from the conv stack, configured {}", k, self.grid_side),
            )),
            Some(_) => Ok(()),
        }?;
        if self.decoder_hidden.contains(&0) {
            return Err(config_err("decoder_hidden", "widths must be positive"));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 13] = [
        "input_side",
        "input_channels",
        "conv",
        "heads",
        "grid_side",
        "capsule_dim_in",
        "capsule_dim_out",
        "classes",
        "sigma",
        "aggregation",
        "routing_iterations",
        "normalize_adjacency",
        "decoder_hidden",
    ];

    /// Sets one field from its text form. Returns `Ok(false)` for keys that
    /// are not model keys so callers can layer their own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |reason: String| config_err(key, reason);
        let uint = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(format!("`{v}`: {e}")));
        match key {
            "input_side" => self.input_side = uint(value)?,
            "input_channels" => self.input_channels = uint(value)?,
            "heads" => self.heads = uint(value)?,
            "grid_side" => self.grid_side = uint(value)?,
            "capsule_dim_in" => self.capsule_dim_in = uint(value)?,
            "capsule_dim_out" => self.capsule_dim_out = uint(value)?,
            "classes" => self.classes = uint(value)?,
            "routing_iterations" => self.routing_iterations = uint(value)?,
            "sigma" => {
                self.sigma = value
                    .trim()
                    .parse()
                    .map_err(|e| bad(format!("`{value}`: {e}")))?
            }
            "aggregation" => self.aggregation = value.trim().parse().map_err(bad)?,
            "normalize_adjacency" => {
                self.normalize_adjacency = value
                    .trim()
                    .parse()
                    .map_err(|e| bad(format!("`{value}`: {e}")))?
            }
            "conv" => {
                self.conv = split_list(value)
                    .map(str::parse)
                    .collect::<Result<_, String>>()
                    .map_err(bad)?
            }
            "decoder_hidden" => {
                self.decoder_hidden = split_list(value).map(uint).collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Document {
        let mut doc = Document::new();
        for key in Self::KEYS {
            doc.set(key, self.get(key).expect("every listed key renders"))
                .expect("config values are single-line");
        }
        doc
    }

    /// Text form of one field, as accepted by [`ModelConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let join = |items: Vec<String>| items.join(", ");
        Some(match key {
            "input_side" => self.input_side.to_string(),
            "input_channels" => self.input_channels.to_string(),
            "conv" => join(self.conv.iter().map(ToString::to_string).collect()),
            "heads" => self.heads.to_string(),
            "grid_side" => self.grid_side.to_string(),
            "capsule_dim_in" => self.capsule_dim_in.to_string(),
            "capsule_dim_out" => self.capsule_dim_out.to_string(),
            "classes" => self.classes.to_string(),
            "sigma" => format!("{:?}", self.sigma),
            "aggregation" => self.aggregation.to_string(),
            "routing_iterations" => self.routing_iterations.to_string(),
            "normalize_adjacency" => self.normalize_adjacency.to_string(),
            "decoder_hidden" => join(self.decoder_hidden.iter().map(ToString::to_string).collect()),
            _ => return None,
        })
    }

    /// Parses a complete model document: every key required, nothing extra.
    pub fn from_kv(doc: &Document) -> Result<Self> {
        let mut cfg = Self::mnist_reference();
        for (key, value) in doc.iter() {
            if !cfg.set(key, value)? {
                return Err(config_err(key, "is not a model key"));
            }
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| doc.get(k).is_none()) {
            return Err(config_err(*missing, "is missing"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// First field whose value differs, in key order.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        Self::KEYS.into_iter().find(|k| self.get(k) != other.get(k))
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}
