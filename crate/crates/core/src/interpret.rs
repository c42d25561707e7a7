//! Explanation maps and perturbation-curve scoring.

use std::fmt;
use std::str::FromStr;

use gracaps_tensor::{Scalar, Tape, Tensor};
use rand::Rng;

use crate::config::Aggregation;
use crate::error::{contract, Error, Result};
use crate::model::{class_norms, CapsNet};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Attention,
    Gradient,
    IntegratedGradients,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Attention, Self::Gradient, Self::IntegratedGradients, Self::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attention => "att",
            Self::Gradient => "grad",
            Self::IntegratedGradients => "ig",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (att, grad, ig, random)"))
    }
}

/// Per-pixel relevance aligned with the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationMap {
    /// `[H, W]`.
    pub values: Tensor,
    pub method: Method,
    pub class: usize,
}

fn batch_of_one<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(contract(format!("expected a [C, H, W] image, got {:?}", image.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(image.reshape(shape)?)
}

/// Head-averaged attention `[K², M]` for one image, computed on `tape`,
/// which must not be recording.
pub fn attention_grid_on(model: &CapsNet, tape: &Tape, image: &Tensor) -> Result<Tensor> {
    if model.config().aggregation != Aggregation::GraphPool {
        return Err(Error::Unsupported {
            mode: model.config().aggregation,
            what: "attention explanation",
        });
    }
    if tape.is_recording() {
        return Err(contract("attention explanations run on a non-recording tape"));
    }
    let bound = model.bind(tape, false);
    let fwd = model.forward(&bound, tape.constant(batch_of_one(image)?))?;
    let att = fwd.attention.expect("graph-pool yields attention");
    let s = att.shape();
    Ok(att.reshape([s[1], s[2], s[3]])?.mean(0)?.value())
}

/// Bilinear resize of a `k`×`k` grid to `h`×`w`, pixel-center aligned.
pub fn upsample_bilinear(grid: &[f32], k: usize, h: usize, w: usize) -> Tensor {
    interpolate(grid, k, h, w, |dst, n| (dst as f32 + 0.5) * k as f32 / n as f32 - 0.5)
}

/// Places cell `(i, j)` of a `k`×`k` grid at pixel `(c + i·s, c + j·s)` for
/// `(c, s) = field`; bilinear in between, edge values beyond.
pub fn project_grid(grid: &[f32], k: usize, field: (f32, f32), h: usize, w: usize) -> Tensor {
    let (centre, jump) = field;
    interpolate(grid, k, h, w, |dst, _| (dst as f32 - centre) / jump)
}

fn interpolate(grid: &[f32], k: usize, h: usize, w: usize, to_grid: impl Fn(usize, usize) -> f32) -> Tensor {
    let src = |dst: usize, n: usize| -> (usize, usize, f32) {
        let x = to_grid(dst, n).clamp(0.0, (k - 1) as f32);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(k - 1);
        (lo, hi, x - lo as f32)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = src(y, h);
        for x in 0..w {
            let (x0, x1, fx) = src(x, w);
            let top = grid[y0 * k + x0] * (1.0 - fx) + grid[y0 * k + x1] * fx;
            let bottom = grid[y1 * k + x0] * (1.0 - fx) + grid[y1 * k + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new([h, w], out).expect("h·w values")
}

/// Head-averaged attention of `class`, each node placed at the centre of its
/// receptive field. One forward pass, nothing recorded for differentiation.
pub fn attention_explanation(model: &CapsNet, image: &Tensor, class: usize) -> Result<ExplanationMap> {
    let cfg = model.config();
    check_class(class, cfg.classes)?;
    let grid = attention_grid_on(model, &Tape::no_grad(), image)?;
    let column: Vec<f32> = grid.data().iter().skip(class).step_by(cfg.classes).copied().collect();
    let [_, h, w] = image_dims(image)?;
    Ok(ExplanationMap {
        values: project_grid(&column, cfg.grid_side, cfg.receptive_field(), h, w),
        method: Method::Attention,
        class,
    })
}

fn check_class(class: usize, classes: usize) -> Result<()> {
    if class >= classes {
        return Err(contract(format!("class {class} outside 0..{classes}")));
    }
    Ok(())
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<[usize; 3]> {
    match image.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(contract(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Length of the `class` capsule for each image of a `[B, C, H, W]` batch,
/// and its gradient with respect to every pixel.
pub fn class_score_grad<T: Scalar>(model: &CapsNet<T>, images: &Tensor<T>, class: usize) -> Result<(Vec<T>, Tensor<T>)> {
    let m = model.config().classes;
    check_class(class, m)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let x = tape.param(images.clone());
    let norms = class_norms(model.forward(&bound, x)?.capsules)?;
    let b = images.shape()[0];
    let mut pick = vec![T::zero(); b * m];
    for i in 0..b {
        pick[i * m + class] = T::one();
    }
    // Images are independent, so the gradient of the sum is per-image.
    let score = norms.mul(&tape.constant(Tensor::new([b, m], pick)?))?.sum_all();
    score.backward()?;
    let values = norms.value().data().iter().skip(class).step_by(m).copied().collect();
    Ok((values, x.grad().expect("input registered as trainable")))
}

fn channel_sum(t: &Tensor, [c, h, w]: [usize; 3], f: impl Fn(f32) -> f32) -> Tensor {
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += f(v);
        }
    }
    Tensor::new([h, w], out).expect("h·w values")
}

/// `|∂‖v_class‖/∂x|`, summed over channels.
pub fn vanilla_gradient(model: &CapsNet, image: &Tensor, class: usize) -> Result<ExplanationMap> {
    let dims = image_dims(image)?;
    let (_, g) = class_score_grad(model, &batch_of_one(image)?, class)?;
    Ok(ExplanationMap {
        values: channel_sum(&g, dims, f32::abs),
        method: Method::Gradient,
        class,
    })
}

/// Integrated gradients from the all-zero baseline with a `steps`-point
/// midpoint rule, as a full `[C, H, W]` attribution.
pub fn integrated_gradients_raw<T: Scalar>(model: &CapsNet<T>, image: &Tensor<T>, class: usize, steps: usize) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(contract("integrated gradients need at least one step"));
    }
    image_dims(image)?;
    let path: Vec<Tensor<T>> = (0..steps)
        .map(|k| {
            let alpha = T::lit((k as f64 + 0.5) / steps as f64);
            image.map(|v| v * alpha)
        })
        .collect();
    let (_, grads) = class_score_grad(model, &Tensor::stack(&path)?, class)?;
    let n = image.numel();
    let inv = T::lit(1.0 / steps as f64);
    let mut out = vec![T::zero(); n];
    for chunk in grads.data().chunks(n) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o = *o + g;
        }
    }
    for (o, &x) in out.iter_mut().zip(image.data()) {
        *o = *o * inv * x;
    }
    Ok(Tensor::new(image.shape().to_vec(), out)?)
}

/// Signed integrated-gradients attribution, summed over channels.
pub fn integrated_gradients(model: &CapsNet, image: &Tensor, class: usize, steps: usize) -> Result<ExplanationMap> {
    let dims = image_dims(image)?;
    let raw = integrated_gradients_raw(model, image, class, steps)?;
    Ok(ExplanationMap {
        values: channel_sum(&raw, dims, |v| v),
        method: Method::IntegratedGradients,
        class,
    })
}

/// Uniform `[0, 1)` noise keyed by `seed` alone.
pub fn random_explanation(h: usize, w: usize, seed: u64, class: usize) -> ExplanationMap {
    let mut rng = rng::stream(seed, &[tag::RANDOM_MAP]);
    let values = (0..h * w).map(|_| rng.gen::<f32>()).collect();
    ExplanationMap {
        values: Tensor::new([h, w], values).expect("h·w values"),
        method: Method::Random,
        class,
    }
}

/// Builds the map of `method` for `image`. `seed` only feeds the random
/// method; `ig_steps` only integrated gradients.
pub fn explain(model: &CapsNet, image: &Tensor, class: usize, method: Method, seed: u64, ig_steps: usize) -> Result<ExplanationMap> {
    match method {
        Method::Attention => attention_explanation(model, image, class),
        Method::Gradient => vanilla_gradient(model, image, class),
        Method::IntegratedGradients => integrated_gradients(model, image, class, ig_steps),
        Method::Random => {
            let [_, h, w] = image_dims(image)?;
            Ok(random_explanation(h, w, seed, class))
        }
    }
}

/// Side of the square random patch written at each perturbation step.
pub const PATCH: usize = 5;

/// Perturbation curve of one method over a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct AopcResult {
    pub method: Option<Method>,
    /// Mean drop `f(x⁰) - f(xᵏ)` for `k = 1..=steps`.
    pub curve: Vec<f64>,
    pub aopc: f64,
    pub images: usize,
}

impl AopcResult {
    /// `Σ curve / (steps + 1)`; the unperturbed step contributes zero.
    pub fn from_curve(method: Option<Method>, curve: Vec<f64>, images: usize) -> Self {
        let aopc = curve.iter().sum::<f64>() / (curve.len() + 1) as f64;
        AopcResult {
            method,
            curve,
            aopc,
            images,
        }
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("step,mean_drop\n");
        for (k, d) in self.curve.iter().enumerate() {
            out.push_str(&format!("{},{:.6}\n", k + 1, d));
        }
        out
    }
}

/// Pixels in descending relevance; equal values keep row-major order.
pub fn relevance_order(values: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// The `steps` progressively perturbed copies of `image` (`[C, H, W]`):
/// each step overwrites a `patch`×`patch` window, clipped at the border,
/// centred on the most relevant pixel not yet overwritten.
pub fn perturbation_sequence(image: &Tensor, relevance: &Tensor, steps: usize, patch: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
    let [c, h, w] = image_dims(image)?;
    if relevance.shape() != [h, w] {
        return Err(contract(format!(
            "explanation {:?} does not match image {h}×{w}",
            relevance.shape()
        )));
    }
    if steps == 0 || steps > h * w {
        return Err(contract(format!("perturbation steps must lie in 1..={}, got {steps}", h * w)));
    }
    let order = relevance_order(relevance.data());
    let mut used = vec![false; h * w];
    let mut next = order.iter().copied();
    let mut x = image.clone();
    let mut out = Vec::with_capacity(steps);
    let half = patch / 2;
    for _ in 0..steps {
        let Some(centre) = next.by_ref().find(|&p| !used[p]) else {
            // Every pixel is already perturbed: later steps repeat the image.
            out.push(x.clone());
            continue;
        };
        let (py, px) = (centre / w, centre % w);
        let data = x.data_mut();
        for y in py.saturating_sub(half)..(py + patch - half).min(h) {
            for xx in px.saturating_sub(half)..(px + patch - half).min(w) {
                for ch in 0..c {
                    data[(ch * h + y) * w + xx] = rng.gen::<f32>();
                }
                used[y * w + xx] = true;
            }
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Perturbation curve scored by the length of the originally predicted
/// capsule. `image_ids[i]` keys the noise of image `i`, so methods compared
/// with the same ids and `seed` share their random patches.
pub fn aopc(
    model: &CapsNet,
    images: &[Tensor],
    explanations: &[Tensor],
    image_ids: &[u64],
    steps: usize,
    patch: usize,
    seed: u64,
) -> Result<AopcResult> {
    if images.is_empty() || images.len() != explanations.len() || images.len() != image_ids.len() {
        return Err(contract(format!(
            "aopc needs matching non-empty lists: {} images, {} explanations, {} ids",
            images.len(),
            explanations.len(),
            image_ids.len()
        )));
    }
    let mut curve = vec![0.0; steps];
    for ((image, relevance), &id) in images.iter().zip(explanations).zip(image_ids) {
        let mut rng = rng::stream(seed, &[tag::AOPC, id]);
        let mut batch = vec![image.clone()];
        batch.extend(perturbation_sequence(image, relevance, steps, patch, &mut rng)?);
        let inf = model.infer(&Tensor::stack(&batch)?)?;
        let m = model.config().classes;
        let class = inf.predictions()[0];
        let scores: Vec<f64> = inf.norms.data().chunks(m).map(|r| f64::from(r[class])).collect();
        for (k, s) in scores[1..].iter().enumerate() {
            curve[k] += scores[0] - s;
        }
    }
    let n = images.len();
    curve.iter_mut().for_each(|d| *d /= n as f64);
    Ok(AopcResult::from_curve(None, curve, n))
}
