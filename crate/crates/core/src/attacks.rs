//! Fast gradient sign attacks against the margin loss.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use gracaps_tensor::{Tape, Tensor};
use rand::Rng;

use crate::dataset::LabeledImageSet;
use crate::error::{contract, Result};
use crate::model::{margin_loss, CapsNet};
use crate::rng::{self, tag};

/// Perturbation budgets: 0.01 to 0.05 in steps of 0.01.
pub const EPSILONS: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackMode {
    Untargeted,
    Targeted,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Untargeted => "untargeted",
            Self::Targeted => "targeted",
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "untargeted" => Ok(Self::Untargeted),
            "targeted" => Ok(Self::Targeted),
            _ => Err(format!("unknown attack mode `{s}` (untargeted, targeted)")),
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(x + delta, 0, 1)` rounded to f32 without letting the rounding
/// push `|x' - x|` past `|delta|`.
fn bounded_step(x: f32, delta: f64) -> f32 {
    let target = (f64::from(x) + delta).clamp(0.0, 1.0);
    let mut a = target as f32;
    if (f64::from(a) - f64::from(x)).abs() > delta.abs() {
        // One ulp back towards x; a is in [0, 1], so bit steps are monotone.
        a = if a > x { f32::from_bits(a.to_bits() - 1) } else { f32::from_bits(a.to_bits() + 1) };
    }
    a
}

/// Margin-loss gradients for a batch `[B, C, H, W]`, each image against its
/// own class.
pub fn margin_input_grad(model: &CapsNet, images: &Tensor, classes: &[usize]) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let x = tape.param(images.clone());
    let v = model.forward(&bound, x)?.capsules;
    // Sum rather than mean, so each image sees its own unscaled gradient.
    let loss = margin_loss(v, classes)?.scale(classes.len() as f32);
    loss.backward()?;
    Ok(x.grad().expect("input registered as trainable"))
}

/// One signed-gradient step of size `eps` from `image`, clipped to `[0, 1]`.
/// `grad` is the margin-loss gradient at `image` for the true label
/// (untargeted, ascend) or the target (targeted, descend).
pub fn fgsm_step(image: &Tensor, grad: &Tensor, eps: f64, mode: AttackMode) -> Result<Tensor> {
    if image.shape() != grad.shape() {
        return Err(contract(format!("image {:?} vs gradient {:?}", image.shape(), grad.shape())));
    }
    let dir = match mode {
        AttackMode::Untargeted => 1.0,
        AttackMode::Targeted => -1.0,
    };
    let data = image
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| bounded_step(x, dir * f64::from(sign(g)) * eps))
        .collect();
    Ok(Tensor::new(image.shape().to_vec(), data)?)
}

/// Adversarial copy of `image` (`[C, H, W]`).
pub fn fgsm(
    model: &CapsNet,
    image: &Tensor,
    label: usize,
    eps: f64,
    mode: AttackMode,
    target: Option<usize>,
) -> Result<Tensor> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(contract(format!("epsilon must be positive, got {eps}")));
    }
    let class = match (mode, target) {
        (AttackMode::Untargeted, _) => label,
        (AttackMode::Targeted, Some(t)) => t,
        (AttackMode::Targeted, None) => return Err(contract("targeted attack needs a target class")),
    };
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let g = margin_input_grad(model, &image.reshape(shape)?, &[class])?;
    fgsm_step(image, &g.reshape(image.shape().to_vec())?, eps, mode)
}

/// Target for sample `index`: uniform over the classes other than `label`.
pub fn draw_target(seed: u64, index: usize, label: usize, classes: usize) -> usize {
    let mut rng = rng::stream(seed, &[tag::TARGET, index as u64]);
    let t = rng.gen_range(0..classes - 1);
    if t >= label {
        t + 1
    } else {
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    pub epsilon: f64,
    pub n_evaluated: usize,
    pub n_success: usize,
    pub success_rate: f64,
    /// Largest `|x' - x|` over every pixel of every example.
    pub max_perturbation: f64,
    /// Whether every adversarial pixel stayed in `[0, 1]`.
    pub in_range: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub mode: AttackMode,
    pub seed: u64,
    pub rows: Vec<AttackRow>,
}

impl AttackReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("mode,epsilon,n_evaluated,n_success,success_rate\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.6},{},{},{:.6}",
                self.mode, r.epsilon, r.n_evaluated, r.n_success, r.success_rate
            )
            .expect("string write");
        }
        out
    }
}

/// Attacks every correctly classified example of `data` at each budget.
pub fn success_rate(
    model: &CapsNet,
    data: &LabeledImageSet,
    epsilons: &[f64],
    mode: AttackMode,
    seed: u64,
    batch_size: usize,
) -> Result<AttackReport> {
    if epsilons.is_empty() {
        return Err(contract("empty epsilon grid"));
    }
    if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(contract(format!("epsilon must be positive, got {e}")));
    }
    let m = model.config().classes;
    if m < 2 && mode == AttackMode::Targeted {
        return Err(contract("targeted attacks need at least two classes"));
    }
    let batch_size = batch_size.max(1);
    let mut rows: Vec<AttackRow> = epsilons
        .iter()
        .map(|&epsilon| AttackRow {
            epsilon,
            n_evaluated: 0,
            n_success: 0,
            success_rate: 0.0,
            max_perturbation: 0.0,
            in_range: true,
        })
        .collect();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (images, labels) = data.gather(chunk)?;
        let preds = model.predict(&images)?;
        let keep: Vec<usize> = (0..chunk.len()).filter(|&i| preds[i] == labels[i]).collect();
        if keep.is_empty() {
            continue;
        }
        let kept_idx: Vec<usize> = keep.iter().map(|&i| chunk[i]).collect();
        let (clean, labels) = data.gather(&kept_idx)?;
        let aim: Vec<usize> = match mode {
            AttackMode::Untargeted => labels.clone(),
            AttackMode::Targeted => kept_idx
                .iter()
                .zip(&labels)
                .map(|(&i, &y)| draw_target(seed, i, y, m))
                .collect(),
        };
        let grads = margin_input_grad(model, &clean, &aim)?;
        for row in rows.iter_mut() {
            let adv = fgsm_step(&clean, &grads, row.epsilon, mode)?;
            for (&a, &x) in adv.data().iter().zip(clean.data()) {
                row.max_perturbation = row.max_perturbation.max((f64::from(a) - f64::from(x)).abs());
                row.in_range &= (0.0..=1.0).contains(&a);
            }
            let adv_preds = model.predict(&adv)?;
            row.n_evaluated += kept_idx.len();
            row.n_success += adv_preds
                .iter()
                .zip(labels.iter().zip(&aim))
                .filter(|(&p, (&y, &t))| match mode {
                    AttackMode::Untargeted => p != y,
                    AttackMode::Targeted => p == t,
                })
                .count();
        }
    }
    if rows[0].n_evaluated == 0 {
        return Err(contract(format!(
            "no correctly classified examples among {} in {}; nothing to attack",
            data.len(),
            data.name()
        )));
    }
    for r in rows.iter_mut() {
        r.success_rate = r.n_success as f64 / r.n_evaluated as f64;
    }
    Ok(AttackReport { mode, seed, rows })
}
