//! Margin-loss training with a reconstruction regularizer, evaluation and
//! the capsule perturbation sweep.

mod adam;
mod decoder;

pub use adam::{AdamConfig, AdamState};
pub use decoder::{all_grads, reconstruction_loss, BoundDecoder, Decoder, RECONSTRUCTION_WEIGHT};

use std::fmt::Write as _;

use gracaps_tensor::{Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Batches, LabeledImageSet};
use crate::error::{config_err, contract, Error, Result};
use crate::kv::Document;
use crate::model::{class_norms, margin_loss, CapsNet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub reconstruction_weight: f64,
    /// Random translation range for training images; 0 disables it.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            adam: AdamConfig::default(),
            reconstruction_weight: RECONSTRUCTION_WEIGHT,
            max_shift: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be positive"));
        }
        let a = &self.adam;
        let checks = [
            ("lr", a.lr >= 0.0 && a.lr.is_finite()),
            ("beta1", (0.0..1.0).contains(&a.beta1)),
            ("beta2", (0.0..1.0).contains(&a.beta2)),
            ("eps", a.eps > 0.0),
            ("lr_decay", a.decay > 0.0 && a.decay.is_finite()),
            ("reconstruction_weight", self.reconstruction_weight >= 0.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((field, _)) => Err(config_err(*field, "out of range")),
            None => Ok(()),
        }
    }
}

/// One metrics row: epoch, split, mean loss, accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6}", r.epoch, r.split, r.loss, r.accuracy).expect("string write");
    }
    out
}

/// Everything a finished (or resumed) run owns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: CapsNet,
    pub decoder: Decoder,
    pub adam: AdamState,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(model: CapsNet, decoder: Decoder, seed: u64) -> Self {
        let mut all = model.params().clone();
        for (n, t) in decoder.params().iter() {
            all.push(n, t.clone());
        }
        TrainState {
            adam: AdamState::new(&all),
            model,
            decoder,
            epoch: 0,
            seed,
            metrics: Vec::new(),
        }
    }

    /// Fresh model and decoder from `seed`.
    pub fn init(config: crate::ModelConfig, seed: u64) -> Result<Self> {
        let model = CapsNet::new(config, seed)?;
        let decoder = Decoder::new(model.config(), seed);
        Ok(Self::new(model, decoder, seed))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = Document::new();
        meta.set("seed", self.seed).expect("single line");
        meta.set("epoch", self.epoch).expect("single line");
        Checkpoint {
            config: self.model.config().clone(),
            meta,
            model: self.model.params().clone(),
            decoder: Some(self.decoder.params().clone()),
            adam: Some(self.adam.clone()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = CapsNet::from_params(ck.config.clone(), ck.model.clone())?;
        let decoder = match &ck.decoder {
            Some(p) => Decoder::from_params(&ck.config, p.clone())?,
            None => return Err(contract("checkpoint has no decoder; it cannot resume training")),
        };
        let meta_num = |key: &str| -> Result<u64> {
            ck.meta
                .get(key)
                .unwrap_or("0")
                .parse()
                .map_err(|e| config_err(key, format!("{e}")))
        };
        let mut state = Self::new(model, decoder, meta_num("seed")?);
        state.epoch = meta_num("epoch")? as usize;
        if let Some(a) = &ck.adam {
            state.adam = a.clone();
        }
        Ok(state)
    }

    fn step(&mut self, images: &Tensor, labels: &[usize], cfg: &TrainConfig, lr: f64) -> Result<(f64, usize)> {
        let tape = Tape::new();
        let mb = self.model.bind(&tape, true);
        let db = self.decoder.bind(&tape, true);
        let x = tape.constant(images.clone());
        let fwd = self.model.forward(&mb, x)?;
        let margin = margin_loss(fwd.capsules, labels)?;
        let recon = self.decoder.reconstruct(&db, fwd.capsules, labels)?;
        let loss = margin.add(&reconstruction_loss(recon, x, cfg.reconstruction_weight)?)?;
        let value = f64::from(loss.value().item()?);
        let non_finite = |origin: String| Error::NonFinite {
            epoch: self.epoch,
            step: self.adam.step as usize,
            origin,
        };
        if !value.is_finite() {
            let origin = tape
                .first_non_finite()
                .map_or_else(|| "loss".to_string(), |nf| nf.to_string());
            return Err(non_finite(origin));
        }
        let norms = class_norms(fwd.capsules)?.value();
        let m = norms.shape()[1];
        let correct = norms
            .data()
            .chunks(m)
            .zip(labels)
            .filter(|(row, &y)| crate::model::argmax(row) == y)
            .count();
        loss.backward()?;
        let grads = all_grads(&mb, &db);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(non_finite(format!("gradient of `{name}`")));
        }
        drop(mb);
        drop(db);
        drop(tape);
        let mut refs: Vec<&mut Tensor> = self
            .model
            .params_mut()
            .iter_mut()
            .chain(self.decoder.params_mut().iter_mut())
            .map(|(_, t)| t)
            .collect();
        self.adam.update(&cfg.adam, lr, &mut refs, &grads)?;
        Ok((value, correct))
    }

    /// Trains one epoch; returns mean loss and accuracy on the (augmented)
    /// training batches.
    pub fn train_epoch(&mut self, data: &LabeledImageSet, cfg: &TrainConfig) -> Result<(f64, f64)> {
        check_labels(&self.model, data)?;
        let lr = cfg.adam.lr_at_epoch(self.epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in Batches::new(data, cfg.batch_size, cfg.seed, self.epoch, cfg.max_shift)? {
            let (loss, ok) = self.step(&batch.images, &batch.labels, cfg, lr)?;
            loss_sum += loss * batch.labels.len() as f64;
            correct += ok;
            seen += batch.labels.len();
        }
        self.epoch += 1;
        let seen = seen.max(1) as f64;
        Ok((loss_sum / seen, correct as f64 / seen))
    }

    /// Runs `cfg.epochs` epochs, logging train and (if given) test rows.
    pub fn train(
        &mut self,
        train: &LabeledImageSet,
        test: Option<&LabeledImageSet>,
        cfg: &TrainConfig,
        mut log: impl FnMut(&MetricRow),
    ) -> Result<()> {
        cfg.validate()?;
        for _ in 0..cfg.epochs {
            let (loss, accuracy) = self.train_epoch(train, cfg)?;
            let mut rows = vec![MetricRow {
                epoch: self.epoch,
                split: "train",
                loss,
                accuracy,
            }];
            if let Some(test) = test {
                let ev = evaluate(&self.model, Some(&self.decoder), test, cfg.batch_size, cfg.reconstruction_weight)?;
                rows.push(MetricRow {
                    epoch: self.epoch,
                    split: "test",
                    loss: ev.loss,
                    accuracy: ev.accuracy,
                });
            }
            for r in rows {
                log(&r);
                self.metrics.push(r);
            }
        }
        Ok(())
    }
}

fn check_labels(model: &CapsNet, data: &LabeledImageSet) -> Result<()> {
    let m = model.config().classes;
    if data.num_classes() > m {
        return Err(config_err(
            "classes",
            format!("{} has label {} but the model has {m} classes", data.name(), data.num_classes() - 1),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Accuracy per true class; `NaN` for classes absent from the set.
    pub per_class: Vec<f64>,
    /// Mean margin loss, plus the weighted reconstruction term when a
    /// decoder is supplied.
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Accuracy and loss without augmentation.
pub fn evaluate(
    model: &CapsNet,
    decoder: Option<&Decoder>,
    data: &LabeledImageSet,
    batch_size: usize,
    reconstruction_weight: f64,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(contract(format!("{} has no examples to evaluate", data.name())));
    }
    if batch_size == 0 {
        return Err(config_err("batch_size", "must be positive"));
    }
    check_labels(model, data)?;
    let m = model.config().classes;
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (images, labels) = data.gather(chunk)?;
        let tape = Tape::no_grad();
        let bound = model.bind(&tape, false);
        let x = tape.constant(images);
        let fwd = model.forward(&bound, x)?;
        let mut loss = margin_loss(fwd.capsules, &labels)?;
        if let Some(dec) = decoder {
            let db = dec.bind(&tape, false);
            let recon = dec.reconstruct(&db, fwd.capsules, &labels)?;
            loss = loss.add(&reconstruction_loss(recon, x, reconstruction_weight)?)?;
        }
        loss_sum += f64::from(loss.value().item()?) * labels.len() as f64;
        let norms = class_norms(fwd.capsules)?.value();
        predictions.extend(norms.data().chunks(m).map(crate::model::argmax));
    }
    let mut hits = vec![0usize; m];
    let mut totals = vec![0usize; m];
    for (&p, &y) in predictions.iter().zip(data.labels()) {
        totals[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let correct = hits.iter().sum();
    Ok(Evaluation {
        n: data.len(),
        correct,
        accuracy: correct as f64 / data.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
            .collect(),
        loss: loss_sum / data.len() as f64,
        predictions,
    })
}

/// Offsets added to one capsule dimension: -0.25 to 0.25 in steps of 0.05.
pub fn sweep_deltas() -> Vec<f64> {
    (0..=10).map(|i| (i as f64 - 5.0) * 0.05).collect()
}

/// Reconstructions of `image` (`[C, H, W]`) with dimension `dim` of the
/// predicted class capsule shifted by each of [`sweep_deltas`].
pub fn perturb_capsule_sweep(model: &CapsNet, decoder: &Decoder, image: &Tensor, dim: usize) -> Result<Vec<Tensor>> {
    let d = model.config().capsule_dim_out;
    if dim >= d {
        return Err(contract(format!("capsule dimension {dim} outside 0..{d}")));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let inf = model.infer(&image.reshape(shape)?)?;
    let class = inf.predictions()[0];
    let mut out = Vec::with_capacity(11);
    for delta in sweep_deltas() {
        let mut caps = inf.capsules.clone();
        caps.data_mut()[class * d + dim] += delta as f32;
        out.push(decoder.decode(&caps, &[class])?.select(0)?);
    }
    Ok(out)
}
