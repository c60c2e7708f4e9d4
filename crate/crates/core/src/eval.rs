//! Downstream protocols on a pretrained encoder: end-to-end fine-tuning and
//! linear probing, both with an average-pool classification head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::Dataset;
use crate::error::{config_err, contract_err, Error, Result};
use crate::model::BootMae;
use crate::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::params::{Bound, Init, ParamSet, ParamSpec};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Zero-initialized linear head over pooled encoder features.
pub fn head_specs(dim: usize, classes: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("cls.w", [dim, classes], Init::Zeros),
        ParamSpec::new("cls.b", [classes], Init::Zeros),
    ]
}

/// One row of the evaluation metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub epoch: u64,
    pub split: String,
    pub top1: f64,
    pub loss: f64,
}

pub const EVAL_HEADER: &str = "epoch,split,top1,loss";

impl EvalRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.split, self.top1, self.loss)
    }
}

pub fn write_eval_csv(path: &std::path::Path, rows: &[EvalRow]) -> Result<()> {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean negative log-likelihood of `labels` under `logits` `[B, K]`.
fn cross_entropy<'g, T: Real>(logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    let k = logits.shape()[1];
    let mut onehot = vec![T::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = T::one();
    }
    let picked = logits
        .log_softmax(1)?
        .mul(logits.graph().constant(Tensor::new(vec![labels.len(), k], onehot)?))?;
    Ok(picked.sum_all().scale(T::of(-1.0 / labels.len() as f64)))
}

/// Index of the largest logit; ties go to the lowest class.
fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(data: &Dataset, classes: usize) -> Result<&[usize]> {
    let labels = data.labels()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(contract_err!("label {bad} outside {classes} classes"));
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub blr: f64,
    pub warmup_epochs: f64,
    pub adam: AdamConfig,
    /// Per-depth rate multiplier; 1.0 disables layer-wise decay.
    pub layer_decay: f64,
    pub augment: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1024,
            blr: 5e-4,
            warmup_epochs: 5.0,
            adam: AdamConfig {
                beta2: 0.999,
                ..AdamConfig::default()
            },
            layer_decay: 0.65,
            augment: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("finetune batch size must be positive"));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(config_err!("layer_decay {} outside (0, 1]", self.layer_decay));
        }
        if !(self.blr >= 0.0 && self.warmup_epochs >= 0.0) {
            return Err(config_err!("finetune blr and warmup must be non-negative"));
        }
        Ok(())
    }

    fn schedule(&self, n: usize) -> LrSchedule {
        let spe = n.div_ceil(self.batch_size) as u64;
        LrSchedule {
            base_lr: LrSchedule::scaled_base(self.blr, self.batch_size),
            warmup_steps: (self.warmup_epochs * spe as f64).round() as u64,
            total_steps: self.epochs as u64 * spe,
        }
    }
}

/// Learning-rate multiplier for a parameter under layer-wise decay:
/// the patch embedding is layer 0, block `i` is layer `i + 1`, and the
/// final norm and head sit at the top.
pub fn layer_scale(name: &str, depth: usize, decay: f64) -> f64 {
    let top = depth + 1;
    let layer = if name.starts_with("enc.patch_embed") {
        0
    } else if let Some(rest) = name.strip_prefix("enc.blocks.") {
        rest.split('.').next().and_then(|i| i.parse::<usize>().ok()).map_or(top, |i| i + 1)
    } else {
        top
    };
    decay.powi((top - layer) as i32)
}

/// Pads by `p` pixels on every side, crops back at a random offset, then
/// flips horizontally with probability one half.
pub fn augment<T: Real, R: Rng + ?Sized>(image: &Tensor<T>, p: usize, rng: &mut R) -> Tensor<T> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let dy = rng.random_range(0..=2 * p) as isize - p as isize;
    let dx = rng.random_range(0..=2 * p) as isize - p as isize;
    let flip = rng.random_bool(0.5);
    Tensor::from_fn(vec![h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        let x = if flip { w - 1 - x } else { x };
        let (sy, sx) = (y as isize + dy, x as isize + dx);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            T::zero()
        } else {
            image.data()[(sy as usize * w + sx as usize) * c + ch]
        }
    })
}

/// Encoder plus head being fine-tuned, with optimizer and RNG.
#[derive(Debug, Clone)]
pub struct FinetuneState<T> {
    pub params: ParamSet<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> FinetuneState<T> {
    /// Takes the `enc.` entries of `encoder` and appends a fresh head.
    pub fn new(model: &BootMae<T>, encoder: &ParamSet<T>, classes: usize, seed: u64) -> Result<Self> {
        let mut params = encoder.subset("enc.");
        params.check_specs(&model.config().encoder_specs())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in ParamSet::<T>::init(&head_specs(model.config().enc_dim, classes), &mut rng).iter() {
            params.insert(name.clone(), t.clone());
        }
        Ok(Self {
            adam: AdamState::new(&params),
            params,
            step: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn to_checkpoint(&self, config: &str) -> Checkpoint {
        let mut c = Checkpoint {
            kind: "finetune".into(),
            config: config.to_string(),
            step: self.step,
            epoch: self.epoch,
            optimizer_steps: self.adam.t,
            rng: RngState::capture(&self.rng),
            arrays: Vec::new(),
        };
        c.push_set("param.", &self.params);
        c.push_set("adam.m.", &self.adam.m);
        c.push_set("adam.v.", &self.adam.v);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, model: &BootMae<T>, classes: usize) -> Result<Self> {
        if c.kind != "finetune" {
            return Err(Error::Checkpoint(format!("expected a finetune checkpoint, found {:?}", c.kind)));
        }
        let mut specs = model.config().encoder_specs();
        specs.extend(head_specs(model.config().enc_dim, classes));
        let params = c.take_set("param.");
        let m = c.take_set("adam.m.");
        let v = c.take_set("adam.v.");
        let mut problems = Vec::new();
        for (label, set) in [("param", &params), ("adam.m", &m), ("adam.v", &v)] {
            if let Err(e) = set.check_specs(&specs) {
                problems.push(format!("{label}: {e}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("\n")));
        }
        Ok(Self {
            params,
            adam: AdamState { m, v, t: c.optimizer_steps },
            step: c.step,
            epoch: c.epoch,
            rng: c.rng.restore(),
        })
    }
}

fn logits<'g, T: Real>(
    model: &BootMae<T>,
    bound: &Bound<'g, T>,
    g: &'g Graph<T>,
    images: &[&Tensor<T>],
) -> Result<Var<'g, T>> {
    let mut pooled = Vec::with_capacity(images.len());
    for img in images {
        let d = model.config().enc_dim;
        pooled.push(model.pooled_features(bound, g, img)?.reshape(vec![1, d])?);
    }
    let feats = g.concat(&pooled, 0)?;
    Ok(feats.matmul(bound.get("cls.w")?)?.add(bound.get("cls.b")?)?)
}

/// Top-1 accuracy and mean cross-entropy of encoder + head on `data`.
pub fn evaluate<T: Real>(model: &BootMae<T>, params: &ParamSet<T>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let classes = params.get("cls.b").ok_or_else(|| contract_err!("no classifier head"))?.numel();
    let labels = check_labels(data, classes)?;
    let (mut correct, mut loss) = (0usize, 0.0);
    for (chunk, lab) in data.images.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let imgs: Vec<Tensor<T>> = chunk.iter().map(|t| t.cast()).collect();
        let refs: Vec<&Tensor<T>> = imgs.iter().collect();
        let g = Graph::new();
        let bound = params.bind(&g, false);
        let z = logits(model, &bound, &g, &refs)?;
        loss += cross_entropy(z, lab)?.value().item().as_f64() * lab.len() as f64;
        let zv = z.value();
        correct += lab.iter().enumerate().filter(|&(i, &l)| argmax(zv.row(i)) == l).count();
    }
    let n = labels.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

/// One fine-tuning epoch; returns training top-1 and mean loss, both
/// measured on the augmented batches as they were trained.
pub fn finetune_epoch<T: Real>(
    model: &BootMae<T>,
    state: &mut FinetuneState<T>,
    train: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<(f64, f64)> {
    let classes = state.params.get("cls.b").ok_or_else(|| contract_err!("no classifier head"))?.numel();
    let labels = check_labels(train, classes)?.to_vec();
    if train.is_empty() {
        return Err(config_err!("fine-tuning needs at least one image"));
    }
    let schedule = cfg.schedule(train.len());
    let depth = model.config().enc_depth;
    let pad = model.config().patch;
    let mut rng = state.rng.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let (mut total, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let imgs: Vec<Tensor<T>> = chunk
            .iter()
            .map(|&i| {
                let t = train.images[i].cast();
                if cfg.augment {
                    augment(&t, pad, &mut rng)
                } else {
                    t
                }
            })
            .collect();
        let refs: Vec<&Tensor<T>> = imgs.iter().collect();
        let lab: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let g = Graph::new();
        let bound = state.params.bind(&g, true);
        let z = logits(model, &bound, &g, &refs)?;
        let zv = z.value();
        correct += lab.iter().enumerate().filter(|&(i, &l)| argmax(zv.row(i)) == l).count();
        let loss = cross_entropy(z, &lab)?;
        let value = loss.value().item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite fine-tuning loss at step {}", state.step)));
        }
        g.backward(loss)?;
        let grads = bound.grads();
        let lr = schedule.lr_at(state.step);
        adam_step(&mut state.params, &grads, &mut state.adam, &cfg.adam, lr, |n| {
            layer_scale(n, depth, cfg.layer_decay)
        })?;
        state.step += 1;
        total += value * lab.len() as f64;
    }
    state.rng = rng;
    state.epoch += 1;
    let n = train.len() as f64;
    Ok((correct as f64 / n, total / n))
}

/// Runs the remaining epochs of `state`, evaluating after each one.
pub fn finetune<T: Real>(
    model: &BootMae<T>,
    state: &mut FinetuneState<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
    mut after_epoch: impl FnMut(&FinetuneState<T>) -> Result<()>,
) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    while (state.epoch as usize) < cfg.epochs {
        let (train_top1, train_loss) = finetune_epoch(model, state, train, cfg)?;
        let (top1, loss) = evaluate(model, &state.params, test, cfg.batch_size)?;
        rows.push(EvalRow {
            epoch: state.epoch,
            split: "train".into(),
            top1: train_top1,
            loss: train_loss,
        });
        rows.push(EvalRow {
            epoch: state.epoch,
            split: "test".into(),
            top1,
            loss,
        });
        after_epoch(state)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.01,
            weight_decay: 0.0,
        }
    }
}

/// Pooled, normalized encoder features for every image, `[n, d]`.
pub fn extract_features<T: Real>(model: &BootMae<T>, encoder: &ParamSet<T>, data: &Dataset) -> Result<Tensor<f64>> {
    let d = model.config().enc_dim;
    let mut out = Vec::with_capacity(data.len() * d);
    for img in &data.images {
        let g = Graph::new();
        let bound = encoder.bind(&g, false);
        let f = model.pooled_features(&bound, &g, &img.cast())?.value();
        out.extend(f.data().iter().map(|v| v.as_f64()));
    }
    Ok(Tensor::new(vec![data.len(), d], out)?)
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub head: ParamSet<f64>,
    pub rows: Vec<EvalRow>,
    pub top1: f64,
}

fn standardize_columns(train: &mut Tensor<f64>, others: &mut [&mut Tensor<f64>]) {
    let (n, d) = (train.shape()[0], train.shape()[1]);
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| train.data()[i * d + j]).collect();
        let mean = col.iter().sum::<f64>() / n.max(1) as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let std = if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() };
        for t in std::iter::once(&mut *train).chain(others.iter_mut().map(|t| &mut **t)) {
            let rows = t.shape()[0];
            for i in 0..rows {
                let v = &mut t.data_mut()[i * d + j];
                *v = (*v - mean) / std;
            }
        }
    }
}

/// Trains only a linear head on frozen pooled features (standardized with
/// training-set statistics) and reports test top-1 after every epoch.
pub fn linear_probe<T: Real>(
    model: &BootMae<T>,
    encoder: &ParamSet<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let classes = train.num_classes;
    if classes == 0 || cfg.batch_size == 0 {
        return Err(config_err!("probe needs labelled classes and a positive batch size"));
    }
    let train_labels = check_labels(train, classes)?.to_vec();
    let test_labels = check_labels(test, classes)?.to_vec();
    let mut ftr = extract_features(model, encoder, train)?;
    let mut fte = extract_features(model, encoder, test)?;
    standardize_columns(&mut ftr, &mut [&mut fte]);

    let d = model.config().enc_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = ParamSet::<f64>::init(&head_specs(d, classes), &mut rng);
    let mut adam = AdamState::new(&head);
    let hp = AdamConfig {
        beta2: 0.999,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let score = |head: &ParamSet<f64>, f: &Tensor<f64>, labels: &[usize]| -> Result<(f64, f64)> {
        let g = Graph::new();
        let b = head.bind(&g, false);
        let z = g.constant(f.clone()).matmul(b.get("cls.w")?)?.add(b.get("cls.b")?)?;
        let loss = cross_entropy(z, labels)?.value().item();
        let zv = z.value();
        let correct = labels.iter().enumerate().filter(|&(i, &l)| argmax(zv.row(i)) == l).count();
        Ok((correct as f64 / labels.len().max(1) as f64, loss))
    };
    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs as u64 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let g = Graph::new();
            let b = head.bind(&g, true);
            let x = g.constant(ftr.select_rows(chunk)?);
            let lab: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let z = x.matmul(b.get("cls.w")?)?.add(b.get("cls.b")?)?;
            let loss = cross_entropy(z, &lab)?;
            g.backward(loss)?;
            let grads = b.grads();
            adam_step(&mut head, &grads, &mut adam, &hp, cfg.lr, |_| 1.0)?;
        }
        let (top1_tr, loss_tr) = score(&head, &ftr, &train_labels)?;
        let (top1, loss) = score(&head, &fte, &test_labels)?;
        rows.push(EvalRow { epoch, split: "train".into(), top1: top1_tr, loss: loss_tr });
        rows.push(EvalRow { epoch, split: "test".into(), top1, loss });
    }
    let top1 = if cfg.epochs == 0 {
        score(&head, &fte, &test_labels)?.0
    } else {
        rows.last().expect("at least one epoch").top1
    };
    Ok(ProbeResult { head, rows, top1 })
}
