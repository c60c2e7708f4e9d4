//! Pretraining loop: mask, forward, losses, backward, AdamW step, EMA.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{config_err, Error, Result};
use crate::masking::{block_mask, center_weights, random_mask, BlockMaskConfig, MaskPlan};
use crate::model::BootMae;
use crate::momentum::{ema_update, fed_set, momentum_at, target_features, FractionMode, MomentumSchedule};
use crate::objectives::{loss_prediction, loss_regression, loss_total, pixel_target, LossBreakdown};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState, LrSchedule};
use crate::params::ParamSet;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    Random,
    Block,
}

impl FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "block" => Ok(Self::Block),
            _ => Err(config_err!("unknown mask strategy {s:?} (expected random or block)")),
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Block => "block",
        })
    }
}

/// Which reconstruction targets enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Both,
    Pixel,
    Feature,
}

impl FromStr for TargetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "pixel" => Ok(Self::Pixel),
            "feature" => Ok(Self::Feature),
            _ => Err(config_err!("unknown target kind {s:?} (expected both, pixel or feature)")),
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Both => "both",
            Self::Pixel => "pixel",
            Self::Feature => "feature",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate per 256 images; the actual base is `blr * batch / 256`.
    pub blr: f64,
    pub warmup_epochs: f64,
    pub adam: AdamConfig,
    pub clip_grad: Option<f64>,
    pub lambda: f64,
    pub targets: TargetKind,
    pub mask: MaskStrategy,
    pub mask_ratio: f64,
    pub block: BlockMaskConfig,
    pub center_weight: f64,
    pub momentum: MomentumSchedule,
    pub ema_fraction: f64,
    pub ema_mode: FractionMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            batch_size: 4096,
            blr: 1.5e-4,
            warmup_epochs: 40.0,
            adam: AdamConfig::default(),
            clip_grad: None,
            lambda: 1.0,
            targets: TargetKind::Both,
            mask: MaskStrategy::Block,
            mask_ratio: 0.75,
            block: BlockMaskConfig::default(),
            center_weight: 1.0,
            momentum: MomentumSchedule::default(),
            ema_fraction: 1.0,
            ema_mode: FractionMode::Image,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(config_err!("mask_ratio {} must lie in [0, 1) so some patches stay visible", self.mask_ratio));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err!("lambda {} must be finite and non-negative", self.lambda));
        }
        if self.targets == TargetKind::Feature && self.lambda == 0.0 {
            return Err(config_err!("feature-only targets need lambda > 0"));
        }
        if !(self.blr >= 0.0 && self.warmup_epochs >= 0.0) {
            return Err(config_err!("blr and warmup_epochs must be non-negative"));
        }
        if self.center_weight != 1.0 && self.mask != MaskStrategy::Block {
            return Err(config_err!("center_weight needs block masking"));
        }
        if !(self.ema_fraction > 0.0 && self.ema_fraction <= 1.0) {
            return Err(config_err!("ema_fraction {} outside (0, 1]", self.ema_fraction));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return Err(config_err!("clip_grad {c} must be positive"));
            }
        }
        self.momentum.validate()
    }

    pub fn steps_per_epoch(&self, n_images: usize) -> u64 {
        n_images.div_ceil(self.batch_size) as u64
    }

    pub fn schedule(&self, n_images: usize) -> LrSchedule {
        let spe = self.steps_per_epoch(n_images);
        LrSchedule {
            base_lr: LrSchedule::scaled_base(self.blr, self.batch_size),
            warmup_steps: (self.warmup_epochs * spe as f64).round() as u64,
            total_steps: self.epochs as u64 * spe,
        }
    }

    /// Feature loss is skipped entirely when it carries no weight.
    pub fn uses_features(&self) -> bool {
        self.targets != TargetKind::Pixel && self.lambda > 0.0
    }

    pub fn uses_pixels(&self) -> bool {
        self.targets != TargetKind::Feature
    }

    pub fn draw_plan<R: Rng + ?Sized>(&self, grid_h: usize, grid_w: usize, rng: &mut R) -> Result<MaskPlan> {
        match self.mask {
            MaskStrategy::Random => random_mask(grid_h * grid_w, self.mask_ratio, rng),
            MaskStrategy::Block => {
                let plan = block_mask(grid_h, grid_w, self.mask_ratio, &self.block, rng)?;
                if self.center_weight == 1.0 {
                    Ok(plan)
                } else {
                    center_weights(&plan, self.center_weight)
                }
            }
        }
    }
}

/// Everything a pretraining run needs to continue exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ParamSet<T>,
    /// Momentum copy of the `enc.` parameters.
    pub ema: ParamSet<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &BootMae<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = model.init_params(&mut rng);
        Self {
            ema: params.subset("enc."),
            adam: AdamState::new(&params),
            params,
            step: 0,
            epoch: 0,
            rng,
        }
    }

    pub fn to_checkpoint(&self, config: &str) -> Checkpoint {
        let mut c = Checkpoint {
            kind: "pretrain".into(),
            config: config.to_string(),
            step: self.step,
            epoch: self.epoch,
            optimizer_steps: self.adam.t,
            rng: RngState::capture(&self.rng),
            arrays: Vec::new(),
        };
        c.push_set("param.", &self.params);
        c.push_set("ema.", &self.ema);
        c.push_set("adam.m.", &self.adam.m);
        c.push_set("adam.v.", &self.adam.v);
        c
    }

    /// Rebuilds a state, listing every array that does not fit `model`.
    pub fn from_checkpoint(c: &Checkpoint, model: &BootMae<T>) -> Result<Self> {
        if c.kind != "pretrain" {
            return Err(Error::Checkpoint(format!("expected a pretrain checkpoint, found {:?}", c.kind)));
        }
        let specs = model.config().param_specs();
        let enc_specs = model.config().encoder_specs();
        let params = c.take_set("param.");
        let ema = c.take_set("ema.");
        let m = c.take_set("adam.m.");
        let v = c.take_set("adam.v.");
        let mut problems = Vec::new();
        for (label, set, specs) in [
            ("param", &params, &specs),
            ("ema", &ema, &enc_specs),
            ("adam.m", &m, &specs),
            ("adam.v", &v, &specs),
        ] {
            if let Err(e) = set.check_specs(specs) {
                problems.push(format!("{label}: {e}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("\n")));
        }
        Ok(Self {
            params,
            ema,
            adam: AdamState {
                m,
                v,
                t: c.optimizer_steps,
            },
            step: c.step,
            epoch: c.epoch,
            rng: c.rng.restore(),
        })
    }
}

/// One row of the pretraining metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Fractional epoch at the start of the step.
    pub epoch: f64,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossBreakdown,
    /// Images whose loss had nothing to average over.
    pub empty_losses: usize,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,momentum,L_R,L_P,L,lambda";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.momentum,
            self.loss.l_r,
            self.loss.l_p,
            self.loss.total,
            self.loss.lambda
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Appends rows to an open metrics file.
pub fn append_metrics(out: &mut impl Write, rows: &[StepMetrics]) -> std::io::Result<()> {
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// One optimizer step on a batch of images. The state is left untouched
/// when a numeric error is detected.
pub fn train_step<T: Real>(
    model: &BootMae<T>,
    images: &[&Tensor<T>],
    state: &mut TrainState<T>,
    cfg: &PretrainConfig,
    schedule: &LrSchedule,
    steps_per_epoch: u64,
) -> Result<StepMetrics> {
    if let Some(i) = images.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!("batch image {i} has non-finite pixels at step {}", state.step)));
    }
    let grid = *model.grid();
    let epoch = state.step as f64 / steps_per_epoch as f64;
    let lr = schedule.lr_at(state.step);
    let m = momentum_at(epoch, &cfg.momentum);

    let g = Graph::new();
    let bound = state.params.bind(&g, true);
    let mut rng = state.rng.clone();
    let mut pixel_terms = Vec::new();
    let mut feature_terms = Vec::new();
    let mut empty = 0;
    for img in images {
        let patches = grid.patchify(img)?;
        let plan = cfg.draw_plan(grid.grid_h(), grid.grid_w(), &mut rng)?;
        let art = model.forward_patches(&bound, &g, &patches, &plan)?;
        if cfg.uses_pixels() {
            let l = loss_regression(art.x_bar, &pixel_target(&patches, &plan)?, &plan)?;
            empty += l.empty as usize;
            pixel_terms.push(l.value);
        }
        if cfg.uses_features() {
            let fed = fed_set(&plan, cfg.ema_fraction, cfg.ema_mode, &mut rng)?;
            let targets = target_features(model, &state.ema, &patches, &plan, &fed)?;
            let l = loss_prediction(art.f_bar, &targets, &plan)?;
            empty += l.empty as usize;
            feature_terms.push(l.value);
        }
    }
    let inv_b = T::of(1.0 / images.len() as f64);
    let l_r = batch_mean(&pixel_terms, inv_b)?;
    let l_p = batch_mean(&feature_terms, inv_b)?;
    let lambda = if cfg.uses_features() { cfg.lambda } else { 0.0 };
    let value = |v: Option<Var<'_, T>>| v.map_or(0.0, |v| v.value().item().as_f64());
    let breakdown = loss_total(value(l_r), value(l_p), lambda)?;
    let total = match (l_r, l_p) {
        (Some(r), Some(p)) => r.add(p.scale(T::of(lambda)))?,
        (Some(r), None) => r,
        (None, Some(p)) => p.scale(T::of(lambda)),
        (None, None) => return Err(config_err!("no loss term is enabled")),
    };
    g.backward(total)?;
    let mut grads = bound.grads();
    drop(bound);
    if let Some(max) = cfg.clip_grad {
        clip_grad_norm(&mut grads, max);
    }
    let mut params = state.params.clone();
    let mut adam = state.adam.clone();
    adam_step(&mut params, &grads, &mut adam, &cfg.adam, lr, |_| 1.0)?;
    if !params.is_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at step {}", state.step)));
    }
    ema_update(&mut state.ema, &params, m)?;
    state.params = params;
    state.adam = adam;
    state.rng = rng;
    let metrics = StepMetrics {
        step: state.step,
        epoch,
        lr,
        momentum: m,
        loss: breakdown,
        empty_losses: empty,
    };
    state.step += 1;
    Ok(metrics)
}

fn batch_mean<'g, T: Real>(terms: &[Var<'g, T>], inv_b: T) -> Result<Option<Var<'g, T>>> {
    let Some((first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = *first;
    for t in rest {
        acc = acc.add(*t)?;
    }
    Ok(Some(acc.scale(inv_b)))
}

/// One pass over `data` in an order drawn from the state's RNG.
pub fn pretrain_epoch<T: Real>(
    model: &BootMae<T>,
    data: &[Tensor<T>],
    state: &mut TrainState<T>,
    cfg: &PretrainConfig,
) -> Result<Vec<StepMetrics>> {
    if data.is_empty() {
        return Err(config_err!("pretraining needs at least one image"));
    }
    let schedule = cfg.schedule(data.len());
    let spe = cfg.steps_per_epoch(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = state.rng.clone();
    order.shuffle(&mut rng);
    state.rng = rng;
    let mut rows = Vec::with_capacity(spe as usize);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Tensor<T>> = chunk.iter().map(|&i| &data[i]).collect();
        rows.push(train_step(model, &batch, state, cfg, &schedule, spe)?);
    }
    state.epoch += 1;
    Ok(rows)
}
