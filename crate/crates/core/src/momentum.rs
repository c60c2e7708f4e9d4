//! EMA shadow encoder: update rule, momentum schedule and target features.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{config_err, contract_err, Error, Result};
use crate::masking::MaskPlan;
use crate::model::BootMae;
use crate::objectives::Targets;
use crate::params::ParamSet;
use crate::tensor::{Graph, Real, Tensor};

/// `shadow <- m * shadow + (1 - m) * live` for every shadow entry.
pub fn ema_update<T: Real>(shadow: &mut ParamSet<T>, live: &ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(contract_err!("momentum {m} outside [0, 1]"));
    }
    let (mt, rest) = (T::of(m), T::of(1.0 - m));
    for (name, s) in shadow.iter_mut() {
        let l = live
            .get(name)
            .ok_or_else(|| contract_err!("shadow parameter {name} has no live counterpart"))?;
        if l.shape() != s.shape() {
            return Err(contract_err!("{name}: shadow {:?} vs live {:?}", s.shape(), l.shape()));
        }
        for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
            *a = mt * *a + rest * b;
        }
    }
    Ok(())
}

/// Piecewise-linear momentum over (real-valued) epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentumSchedule {
    pub start: f64,
    pub mid: f64,
    pub ramp1_epochs: f64,
    /// Final value and the epoch at which it is reached.
    pub second_ramp: Option<(f64, f64)>,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        Self {
            start: 0.999,
            mid: 0.9999,
            ramp1_epochs: 100.0,
            second_ramp: None,
        }
    }
}

impl MomentumSchedule {
    pub fn with_second_ramp() -> Self {
        Self {
            second_ramp: Some((0.99999, 400.0)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ok = self.start <= self.mid && self.ramp1_epochs >= 0.0 && self.start >= 0.0 && self.mid <= 1.0;
        if let Some((end, at)) = self.second_ramp {
            ok &= self.mid <= end && end <= 1.0 && at >= self.ramp1_epochs;
        }
        if ok {
            Ok(())
        } else {
            Err(config_err!("momentum schedule {self:?} is not non-decreasing within [0, 1]"))
        }
    }
}

pub fn momentum_at(epoch: f64, s: &MomentumSchedule) -> f64 {
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t.clamp(0.0, 1.0);
    let epoch = epoch.max(0.0);
    if epoch < s.ramp1_epochs {
        return lerp(s.start, s.mid, epoch / s.ramp1_epochs);
    }
    match s.second_ramp {
        Some((end, at)) if epoch < at => lerp(s.mid, end, (epoch - s.ramp1_epochs) / (at - s.ramp1_epochs)),
        Some((end, _)) => end,
        None => s.mid,
    }
}

/// How the momentum-encoder input fraction is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FractionMode {
    /// Fraction of all patches: visible ones plus sampled masked ones.
    Image,
    /// Fraction of the masked patches, fed on their own.
    Masked,
}

impl FromStr for FractionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(FractionMode::Image),
            "masked" => Ok(FractionMode::Masked),
            _ => Err(config_err!("unknown fraction mode {s:?} (expected image or masked)")),
        }
    }
}

impl fmt::Display for FractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FractionMode::Image => "image",
            FractionMode::Masked => "masked",
        })
    }
}

/// Patches fed to the shadow encoder and the masked ones among them that carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FedSet {
    pub fed: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn fed_set<R: Rng + ?Sized>(plan: &MaskPlan, fraction: f64, mode: FractionMode, rng: &mut R) -> Result<FedSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config_err!("momentum-encoder fraction {fraction} outside (0, 1]"));
    }
    let n = plan.n();
    if fraction == 1.0 {
        return Ok(FedSet {
            fed: (0..n).collect(),
            targets: plan.masked().to_vec(),
        });
    }
    let masked = plan.masked();
    let take = match mode {
        FractionMode::Image => {
            let total = (fraction * n as f64).round() as usize;
            if total <= plan.n_visible() {
                return Err(config_err!(
                    "fraction {fraction} feeds {total} of {n} patches, not more than the {} visible ones",
                    plan.n_visible()
                ));
            }
            total - plan.n_visible()
        }
        FractionMode::Masked => {
            let k = (fraction * masked.len() as f64).round() as usize;
            if k == 0 && !masked.is_empty() {
                return Err(config_err!("fraction {fraction} selects no masked patches"));
            }
            k
        }
    };
    let mut targets: Vec<usize> = index::sample(rng, masked.len(), take.min(masked.len()))
        .into_iter()
        .map(|k| masked[k])
        .collect();
    targets.sort_unstable();
    let fed = match mode {
        FractionMode::Image => {
            let mut fed = plan.visible();
            fed.extend(&targets);
            fed.sort_unstable();
            fed
        }
        FractionMode::Masked => targets.clone(),
    };
    Ok(FedSet { fed, targets })
}

/// Shadow-encoder features for the fed patches, returned as detached rows
/// for the masked targets. Runs on a private graph with constant weights.
pub fn target_features<T: Real>(
    model: &BootMae<T>,
    shadow: &ParamSet<T>,
    patches: &Tensor<T>,
    plan: &MaskPlan,
    fed: &FedSet,
) -> Result<Targets<T>> {
    if fed.targets.is_empty() {
        return Ok(Targets {
            indices: Vec::new(),
            rows: Tensor::zeros(vec![0, model.config().enc_dim]),
        });
    }
    let g = Graph::new();
    let bound = shadow.bind(&g, false);
    let x = g.constant(patches.select_rows(&fed.fed)?);
    let enc = model.encode_tokens(&bound, x, &fed.fed)?;
    let features = enc.z_hat.value();
    let rows: Vec<usize> = fed
        .targets
        .iter()
        .map(|t| fed.fed.binary_search(t).map_err(|_| contract_err!("target {t} was not fed")))
        .collect::<Result<_>>()?;
    debug_assert!(fed.targets.iter().all(|&t| plan.is_masked(t)));
    Ok(Targets {
        indices: fed.targets.clone(),
        rows: features.select_rows(&rows)?,
    })
}
