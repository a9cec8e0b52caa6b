//! Alternative channel-selection strategies at a matched FLOPs budget.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopsModel;
use crate::mask::{get_pruning_mask, MaskSearchParams, PruningMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Threshold search on the trained gates.
    Autobot,
    /// Threshold search on random scores.
    Random,
    /// Threshold search on inverted gates.
    Reverse,
    /// AutoBot's per-group keep counts, random channels.
    Spdc,
    /// Per-group keep ratios from a profile, highest gates kept.
    Dpdc,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Autobot,
        Strategy::Random,
        Strategy::Reverse,
        Strategy::Spdc,
        Strategy::Dpdc,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Autobot => "autobot",
            Strategy::Random => "random",
            Strategy::Reverse => "reverse",
            Strategy::Spdc => "spdc",
            Strategy::Dpdc => "dpdc",
        };
        f.write_str(s)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown strategy `{s}`")))
    }
}

/// Fraction of channels to keep in each group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpdcProfile {
    pub keep_ratios: Vec<f64>,
}

impl DpdcProfile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    fn counts(&self, channels: &[usize]) -> Result<Vec<usize>> {
        if self.keep_ratios.len() != channels.len() {
            return Err(Error::InvalidParams(format!(
                "profile has {} ratios for {} groups",
                self.keep_ratios.len(),
                channels.len()
            )));
        }
        if let Some(r) = self.keep_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::InvalidParams(format!("keep ratio {r} not in (0, 1]")));
        }
        Ok(self
            .keep_ratios
            .iter()
            .zip(channels)
            .map(|(r, &c)| ((r * c as f64).round() as usize).clamp(1, c))
            .collect())
    }

    /// Scales a relative per-group `shape` so the resulting profile meets
    /// `target_flops` as closely as possible.
    pub fn fit(shape: &[f64], model: &FlopsModel, target_flops: f64) -> Result<Self> {
        if shape.len() != model.channels().len() || shape.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::InvalidParams("profile shape must be positive, one entry per group".into()));
        }
        let at = |scale: f64| -> Result<(DpdcProfile, f64)> {
            let p = DpdcProfile {
                keep_ratios: shape.iter().map(|s| (s * scale).clamp(1e-9, 1.0)).collect(),
            };
            let f = model.weighted(&p.counts(model.channels())?.iter().map(|&c| c as f64).collect::<Vec<_>>())?;
            Ok((p, f))
        };
        let top = 1.0 / shape.iter().cloned().fold(f64::INFINITY, f64::min);
        let (mut lo, mut hi) = (0.0, top);
        let mut best = at(hi)?;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let cur = at(mid)?;
            if (cur.1 - target_flops).abs() < (best.1 - target_flops).abs() {
                best = cur.clone();
            }
            if cur.1 > target_flops {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(best.0)
    }
}

fn keep_top(values: &[f32], n: usize) -> Vec<bool> {
    let order = crate::kendall::ranking(values);
    let mut keep = vec![false; values.len()];
    for &i in &order[..n] {
        keep[i] = true;
    }
    keep
}

/// Pruning mask chosen by `strategy` for the same FLOPs target.
pub fn ablation_mask(
    strategy: Strategy,
    lambdas: &[Vec<f32>],
    model: &FlopsModel,
    params: &MaskSearchParams,
    profile: Option<&DpdcProfile>,
    seed: u64,
) -> Result<PruningMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        Strategy::Autobot => get_pruning_mask(lambdas, model, params),
        Strategy::Reverse => {
            let inv: Vec<Vec<f32>> = lambdas.iter().map(|l| l.iter().map(|&v| 1.0 - v).collect()).collect();
            get_pruning_mask(&inv, model, params)
        }
        Strategy::Random => {
            let scores: Vec<Vec<f32>> = lambdas
                .iter()
                .map(|l| l.iter().map(|_| rng.gen_range(f32::EPSILON..1.0)).collect())
                .collect();
            get_pruning_mask(&scores, model, params)
        }
        Strategy::Spdc => {
            let reference = get_pruning_mask(lambdas, model, params)?;
            let keep = reference
                .kept_counts()
                .iter()
                .zip(lambdas)
                .map(|(&n, l)| {
                    let mut k = vec![false; l.len()];
                    for i in sample(&mut rng, l.len(), n) {
                        k[i] = true;
                    }
                    k
                })
                .collect();
            PruningMask::new(keep, model, params.target_flops, params.epsilon, None)
        }
        Strategy::Dpdc => {
            let profile = profile.ok_or_else(|| Error::InvalidParams("dpdc needs a keep-ratio profile".into()))?;
            let counts = profile.counts(model.channels())?;
            let keep = lambdas.iter().zip(&counts).map(|(l, &n)| keep_top(l, n)).collect();
            let mask = PruningMask::new(keep, model, params.target_flops, params.epsilon, None)?;
            if !mask.met_epsilon {
                return Err(Error::InvalidParams(format!(
                    "dpdc profile gives {:.0} FLOPs, more than epsilon from the target {:.0}",
                    mask.achieved_flops, params.target_flops
                )));
            }
            Ok(mask)
        }
    }
}
