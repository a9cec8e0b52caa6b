//! From trained gates to a binary pruning mask via threshold binary search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopsModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGroup {
    /// 1-based group index.
    pub index: usize,
    pub keep: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningMask {
    pub groups: Vec<MaskGroup>,
    pub achieved_flops: f64,
    pub target_flops: f64,
    pub met_epsilon: bool,
    /// Final threshold; absent for strategies that do not threshold.
    pub threshold: Option<f64>,
}

impl PruningMask {
    pub fn new(keep: Vec<Vec<bool>>, model: &FlopsModel, target_flops: f64, epsilon: f64, threshold: Option<f64>) -> Result<Self> {
        let achieved_flops = model.of_mask(&keep)?;
        Ok(PruningMask {
            groups: keep
                .into_iter()
                .enumerate()
                .map(|(i, keep)| MaskGroup { index: i + 1, keep })
                .collect(),
            achieved_flops,
            target_flops,
            met_epsilon: (achieved_flops - target_flops).abs() <= epsilon,
            threshold,
        })
    }

    pub fn keep(&self) -> Vec<Vec<bool>> {
        self.groups.iter().map(|g| g.keep.clone()).collect()
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.keep.iter().filter(|&&k| k).count()).collect()
    }

    /// Checks group count, lengths, ordering, and that no group is empty.
    pub fn validate(&self, channels: &[usize]) -> Result<()> {
        if self.groups.len() != channels.len() {
            return Err(Error::Mask(format!("{} groups in mask, model has {}", self.groups.len(), channels.len())));
        }
        for (i, (g, &c)) in self.groups.iter().zip(channels).enumerate() {
            if g.index != i + 1 {
                return Err(Error::Mask(format!("group at position {} has index {}", i + 1, g.index)));
            }
            if g.keep.len() != c {
                return Err(Error::Mask(format!("group {} has {} entries for {c} channels", g.index, g.keep.len())));
            }
            if !g.keep.iter().any(|&k| k) {
                return Err(Error::Mask(format!("group {} keeps no channel", g.index)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSearchParams {
    pub target_flops: f64,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl MaskSearchParams {
    pub const DEFAULT_MAX_ITERS: usize = 50;

    /// Target and tolerance as fractions of `M_F`.
    pub fn from_ratios(model: &FlopsModel, target_ratio: f64, epsilon_ratio: f64) -> Result<Self> {
        let p = MaskSearchParams {
            target_flops: target_ratio * model.max_flops(),
            epsilon: epsilon_ratio * model.max_flops(),
            max_iters: Self::DEFAULT_MAX_ITERS,
        };
        p.validate(model)?;
        Ok(p)
    }

    pub fn validate(&self, model: &FlopsModel) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParams(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.target_flops > 0.0 && self.target_flops < model.max_flops()) {
            return Err(Error::InvalidParams(format!(
                "target FLOPs {} must lie strictly between 0 and {}",
                self.target_flops,
                model.max_flops()
            )));
        }
        Ok(())
    }
}

/// Keeps channels with `λ > threshold`; a group left empty keeps its
/// largest gate (lowest index on ties).
pub fn threshold_mask(lambdas: &[Vec<f32>], threshold: f64) -> Vec<Vec<bool>> {
    lambdas
        .iter()
        .map(|l| {
            let mut keep: Vec<bool> = l.iter().map(|&v| v as f64 > threshold).collect();
            if !keep.iter().any(|&k| k) {
                if let Some(best) = argmax(l) {
                    keep[best] = true;
                }
            }
            keep
        })
        .collect()
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(v: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// One probe of the threshold search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchStep {
    pub threshold: f64,
    pub flops: f64,
    pub keep: Vec<Vec<bool>>,
}

/// Binary search on the threshold: start at 0.5 and move by `0.25 / 2^i`
/// towards the target until within `epsilon` or after `max_iters` moves.
/// Returns every probe in order.
pub fn search_path(lambdas: &[Vec<f32>], model: &FlopsModel, params: &MaskSearchParams) -> Result<Vec<SearchStep>> {
    params.validate(model)?;
    if lambdas.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("gate values must be finite".into()));
    }
    let target = params.target_flops;
    let probe = |t: f64| -> Result<SearchStep> {
        let keep = threshold_mask(lambdas, t);
        Ok(SearchStep {
            threshold: t,
            flops: model.of_mask(&keep)?,
            keep,
        })
    };
    let mut path = vec![probe(0.5)?];
    for i in 0..params.max_iters {
        let last = &path[path.len() - 1];
        if (last.flops - target).abs() <= params.epsilon {
            break;
        }
        let step = 0.25 / 2f64.powi(i as i32);
        let t = if last.flops > target { last.threshold + step } else { last.threshold - step };
        path.push(probe(t)?);
    }
    Ok(path)
}

/// The mask of the search's final probe, or the closest probe to the
/// target if `epsilon` was never met.
pub fn get_pruning_mask(lambdas: &[Vec<f32>], model: &FlopsModel, params: &MaskSearchParams) -> Result<PruningMask> {
    let path = search_path(lambdas, model, params)?;
    let target = params.target_flops;
    let mut best = &path[0];
    for s in &path[1..] {
        if (s.flops - target).abs() < (best.flops - target).abs() {
            best = s;
        }
    }
    let last = &path[path.len() - 1];
    let chosen = if (last.flops - target).abs() <= params.epsilon { last } else { best };
    PruningMask::new(chosen.keep.clone(), model, target, params.epsilon, Some(chosen.threshold))
}
