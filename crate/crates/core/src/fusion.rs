//! Multi-cue scoring: entropy cue, segmentation top-k cue, monotone
//! min-max normalization, and weighted-geometric-mean fusion.

use crate::objectives::PROB_CLAMP;
use crate::tape::topk_count;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("degenerate cue '{0}': max equals min over the calibration set")]
    DegenerateCue(&'static str),
    #[error("empty calibration score list")]
    EmptyCalibration,
    #[error("fusion weights must have positive sum")]
    ZeroWeights,
}

/// Per-image cue triple with its normalized and fused forms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CueScores {
    pub s_dev: f64,
    pub s_ent: f64,
    pub s_seg: f64,
    pub s_dev_n: f64,
    pub s_ent_n: f64,
    pub s_seg_n: f64,
    pub fused: f64,
}

/// Raw cue triple before calibration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RawCues {
    pub s_dev: f64,
    pub s_ent: f64,
    pub s_seg: f64,
}

/// Per-cue (min, max) over a calibration score set, persisted with the
/// checkpoint.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CueCalibration {
    pub dev: (f64, f64),
    pub ent: (f64, f64),
    pub seg: (f64, f64),
    pub clamp_epsilon: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_dev: f64,
    pub w_ent: f64,
    pub w_seg: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { w_dev: 0.55, w_ent: 0.10, w_seg: 0.35 }
    }
}

/// s_ent = ln(1 + binary entropy of p).
pub fn entropy_score(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let e = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
    (1.0 + e).ln()
}

/// Mean of the k = max(1, ceil(rho * n)) largest values of a slice, ties
/// broken by lowest flat index.
pub fn topk_mean_slice(values: &[f64], rho: f64) -> f64 {
    assert!(!values.is_empty(), "topk over empty slice");
    let k = topk_count(values.len(), rho);
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx[..k].iter().map(|&i| values[i]).sum::<f64>() / k as f64
}

/// Segmentation cue: top-k pixel mean of the predicted map.
pub fn seg_topk_score(a_map: &Tensor, rho: f64) -> f64 {
    topk_mean_slice(a_map.data(), rho)
}

/// Records per-cue min/max over training-time raw scores.
pub fn fit_calibration(scores: &[RawCues], clamp_epsilon: f64) -> Result<CueCalibration, FusionError> {
    if scores.is_empty() {
        return Err(FusionError::EmptyCalibration);
    }
    let range = |pick: fn(&RawCues) -> f64, name: &'static str| -> Result<(f64, f64), FusionError> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in scores {
            let v = pick(s);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi <= lo {
            return Err(FusionError::DegenerateCue(name));
        }
        Ok((lo, hi))
    };
    Ok(CueCalibration {
        dev: range(|s| s.s_dev, "dev")?,
        ent: range(|s| s.s_ent, "ent")?,
        seg: range(|s| s.s_seg, "seg")?,
        clamp_epsilon,
    })
}

/// Min-max affine map clamped into [epsilon, 1].
pub fn normalize_cue(raw: f64, range: (f64, f64), epsilon: f64) -> f64 {
    ((raw - range.0) / (range.1 - range.0)).clamp(epsilon, 1.0)
}

/// Weighted geometric mean of normalized cues (computed in the log domain).
pub fn fuse_scores(
    s_dev_n: f64,
    s_ent_n: f64,
    s_seg_n: f64,
    weights: &FusionWeights,
) -> Result<f64, FusionError> {
    let wsum = weights.w_dev + weights.w_ent + weights.w_seg;
    if !(wsum > 0.0) {
        return Err(FusionError::ZeroWeights);
    }
    let log = weights.w_dev * s_dev_n.ln() + weights.w_ent * s_ent_n.ln() + weights.w_seg * s_seg_n.ln();
    Ok((log / wsum).exp())
}

/// Full raw -> normalized -> fused scoring of one image's cues.
pub fn score_cues(
    raw: RawCues,
    cal: &CueCalibration,
    weights: &FusionWeights,
) -> Result<CueScores, FusionError> {
    let s_dev_n = normalize_cue(raw.s_dev, cal.dev, cal.clamp_epsilon);
    let s_ent_n = normalize_cue(raw.s_ent, cal.ent, cal.clamp_epsilon);
    let s_seg_n = normalize_cue(raw.s_seg, cal.seg, cal.clamp_epsilon);
    let fused = fuse_scores(s_dev_n, s_ent_n, s_seg_n, weights)?;
    Ok(CueScores {
        s_dev: raw.s_dev,
        s_ent: raw.s_ent,
        s_seg: raw.s_seg,
        s_dev_n,
        s_ent_n,
        s_seg_n,
        fused,
    })
}
