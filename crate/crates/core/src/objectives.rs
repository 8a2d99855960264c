//! Training losses: Gaussian-prior standardization, soft-deviation loss,
//! binary cross-entropy, focal segmentation loss and the reweighted batch
//! objective.
//!
//! Each loss exists twice: a plain f64 form (closed-form contract, used by
//! tests and scoring) and a tape form used inside the training graph.

use crate::tape::{DiffError, Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const PROB_CLAMP: f64 = 1e-12;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.75;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("reference draw is degenerate (zero standard deviation)")]
    DegenerateReference,
    #[error("reference count {0} too small (need >= 2)")]
    ReferenceCount(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Empirical mean/std of a fresh standard-normal reference draw.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceStats {
    pub mu: f64,
    pub sigma: f64,
    pub count: usize,
    pub seed: u64,
}

pub fn reference_stats(count: usize, seed: u64) -> Result<ReferenceStats, ObjectiveError> {
    if count < 2 {
        return Err(ObjectiveError::ReferenceCount(count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
    stats_of(&samples, seed)
}

/// Population mean/std of an explicit sample set (test hook for the
/// degenerate-draw error path).
pub fn stats_of(samples: &[f64], seed: u64) -> Result<ReferenceStats, ObjectiveError> {
    if samples.len() < 2 {
        return Err(ObjectiveError::ReferenceCount(samples.len()));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(ObjectiveError::DegenerateReference);
    }
    Ok(ReferenceStats { mu, sigma, count: samples.len(), seed })
}

pub fn standardize(s_dev: f64, stats: &ReferenceStats) -> f64 {
    (s_dev - stats.mu) / stats.sigma
}

/// (1-p)|Z| + p max(0, gamma - Z); `p` acts as a constant weight.
pub fn soft_deviation_loss(z_std: f64, p: f64, gamma: f64) -> f64 {
    (1.0 - p) * z_std.abs() + p * (gamma - z_std).max(0.0)
}

pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Pixel-mean focal loss of a predicted map against a binary mask.
pub fn focal_loss(a: &Tensor, mask: &Tensor, gamma_f: f64, alpha_f: f64) -> f64 {
    assert_eq!(a.len(), mask.len(), "focal_loss shape mismatch");
    let mut acc = 0.0;
    for (&av, &mv) in a.data().iter().zip(mask.data()) {
        let av = av.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let (p_t, a_t) = if mv > 0.5 { (av, alpha_f) } else { (1.0 - av, 1.0 - alpha_f) };
        acc += -a_t * (1.0 - p_t).powf(gamma_f) * p_t.ln();
    }
    acc / a.len() as f64
}

// ---- tape forms ----

/// Z_std node: (s_dev - mu) / sigma.
pub fn standardize_node(tape: &mut Tape, s_dev: Var, stats: &ReferenceStats) -> Var {
    let centered = tape.add_scalar(s_dev, -stats.mu);
    tape.scale(centered, 1.0 / stats.sigma)
}

/// Soft-deviation loss node. `p_value` is the detached probability: it
/// weights the two terms but receives no gradient.
pub fn soft_deviation_loss_node(
    tape: &mut Tape,
    z_std: Var,
    p_value: f64,
    gamma: f64,
) -> Result<Var, DiffError> {
    let neg = tape.scale(z_std, -1.0);
    let abs_pos = tape.relu(z_std);
    let abs_neg = tape.relu(neg);
    let abs = tape.add(abs_pos, abs_neg)?;
    let margin = tape.add_scalar(neg, gamma);
    let hinge = tape.relu(margin);
    tape.weighted_sum(&[abs, hinge], &[1.0 - p_value, p_value])
}

pub fn bce_loss_node(tape: &mut Tape, p: Var, y: u8) -> Result<Var, DiffError> {
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let term = if y == 1 {
        tape.log(pc)?
    } else {
        let neg = tape.scale(pc, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        tape.log(one_minus)?
    };
    Ok(tape.scale(term, -1.0))
}

pub fn focal_loss_node(
    tape: &mut Tape,
    a_map: Var,
    mask: &Tensor,
    gamma_f: f64,
    alpha_f: f64,
) -> Result<Var, DiffError> {
    let shape = tape.value(a_map).shape().to_vec();
    assert_eq!(mask.len(), shape.iter().product::<usize>(), "focal mask shape mismatch");
    let m = tape.leaf(mask.clone());
    let one_minus_m = tape.leaf(mask.map(|v| 1.0 - v));
    let alpha_t = tape.leaf(mask.map(|v| if v > 0.5 { alpha_f } else { 1.0 - alpha_f }));

    let ac = tape.clamp(a_map, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let neg_a = tape.scale(ac, -1.0);
    let one_minus_a = tape.add_scalar(neg_a, 1.0);
    let pos = tape.mul(ac, m)?;
    let negp = tape.mul(one_minus_a, one_minus_m)?;
    let p_t = tape.add(pos, negp)?;
    let neg_pt = tape.scale(p_t, -1.0);
    let q = tape.add_scalar(neg_pt, 1.0);
    let focus = tape.pow_const(q, gamma_f);
    let logp = tape.log(p_t)?;
    let weighted = tape.mul(alpha_t, focus)?;
    let term = tape.mul(weighted, logp)?;
    let mean = tape.mean(term);
    Ok(tape.scale(mean, -1.0))
}

/// Alg-structure batch objective: sum of w1-weighted soft losses, plus
/// w2-weighted bce losses, plus the unweighted focal sum.
pub fn batch_objective(
    tape: &mut Tape,
    soft: &[Var],
    bce: &[Var],
    focal: &[Var],
    w1: &[f64],
    w2: &[f64],
) -> Result<Var, DiffError> {
    if soft.len() != w1.len() || bce.len() != w2.len() {
        return Err(DiffError::ShapeMismatch {
            op: "batch_objective",
            lhs: vec![soft.len(), bce.len()],
            rhs: vec![w1.len(), w2.len()],
        });
    }
    let mut terms: Vec<Var> = Vec::with_capacity(soft.len() + bce.len() + focal.len());
    let mut weights: Vec<f64> = Vec::with_capacity(terms.capacity());
    terms.extend_from_slice(soft);
    weights.extend_from_slice(w1);
    terms.extend_from_slice(bce);
    weights.extend_from_slice(w2);
    terms.extend_from_slice(focal);
    weights.extend(std::iter::repeat(1.0).take(focal.len()));
    tape.weighted_sum(&terms, &weights)
}
