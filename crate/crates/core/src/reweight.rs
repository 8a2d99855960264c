//! Adaptive sample-importance weights over a minibatch: the closed-form
//! alpha-divergence update, its KL limit, and a brute-force constrained
//! solver used as an independent oracle in tests.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReweightError {
    #[error("degenerate batch: all closed-form numerators are zero")]
    DegenerateBatch,
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("oracle failed to converge: divergence residual {residual:.3e} after {iters} iterations")]
    NoConvergence { residual: f64, iters: usize },
}

/// Simplex point: entries non-negative, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    fn new_normalized(mut v: Vec<f64>) -> Self {
        let s: f64 = v.iter().sum();
        for x in &mut v {
            *x /= s;
        }
        WeightVector(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Closed-form alpha-divergence weights:
/// w_i proportional to [(1-alpha) l_i + lambda]_+ ^ (1/(alpha-1)).
/// Computed in the log domain with max subtraction.
pub fn alpha_weights(losses: &[f64], alpha: f64, lambda: f64) -> Result<WeightVector, ReweightError> {
    if losses.is_empty() {
        return Err(ReweightError::BadParam("empty loss vector".into()));
    }
    if alpha == 1.0 {
        return Err(ReweightError::BadParam("alpha must differ from 1 (use kl_weights)".into()));
    }
    if lambda <= 0.0 {
        return Err(ReweightError::BadParam(format!("lambda {lambda} must be positive")));
    }
    let e = 1.0 / (alpha - 1.0);
    let log_terms: Vec<Option<f64>> = losses
        .iter()
        .map(|&l| {
            let base = (1.0 - alpha) * l + lambda;
            (base > 0.0).then(|| e * base.ln())
        })
        .collect();
    let max = log_terms
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ReweightError::DegenerateBatch);
    }
    let nums: Vec<f64> = log_terms
        .iter()
        .map(|t| t.map_or(0.0, |lt| (lt - max).exp()))
        .collect();
    Ok(WeightVector::new_normalized(nums))
}

/// KL-limit weights: w_i proportional to exp(-l_i / lambda).
pub fn kl_weights(losses: &[f64], lambda: f64) -> Result<WeightVector, ReweightError> {
    if losses.is_empty() {
        return Err(ReweightError::BadParam("empty loss vector".into()));
    }
    if lambda <= 0.0 {
        return Err(ReweightError::BadParam(format!("lambda {lambda} must be positive")));
    }
    let max = losses.iter().map(|&l| -l / lambda).fold(f64::NEG_INFINITY, f64::max);
    let nums: Vec<f64> = losses.iter().map(|&l| (-l / lambda - max).exp()).collect();
    Ok(WeightVector::new_normalized(nums))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DivergenceKind {
    /// (sum_i (n w_i)^alpha - n) / (n alpha (alpha - 1)).
    Alpha(f64),
    /// sum_i w_i ln(n w_i).
    Kl,
}

/// Divergence of `w` from the uniform distribution.
pub fn divergence_from_uniform(kind: DivergenceKind, w: &[f64]) -> f64 {
    let n = w.len() as f64;
    match kind {
        DivergenceKind::Alpha(a) => {
            let s: f64 = w.iter().map(|&wi| (n * wi).max(0.0).powf(a)).sum();
            (s - n) / (n * a * (a - 1.0))
        }
        DivergenceKind::Kl => w
            .iter()
            .map(|&wi| if wi > 0.0 { wi * (n * wi).ln() } else { 0.0 })
            .sum(),
    }
}

fn divergence_gradient(kind: DivergenceKind, w: &[f64], out: &mut [f64]) {
    let n = w.len() as f64;
    match kind {
        DivergenceKind::Alpha(a) => {
            for (o, &wi) in out.iter_mut().zip(w) {
                let wi = wi.max(1e-16);
                *o = (n * wi).powf(a - 1.0) / (a - 1.0);
            }
        }
        DivergenceKind::Kl => {
            for (o, &wi) in out.iter_mut().zip(w) {
                let wi = wi.max(1e-16);
                *o = (n * wi).ln() + 1.0;
            }
        }
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Inner solver: minimize sum w_i l_i + t * Div(w, u) over the simplex via
/// projected gradient with backtracking line search.
fn penalized_min(losses: &[f64], kind: DivergenceKind, t: f64, start: &[f64]) -> Vec<f64> {
    let n = losses.len();
    let obj = |w: &[f64]| -> f64 {
        let lin: f64 = w.iter().zip(losses).map(|(&wi, &li)| wi * li).sum();
        lin + t * divergence_from_uniform(kind, w)
    };
    let mut w = start.to_vec();
    let mut grad = vec![0.0; n];
    let mut dgrad = vec![0.0; n];
    let mut step = 1.0f64;
    let mut fw = obj(&w);
    for _ in 0..20_000 {
        divergence_gradient(kind, &w, &mut dgrad);
        for i in 0..n {
            grad[i] = losses[i] + t * dgrad[i];
        }
        // backtracking from a slightly enlarged previous step
        step = (step * 2.0).min(1e6);
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..n).map(|i| w[i] - step * grad[i]).collect();
            let proj = project_simplex(&trial);
            let fp = obj(&proj);
            if fp.is_finite() && fp <= fw - 1e-18 {
                let delta: f64 = proj
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                w = proj;
                fw = fp;
                accepted = true;
                if delta < 1e-13 {
                    return w;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    w
}

/// Brute-force oracle: minimize sum w_i l_i over the simplex subject to
/// Div(w, u) <= delta, via projected gradient on the penalized problem and
/// bisection on the penalty multiplier to hit the divergence budget.
pub fn oracle_solve(
    losses: &[f64],
    kind: DivergenceKind,
    delta: f64,
) -> Result<WeightVector, ReweightError> {
    let n = losses.len();
    if n == 0 {
        return Err(ReweightError::BadParam("empty loss vector".into()));
    }
    if n > 64 {
        return Err(ReweightError::BadParam(format!("oracle batch size {n} exceeds 64")));
    }
    if delta < 0.0 {
        return Err(ReweightError::BadParam(format!("delta {delta} must be non-negative")));
    }
    let uniform = vec![1.0 / n as f64; n];
    if delta <= 1e-15 || n == 1 {
        return Ok(WeightVector(uniform));
    }

    // unconstrained simplex minimum: all mass on the smallest loss
    // (lowest index on ties)
    let argmin = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    let mut vertex = vec![0.0; n];
    vertex[argmin] = 1.0;
    let distinct = losses.iter().any(|&l| l != losses[argmin]);
    if !distinct {
        return Ok(WeightVector(uniform));
    }
    let vertex_div = divergence_from_uniform(kind, &vertex);
    if vertex_div.is_finite() && delta >= vertex_div {
        return Ok(WeightVector(vertex));
    }

    // bracket the multiplier: divergence decreases as t grows
    let attained = |t: f64, warm: &[f64]| -> (Vec<f64>, f64) {
        let w = penalized_min(losses, kind, t, warm);
        let d = divergence_from_uniform(kind, &w);
        (w, d)
    };
    let mut t_lo = 1e-8;
    let mut t_hi = 1.0;
    let mut warm = uniform.clone();
    let (mut w_hi, mut d_hi) = attained(t_hi, &warm);
    let mut guard = 0;
    while d_hi > delta {
        t_lo = t_hi;
        t_hi *= 4.0;
        let r = attained(t_hi, &w_hi);
        w_hi = r.0;
        d_hi = r.1;
        guard += 1;
        if guard > 60 {
            return Err(ReweightError::NoConvergence { residual: d_hi - delta, iters: guard });
        }
    }
    warm = w_hi.clone();
    let mut best = w_hi;
    let mut best_res = (d_hi - delta).abs();
    for _ in 0..90 {
        let t_mid = (t_lo * t_hi).sqrt();
        let (w_mid, d_mid) = attained(t_mid, &warm);
        let res = (d_mid - delta).abs();
        if res < best_res {
            best_res = res;
            best = w_mid.clone();
        }
        if d_mid > delta {
            t_lo = t_mid;
        } else {
            t_hi = t_mid;
        }
        warm = w_mid;
        if (t_hi - t_lo) / t_hi < 1e-14 {
            break;
        }
    }
    Ok(WeightVector(best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_simplex(w: &[f64]) {
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn equal_losses_give_uniform_weights() {
        let w = alpha_weights(&[0.7; 5], 0.1, 0.1).unwrap();
        for &x in w.as_slice() {
            assert!((x - 0.2).abs() <= 1e-12);
        }
        let k = kl_weights(&[0.7; 5], 0.1).unwrap();
        for &x in k.as_slice() {
            assert!((x - 0.2).abs() <= 1e-12);
        }
    }

    #[test]
    fn alpha_weights_hand_value() {
        // bases (0.1, 1.0), exponent -1/0.9
        let w = alpha_weights(&[0.0, 1.0], 0.1, 0.1).unwrap();
        let e = -1.0 / 0.9;
        let (a, b) = (0.1f64.powf(e), 1.0f64.powf(e));
        let expect0 = a / (a + b);
        assert!((w.as_slice()[0] - expect0).abs() <= 1e-12);
        assert!((w.as_slice()[0] - 0.9281).abs() <= 1e-4);
        assert!((w.as_slice()[1] - 0.0719).abs() <= 1e-4);
        assert_simplex(w.as_slice());
    }

    #[test]
    fn large_lambda_approaches_uniform() {
        let losses = [0.0, 0.25, 0.5, 0.75, 1.0];
        let w = alpha_weights(&losses, 0.5, 100.0).unwrap();
        for &x in w.as_slice() {
            assert!((x - 0.2).abs() < 1e-2);
        }
    }

    #[test]
    fn kl_weights_hand_value() {
        let w = kl_weights(&[0.0, 1.0], 0.1).unwrap();
        let z = 1.0 + (-10.0f64).exp();
        assert!((w.as_slice()[0] - 1.0 / z).abs() <= 1e-12);
        assert!((w.as_slice()[1] - (-10.0f64).exp() / z).abs() <= 1e-12);
        assert!((w.as_slice()[0] - 0.9999546).abs() <= 1e-7);
    }

    #[test]
    fn alpha_near_one_approaches_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = rng.gen_range(2..10);
            let losses: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let lambda = 0.1 + rng.gen::<f64>();
            let kl = kl_weights(&losses, lambda).unwrap();
            for alpha in [1.0 - 1e-4, 1.0 + 1e-4] {
                let aw = alpha_weights(&losses, alpha, lambda).unwrap();
                for (a, k) in aw.as_slice().iter().zip(kl.as_slice()) {
                    assert!((a - k).abs() <= 1e-3, "alpha {alpha}: {a} vs {k}");
                }
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(alpha_weights(&[], 0.1, 0.1).is_err());
        assert!(alpha_weights(&[1.0], 1.0, 0.1).is_err());
        assert!(alpha_weights(&[1.0], 0.1, 0.0).is_err());
        assert!(kl_weights(&[1.0], 0.0).is_err());
        // alpha > 1 can push every base below zero -> degenerate batch
        assert!(matches!(
            alpha_weights(&[10.0, 20.0], 2.0, 0.5),
            Err(ReweightError::DegenerateBatch)
        ));
    }

    #[test]
    fn projection_lands_on_simplex() {
        for v in [vec![0.4, 0.3], vec![5.0, -3.0, 1.0], vec![-1.0, -2.0, -3.0], vec![0.25; 4]] {
            let p = project_simplex(&v);
            assert_simplex(&p);
        }
        // already-feasible points are fixed points
        let p = project_simplex(&[0.25, 0.25, 0.5]);
        assert!((p[0] - 0.25).abs() <= 1e-12 && (p[2] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn oracle_boundary_cases() {
        let losses = [0.3, 0.9, 0.1, 0.5];
        let u = oracle_solve(&losses, DivergenceKind::Alpha(0.1), 0.0).unwrap();
        for &x in u.as_slice() {
            assert!((x - 0.25).abs() <= 1e-12);
        }
        // huge budget: all mass on the minimum-loss index
        let v = oracle_solve(&losses, DivergenceKind::Alpha(0.1), 1e9).unwrap();
        assert!((v.as_slice()[2] - 1.0).abs() <= 1e-12);
        // equal losses: uniform regardless of budget
        let e = oracle_solve(&[0.4; 3], DivergenceKind::Kl, 0.5).unwrap();
        for &x in e.as_slice() {
            assert!((x - 1.0 / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn oracle_matches_closed_form_at_attained_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..10 {
            let n = rng.gen_range(2..=8);
            let losses: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
            let w_star = alpha_weights(&losses, 0.1, 0.1).unwrap();
            let delta = divergence_from_uniform(DivergenceKind::Alpha(0.1), w_star.as_slice());
            let oracle = oracle_solve(&losses, DivergenceKind::Alpha(0.1), delta).unwrap();
            for (a, b) in w_star.as_slice().iter().zip(oracle.as_slice()) {
                assert!((a - b).abs() <= 1e-4, "trial {trial}: closed-form {a} vs oracle {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn weights_form_a_simplex(
            losses in proptest::collection::vec(0.0f64..10.0, 1..16),
            alpha in 0.05f64..0.95,
            lambda in 0.01f64..2.0,
        ) {
            assert_simplex(alpha_weights(&losses, alpha, lambda).unwrap().as_slice());
            assert_simplex(kl_weights(&losses, lambda).unwrap().as_slice());
        }

        #[test]
        fn lower_loss_never_gets_lower_weight(
            losses in proptest::collection::vec(0.0f64..10.0, 2..16),
            alpha in 0.05f64..0.95,
            lambda in 0.01f64..2.0,
        ) {
            let w = alpha_weights(&losses, alpha, lambda).unwrap();
            let k = kl_weights(&losses, lambda).unwrap();
            for i in 0..losses.len() {
                for j in 0..losses.len() {
                    if losses[i] <= losses[j] {
                        prop_assert!(w.as_slice()[i] >= w.as_slice()[j] - 1e-12);
                        prop_assert!(k.as_slice()[i] >= k.as_slice()[j] - 1e-12);
                    }
                }
            }
        }

        #[test]
        fn permuting_losses_permutes_weights(
            losses in proptest::collection::vec(0.0f64..10.0, 2..10),
        ) {
            let w = alpha_weights(&losses, 0.1, 0.1).unwrap().into_vec();
            let mut reversed = losses.clone();
            reversed.reverse();
            let wr = alpha_weights(&reversed, 0.1, 0.1).unwrap().into_vec();
            for (i, &x) in w.iter().enumerate() {
                prop_assert!((x - wr[wr.len() - 1 - i]).abs() <= 1e-12);
            }
        }
    }
}
