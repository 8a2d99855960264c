//! Ranking metrics: image-level AUROC/AUPRC with midrank tie handling,
//! pooled pixel-level AUROC, and contamination-robustness drop tables.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scored set needs both classes (got {positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scored set needs at least one positive")]
    NoPositives,
    #[error("shape mismatch between maps and ground truth")]
    ShapeMismatch,
}

/// Scores with binary ground truth.
#[derive(Clone, Debug, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub truths: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, truths: Vec<u8>) -> Self {
        assert_eq!(scores.len(), truths.len());
        ScoredSet { scores, truths }
    }

    pub fn push(&mut self, score: f64, truth: u8) {
        self.scores.push(score);
        self.truths.push(truth);
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.truths.iter().filter(|&&t| t == 1).count();
        (pos, self.truths.len() - pos)
    }
}

/// Mann-Whitney AUROC with midrank tie handling.
pub fn auroc(set: &ScoredSet) -> Result<f64, MetricError> {
    let (pos, neg) = set.class_counts();
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass { positives: pos, negatives: neg });
    }
    let mut idx: Vec<usize> = (0..set.scores.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && set.scores[idx[j]] == set.scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; tied scores share the midrank of their block
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if set.truths[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// Average precision over descending-score thresholds, ties processed as
/// one group.
pub fn auprc(set: &ScoredSet) -> Result<f64, MetricError> {
    let (pos, _neg) = set.class_counts();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut idx: Vec<usize> = (0..set.scores.len()).collect();
    idx.sort_by(|&a, &b| set.scores[b].partial_cmp(&set.scores[a]).unwrap());
    let p = pos as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && set.scores[idx[j]] == set.scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            if set.truths[k] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / p;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Pools all pixels of all maps into one scored set, then AUROC.
pub fn pixel_auroc(maps: &[Tensor], ground_truth: &[Tensor]) -> Result<f64, MetricError> {
    if maps.len() != ground_truth.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let mut set = ScoredSet::default();
    for (map, gt) in maps.iter().zip(ground_truth) {
        if map.len() != gt.len() {
            return Err(MetricError::ShapeMismatch);
        }
        for (&s, &t) in map.data().iter().zip(gt.data()) {
            set.push(s, if t > 0.5 { 1 } else { 0 });
        }
    }
    auroc(&set)
}

/// Percent drop between consecutive contamination levels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DropRow {
    pub epsilon_from: f64,
    pub epsilon_to: f64,
    pub drop_percent: f64,
}

/// Expects (epsilon, metric) pairs; emits 100 (m_prev - m_next) / m_prev per
/// consecutive pair in ascending epsilon order.
pub fn robustness_table(per_epsilon: &[(f64, f64)]) -> Vec<DropRow> {
    let mut sorted = per_epsilon.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    sorted
        .windows(2)
        .map(|w| DropRow {
            epsilon_from: w[0].0,
            epsilon_to: w[1].0,
            drop_percent: 100.0 * (w[0].1 - w[1].1) / w[0].1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) pairwise AUROC: fraction of (positive, negative) pairs ranked
    /// correctly, ties worth one half.
    fn auroc_brute(set: &ScoredSet) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &ti) in set.truths.iter().enumerate() {
            if ti != 1 {
                continue;
            }
            for (j, &tj) in set.truths.iter().enumerate() {
                if tj != 0 {
                    continue;
                }
                den += 1.0;
                if set.scores[i] > set.scores[j] {
                    num += 1.0;
                } else if set.scores[i] == set.scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    /// Threshold-sweep AUPRC recomputed from scratch at every distinct score.
    fn auprc_brute(set: &ScoredSet) -> f64 {
        let mut thresholds: Vec<f64> = set.scores.clone();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = set.truths.iter().filter(|&&t| t == 1).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &y) in set.scores.iter().zip(&set.truths) {
                if s >= t {
                    if y == 1 { tp += 1.0 } else { fp += 1.0 }
                }
            }
            let recall = tp / pos;
            ap += (recall - prev_recall) * (tp / (tp + fp));
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn auroc_hand_values() {
        let set = ScoredSet::new(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1]);
        assert_eq!(auroc(&set).unwrap(), 0.75);
        let perfect = ScoredSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1]);
        assert_eq!(auroc(&perfect).unwrap(), 1.0);
        let inverted = ScoredSet::new(vec![0.9, 0.8, 0.1, 0.2], vec![0, 0, 1, 1]);
        assert_eq!(auroc(&inverted).unwrap(), 0.0);
        let all_tied = ScoredSet::new(vec![0.5; 6], vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(auroc(&all_tied).unwrap(), 0.5);
    }

    #[test]
    fn auprc_hand_values() {
        let set = ScoredSet::new(vec![0.9, 0.8, 0.7], vec![1, 0, 1]);
        assert!((auprc(&set).unwrap() - (0.5 + 1.0 / 3.0)).abs() <= 1e-12);
        // single positive ranked last scores 1/n
        for n in [2usize, 5, 9] {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let mut truths = vec![0u8; n];
            truths[n - 1] = 1;
            let set = ScoredSet::new(scores, truths);
            assert!((auprc(&set).unwrap() - 1.0 / n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(
            auroc(&ScoredSet::new(vec![0.1, 0.2], vec![1, 1])),
            Err(MetricError::SingleClass { .. })
        ));
        assert!(matches!(
            auprc(&ScoredSet::new(vec![0.1, 0.2], vec![0, 0])),
            Err(MetricError::NoPositives)
        ));
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let n = rng.gen_range(2..50);
            // quantized scores force tie blocks
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 10.0).round() / 10.0).collect();
            let mut truths: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            // guarantee both classes
            truths[0] = 1;
            truths[n - 1] = 0;
            let set = ScoredSet::new(scores, truths);
            let fast = auroc(&set).unwrap();
            let slow = auroc_brute(&set);
            assert!((fast - slow).abs() <= 1e-12, "trial {trial}: auroc {fast} vs {slow}");
            let fast_pr = auprc(&set).unwrap();
            let slow_pr = auprc_brute(&set);
            assert!((fast_pr - slow_pr).abs() <= 1e-12, "trial {trial}: auprc {fast_pr} vs {slow_pr}");
        }
    }

    #[test]
    fn pixel_auroc_pools_maps() {
        let maps = vec![
            Tensor::new(vec![1, 1, 2], vec![0.9, 0.1]),
            Tensor::new(vec![1, 1, 2], vec![0.8, 0.2]),
        ];
        let gt = vec![
            Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]),
            Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]),
        ];
        assert_eq!(pixel_auroc(&maps, &gt).unwrap(), 1.0);
        let pooled = ScoredSet::new(vec![0.9, 0.1, 0.8, 0.2], vec![1, 0, 1, 0]);
        assert_eq!(pixel_auroc(&maps, &gt).unwrap(), auroc(&pooled).unwrap());
        assert!(matches!(pixel_auroc(&maps, &gt[..1]), Err(MetricError::ShapeMismatch)));
    }

    #[test]
    fn drop_table_hand_value() {
        let rows = robustness_table(&[(0.05, 0.95), (0.10, 0.931)]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].drop_percent - 2.0).abs() <= 1e-9);
        assert_eq!((rows[0].epsilon_from, rows[0].epsilon_to), (0.05, 0.10));
        // unsorted input is sorted by epsilon first
        let rows = robustness_table(&[(0.15, 0.90), (0.05, 1.0), (0.10, 0.95)]);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].drop_percent - 5.0).abs() <= 1e-9);
    }

    proptest! {
        #[test]
        fn auroc_in_unit_interval_and_complement_symmetric(
            scores in proptest::collection::vec(0.0f64..1.0, 2..30),
        ) {
            let n = scores.len();
            let mut truths = vec![0u8; n];
            truths[0] = 1;
            let set = ScoredSet::new(scores.clone(), truths.clone());
            let a = auroc(&set).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            // flipping labels mirrors the metric
            let flipped: Vec<u8> = truths.iter().map(|&t| 1 - t).collect();
            let b = auroc(&ScoredSet::new(scores, flipped)).unwrap();
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            scores in proptest::collection::vec(0.0f64..1.0, 4..30),
        ) {
            let n = scores.len();
            let truths: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let a = auroc(&ScoredSet::new(scores.clone(), truths.clone())).unwrap();
            let warped: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp()).collect();
            let b = auroc(&ScoredSet::new(warped, truths)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
