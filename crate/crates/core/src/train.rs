//! The training loop: burn-in with uniform weights, adaptive reweighting
//! of the soft-deviation and classification losses afterwards, one Adam
//! step per minibatch, and final cue calibration on the training split.

use crate::config::RunConfig;
use crate::dataset::{Provenance, SampleRecord};
use crate::fusion::{entropy_score, fit_calibration, seg_topk_score, CueCalibration, RawCues};
use crate::model::{forward, forward_with_vars, ModelState, PARAM_NAMES};
use crate::objectives::{
    batch_objective, bce_loss_node, focal_loss_node, reference_stats, soft_deviation_loss_node,
    standardize_node, FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::optim::{adam_step, OptimizerState};
use crate::reweight::alpha_weights;
use crate::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}, sample '{sample}'")]
    NonFiniteLoss { epoch: usize, batch: usize, sample: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged { epoch: usize, batch: usize, source: crate::optim::OptimError },
    #[error("graph error: {0}")]
    Graph(#[from] crate::tape::DiffError),
    #[error("objective error: {0}")]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error("reweighting error at epoch {epoch}, batch {batch}: {source}")]
    Reweight { epoch: usize, batch: usize, source: crate::reweight::ReweightError },
    #[error("calibration error: {0}")]
    Calibration(#[from] crate::fusion::FusionError),
    #[error("empty training split")]
    EmptyTrainingSplit,
}

/// Per-batch record kept for diagnostics and invariant checks.
#[derive(Clone, Debug)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub sample_ids: Vec<String>,
    pub truths: Vec<u8>,
    pub provenance: Vec<Provenance>,
    pub l_soft: Vec<f64>,
    pub l_bce: Vec<f64>,
    pub l_focal: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub objective: f64,
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub calibration: CueCalibration,
    pub batch_logs: Vec<BatchLog>,
    /// Raw training-split cues used to fit the calibration.
    pub train_cues: Vec<RawCues>,
}

fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0xd6e8_feb8_6659_fd93) ^ index.wrapping_mul(0xca5a_8263_95121157);
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z ^ (z >> 33)
}

/// Raw (dev, ent, seg) cues of one image under a frozen model.
pub fn raw_cues(state: &ModelState, image: &crate::tensor::Tensor, rho: f64) -> Result<RawCues, crate::tape::DiffError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, image, state, rho)?;
    let s_dev = tape.value(out.s_dev).item();
    let p = tape.value(out.p).item();
    let s_seg = seg_topk_score(tape.value(out.a_map), rho);
    Ok(RawCues { s_dev, s_ent: entropy_score(p), s_seg })
}

/// Trains a fresh model on the given training records per Algorithm-style
/// schedule in the config. Fully deterministic for a fixed config.
pub fn train_run(cfg: &RunConfig, records: &[SampleRecord]) -> Result<TrainOutcome, TrainError> {
    let train_idx: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].provenance.is_training())
        .collect();
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTrainingSplit);
    }
    let t = &cfg.training;
    let mut state = ModelState::init(cfg.model.clone());
    let shapes: Vec<Vec<usize>> = state.params.iter().map(|p| p.shape().to_vec()).collect();
    let mut opt = OptimizerState::new(&shapes, t.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.dataset.seed, 11, 0));
    let mut batch_logs = Vec::new();
    let mut batch_counter: u64 = 0;

    for epoch in 1..=t.epochs {
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (batch_no, chunk) in order.chunks(t.batch_size).enumerate() {
            batch_counter += 1;
            let stats = reference_stats(t.reference_count, stream_seed(cfg.dataset.seed, 13, batch_counter))?;

            let mut tape = Tape::new();
            let param_vars: Vec<_> = state.params.iter().map(|p| tape.leaf(p.clone())).collect();

            let mut soft_nodes = Vec::with_capacity(chunk.len());
            let mut bce_nodes = Vec::with_capacity(chunk.len());
            let mut focal_nodes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let rec = &records[i];
                let s = rec.image.shape();
                let input = tape.leaf(rec.image.clone());
                let out = forward_with_vars(&mut tape, input, &param_vars, s[1], s[2], t.rho)?;
                let p_value = tape.value(out.p).item();
                let z = standardize_node(&mut tape, out.s_dev, &stats);
                soft_nodes.push(soft_deviation_loss_node(&mut tape, z, p_value, t.gamma)?);
                bce_nodes.push(bce_loss_node(&mut tape, out.p, rec.label)?);
                focal_nodes.push(focal_loss_node(&mut tape, out.a_map, &rec.mask, FOCAL_GAMMA, FOCAL_ALPHA)?);
            }

            let l_soft: Vec<f64> = soft_nodes.iter().map(|&v| tape.value(v).item()).collect();
            let l_bce: Vec<f64> = bce_nodes.iter().map(|&v| tape.value(v).item()).collect();
            let l_focal: Vec<f64> = focal_nodes.iter().map(|&v| tape.value(v).item()).collect();
            if let Some(bad) = l_soft
                .iter()
                .chain(&l_bce)
                .chain(&l_focal)
                .position(|v| !v.is_finite())
            {
                let sample = records[chunk[bad % chunk.len()]].id.clone();
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no, sample });
            }

            let b = chunk.len();
            let (w1, w2) = if epoch > t.burn_in {
                let mk = |losses: &[f64]| {
                    alpha_weights(losses, t.alpha, t.lambda)
                        .map(|w| w.into_vec())
                        .map_err(|source| TrainError::Reweight { epoch, batch: batch_no, source })
                };
                (mk(&l_soft)?, mk(&l_bce)?)
            } else {
                (vec![1.0 / b as f64; b], vec![1.0 / b as f64; b])
            };

            let objective = batch_objective(&mut tape, &soft_nodes, &bce_nodes, &focal_nodes, &w1, &w2)?;
            let obj_value = tape.value(objective).item();
            if !obj_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    sample: records[chunk[0]].id.clone(),
                });
            }

            let grads = tape.backward(objective)?;
            let grad_tensors: Vec<_> = param_vars.iter().map(|&v| grads.get(v).clone()).collect();
            adam_step(&mut opt, &mut state.params, &grad_tensors, &PARAM_NAMES)
                .map_err(|source| TrainError::Diverged { epoch, batch: batch_no, source })?;

            batch_logs.push(BatchLog {
                epoch,
                batch: batch_no,
                sample_ids: chunk.iter().map(|&i| records[i].id.clone()).collect(),
                truths: chunk.iter().map(|&i| records[i].truth).collect(),
                provenance: chunk.iter().map(|&i| records[i].provenance).collect(),
                l_soft,
                l_bce,
                l_focal,
                w1: w1.clone(),
                w2: w2.clone(),
                objective: obj_value,
            });
        }
    }

    // calibration on training-split raw cues under the final model
    let mut train_cues = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        train_cues.push(raw_cues(&state, &records[i].image, t.rho)?);
    }
    let calibration = fit_calibration(&train_cues, cfg.fusion.clamp_epsilon)?;

    Ok(TrainOutcome { state, calibration, batch_logs, train_cues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::dataset::{build_dataset, load_manifest, load_records};

    fn tiny_cfg(epochs: usize, burn_in: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset.resolution = 16;
        cfg.dataset.n_nominal = 10;
        cfg.dataset.n_pseudo = 6;
        cfg.dataset.n_fewshot = 2;
        cfg.dataset.n_test_normal = 2;
        cfg.dataset.n_test_anomalous = 2;
        cfg.dataset.seed = 5;
        cfg.training.epochs = epochs;
        cfg.training.batch_size = 4;
        cfg.training.burn_in = burn_in;
        cfg.training.reference_count = 500;
        cfg
    }

    fn tiny_records(cfg: &RunConfig) -> Vec<SampleRecord> {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&cfg.dataset, dir.path()).unwrap();
        let manifest = load_manifest(dir.path()).unwrap();
        load_records(dir.path(), &manifest).unwrap()
    }

    #[test]
    fn burn_in_covering_all_epochs_keeps_weights_uniform() {
        let cfg = tiny_cfg(2, 2);
        let records = tiny_records(&cfg);
        let out = train_run(&cfg, &records).unwrap();
        assert!(!out.batch_logs.is_empty());
        for log in &out.batch_logs {
            let b = log.w1.len();
            for &w in log.w1.iter().chain(&log.w2) {
                assert!((w - 1.0 / b as f64).abs() <= 1e-15, "epoch {} batch {}", log.epoch, log.batch);
            }
        }
    }

    #[test]
    fn reweighting_activates_after_burn_in() {
        let cfg = tiny_cfg(2, 1);
        let records = tiny_records(&cfg);
        let out = train_run(&cfg, &records).unwrap();
        let mut saw_nonuniform = false;
        for log in &out.batch_logs {
            assert!((log.w1.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!((log.w2.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            if log.epoch == 1 {
                let b = log.w1.len() as f64;
                assert!(log.w1.iter().all(|&w| (w - 1.0 / b).abs() <= 1e-15));
            } else {
                // weights follow the closed form and rank inversely to loss
                for i in 0..log.w1.len() {
                    for j in 0..log.w1.len() {
                        if log.l_soft[i] <= log.l_soft[j] {
                            assert!(log.w1[i] >= log.w1[j] - 1e-12);
                        }
                    }
                }
                if log.w1.iter().any(|&w| (w - 1.0 / log.w1.len() as f64).abs() > 1e-6) {
                    saw_nonuniform = true;
                }
            }
        }
        assert!(saw_nonuniform, "reweighting never produced non-uniform weights");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg(1, 2);
        let records = tiny_records(&cfg);
        let a = train_run(&cfg, &records).unwrap();
        let b = train_run(&cfg, &records).unwrap();
        for (pa, pb) in a.state.params.iter().zip(&b.state.params) {
            assert_eq!(pa.data(), pb.data());
        }
        assert_eq!(a.batch_logs.len(), b.batch_logs.len());
        for (la, lb) in a.batch_logs.iter().zip(&b.batch_logs) {
            assert_eq!(la.sample_ids, lb.sample_ids);
            assert_eq!(la.objective, lb.objective);
        }
        assert_eq!(a.calibration.dev, b.calibration.dev);
    }

    #[test]
    fn objective_descends_over_epochs() {
        let mut cfg = tiny_cfg(4, 0);
        cfg.training.learning_rate = 1e-3;
        let records = tiny_records(&cfg);
        let out = train_run(&cfg, &records).unwrap();
        let epoch_mean = |e: usize| {
            let v: Vec<f64> = out.batch_logs.iter().filter(|l| l.epoch == e).map(|l| l.objective).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(epoch_mean(4) < epoch_mean(1), "{} !< {}", epoch_mean(4), epoch_mean(1));
    }

    #[test]
    fn calibration_comes_from_training_split() {
        let cfg = tiny_cfg(1, 2);
        let records = tiny_records(&cfg);
        let out = train_run(&cfg, &records).unwrap();
        let n_train = records.iter().filter(|r| r.provenance.is_training()).count();
        assert_eq!(out.train_cues.len(), n_train);
        assert!(out.calibration.dev.0 < out.calibration.dev.1);
        assert!(out.calibration.ent.0 < out.calibration.ent.1);
        assert!(out.calibration.seg.0 < out.calibration.seg.1);
    }

    #[test]
    fn only_training_samples_enter_batches() {
        let cfg = tiny_cfg(1, 2);
        let records = tiny_records(&cfg);
        let out = train_run(&cfg, &records).unwrap();
        let mut seen = std::collections::HashSet::new();
        for log in &out.batch_logs {
            for p in &log.provenance {
                assert!(p.is_training(), "non-training sample in batch: {p:?}");
            }
            for id in &log.sample_ids {
                seen.insert(id.clone());
            }
        }
        let n_train = records.iter().filter(|r| r.provenance.is_training()).count();
        assert_eq!(seen.len(), n_train);
    }

    #[test]
    fn empty_training_split_is_error() {
        let cfg = tiny_cfg(1, 2);
        let records = tiny_records(&cfg);
        let test_only: Vec<SampleRecord> = records
            .into_iter()
            .filter(|r| !r.provenance.is_training())
            .collect();
        assert!(matches!(train_run(&cfg, &test_only), Err(TrainError::EmptyTrainingSplit)));
    }

    #[test]
    fn raw_cues_are_finite_and_deterministic() {
        let cfg = tiny_cfg(1, 2);
        let records = tiny_records(&cfg);
        let state = ModelState::init(cfg.model.clone());
        let a = raw_cues(&state, &records[0].image, 0.1).unwrap();
        let b = raw_cues(&state, &records[0].image, 0.1).unwrap();
        assert_eq!((a.s_dev, a.s_ent, a.s_seg), (b.s_dev, b.s_ent, b.s_seg));
        assert!(a.s_dev.is_finite() && a.s_ent.is_finite() && a.s_seg.is_finite());
    }
}
