//! Orchestration: dataset generation, training runs, scoring, heatmap
//! emission, evaluation reports and contamination sweeps.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{build_dataset, load_manifest, load_records, SampleRecord};
use crate::fusion::{score_cues, CueCalibration, CueScores};
use crate::localization::{localize, threshold_at_quantile};
use crate::metrics::{auprc, auroc, pixel_auroc, robustness_table, DropRow, ScoredSet};
use crate::model::ModelState;
use crate::pnm;
use crate::train::{raw_cues, train_run, TrainOutcome};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const SCORES_CSV_HEADER: &str = "id,label,s_dev,s_ent,s_seg,s_dev_n,s_ent_n,s_seg_n,s_fused";

/// Everything a finished run leaves on disk.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub calibration: PathBuf,
    pub config: PathBuf,
    pub log: PathBuf,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Generates the dataset described by the config under `out_dir`.
pub fn run_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let manifest = build_dataset(&cfg.dataset, out_dir).context("dataset generation failed")?;
    for warning in &manifest.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

/// Trains on `data_dir` and persists checkpoint, calibration, resolved
/// config and the batch log under `out_dir`.
pub fn run_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<(RunArtifacts, TrainOutcome)> {
    let manifest = load_manifest(data_dir)?;
    let records = load_records(data_dir, &manifest)?;
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;

    let outcome = train_run(cfg, &records)?;

    let artifacts = RunArtifacts {
        run_dir: out_dir.to_path_buf(),
        checkpoint: out_dir.join("checkpoint.bin"),
        calibration: out_dir.join("calibration.json"),
        config: out_dir.join("config.json"),
        log: out_dir.join("train_log.csv"),
    };
    checkpoint::save(&artifacts.checkpoint, &outcome.state)?;
    fs::write(
        &artifacts.calibration,
        serde_json::to_string_pretty(&outcome.calibration)?,
    )?;
    fs::write(&artifacts.config, serde_json::to_string_pretty(cfg)?)?;
    let mut log = String::from("epoch,batch,objective\n");
    for b in &outcome.batch_logs {
        log.push_str(&format!("{},{},{}\n", b.epoch, b.batch, fmt17(b.objective)));
    }
    fs::write(&artifacts.log, log)?;
    Ok((artifacts, outcome))
}

/// A loaded run directory.
pub struct LoadedRun {
    pub config: RunConfig,
    pub state: ModelState,
    pub calibration: CueCalibration,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let config: RunConfig = serde_json::from_str(
        &fs::read_to_string(run_dir.join("config.json"))
            .with_context(|| format!("missing config.json in {}", run_dir.display()))?,
    )?;
    let state = checkpoint::load(&run_dir.join("checkpoint.bin"))?;
    let calibration: CueCalibration = serde_json::from_str(
        &fs::read_to_string(run_dir.join("calibration.json"))
            .with_context(|| format!("missing calibration.json in {}", run_dir.display()))?,
    )?;
    Ok(LoadedRun { config, state, calibration })
}

fn test_records(records: Vec<SampleRecord>) -> Vec<SampleRecord> {
    records
        .into_iter()
        .filter(|r| !r.provenance.is_training())
        .collect()
}

/// One scored test image.
#[derive(Clone, Debug)]
pub struct ScoreRow {
    pub id: String,
    pub truth: u8,
    pub cues: CueScores,
}

/// Scores every test record in manifest order.
pub fn score_test_split(run: &LoadedRun, records: &[SampleRecord]) -> Result<Vec<ScoreRow>> {
    let rho = run.config.training.rho;
    let weights = run.config.fusion.weights();
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        if rec.image.shape()[1] != run.config.dataset.resolution {
            anyhow::bail!(
                "resolution mismatch: image '{}' is {}x{} but the checkpoint was trained at {}",
                rec.id,
                rec.image.shape()[1],
                rec.image.shape()[2],
                run.config.dataset.resolution
            );
        }
        let raw = raw_cues(&run.state, &rec.image, rho)?;
        let cues = score_cues(raw, &run.calibration, &weights)?;
        rows.push(ScoreRow { id: rec.id.clone(), truth: rec.truth, cues });
    }
    Ok(rows)
}

pub fn scores_to_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from(SCORES_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let c = &r.cues;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.truth,
            fmt17(c.s_dev),
            fmt17(c.s_ent),
            fmt17(c.s_seg),
            fmt17(c.s_dev_n),
            fmt17(c.s_ent_n),
            fmt17(c.s_seg_n),
            fmt17(c.fused)
        ));
    }
    out
}

/// `score` subcommand: emits scores.csv into the run directory.
pub fn run_score(run_dir: &Path, data_dir: &Path) -> Result<Vec<ScoreRow>> {
    let run = load_run(run_dir)?;
    let manifest = load_manifest(data_dir)?;
    let records = test_records(load_records(data_dir, &manifest)?);
    let rows = score_test_split(&run, &records)?;
    fs::write(run_dir.join("scores.csv"), scores_to_csv(&rows))?;
    Ok(rows)
}

/// `localize` subcommand: emits heatmap and predicted-mask PGMs.
pub fn run_localize(run_dir: &Path, data_dir: &Path) -> Result<()> {
    let run = load_run(run_dir)?;
    let manifest = load_manifest(data_dir)?;
    let records = test_records(load_records(data_dir, &manifest)?);
    let heat_dir = run_dir.join("heatmaps");
    let mask_dir = run_dir.join("pred_masks");
    fs::create_dir_all(&heat_dir)?;
    fs::create_dir_all(&mask_dir)?;
    for rec in &records {
        let map = localize(
            &rec.image,
            &run.state,
            run.config.training.rho,
            run.config.localization.sigma_blur,
        )?;
        pnm::write_pgm(&heat_dir.join(format!("{}.pgm", rec.id)), &map)?;
        let mask = threshold_at_quantile(&map, run.config.localization.mask_quantile);
        pnm::write_pgm(&mask_dir.join(format!("{}.pgm", rec.id)), &mask)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub epsilon: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub pixel_auroc: f64,
    pub auroc_dev: f64,
    pub auroc_ent: f64,
    pub auroc_seg: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportTiming {
    pub generated_at_unix: u64,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub per_epsilon: Vec<EvalSummary>,
    pub image_auroc_drops: Vec<DropRow>,
    pub pixel_auroc_drops: Vec<DropRow>,
    pub timing: ReportTiming,
}

fn summarize(
    epsilon: f64,
    rows: &[ScoreRow],
    maps: &[crate::tensor::Tensor],
    gts: &[crate::tensor::Tensor],
) -> Result<EvalSummary> {
    let truths: Vec<u8> = rows.iter().map(|r| r.truth).collect();
    let set = |pick: fn(&CueScores) -> f64| {
        ScoredSet::new(rows.iter().map(|r| pick(&r.cues)).collect(), truths.clone())
    };
    Ok(EvalSummary {
        epsilon,
        auroc: auroc(&set(|c| c.fused))?,
        auprc: auprc(&set(|c| c.fused))?,
        pixel_auroc: pixel_auroc(maps, gts)?,
        auroc_dev: auroc(&set(|c| c.s_dev))?,
        auroc_ent: auroc(&set(|c| c.s_ent))?,
        auroc_seg: auroc(&set(|c| c.s_seg))?,
    })
}

fn histogram_csv(rows: &[ScoreRow]) -> String {
    const BINS: usize = 20;
    let mut nominal = [0usize; BINS];
    let mut anomalous = [0usize; BINS];
    for r in rows {
        let bin = ((r.cues.fused * BINS as f64) as usize).min(BINS - 1);
        if r.truth == 1 {
            anomalous[bin] += 1;
        } else {
            nominal[bin] += 1;
        }
    }
    let mut out = String::from("bin_lo,bin_hi,nominal_count,anomalous_count\n");
    for b in 0..BINS {
        out.push_str(&format!(
            "{},{},{},{}\n",
            b as f64 / BINS as f64,
            (b + 1) as f64 / BINS as f64,
            nominal[b],
            anomalous[b]
        ));
    }
    out
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Evaluates one run directory against one dataset; returns the summary
/// and writes report.json + histogram.csv.
pub fn run_eval(run_dir: &Path, data_dir: &Path) -> Result<Report> {
    let started = Instant::now();
    let run = load_run(run_dir)?;
    let manifest = load_manifest(data_dir)?;
    let records = test_records(load_records(data_dir, &manifest)?);
    let rows = score_test_split(&run, &records)?;

    let mut maps = Vec::with_capacity(records.len());
    let mut gts = Vec::with_capacity(records.len());
    for rec in &records {
        maps.push(localize(
            &rec.image,
            &run.state,
            run.config.training.rho,
            run.config.localization.sigma_blur,
        )?);
        gts.push(rec.mask.clone());
    }

    let summary = summarize(manifest.epsilon, &rows, &maps, &gts)?;
    let report = Report {
        config_digest: run.config.digest(),
        per_epsilon: vec![summary],
        image_auroc_drops: vec![],
        pixel_auroc_drops: vec![],
        timing: ReportTiming {
            generated_at_unix: now_unix(),
            runtime_seconds: started.elapsed().as_secs_f64(),
        },
    };
    fs::write(run_dir.join("report.json"), report_json(&report)?)?;
    fs::write(run_dir.join("histogram.csv"), histogram_csv(&rows))?;
    Ok(report)
}

/// Serializes a report with the volatile timing block on its own lines so
/// reruns differ only there.
pub fn report_json(report: &Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Full robustness sweep: per epsilon, gen-data + train + score + eval in
/// a subdirectory, then a combined report with drop tables.
pub fn run_sweep(cfg: &RunConfig, out_dir: &Path, epsilons: &[f64]) -> Result<Report> {
    let started = Instant::now();
    anyhow::ensure!(epsilons.len() >= 2, "sweep needs at least two epsilon values");
    fs::create_dir_all(out_dir)?;
    let mut summaries = Vec::new();
    for &eps in epsilons {
        let mut sub_cfg = cfg.clone();
        sub_cfg.dataset.epsilon = eps;
        let leg_dir = out_dir.join(format!("eps_{eps:.2}"));
        let data_dir = leg_dir.join("data");
        let run_dir = leg_dir.join("run");
        run_gen_data(&sub_cfg, &data_dir)?;
        run_train(&sub_cfg, &data_dir, &run_dir)?;
        run_score(&run_dir, &data_dir)?;
        let report = run_eval(&run_dir, &data_dir)?;
        summaries.push(report.per_epsilon[0].clone());
    }
    let image_pairs: Vec<(f64, f64)> = summaries.iter().map(|s| (s.epsilon, s.auroc)).collect();
    let pixel_pairs: Vec<(f64, f64)> = summaries.iter().map(|s| (s.epsilon, s.pixel_auroc)).collect();
    let report = Report {
        config_digest: cfg.digest(),
        per_epsilon: summaries,
        image_auroc_drops: robustness_table(&image_pairs),
        pixel_auroc_drops: robustness_table(&pixel_pairs),
        timing: ReportTiming {
            generated_at_unix: now_unix(),
            runtime_seconds: started.elapsed().as_secs_f64(),
        },
    };
    fs::write(out_dir.join("report.json"), report_json(&report)?)?;
    Ok(report)
}

/// `weights-demo` CSV: one (loss, weight) row per batch entry.
pub fn weights_table_csv(losses: &[f64], weights: &[f64]) -> String {
    let mut out = String::from("loss,weight\n");
    for (l, w) in losses.iter().zip(weights) {
        out.push_str(&format!("{},{}\n", fmt17(*l), fmt17(*w)));
    }
    out
}
