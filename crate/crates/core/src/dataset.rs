//! Synthetic dataset construction: normal textures, Perlin-mask
//! pseudo-anomalies, few-shot real-anomaly stand-ins, contaminated
//! nominal records and a disjoint labeled test split.

use crate::perlin::perlin_field;
use crate::pnm::{self, PnmError};
use crate::tensor::Tensor;
use crate::texture::{generate_normal_texture, TextureFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid dataset config: {0}")]
    BadConfig(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Nominal,
    Pseudo,
    Fewshot,
    Contaminant,
    TestNormal,
    TestAnomalous,
}

impl Provenance {
    pub fn is_training(self) -> bool {
        !matches!(self, Provenance::TestNormal | Provenance::TestAnomalous)
    }
}

/// One dataset item in memory.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub image: Tensor,
    pub mask: Tensor,
    /// Training-view label; contaminants carry 0 here.
    pub label: u8,
    /// Evaluation-only ground truth; 1 for contaminants and anomalies.
    pub truth: u8,
    pub provenance: Provenance,
    pub id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub resolution: usize,
    pub n_nominal: usize,
    pub n_pseudo: usize,
    pub n_fewshot: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub texture_family: TextureFamily,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            resolution: 64,
            n_nominal: 200,
            n_pseudo: 200,
            n_fewshot: 10,
            epsilon: 0.10,
            seed: 7,
            texture_family: TextureFamily::Stripes,
            n_test_normal: 60,
            n_test_anomalous: 60,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub nominal: usize,
    pub pseudo: usize,
    pub fewshot: usize,
    pub contaminant: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub mask_path: String,
    pub label: u8,
    pub provenance: Provenance,
    pub truth: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub resolution: usize,
    pub epsilon: f64,
    pub counts: ManifestCounts,
    pub records: Vec<ManifestRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Pseudo-anomaly composite: (1-M).I_n + beta(M.I_src) + (1-beta)(M.I_n).
/// Pixels outside the mask are bit-identical to the normal image.
pub fn composite_pseudo_anomaly(
    normal: &Tensor,
    source: &Tensor,
    mask: &Tensor,
    beta: f64,
) -> Result<Tensor, DatasetError> {
    let s = normal.shape();
    if source.shape() != s {
        return Err(DatasetError::BadConfig(format!(
            "source shape {:?} != normal shape {:?}",
            source.shape(),
            s
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if mask.shape() != [1, h, w] {
        return Err(DatasetError::BadConfig(format!(
            "mask shape {:?} incompatible with image {:?}",
            mask.shape(),
            s
        )));
    }
    let mut out = normal.clone();
    let m = mask.data();
    for ch in 0..c {
        let base = ch * h * w;
        for j in 0..h * w {
            if m[j] > 0.5 {
                let n = normal.data()[base + j];
                let src = source.data()[base + j];
                out.data_mut()[base + j] = beta * src + (1.0 - beta) * n;
            }
        }
    }
    Ok(out)
}

/// Binary defect mask from a fresh coarse Perlin field. The threshold is
/// drawn uniformly from [0.3, 0.7] of the field's positive range and
/// resampled until the mask covers between 15% and 40% of pixels.
pub fn defect_mask(seed: u64, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut field_seed = seed;
    loop {
        // coarse lattice -> a few compact blobs rather than speckle
        let field = perlin_field(field_seed, h, w, (h.min(w) / 2).max(2)).unwrap();
        let max = field.max();
        if max > 0.0 {
            // a handful of threshold draws per field before regenerating
            for _ in 0..8 {
                let t = max * (0.3 + 0.4 * rng.gen::<f64>());
                let mask = field.map(|v| if v > t { 1.0 } else { 0.0 });
                let area = mask.data().iter().sum::<f64>() / (h * w) as f64;
                // lower bound sits above the top-k pooling ratio so defects
                // can fill the pooled set on their own
                if (0.15..=0.40).contains(&area) {
                    return mask;
                }
            }
        }
        field_seed = field_seed.wrapping_add(0x5851_f42d_4c95_7f2d);
    }
}

/// Per-record seed: mixes the config seed, a stream tag and the record index.
fn record_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_NOMINAL: u64 = 1;
const STREAM_PSEUDO: u64 = 2;
const STREAM_FEWSHOT: u64 = 3;
const STREAM_TEST_NORMAL: u64 = 4;
const STREAM_TEST_ANOM: u64 = 5;
const STREAM_SELECT: u64 = 6;

fn family_rotation(f: TextureFamily) -> (TextureFamily, TextureFamily, TextureFamily) {
    use TextureFamily::*;
    match f {
        Stripes => (Stripes, Blobs, Grid),
        Blobs => (Blobs, Grid, Stripes),
        Grid => (Grid, Stripes, Blobs),
    }
}

/// Generated sample before it is written to disk.
struct GenRecord {
    image: Tensor,
    mask: Tensor,
    label: u8,
    truth: u8,
    provenance: Provenance,
    name: String,
}

/// A "real" anomaly stand-in: normal texture with a defect composited from
/// the real-anomaly source family. Used for few-shot, contaminant and
/// test-anomalous records; its seed stream keeps them disjoint.
fn real_anomaly(cfg: &DatasetConfig, stream: u64, index: u64) -> (Tensor, Tensor) {
    let (normal_fam, _pseudo_src, real_src) = family_rotation(cfg.texture_family);
    let seed = record_seed(cfg.seed, stream, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = generate_normal_texture(normal_fam, rng.gen(), cfg.resolution, cfg.resolution);
    let source = generate_normal_texture(real_src, rng.gen(), cfg.resolution, cfg.resolution);
    let mask = defect_mask(rng.gen(), cfg.resolution, cfg.resolution, &mut rng);
    // stronger opacity than pseudo-anomalies so stand-ins read as real defects
    let beta = 0.6 + 0.4 * rng.gen::<f64>();
    let image = composite_pseudo_anomaly(&normal, &source, &mask, beta).unwrap();
    (image, mask)
}

fn generate_records(cfg: &DatasetConfig) -> (Vec<GenRecord>, Vec<String>) {
    let (normal_fam, pseudo_src, real_src) = family_rotation(cfg.texture_family);
    let r = cfg.resolution;
    let mut warnings = Vec::new();
    let mut records = Vec::new();

    // which nominal indices become contaminants
    let n_contaminant = (cfg.epsilon * cfg.n_nominal as f64).round() as usize;
    if cfg.epsilon > 0.0 && n_contaminant == 0 {
        warnings.push(format!(
            "epsilon {} with N {} yields zero contaminants",
            cfg.epsilon, cfg.n_nominal
        ));
    }
    let mut indices: Vec<usize> = (0..cfg.n_nominal).collect();
    let mut sel_rng = ChaCha8Rng::seed_from_u64(record_seed(cfg.seed, STREAM_SELECT, 0));
    for i in (1..indices.len()).rev() {
        let j = sel_rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let contaminated: std::collections::HashSet<usize> =
        indices.into_iter().take(n_contaminant).collect();

    for i in 0..cfg.n_nominal {
        if contaminated.contains(&i) {
            let (anomalous, _mask) = real_anomaly(cfg, STREAM_NOMINAL, i as u64);
            let noise_seed = record_seed(cfg.seed, STREAM_NOMINAL, i as u64) ^ 0xace1;
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let mut image = anomalous;
            for v in image.data_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + 0.1 * n).clamp(0.0, 1.0);
            }
            records.push(GenRecord {
                image,
                mask: Tensor::zeros(vec![1, r, r]),
                label: 0,
                truth: 1,
                provenance: Provenance::Contaminant,
                name: format!("nominal_{i:04}"),
            });
        } else {
            let seed = record_seed(cfg.seed, STREAM_NOMINAL, i as u64);
            let image = generate_normal_texture(normal_fam, seed, r, r);
            records.push(GenRecord {
                image,
                mask: Tensor::zeros(vec![1, r, r]),
                label: 0,
                truth: 0,
                provenance: Provenance::Nominal,
                name: format!("nominal_{i:04}"),
            });
        }
    }

    for i in 0..cfg.n_pseudo {
        let seed = record_seed(cfg.seed, STREAM_PSEUDO, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = generate_normal_texture(normal_fam, rng.gen(), r, r);
        // source material alternates between both non-normal families so the
        // pseudo-anomaly distribution covers the defect appearance space
        let src_fam = if rng.gen::<bool>() { pseudo_src } else { real_src };
        let source = generate_normal_texture(src_fam, rng.gen(), r, r);
        let mask = defect_mask(rng.gen(), r, r, &mut rng);
        // floor keeps pseudo defects visible enough that their masks are
        // honest supervision for the segmentation head
        let beta = 0.4 + 0.6 * rng.gen::<f64>();
        let image = composite_pseudo_anomaly(&normal, &source, &mask, beta).unwrap();
        records.push(GenRecord {
            image,
            mask,
            label: 1,
            truth: 1,
            provenance: Provenance::Pseudo,
            name: format!("pseudo_{i:04}"),
        });
    }

    for i in 0..cfg.n_fewshot {
        let (image, mask) = real_anomaly(cfg, STREAM_FEWSHOT, i as u64);
        records.push(GenRecord {
            image,
            mask,
            label: 1,
            truth: 1,
            provenance: Provenance::Fewshot,
            name: format!("fewshot_{i:04}"),
        });
    }

    for i in 0..cfg.n_test_normal {
        let seed = record_seed(cfg.seed, STREAM_TEST_NORMAL, i as u64);
        let image = generate_normal_texture(normal_fam, seed, r, r);
        records.push(GenRecord {
            image,
            mask: Tensor::zeros(vec![1, r, r]),
            label: 0,
            truth: 0,
            provenance: Provenance::TestNormal,
            name: format!("test_normal_{i:04}"),
        });
    }

    for i in 0..cfg.n_test_anomalous {
        let (image, mask) = real_anomaly(cfg, STREAM_TEST_ANOM, i as u64);
        records.push(GenRecord {
            image,
            mask,
            label: 1,
            truth: 1,
            provenance: Provenance::TestAnomalous,
            name: format!("test_anom_{i:04}"),
        });
    }

    (records, warnings)
}

/// Builds the dataset under `out_dir`: PPM images, PGM masks and
/// `manifest.json`. Fully deterministic per config.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest, DatasetError> {
    if !(0.0..=0.25).contains(&cfg.epsilon) {
        return Err(DatasetError::BadConfig(format!("epsilon {} outside [0, 0.25]", cfg.epsilon)));
    }
    if cfg.resolution < 8 {
        return Err(DatasetError::BadConfig("resolution must be >= 8".into()));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| DatasetError::Io { path: d.display().to_string(), source: e })?;
    }

    let (records, warnings) = generate_records(cfg);
    let mut counts = ManifestCounts {
        nominal: 0,
        pseudo: 0,
        fewshot: 0,
        contaminant: 0,
        test_normal: 0,
        test_anomalous: 0,
    };
    let mut manifest_records = Vec::with_capacity(records.len());
    for rec in &records {
        match rec.provenance {
            Provenance::Nominal => counts.nominal += 1,
            Provenance::Contaminant => {
                counts.nominal += 1;
                counts.contaminant += 1;
            }
            Provenance::Pseudo => counts.pseudo += 1,
            Provenance::Fewshot => counts.fewshot += 1,
            Provenance::TestNormal => counts.test_normal += 1,
            Provenance::TestAnomalous => counts.test_anomalous += 1,
        }
        let img_rel = format!("images/{}.ppm", rec.name);
        let mask_rel = format!("masks/{}.pgm", rec.name);
        pnm::write_ppm(&out_dir.join(&img_rel), &rec.image)?;
        pnm::write_pgm(&out_dir.join(&mask_rel), &rec.mask)?;
        manifest_records.push(ManifestRecord {
            path: img_rel,
            mask_path: mask_rel,
            label: rec.label,
            provenance: rec.provenance,
            truth: rec.truth,
        });
    }

    let manifest = DatasetManifest {
        seed: cfg.seed,
        resolution: cfg.resolution,
        epsilon: cfg.epsilon,
        counts,
        records: manifest_records,
        warnings,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = out_dir.join("manifest.json");
    fs::write(&mpath, json).map_err(|e| DatasetError::Io { path: mpath.display().to_string(), source: e })?;
    Ok(manifest)
}

pub fn load_manifest(data_dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let mpath = data_dir.join("manifest.json");
    let text = fs::read_to_string(&mpath)
        .map_err(|e| DatasetError::Io { path: mpath.display().to_string(), source: e })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))
}

/// Loads every record referenced by the manifest into memory, in manifest order.
pub fn load_records(data_dir: &Path, manifest: &DatasetManifest) -> Result<Vec<SampleRecord>, DatasetError> {
    manifest
        .records
        .iter()
        .map(|r| {
            let image = pnm::read_ppm(&data_dir.join(&r.path))?;
            let mask = pnm::read_pgm(&data_dir.join(&r.mask_path))?;
            // binarize: stored masks are 0/255
            let mask = mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let id = PathBuf::from(&r.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| r.path.clone());
            Ok(SampleRecord {
                image,
                mask,
                label: r.label,
                truth: r.truth,
                provenance: r.provenance,
                id,
            })
        })
        .collect()
}
