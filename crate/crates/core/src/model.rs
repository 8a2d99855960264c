//! The trainable network: three-block convolutional encoder, multi-scale
//! feature fusion, and the deviation / uncertainty / segmentation heads.

use crate::tape::{DiffError, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder block widths; each block is conv3x3 stride-2 pad-1 + relu.
    pub channels: [usize; 3],
    /// Hidden width of the three heads.
    pub head_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { channels: [16, 32, 64], head_hidden: 16, init_seed: 1 }
    }
}

impl ModelConfig {
    pub fn fused_channels(&self) -> usize {
        self.channels.iter().sum()
    }
}

// Parameter layout; order is the checkpoint and optimizer order.
pub const PARAM_NAMES: [&str; 18] = [
    "enc1_w", "enc1_b", "enc2_w", "enc2_b", "enc3_w", "enc3_b",
    "dev1_w", "dev1_b", "dev2_w", "dev2_b",
    "unc1_w", "unc1_b", "unc2_w", "unc2_b",
    "seg1_w", "seg1_b", "seg2_w", "seg2_b",
];

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

impl ModelState {
    /// He-style fan-in-scaled uniform init for weights, zeros for biases,
    /// drawn from a seeded stream in fixed parameter order.
    pub fn init(config: ModelConfig) -> Self {
        let [c1, c2, c3] = config.channels;
        let fc = config.fused_channels();
        let hh = config.head_hidden;
        let shapes: Vec<Vec<usize>> = vec![
            vec![c1, 3, 3, 3], vec![c1],
            vec![c2, c1, 3, 3], vec![c2],
            vec![c3, c2, 3, 3], vec![c3],
            vec![hh, fc, 1, 1], vec![hh],
            vec![1, hh, 1, 1], vec![1],
            vec![hh, fc], vec![hh, 1],
            vec![1, hh], vec![1, 1],
            vec![hh, fc, 1, 1], vec![hh],
            vec![1, hh, 3, 3], vec![1],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                // weights and biases strictly alternate in PARAM_NAMES order
                let is_bias = i % 2 == 1;
                if is_bias {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let mut limit = (6.0 / fan_in as f64).sqrt();
                    // deviation output layer starts near zero so nominal
                    // images begin with s_dev ~ 0 and the margin loss has a
                    // clean reference point to push anomalies away from
                    if PARAM_NAMES[i] == "dev2_w" {
                        limit *= 0.01;
                    }
                    let data = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit).collect();
                    Tensor::new(shape, data)
                }
            })
            .collect();
        ModelState { config, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput {
    /// Input image leaf (3HW).
    pub input: Var,
    /// Last encoder block activation, retained for attribution.
    pub feat_last: Var,
    /// Fused multi-scale features.
    pub f_co: Var,
    /// Flattened patch scores over the block-1 grid.
    pub psi: Var,
    /// Top-k pooled deviation score (scalar).
    pub s_dev: Var,
    /// Anomaly probability in (0,1) (scalar).
    pub p: Var,
    /// Segmentation map 1HW in (0,1) at input resolution.
    pub a_map: Var,
    /// Parameter leaves in PARAM_NAMES order.
    pub param_vars: Vec<Var>,
}

/// Runs the full forward pass on `tape`, registering the image and all
/// parameters as leaves. `rho` is the top-k ratio of the deviation score.
pub fn forward(
    tape: &mut Tape,
    image: &Tensor,
    state: &ModelState,
    rho: f64,
) -> Result<ForwardOutput, DiffError> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "expected 3HW image, got {s:?}");
    let (h, w) = (s[1], s[2]);
    let input = tape.leaf(image.clone());
    let param_vars: Vec<Var> = state.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = forward_with_vars(tape, input, &param_vars, h, w, rho)?;
    Ok(ForwardOutput { param_vars, ..out })
}

/// Forward pass over already-registered leaves; used when several images
/// share one tape (a minibatch shares one set of parameter leaves).
pub fn forward_with_vars(
    tape: &mut Tape,
    input: Var,
    param_vars: &[Var],
    h: usize,
    w: usize,
    rho: f64,
) -> Result<ForwardOutput, DiffError> {
    let pv = |i: usize| param_vars[i];
    let conv_block = |tape: &mut Tape, x: Var, wi: usize, stride: usize, pad: usize| -> Result<Var, DiffError> {
        let c = tape.conv2d(x, pv(wi), stride, pad)?;
        let cb = tape.add_channel_bias(c, pv(wi + 1))?;
        Ok(tape.relu(cb))
    };

    // center pixel values so encoder inputs are roughly zero-mean
    let centered = tape.add_scalar(input, -0.5);
    let f1 = conv_block(tape, centered, 0, 2, 1)?;
    let f2 = conv_block(tape, f1, 2, 2, 1)?;
    let f3 = conv_block(tape, f2, 4, 2, 1)?;

    let (h1, w1) = (tape.value(f1).shape()[1], tape.value(f1).shape()[2]);
    let u2 = tape.upsample_bilinear(f2, h1, w1)?;
    let u3 = tape.upsample_bilinear(f3, h1, w1)?;
    let f_co = tape.concat_channels(&[f1, u2, u3])?;

    // deviation head: 1x1 conv stack to one channel of patch scores
    let d1 = conv_block(tape, f_co, 6, 1, 0)?;
    let d2 = tape.conv2d(d1, pv(8), 1, 0)?;
    let psi_map = tape.add_channel_bias(d2, pv(9))?;
    let psi = tape.reshape(psi_map, vec![h1 * w1])?;
    let s_dev = tape.topk_mean(psi, rho)?;

    // uncertainty head: GAP -> affine stack -> sigmoid
    let gap = tape.global_avg_pool(f_co)?;
    let z1 = tape.matmul(pv(10), gap)?;
    let z1b = tape.add(z1, pv(11))?;
    let z1r = tape.relu(z1b);
    let logit = tape.matmul(pv(12), z1r)?;
    let logit_b = tape.add(logit, pv(13))?;
    let logit_s = tape.reshape(logit_b, vec![1])?;
    let p = tape.sigmoid(logit_s);

    // segmentation head: conv stack -> sigmoid -> upsample to input size
    let s1 = conv_block(tape, f_co, 14, 1, 0)?;
    let s2 = tape.conv2d(s1, pv(16), 1, 1)?;
    let s2b = tape.add_channel_bias(s2, pv(17))?;
    let a_small = tape.sigmoid(s2b);
    let a_map = tape.upsample_bilinear(a_small, h, w)?;

    Ok(ForwardOutput {
        input,
        feat_last: f3,
        f_co,
        psi,
        s_dev,
        p,
        a_map,
        param_vars: param_vars.to_vec(),
    })
}
