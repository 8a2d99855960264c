//! Gradient-based anomaly localization: per-cue input/feature gradients,
//! cue-map construction, equal-average fusion and Gaussian smoothing.

use crate::model::{forward, ModelState};
use crate::objectives::PROB_CLAMP;
use crate::tape::{bilinear_resize, DiffError, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cue {
    Dev,
    Ent,
    Seg,
}

/// Absolute gradients of one cue scalar w.r.t. the input image and the
/// last encoder block activation.
#[derive(Clone, Debug)]
pub struct CueAttribution {
    pub g_input: Tensor,
    pub g_feat: Tensor,
}

/// One forward + one backward pass for the chosen cue scalar.
pub fn cue_gradients(
    image: &Tensor,
    state: &ModelState,
    cue: Cue,
    rho: f64,
) -> Result<CueAttribution, DiffError> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, image, state, rho)?;
    let root = match cue {
        Cue::Dev => out.s_dev,
        Cue::Seg => tape.topk_mean(out.a_map, rho)?,
        Cue::Ent => {
            // s_ent = ln(1 + E(p)) built on the tape
            let pc = tape.clamp(out.p, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let logp = tape.log(pc)?;
            let neg_p = tape.scale(pc, -1.0);
            let one_minus = tape.add_scalar(neg_p, 1.0);
            let log1m = tape.log(one_minus)?;
            let t1 = tape.mul(pc, logp)?;
            let t2 = tape.mul(one_minus, log1m)?;
            let e = tape.weighted_sum(&[t1, t2], &[-1.0, -1.0])?;
            let e1 = tape.add_scalar(e, 1.0);
            tape.log(e1)?
        }
    };
    let grads = tape.backward(root)?;
    Ok(CueAttribution {
        g_input: grads.get(out.input).map(f64::abs),
        g_feat: grads.get(out.feat_last).map(f64::abs),
    })
}

/// Channel-mean of a CHW tensor -> 1HW.
fn channel_mean(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= c as f64;
    }
    Tensor::new(vec![1, h, w], out)
}

/// Min-max normalization into [0,1]; a flat map becomes all zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let lo = t.min();
    let hi = t.max();
    if hi - lo <= 0.0 {
        return Tensor::zeros(t.shape().to_vec());
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// Cue map: channel-mean input gradient, averaged with the upsampled
/// channel-mean feature gradient, then min-max normalized.
pub fn cue_map(attr: &CueAttribution, out_h: usize, out_w: usize) -> Tensor {
    let map1 = bilinear_resize(&channel_mean(&attr.g_input), out_h, out_w);
    let map2 = bilinear_resize(&channel_mean(&attr.g_feat), out_h, out_w);
    let avg = Tensor::new(
        vec![1, out_h, out_w],
        map1.data().iter().zip(map2.data()).map(|(a, b)| 0.5 * (a + b)).collect(),
    );
    min_max_normalize(&avg)
}

/// Normalized Gaussian kernel with radius ceil(3 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable edge-clamped Gaussian blur of a 1HW map.
pub fn gaussian_blur(map: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return map.clone();
    }
    let s = map.shape();
    let (h, w) = (s[1], s[2]);
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let d = map.data();
    let mut horiz = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + t as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * d[y * w + sx];
            }
            horiz[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + t as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * horiz[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Equal average of the three cue maps, Gaussian smoothing, then a final
/// min-max normalization into [0,1].
pub fn fuse_localization(maps: &[Tensor; 3], sigma_blur: f64) -> Tensor {
    let n = maps[0].len();
    assert!(maps.iter().all(|m| m.len() == n), "cue maps must be aligned");
    let avg = Tensor::new(
        maps[0].shape().to_vec(),
        (0..n)
            .map(|i| (maps[0].data()[i] + maps[1].data()[i] + maps[2].data()[i]) / 3.0)
            .collect(),
    );
    let blurred = gaussian_blur(&avg, sigma_blur);
    min_max_normalize(&blurred)
}

/// Full per-image localization map.
pub fn localize(
    image: &Tensor,
    state: &ModelState,
    rho: f64,
    sigma_blur: f64,
) -> Result<Tensor, DiffError> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let maps = [
        cue_map(&cue_gradients(image, state, Cue::Dev, rho)?, h, w),
        cue_map(&cue_gradients(image, state, Cue::Ent, rho)?, h, w),
        cue_map(&cue_gradients(image, state, Cue::Seg, rho)?, h, w),
    ];
    Ok(fuse_localization(&maps, sigma_blur))
}

/// Binary mask from a heatmap at the given quantile of its values.
pub fn threshold_at_quantile(map: &Tensor, quantile: f64) -> Tensor {
    let mut vals: Vec<f64> = map.data().to_vec();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((vals.len() as f64 - 1.0) * quantile.clamp(0.0, 1.0)).round() as usize;
    let t = vals[idx];
    map.map(|v| if v > t { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::texture::{generate_normal_texture, TextureFamily};

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for sigma in [0.5, 1.0, 4.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0f64 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for i in 0..k.len() / 2 {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
            // peak at the center
            assert!(k[k.len() / 2] >= *k.iter().max_by(|a, b| a.partial_cmp(b).unwrap()).unwrap() - 1e-15);
        }
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn blur_preserves_constants_and_smooths_impulses() {
        let flat = Tensor::full(vec![1, 8, 8], 0.7);
        let b = gaussian_blur(&flat, 4.0);
        assert!(b.data().iter().all(|&v| (v - 0.7).abs() <= 1e-12));

        let mut data = vec![0.0; 64];
        data[27] = 1.0;
        let impulse = Tensor::new(vec![1, 8, 8], data);
        let b = gaussian_blur(&impulse, 1.0);
        assert!(b.max() < 1.0);
        assert!(b.data().iter().all(|&v| v >= 0.0));
        // blur at sigma<=0 is the identity
        assert_eq!(gaussian_blur(&impulse, 0.0).data(), impulse.data());
    }

    #[test]
    fn min_max_normalize_examples() {
        let t = Tensor::new(vec![1, 1, 3], vec![2.0, 4.0, 3.0]);
        let n = min_max_normalize(&t);
        assert_eq!(n.data(), &[0.0, 1.0, 0.5]);
        let flat = Tensor::full(vec![1, 1, 3], 9.0);
        assert_eq!(min_max_normalize(&flat).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fused_map_lands_in_unit_interval() {
        let a = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]);
        let b = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.5, 0.75]);
        let c = Tensor::new(vec![1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]);
        let f = fuse_localization(&[a, b, c], 1.0);
        assert_eq!(f.shape(), &[1, 2, 2]);
        assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(f.min(), 0.0);
        assert_eq!(f.max(), 1.0);
    }

    #[test]
    fn threshold_quantile_examples() {
        let map = Tensor::new(vec![1, 2, 2], vec![0.1, 0.6, 0.3, 0.9]);
        let m = threshold_at_quantile(&map, 0.5);
        // cutoff index round(3 * 0.5) = 2 -> threshold 0.6, strictly above
        assert_eq!(m.data(), &[0.0, 0.0, 0.0, 1.0]);
        let all = threshold_at_quantile(&map, 0.0);
        assert_eq!(all.data().iter().sum::<f64>(), 3.0); // strictly-above keeps the min out
        let none = threshold_at_quantile(&map, 1.0);
        assert_eq!(none.data().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn cue_gradients_shapes_and_determinism() {
        let state = ModelState::init(ModelConfig::default());
        let img = generate_normal_texture(TextureFamily::Blobs, 3, 16, 16);
        for cue in [Cue::Dev, Cue::Ent, Cue::Seg] {
            let attr = cue_gradients(&img, &state, cue, 0.1).unwrap();
            assert_eq!(attr.g_input.shape(), &[3, 16, 16]);
            assert_eq!(attr.g_feat.shape()[1..], [2, 2]);
            assert!(attr.g_input.data().iter().all(|&v| v >= 0.0));
            assert!(attr.g_feat.data().iter().all(|&v| v >= 0.0));
            let again = cue_gradients(&img, &state, cue, 0.1).unwrap();
            assert_eq!(attr.g_input.data(), again.g_input.data());
        }
    }

    #[test]
    fn localize_end_to_end() {
        let state = ModelState::init(ModelConfig::default());
        let img = generate_normal_texture(TextureFamily::Stripes, 9, 16, 16);
        let map = localize(&img, &state, 0.1, 2.0).unwrap();
        assert_eq!(map.shape(), &[1, 16, 16]);
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = localize(&img, &state, 0.1, 2.0).unwrap();
        assert_eq!(map.data(), again.data());
    }
}
