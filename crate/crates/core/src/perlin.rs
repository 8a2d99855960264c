//! Classic gradient-lattice Perlin noise with smoothstep fade,
//! used to synthesize defect masks and procedural textures.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerlinError {
    #[error("cell size {cell} invalid for {h}x{w} field (need 2 <= cell <= min(h,w))")]
    BadCell { cell: usize, h: usize, w: usize },
}

/// Seeded lattice of unit gradient vectors.
pub struct PerlinField {
    grads: Vec<(f64, f64)>,
    nodes_x: usize,
    cell: usize,
}

impl PerlinField {
    pub fn new(seed: u64, height: usize, width: usize, cell: usize) -> Result<Self, PerlinError> {
        if cell < 2 || cell > height.min(width) {
            return Err(PerlinError::BadCell { cell, h: height, w: width });
        }
        let nodes_y = height / cell + 2;
        let nodes_x = width / cell + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads = (0..nodes_y * nodes_x)
            .map(|_| {
                let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
                (theta.cos(), theta.sin())
            })
            .collect();
        Ok(PerlinField { grads, nodes_x, cell })
    }

    /// Noise value at pixel coordinates; lies in [-1, 1] and is exactly 0
    /// on lattice nodes.
    pub fn sample(&self, y: usize, x: usize) -> f64 {
        let fy = y as f64 / self.cell as f64;
        let fx = x as f64 / self.cell as f64;
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        let dot = |ny: usize, nx: usize, oy: f64, ox: f64| {
            let (gx, gy) = self.grads[ny * self.nodes_x + nx];
            gx * ox + gy * oy
        };
        let n00 = dot(y0, x0, dy, dx);
        let n01 = dot(y0, x0 + 1, dy, dx - 1.0);
        let n10 = dot(y0 + 1, x0, dy - 1.0, dx);
        let n11 = dot(y0 + 1, x0 + 1, dy - 1.0, dx - 1.0);
        let u = smoothstep(dx);
        let v = smoothstep(dy);
        let top = n00 + u * (n01 - n00);
        let bot = n10 + u * (n11 - n10);
        (top + v * (bot - top)).clamp(-1.0, 1.0)
    }
}

/// Full field as a 1HW tensor.
pub fn perlin_field(seed: u64, height: usize, width: usize, cell: usize) -> Result<Tensor, PerlinError> {
    let field = PerlinField::new(seed, height, width, cell)?;
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            data.push(field.sample(y, x));
        }
    }
    Ok(Tensor::new(vec![1, height, width], data))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}
