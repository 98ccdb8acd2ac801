//! Procedural shape images with per-domain transforms.
//!
//! Every sample is a pure function of `(domain seed, split, index)`, so
//! datasets are reproducible and train/test never share a generator stream.

use ftn_core::layers::mix_seed;
use ftn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Shape classes the generator can draw.
pub const MAX_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; MAX_CLASSES] =
    ["square", "square-outline", "disc", "ring", "plus", "cross", "stripes", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Rotation of RGB about the gray axis.
    Hue { degrees: f64 },
    /// Counter-clockwise rotation about the image centre, nearest sampling.
    Rotation { degrees: f64 },
    /// Additive Gaussian pixel noise.
    Noise { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub name: String,
    pub transform: Transform,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Square image side.
    pub size: usize,
    pub seed: u64,
}

impl DomainConfig {
    pub const BUILTIN: [&'static str; 4] = ["source", "hue", "rotation", "noise"];

    /// Named domains sharing one pattern family; each draws its own samples.
    pub fn builtin(name: &str, classes: usize, train: usize, test: usize, size: usize, seed: u64) -> Result<Self> {
        let (stream, transform) = match name {
            "source" => (0, Transform::Identity),
            "hue" => (1, Transform::Hue { degrees: 180.0 }),
            "rotation" => (2, Transform::Rotation { degrees: 45.0 }),
            "noise" => (3, Transform::Noise { sigma: 0.25 }),
            other => {
                return Err(HarnessError::Validation(format!(
                    "unknown domain `{other}` (expected one of {:?})",
                    Self::BUILTIN
                )))
            }
        };
        let cfg = DomainConfig {
            name: name.into(),
            transform,
            classes,
            train,
            test,
            size,
            seed: mix_seed(seed, 0xD0 + stream),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(HarnessError::Validation(format!("classes must be in 1..={MAX_CLASSES}, got {}", self.classes)));
        }
        if self.size < 8 {
            return Err(HarnessError::Validation(format!("image side {} is below 8", self.size)));
        }
        match self.transform {
            Transform::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(HarnessError::Validation(format!("noise sigma {sigma} must be finite and >= 0")))
            }
            Transform::Hue { degrees } | Transform::Rotation { degrees } if !degrees.is_finite() => {
                Err(HarnessError::Validation("transform angle must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let n = match split {
            Split::Train => self.train,
            Split::Test => self.test,
        };
        let s = self.size;
        let mut x = vec![0f32; n * 3 * s * s];
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.classes;
            let img = self.sample(split, i, label);
            x[i * 3 * s * s..(i + 1) * 3 * s * s].copy_from_slice(&img);
            y.push(label);
        }
        Ok(Dataset { x: Tensor::from_vec(&[n, 3, s, s], x)?, y, classes: self.classes })
    }

    fn sample(&self, split: Split, index: usize, label: usize) -> Vec<f32> {
        let tag = match split {
            Split::Train => 0u64,
            Split::Test => 1u64 << 40,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, tag | index as u64));
        let s = self.size;
        let unit = s as f64 / 16.0;
        let bg = [0.1 + rng.random_range(-0.05..0.05), 0.1 + rng.random_range(-0.05..0.05), 0.25 + rng.random_range(-0.05..0.05)];
        let fg = hsv_to_rgb(rng.random_range(0.0..90.0), rng.random_range(0.8..1.0), rng.random_range(0.8..1.0));
        let mid = (s as f64 - 1.0) / 2.0;
        let cx = mid + rng.random_range(-2.0..2.0) * unit;
        let cy = mid + rng.random_range(-2.0..2.0) * unit;
        let size = rng.random_range(3.5..5.5) * unit;
        let pixel_noise = Normal::new(0.0, 0.03).expect("valid sigma");
        let mut img = vec![[0f64; 3]; s * s];
        for py in 0..s {
            for px in 0..s {
                let inside = inside(label, px as f64 - cx, py as f64 - cy, size, unit);
                let c = if inside { fg } else { bg };
                for ch in 0..3 {
                    img[py * s + px][ch] = c[ch] + pixel_noise.sample(&mut rng);
                }
            }
        }
        let img = match self.transform {
            Transform::Identity => img,
            Transform::Hue { degrees } => {
                let m = hue_matrix(degrees);
                img.iter()
                    .map(|p| [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]))
                    .collect()
            }
            Transform::Rotation { degrees } => rotate(&img, s, degrees, bg),
            Transform::Noise { sigma } => {
                let noise = Normal::new(0.0, sigma).expect("validated sigma");
                img.iter().map(|p| p.map(|v| v + noise.sample(&mut rng))).collect()
            }
        };
        let mut out = vec![0f32; 3 * s * s];
        for (i, p) in img.iter().enumerate() {
            for ch in 0..3 {
                out[ch * s * s + i] = (p[ch] - 0.5) as f32;
            }
        }
        out
    }
}

fn inside(label: usize, dx: f64, dy: f64, s: f64, unit: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let cheb = ax.max(ay);
    let r = (dx * dx + dy * dy).sqrt();
    let w = 1.5 * unit;
    match label {
        0 => cheb <= s,
        1 => cheb <= s && cheb >= s - w,
        2 => r <= s,
        3 => r <= s && r >= s - w,
        4 => (ax <= unit && ay <= s) || (ay <= unit && ax <= s),
        5 => (ax - ay).abs() <= unit && cheb <= s,
        6 => ((dy - s / 2.0).abs() <= 0.8 * unit || (dy + s / 2.0).abs() <= 0.8 * unit) && ax <= s,
        _ => dy >= -s && dy <= s && ax <= (dy + s) / 2.0,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Rotation by `degrees` about the (1,1,1) axis.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let q = (1.0f64 / 3.0).sqrt();
    let a = c + (1.0 - c) * k;
    let b = k * (1.0 - c) - q * s;
    let d = k * (1.0 - c) + q * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn rotate(img: &[[f64; 3]], s: usize, degrees: f64, fill: [f64; 3]) -> Vec<[f64; 3]> {
    let (sn, cs) = degrees.to_radians().sin_cos();
    let mid = (s as f64 - 1.0) / 2.0;
    let mut out = vec![fill; s * s];
    for py in 0..s {
        for px in 0..s {
            // inverse map: where does this output pixel come from
            let (x, y) = (px as f64 - mid, py as f64 - mid);
            let sx = (cs * x - sn * y + mid).round();
            let sy = (sn * x + cs * y + mid).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < s && (sy as usize) < s {
                out[py * s + px] = img[sy as usize * s + sx as usize];
            }
        }
    }
    out
}

/// Images `[N, 3, S, S]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = idx.iter().map(|&i| self.y[i]).collect();
        (Tensor::from_vec(&shape, data).expect("gathered batch matches its shape"), labels)
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (x, y) = self.batch(&idx);
        Dataset { x, y, classes: self.classes }
    }
}
