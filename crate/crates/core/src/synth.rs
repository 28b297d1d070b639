//! Synthetic training data: procedurally colored voxel surfaces and a
//! codec-like degradation that quantizes every YUV component with a
//! per-point step.
//!
//! Steps follow the usual exponential rule `step(QP) = round(2^((QP - 4) / 6))`
//! (step 1 at QP 4, doubling every 6 QP). Each point draws its step
//! uniformly from the table `[step(QP), step(QP - 3), step(QP - 6)]` of a
//! QP picked from the requested set, imitating adaptive per-level
//! quantization.
//!
//! | QP | table          |
//! |----|----------------|
//! | 51 | 228, 161, 114  |
//! | 46 | 128, 91, 64    |
//! | 40 | 64, 45, 32     |
//! | 34 | 32, 23, 16     |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{rgb_to_yuv_all, yuv_to_rgb_all};

/// Quantization parameters of the common test conditions.
pub const DEFAULT_QPS: [u32; 4] = [51, 46, 40, 34];

/// QP offsets used to build the per-QP step table.
pub const QP_OFFSETS: [u32; 3] = [0, 3, 6];

pub fn qp_to_step(qp: u32) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0).round().max(1.0)
}

pub fn step_table(qp: u32) -> Vec<f64> {
    QP_OFFSETS
        .iter()
        .map(|&o| qp_to_step(qp.saturating_sub(o)))
        .collect()
}

/// `round(v / q) * q`, clamped to `[0, 255]`.
pub fn quantize(value: f64, step: f64) -> f64 {
    ((value / step).round() * step).clamp(0.0, 255.0)
}

/// Quantizes every component of every point with that point's step.
pub fn quantize_attributes(yuv: &[[f64; 3]], steps: &[f64]) -> Result<Vec<[f64; 3]>> {
    if yuv.len() != steps.len() {
        return Err(Error::Shape(format!(
            "{} points but {} steps",
            yuv.len(),
            steps.len()
        )));
    }
    if let Some(s) = steps.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!("step {s} is not positive")));
    }
    Ok(yuv
        .iter()
        .zip(steps)
        .map(|(a, &q)| a.map(|v| quantize(v, q)))
        .collect())
}

/// A degraded cloud and its clean counterpart, both in YUV.
#[derive(Debug, Clone)]
pub struct Degraded {
    /// Quantized YUV attributes with the steps used.
    pub cloud: PointCloud,
    /// Clean YUV attributes.
    pub target: Vec<[f64; 3]>,
}

impl Degraded {
    /// Degraded attributes as 8-bit RGB (for writing to disk).
    pub fn rgb_cloud(&self) -> PointCloud {
        PointCloud {
            coords: self.cloud.coords.clone(),
            attrs: yuv_to_rgb_all(&self.cloud.attrs),
            qsteps: self.cloud.qsteps.clone(),
        }
    }
}

/// Degrades an RGB ground-truth cloud.
pub fn synth_degrade(clean_rgb: &PointCloud, qps: &[u32], seed: u64) -> Result<Degraded> {
    if qps.is_empty() {
        return Err(Error::InvalidArgument("empty QP set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<Vec<f64>> = qps.iter().map(|&qp| step_table(qp)).collect();
    let steps: Vec<f64> = (0..clean_rgb.len())
        .map(|_| {
            let t = &tables[rng.random_range(0..tables.len())];
            t[rng.random_range(0..t.len())]
        })
        .collect();
    let target = rgb_to_yuv_all(&clean_rgb.attrs)?;
    let attrs = quantize_attributes(&target, &steps)?;
    Ok(Degraded {
        cloud: PointCloud::new(clean_rgb.coords.clone(), attrs, Some(steps))?,
        target,
    })
}

fn morton3(x: u32, y: u32, z: u32) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut out = 0u64;
        for b in 0..21 {
            out |= (((v >> b) & 1) as u64) << (3 * b);
        }
        out
    }
    spread(x) | (spread(y) << 1) | (spread(z) << 2)
}

/// Procedural colored surface: a wavy height field on a voxel grid with
/// smooth color gradients, a few sharp-edged patches and mild texture.
/// Points are emitted in Morton order so consecutive runs are spatially
/// compact, as in voxelized captures. Coordinates are integers in
/// `[0, 1023]`.
pub fn synthetic_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let freq: [f64; 6] = std::array::from_fn(|_| rng.random_range(1.0..4.0));
    let patches: Vec<([f64; 2], f64, [f64; 3])> = (0..6)
        .map(|_| {
            (
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                rng.random_range(0.05..0.2),
                [0, 0, 0].map(|_: i32| rng.random_range(0.0..255.0)),
            )
        })
        .collect();

    let mut seen = std::collections::HashSet::new();
    let mut pts: Vec<(u64, [f64; 3], [f64; 3])> = Vec::with_capacity(n);
    let mut guard = 0usize;
    while pts.len() < n {
        guard += 1;
        assert!(guard < 100 * n + 1000, "could not place {n} distinct voxels");
        let u: f64 = rng.random_range(0.0..1.0);
        let v: f64 = rng.random_range(0.0..1.0);
        let h = 0.5
            + 0.15 * (freq[0] * u * std::f64::consts::TAU + phase[0]).sin()
            + 0.1 * (freq[1] * v * std::f64::consts::TAU + phase[1]).cos();
        let vox = [u * 1023.0, v * 1023.0, h * 1023.0].map(|c| c.round().clamp(0.0, 1023.0));
        let key = morton3(vox[0] as u32, vox[1] as u32, vox[2] as u32);
        if !seen.insert(key) {
            continue;
        }
        let mut rgb = [0.0; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let k = c + 3;
            *out = 128.0
                + 70.0 * (freq[k] * (u + 0.5 * v) * std::f64::consts::TAU + phase[k]).sin()
                + 30.0 * (freq[c] * v * std::f64::consts::TAU + phase[c]).cos();
        }
        for (center, radius, color) in &patches {
            let d2 = (u - center[0]).powi(2) + (v - center[1]).powi(2);
            if d2 < radius * radius {
                rgb = *color;
            }
        }
        let rgb = rgb.map(|c| (c + rng.random_range(-4.0..4.0)).round().clamp(0.0, 255.0));
        pts.push((key, vox, rgb));
    }
    pts.sort_by_key(|p| p.0);
    PointCloud {
        coords: pts.iter().map(|p| p.1).collect(),
        attrs: pts.iter().map(|p| p.2).collect(),
        qsteps: None,
    }
}
