//! Point cloud containers, sampling, neighbor search, interpolation and
//! block partitioning. Geometry is always handled in `f64`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Real, Tensor2};
use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Distance below which (squared) a fine point is treated as coincident
/// with a coarse point during interpolation.
pub const COINCIDENT_EPS: f64 = 1e-12;

pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Geometry plus three attribute channels (RGB or YUV, nominally 0..=255)
/// and optional per-point quantization steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub coords: Vec<Point>,
    pub attrs: Vec<[f64; 3]>,
    pub qsteps: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>, attrs: Vec<[f64; 3]>, qsteps: Option<Vec<f64>>) -> Result<Self> {
        let cloud = Self {
            coords,
            attrs,
            qsteps,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.attrs.len() {
            return Err(Error::Shape(format!(
                "{} coordinates but {} attribute rows",
                self.coords.len(),
                self.attrs.len()
            )));
        }
        if let Some(q) = &self.qsteps {
            if q.len() != self.coords.len() {
                return Err(Error::Shape(format!(
                    "{} points but {} quantization steps",
                    self.coords.len(),
                    q.len()
                )));
            }
            if let Some(bad) = q.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "quantization step {} at point {bad} is not positive",
                    q[bad]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Attribute channel `c` as a column.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.attrs.iter().map(|a| a[c]).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            attrs: indices.iter().map(|&i| self.attrs[i]).collect(),
            qsteps: self
                .qsteps
                .as_ref()
                .map(|q| indices.iter().map(|&i| q[i]).collect()),
        }
    }
}

/// Fixed-size processing unit cut from a larger cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub cloud: PointCloud,
    /// Indices of the real (non-padding) points in the parent cloud.
    pub source_range: Range<usize>,
    /// Trailing rows that duplicate the last real point.
    pub pad_count: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Greedy farthest point sampling. Each pick maximizes the distance to the
/// already selected set; ties go to the lowest index.
pub fn farthest_point_sample(coords: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {n} points"
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "start index {start} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = coords[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = squared_distance(&coords[i], &c);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Uniformly random FPS start index from a seed.
pub fn random_start(n: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..n.max(1))
}

/// Index of the point farthest from the centroid (lowest index on ties).
/// Unlike a fixed index this choice follows the points under reordering.
pub fn farthest_from_centroid(coords: &[Point]) -> usize {
    let c = centroid(coords);
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in coords.iter().enumerate() {
        let d = squared_distance(p, &c);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn centroid(coords: &[Point]) -> Point {
    let mut c = [0.0; 3];
    for p in coords {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = coords.len().max(1) as f64;
    c.map(|v| v / n)
}

/// Neighbors of one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    pub sq_distances: Vec<f64>,
}

/// Exhaustive k-nearest-neighbor search; ascending by distance, lowest
/// index first on ties.
pub fn knn(queries: &[Point], refs: &[Point], k: usize) -> Result<Vec<Neighbors>> {
    if k > refs.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} reference points",
            refs.len()
        )));
    }
    Ok(queries
        .iter()
        .map(|q| {
            // (distance, index), kept sorted; insertion keeps earlier
            // indices ahead of later ones at equal distance.
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (j, r) in refs.iter().enumerate() {
                let d = squared_distance(q, r);
                if best.len() == k && k > 0 && d >= best[k - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, j));
                best.truncate(k);
            }
            Neighbors {
                indices: best.iter().map(|b| b.1).collect(),
                sq_distances: best.iter().map(|b| b.0).collect(),
            }
        })
        .collect())
}

/// Inverse-square-distance weights from every fine point to its K
/// nearest coarse points.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationPlan {
    pub k: usize,
    pub coarse_len: usize,
    /// `fine_len * k` entries, row-major.
    pub neighbor_indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl InterpolationPlan {
    pub fn new(coarse: &[Point], fine: &[Point], k: usize) -> Result<Self> {
        if coarse.is_empty() {
            return Err(Error::InvalidArgument("interpolation from an empty cloud".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("interpolation needs k >= 1".into()));
        }
        let neighbors = knn(fine, coarse, k)?;
        let mut neighbor_indices = Vec::with_capacity(fine.len() * k);
        let mut weights = Vec::with_capacity(fine.len() * k);
        for nb in &neighbors {
            neighbor_indices.extend_from_slice(&nb.indices);
            if nb.sq_distances[0] < COINCIDENT_EPS {
                weights.push(1.0);
                weights.extend(std::iter::repeat_n(0.0, k - 1));
            } else {
                let inv: Vec<f64> = nb.sq_distances.iter().map(|d| 1.0 / d).collect();
                let total: f64 = inv.iter().sum();
                weights.extend(inv.iter().map(|w| w / total));
            }
        }
        Ok(Self {
            k,
            coarse_len: coarse.len(),
            neighbor_indices,
            weights,
        })
    }

    pub fn fine_len(&self) -> usize {
        self.weights.len() / self.k
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = i * self.k..(i + 1) * self.k;
        (&self.neighbor_indices[r.clone()], &self.weights[r])
    }

    /// Applies the plan to coarse features (coarse_len x C).
    pub fn apply<T: Real>(&self, coarse: &Tensor2<T>) -> Result<Tensor2<T>> {
        if coarse.rows() != self.coarse_len {
            return Err(Error::Shape(format!(
                "plan expects {} coarse rows, got {}",
                self.coarse_len,
                coarse.rows()
            )));
        }
        let c = coarse.cols();
        let mut out = Tensor2::zeros(self.fine_len(), c);
        for i in 0..self.fine_len() {
            let (idx, w) = self.row(i);
            let row = out.row_mut(i);
            for (&j, &wj) in idx.iter().zip(w) {
                if wj == 0.0 {
                    continue;
                }
                let wj = T::from_f64_lossy(wj);
                for (o, &v) in row.iter_mut().zip(coarse.row(j)) {
                    *o = *o + wj * v;
                }
            }
        }
        Ok(out)
    }

    /// The plan as a dense fine_len x coarse_len matrix, so interpolation
    /// can be recorded as a matmul.
    pub fn to_matrix<T: Real>(&self) -> Tensor2<T> {
        let mut m = Tensor2::zeros(self.fine_len(), self.coarse_len);
        for i in 0..self.fine_len() {
            let (idx, w) = self.row(i);
            for (&j, &wj) in idx.iter().zip(w) {
                m.set(i, j, m.get(i, j) + T::from_f64_lossy(wj));
            }
        }
        m
    }
}

/// Distance-weighted upsampling of coarse features onto fine points.
pub fn interpolate_up<T: Real>(
    coarse_coords: &[Point],
    coarse_features: &Tensor2<T>,
    fine_coords: &[Point],
    k: usize,
) -> Result<Tensor2<T>> {
    InterpolationPlan::new(coarse_coords, fine_coords, k)?.apply(coarse_features)
}

/// Splits a cloud into consecutive blocks of `n` points, padding the last
/// one by repeating the final point.
pub fn partition_blocks(cloud: &PointCloud, n: usize) -> Result<Vec<Block>> {
    if n == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot partition an empty cloud".into()));
    }
    cloud.validate()?;
    let total = cloud.len();
    let mut blocks = Vec::with_capacity(total.div_ceil(n));
    for start in (0..total).step_by(n) {
        let end = (start + n).min(total);
        let pad = n - (end - start);
        let mut indices: Vec<usize> = (start..end).collect();
        indices.extend(std::iter::repeat_n(total - 1, pad));
        blocks.push(Block {
            cloud: cloud.select(&indices),
            source_range: start..end,
            pad_count: pad,
        });
    }
    Ok(blocks)
}

/// Reassembles blocks in source order and drops padding rows.
pub fn combine_blocks(blocks: &[Block]) -> Result<PointCloud> {
    let mut order: Vec<&Block> = blocks.iter().collect();
    order.sort_by_key(|b| b.source_range.start);
    let mut expected = 0;
    let with_q = order.first().is_some_and(|b| b.cloud.qsteps.is_some());
    let mut out = PointCloud {
        qsteps: with_q.then(Vec::new),
        ..Default::default()
    };
    for b in order {
        let r = &b.source_range;
        if r.start != expected {
            return Err(Error::InvalidArgument(format!(
                "block ranges not contiguous: expected start {expected}, found {}",
                r.start
            )));
        }
        if r.end < r.start || b.cloud.len() != r.len() + b.pad_count {
            return Err(Error::InvalidArgument(format!(
                "block {:?} holds {} points with {} padding",
                r,
                b.cloud.len(),
                b.pad_count
            )));
        }
        let keep = r.len();
        out.coords.extend_from_slice(&b.cloud.coords[..keep]);
        out.attrs.extend_from_slice(&b.cloud.attrs[..keep]);
        match (&mut out.qsteps, &b.cloud.qsteps) {
            (Some(dst), Some(src)) => dst.extend_from_slice(&src[..keep]),
            (None, None) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "blocks disagree on carrying quantization steps".into(),
                ))
            }
        }
        expected = r.end;
    }
    Ok(out)
}

/// Centers on the centroid and scales so the largest norm is 1. A cloud
/// whose points all coincide is only translated.
pub fn normalize_block_coords(coords: &[Point]) -> Vec<Point> {
    let c = centroid(coords);
    let centered: Vec<Point> = coords
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| squared_distance(p, &[0.0; 3]).sqrt())
        .fold(0.0, f64::max);
    if max_norm <= f64::EPSILON {
        return centered.iter().map(|_| [0.0; 3]).collect();
    }
    centered
        .iter()
        .map(|p| p.map(|v| v / max_norm))
        .collect()
}
