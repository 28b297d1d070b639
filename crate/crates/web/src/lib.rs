//! Browser bindings for three building blocks of the restoration network:
//! farthest point sampling, Chebyshev graph filtering and
//! quantization-weighted attention. Point sets are flat `[x0, y0, x1, y1, ...]`
//! arrays in the plane.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use msgat::diffcore::Tensor2;
use msgat::geometry::{farthest_from_centroid, farthest_point_sample, normalize_block_coords, Point};
use msgat::graph::{cheb_apply, GraphOperator};
use msgat::layers::{weighted_graph_attention, AttentionParams};

fn to_points(xy: &[f64]) -> Result<Vec<Point>, String> {
    if !xy.len().is_multiple_of(2) {
        return Err(format!("odd coordinate count {}", xy.len()));
    }
    Ok(xy.chunks_exact(2).map(|c| [c[0], c[1], 0.0]).collect())
}

/// `n` points in the unit square, clustered around a few centers.
#[wasm_bindgen]
pub fn random_points(n: usize, seed: u32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let centers: Vec<[f64; 2]> = (0..4).map(|_| [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)]).collect();
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng.random_range(0..centers.len())];
        let r = rng.random_range(0.0f64..0.25).powf(0.7);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        out.push((c[0] + r * a.cos()).clamp(0.0, 1.0));
        out.push((c[1] + r * a.sin()).clamp(0.0, 1.0));
    }
    out
}

pub fn sample_order(xy: &[f64], m: usize) -> Result<Vec<u32>, String> {
    let pts = to_points(xy)?;
    if pts.is_empty() {
        return Ok(Vec::new());
    }
    let start = farthest_from_centroid(&pts);
    farthest_point_sample(&pts, m.min(pts.len()), start)
        .map(|v| v.into_iter().map(|i| i as u32).collect())
        .map_err(|e| e.to_string())
}

/// Indices of the first `m` farthest-point samples, in selection order.
#[wasm_bindgen]
pub fn farthest_point_order(xy: &[f64], m: usize) -> Result<Vec<u32>, JsError> {
    sample_order(xy, m).map_err(|e| JsError::new(&e))
}

pub fn smooth(xy: &[f64], signal: &[f64], taps: &[f64]) -> Result<Vec<f64>, String> {
    let pts = to_points(xy)?;
    if signal.len() != pts.len() {
        return Err(format!("{} signal values for {} points", signal.len(), pts.len()));
    }
    if taps.is_empty() {
        return Err("at least one filter tap is required".into());
    }
    let graph = GraphOperator::from_coords(&normalize_block_coords(&pts)).map_err(|e| e.to_string())?;
    let h = Tensor2::column(signal);
    let theta: Vec<Tensor2<f64>> = taps.iter().map(|&t| Tensor2::scalar(t)).collect();
    cheb_apply(&graph.laplacian, &h, &theta)
        .map(|t| t.into_data())
        .map_err(|e| e.to_string())
}

/// Filters a scalar signal on the points with `sum_k taps[k] T_k(L)`.
#[wasm_bindgen]
pub fn chebyshev_filter(xy: &[f64], signal: &[f64], taps: &[f64]) -> Result<Vec<f64>, JsError> {
    smooth(xy, signal, taps).map_err(|e| JsError::new(&e))
}

/// Response `sum_k taps[k] T_k(lambda)` at `samples` eigenvalues spread
/// over the normalized Laplacian spectrum `[0, 2]`.
#[wasm_bindgen]
pub fn chebyshev_response(taps: &[f64], samples: usize) -> Vec<f64> {
    (0..samples)
        .map(|i| {
            let x = 2.0 * i as f64 / (samples.max(2) - 1) as f64;
            let (mut t0, mut t1) = (1.0, x);
            let mut acc = 0.0;
            for (k, &w) in taps.iter().enumerate() {
                let tk = match k {
                    0 => 1.0,
                    1 => x,
                    _ => {
                        let t2 = 2.0 * x * t1 - t0;
                        t0 = t1;
                        t1 = t2;
                        t2
                    }
                };
                acc += w * tk;
            }
            acc
        })
        .collect()
}

pub fn attention(xy: &[f64], qsteps: &[f64], row: usize, gain: f64, seed: u32) -> Result<Vec<f64>, String> {
    let pts = to_points(xy)?;
    let n = pts.len();
    if qsteps.len() != n {
        return Err(format!("{} steps for {n} points", qsteps.len()));
    }
    if row >= n {
        return Err(format!("row {row} out of range for {n} points"));
    }
    let qmax = qsteps.iter().copied().fold(0.0, f64::max);
    if !(qmax > 0.0) || qsteps.iter().any(|q| !(*q > 0.0)) {
        return Err("steps must be positive".into());
    }
    let norm = normalize_block_coords(&pts);
    let h = Tensor2::from_rows(&norm).map_err(|e| e.to_string())?;
    let q = Tensor2::column(&qsteps.iter().map(|v| v / qmax).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut params = AttentionParams::<f64>::init(&mut rng, &[3, 16, 16]);
    for mlp in [&mut params.mlp_delta, &mut params.mlp_gamma] {
        for layer in &mut mlp.layers {
            layer.weight = layer.weight.scale(gain);
        }
    }
    let (_, trace) = weighted_graph_attention(&h, &q, &params).map_err(|e| e.to_string())?;
    Ok(trace.attention.row(row).to_vec())
}

/// Attention weights of point `row` over all points. Steps are divided by
/// their maximum before scaling the similarity logits, so a point with a
/// small step relative to the block attends almost uniformly.
#[wasm_bindgen]
pub fn attention_row(xy: &[f64], qsteps: &[f64], row: usize, gain: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    attention(xy, qsteps, row, gain, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_are_in_unit_square() {
        let p = random_points(200, 1);
        assert_eq!(p.len(), 400);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p, random_points(200, 1));
    }

    #[test]
    fn sampling_covers() {
        let p = random_points(100, 2);
        let order = sample_order(&p, 10).unwrap();
        assert_eq!(order.len(), 10);
        let mut s = order.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 10);
        assert_eq!(sample_order(&p, 500).unwrap().len(), 100);
        assert!(sample_order(&[0.0], 1).is_err());
    }

    #[test]
    fn identity_taps_leave_signal() {
        let p = random_points(30, 3);
        let sig: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert_eq!(smooth(&p, &sig, &[1.0]).unwrap(), sig);
        // I - L/2 averages with neighbors: the spread shrinks.
        let out = smooth(&p, &sig, &[1.0, -0.5]).unwrap();
        let spread = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min);
        assert!(spread(&out) < spread(&sig));
    }

    #[test]
    fn response_matches_polynomials() {
        let r = chebyshev_response(&[0.5, 0.25, 0.125], 3);
        // x = 0, 1, 2: T2 = 2x^2 - 1.
        let want = [0.5 - 0.125, 0.5 + 0.25 + 0.125, 0.5 + 0.5 + 0.125 * 7.0];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_row_is_distribution_and_sharpens() {
        let p = random_points(40, 4);
        let mut q = vec![64.0; 40];
        q[0] = 0.064;
        let flat = attention(&p, &q, 0, 6.0, 1).unwrap();
        q[0] = 64.0;
        let sharp = attention(&p, &q, 0, 6.0, 1).unwrap();
        for row in [&flat, &sharp] {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        assert!(max(&sharp) > max(&flat));
        assert!(attention(&p, &q, 40, 1.0, 1).is_err());
    }
}
