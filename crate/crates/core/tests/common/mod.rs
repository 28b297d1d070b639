//! Reference implementations used only by tests, written independently of
//! the library code paths they check.
#![allow(dead_code)]

use msgat::diffcore::Tensor2;
use msgat::geometry::{partition_blocks, PointCloud};
use msgat::synth::{synth_degrade, synthetic_cloud};
use msgat::training::TrainSample;

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns, row-major n x n).
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// `sum_k U T_k(Lambda) U^T H Theta_k` with Chebyshev polynomials
/// evaluated on the eigenvalues directly (`cos(k acos x)` form is avoided
/// because eigenvalues can exceed 1).
pub fn spectral_cheb(l: &Tensor2<f64>, h: &Tensor2<f64>, theta: &[Tensor2<f64>]) -> Tensor2<f64> {
    let n = l.rows();
    let (lam, u) = jacobi_eigen(l.data(), n);
    let u = Tensor2::from_vec(n, n, u).unwrap();
    let uth = u.transpose().matmul(h).unwrap();
    let mut out = Tensor2::zeros(n, theta[0].cols());
    for (k, th) in theta.iter().enumerate() {
        let mut scaled = uth.clone();
        for (i, &x) in lam.iter().enumerate() {
            let (mut t0, mut t1) = (1.0, x);
            let tk = match k {
                0 => 1.0,
                1 => x,
                _ => {
                    for _ in 2..=k {
                        let t2 = 2.0 * x * t1 - t0;
                        t0 = t1;
                        t1 = t2;
                    }
                    t1
                }
            };
            for v in scaled.row_mut(i) {
                *v *= tk;
            }
        }
        out.add_assign(&u.matmul(&scaled).unwrap().matmul(th).unwrap()).unwrap();
    }
    out
}

/// Bjontegaard delta rate by exact cubic interpolation (Lagrange form,
/// four points) of log10(rate) over PSNR and composite Simpson
/// integration on the overlapping PSNR interval. Percent.
pub fn bd_rate_oracle(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> f64 {
    fn lagrange(pts: &[(f64, f64)], x: f64) -> f64 {
        let mut s = 0.0;
        for (i, &(xi, yi)) in pts.iter().enumerate() {
            let mut w = yi;
            for (j, &(xj, _)) in pts.iter().enumerate() {
                if i != j {
                    w *= (x - xj) / (xi - xj);
                }
            }
            s += w;
        }
        s
    }
    let to_pts = |c: &[(f64, f64)]| -> Vec<(f64, f64)> { c.iter().map(|&(r, p)| (p, r.log10())).collect() };
    let (a, t) = (to_pts(anchor), to_pts(test));
    let min_a = a.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let min_t = t.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_a = a.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let max_t = t.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min_a.max(min_t), max_a.min(max_t));
    let steps = 2000;
    let h = (hi - lo) / steps as f64;
    let mut integral = 0.0;
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        integral += w * (lagrange(&t, x) - lagrange(&a, x));
    }
    let avg = integral * h / 3.0 / (hi - lo);
    (10f64.powf(avg) - 1.0) * 100.0
}

/// Synthetic degraded blocks of size `n` paired with their clean YUV.
pub fn synthetic_samples(points: usize, n: usize, qp: u32, seed: u64) -> Vec<TrainSample> {
    let clean = synthetic_cloud(points, seed);
    let d = synth_degrade(&clean, &[qp], seed.wrapping_mul(31).wrapping_add(7)).unwrap();
    let target = PointCloud {
        coords: d.cloud.coords.clone(),
        attrs: d.target.clone(),
        qsteps: None,
    };
    partition_blocks(&d.cloud, n)
        .unwrap()
        .into_iter()
        .zip(partition_blocks(&target, n).unwrap())
        .map(|(block, t)| TrainSample {
            block,
            target: t.cloud.attrs,
        })
        .collect()
}
