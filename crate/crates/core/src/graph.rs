//! Fully connected Gaussian-weighted graphs over block points and
//! Chebyshev polynomial filtering of signals on them.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::diffcore::{NodeId, Real, Tape, Tensor2};
use crate::error::{Error, Result};
use crate::geometry::{squared_distance, Point};

pub const POWER_ITERATIONS: usize = 100;
pub const POWER_TOLERANCE: f64 = 1e-6;

/// Dense graph over one block at one scale.
#[derive(Debug, Clone)]
pub struct GraphOperator {
    pub n: usize,
    pub adjacency: Tensor2<f64>,
    pub degrees: Vec<f64>,
    pub laplacian: Tensor2<f64>,
    /// Largest Laplacian eigenvalue; set only when rescaling is requested.
    pub lambda_max: Option<f64>,
}

impl GraphOperator {
    /// Complete graph with `a_ij = exp(-|x_i - x_j|^2)` and its normalized
    /// Laplacian. A single point yields the zero operator `[[0]]`.
    pub fn from_coords(coords: &[Point]) -> Result<Self> {
        let (adjacency, degrees) = build_adjacency(coords)?;
        let n = coords.len();
        let laplacian = if n == 1 {
            Tensor2::zeros(1, 1)
        } else {
            normalized_laplacian(&adjacency, &degrees)?
        };
        Ok(Self {
            n,
            adjacency,
            degrees,
            laplacian,
            lambda_max: None,
        })
    }

    pub fn with_lambda_max(mut self) -> Self {
        self.lambda_max = Some(largest_eigenvalue(&self.laplacian));
        self
    }

    /// Matrix fed to the Chebyshev recurrence: `L` itself, or
    /// `2 L / lambda_max - I` when rescaling is enabled.
    pub fn filter_matrix<T: Real>(&self, rescale: bool) -> Tensor2<T> {
        if !rescale {
            return self.laplacian.cast();
        }
        let lambda = self
            .lambda_max
            .unwrap_or_else(|| largest_eigenvalue(&self.laplacian));
        let mut m = self.laplacian.scale(if lambda > 0.0 { 2.0 / lambda } else { 0.0 });
        for i in 0..self.n {
            m.set(i, i, m.get(i, i) - 1.0);
        }
        m.cast()
    }
}

/// Adjacency and degrees of the complete graph over `coords`.
pub fn build_adjacency(coords: &[Point]) -> Result<(Tensor2<f64>, Vec<f64>)> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::InvalidArgument("graph over zero points".into()));
    }
    let mut a = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let w = (-squared_distance(&coords[i], &coords[j])).exp();
            a.set(i, j, w);
            a.set(j, i, w);
        }
    }
    let degrees = (0..n).map(|i| a.row(i).iter().sum()).collect();
    Ok((a, degrees))
}

/// `L = I - D^{-1/2} A D^{-1/2}`.
pub fn normalized_laplacian(adjacency: &Tensor2<f64>, degrees: &[f64]) -> Result<Tensor2<f64>> {
    let n = adjacency.rows();
    if adjacency.cols() != n || degrees.len() != n {
        return Err(Error::Shape(format!(
            "adjacency {:?} with {} degrees",
            adjacency.shape(),
            degrees.len()
        )));
    }
    if let Some(i) = degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::InvalidArgument(format!("vertex {i} has zero degree")));
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut l = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let off = adjacency.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
            l.set(i, j, if i == j { 1.0 - off } else { -off });
        }
    }
    Ok(l)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn largest_eigenvalue(m: &Tensor2<f64>) -> f64 {
    let n = m.rows();
    if n == 0 {
        return 0.0;
    }
    // Deterministic start vector with no special symmetry.
    let mut v = Tensor2::from_vec(n, 1, (0..n).map(|i| 1.0 + (i as f64 * 0.618_034).fract()).collect())
        .expect("length matches");
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let norm = v.sum_squares().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = v.scale(1.0 / norm);
        let w = m.matmul(&v).expect("square matrix");
        let next: f64 = w.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        v = w;
        let done = (next - lambda).abs() <= POWER_TOLERANCE * next.abs().max(1.0);
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

fn check_theta<T: Real>(n: usize, h: &Tensor2<T>, theta: &[Tensor2<T>], l_shape: (usize, usize)) -> Result<()> {
    if theta.is_empty() {
        return Err(Error::InvalidArgument("Chebyshev order K must be at least 1".into()));
    }
    if l_shape != (n, n) {
        return Err(Error::Shape(format!("laplacian {l_shape:?} for {n} rows")));
    }
    let want = theta[0].shape();
    if want.0 != h.cols() {
        return Err(Error::Shape(format!(
            "theta is {}x{} but signal has {} channels",
            want.0,
            want.1,
            h.cols()
        )));
    }
    if let Some(k) = theta.iter().position(|t| t.shape() != want) {
        return Err(Error::Shape(format!("theta[{k}] shape differs from theta[0]")));
    }
    Ok(())
}

/// `sum_k Z_k(L) H Theta_k` with `Z_0 = I`, `Z_1 = L`,
/// `Z_k = 2 L Z_{k-1} - Z_{k-2}`, applied to `H` directly.
pub fn cheb_apply<T: Real>(laplacian: &Tensor2<T>, h: &Tensor2<T>, theta: &[Tensor2<T>]) -> Result<Tensor2<T>> {
    check_theta(h.rows(), h, theta, laplacian.shape())?;
    let mut out = h.matmul(&theta[0])?;
    let mut prev = h.clone();
    let mut cur = laplacian.matmul(h)?;
    for (k, th) in theta.iter().enumerate().skip(1) {
        if k > 1 {
            let two = T::one() + T::one();
            let next = laplacian.matmul(&cur)?.scale(two).sub(&prev)?;
            prev = std::mem::replace(&mut cur, next);
        }
        out.add_assign(&cur.matmul(th)?)?;
    }
    Ok(out)
}

/// Records the Chebyshev filter on a tape. `laplacian` and `h` are nodes,
/// `theta` are parameter nodes. Returns the output node.
pub fn cheb_apply_on_tape(tape: &mut Tape, laplacian: NodeId, h: NodeId, theta: &[NodeId]) -> NodeId {
    assert!(!theta.is_empty(), "Chebyshev order K must be at least 1");
    let mut out = tape.matmul(h, theta[0]);
    if theta.len() == 1 {
        return out;
    }
    let mut prev = h;
    let mut cur = tape.matmul(laplacian, h);
    for (k, &th) in theta.iter().enumerate().skip(1) {
        if k > 1 {
            let lz = tape.matmul(laplacian, cur);
            let twice = tape.scale(lz, 2.0);
            let next = tape.sub(twice, prev);
            prev = cur;
            cur = next;
        }
        let term = tape.matmul(cur, th);
        out = tape.add(out, term);
    }
    out
}

fn chebyshev_values(x: f64, k: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(k);
    for i in 0..k {
        z.push(match i {
            0 => 1.0,
            1 => x,
            _ => 2.0 * x * z[i - 1] - z[i - 2],
        });
    }
    z
}

/// Spectral evaluation of the same filter through a full symmetric
/// eigendecomposition `L = U diag(lambda) U^T`:
/// `sum_k U Z_k(diag(lambda)) U^T H Theta_k`. Intended as a reference for
/// small graphs.
pub fn spectral_filter_oracle(
    laplacian: &Tensor2<f64>,
    h: &Tensor2<f64>,
    theta: &[Tensor2<f64>],
) -> Result<Tensor2<f64>> {
    let n = h.rows();
    check_theta(n, h, theta, laplacian.shape())?;
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (laplacian.get(i, j), laplacian.get(j, i));
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, laplacian.data()));
    let u = &eig.eigenvectors;
    let hm = DMatrix::from_row_slice(n, h.cols(), h.data());
    let spectral_h = u.transpose() * hm;
    let c_out = theta[0].cols();
    let mut out = DMatrix::<f64>::zeros(n, c_out);
    let zs: Vec<Vec<f64>> = eig
        .eigenvalues
        .iter()
        .map(|&lam| chebyshev_values(lam, theta.len()))
        .collect();
    for (k, th) in theta.iter().enumerate() {
        let mut scaled = spectral_h.clone();
        for (i, z) in zs.iter().enumerate() {
            scaled.row_mut(i).scale_mut(z[k]);
        }
        let thm = DMatrix::from_row_slice(th.rows(), th.cols(), th.data());
        out += u * scaled * thm;
    }
    let mut data = Vec::with_capacity(n * c_out);
    for i in 0..n {
        for j in 0..c_out {
            data.push(out[(i, j)]);
        }
    }
    Tensor2::from_vec(n, c_out, data)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &Tensor2<f64>) -> Vec<f64> {
    let n = m.rows();
    let mut ev: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, m.data()))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}
