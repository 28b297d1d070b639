//! Color conversion and rate-distortion metrics.

use crate::error::{Error, Result};

/// BT.709 luma weights.
pub const KR: f64 = 0.2126;
pub const KB: f64 = 0.0722;
pub const KG: f64 = 1.0 - KR - KB;
/// Chroma scale factors `2 (1 - KB)` and `2 (1 - KR)`.
pub const CB_SCALE: f64 = 2.0 * (1.0 - KB);
pub const CR_SCALE: f64 = 2.0 * (1.0 - KR);
pub const CHROMA_OFFSET: f64 = 128.0;

/// PSNR reported for identical signals.
pub const PSNR_CAP: f64 = 100.0;

/// Full-range BT.709 RGB to YUV with chroma centered on 128.
pub fn rgb_to_yuv(rgb: [f64; 3]) -> Result<[f64; 3]> {
    if let Some(v) = rgb.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("RGB value {v} outside [0, 255]")));
    }
    let [r, g, b] = rgb;
    let y = KR * r + KG * g + KB * b;
    Ok([y, (b - y) / CB_SCALE + CHROMA_OFFSET, (r - y) / CR_SCALE + CHROMA_OFFSET])
}

/// Inverse of [`rgb_to_yuv`] without rounding.
pub fn yuv_to_rgb_exact(yuv: [f64; 3]) -> [f64; 3] {
    let [y, u, v] = yuv;
    let b = y + CB_SCALE * (u - CHROMA_OFFSET);
    let r = y + CR_SCALE * (v - CHROMA_OFFSET);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

/// Inverse conversion, rounded and clamped to 8-bit values.
pub fn yuv_to_rgb(yuv: [f64; 3]) -> [f64; 3] {
    yuv_to_rgb_exact(yuv).map(|c| c.round().clamp(0.0, 255.0))
}

pub fn rgb_to_yuv_all(rgb: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    rgb.iter().map(|&c| rgb_to_yuv(c)).collect()
}

pub fn yuv_to_rgb_all(yuv: &[[f64; 3]]) -> Vec<[f64; 3]> {
    yuv.iter().map(|&c| yuv_to_rgb(c)).collect()
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("mean squared error of empty signals".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// 6:1:1 weighted combination of component PSNRs.
pub fn yuv_psnr(y: f64, u: f64, v: f64) -> f64 {
    (6.0 * y + u + v) / 8.0
}

/// Y, U, V and combined PSNR between two YUV attribute sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    pub y: f64,
    pub u: f64,
    pub v: f64,
    pub yuv: f64,
}

pub fn quality(reference: &[[f64; 3]], test: &[[f64; 3]]) -> Result<QualityReport> {
    let ch = |s: &[[f64; 3]], c: usize| s.iter().map(|p| p[c]).collect::<Vec<_>>();
    let y = psnr(&ch(reference, 0), &ch(test, 0), 255.0)?;
    let u = psnr(&ch(reference, 1), &ch(test, 1), 255.0)?;
    let v = psnr(&ch(reference, 2), &ch(test, 2), 255.0)?;
    Ok(QualityReport { y, u, v, yuv: yuv_psnr(y, u, v) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    /// Bits per point.
    pub rate: f64,
    /// dB.
    pub psnr: f64,
}

/// At least four rate points with strictly increasing rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    points: Vec<RatePoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RatePoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "rate-distortion curve needs at least 4 points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !(p.rate > 0.0) || !p.psnr.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid rate point {p:?}")));
        }
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        if points.windows(2).any(|w| w[0].rate == w[1].rate) {
            return Err(Error::InvalidArgument("duplicate rates in curve".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RatePoint] {
        &self.points
    }

    fn psnr_range(&self) -> (f64, f64) {
        let lo = self.points.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
        let hi = self.points.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Least-squares polynomial fit of `ys` against `xs`; coefficients in
/// ascending powers. Solved through normal equations on centered, scaled
/// abscissae to keep the system well conditioned.
fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<(Vec<f64>, f64, f64)> {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let spread = xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    if spread == 0.0 {
        return Err(Error::InvalidArgument("all PSNR values are equal".into()));
    }
    let t: Vec<f64> = xs.iter().map(|x| (x - mean) / spread).collect();
    let m = degree + 1;
    let mut a = vec![vec![0.0; m + 1]; m];
    for (ti, yi) in t.iter().zip(ys) {
        let pows: Vec<f64> = (0..m).map(|p| ti.powi(p as i32)).collect();
        for r in 0..m {
            for c in 0..m {
                a[r][c] += pows[r] * pows[c];
            }
            a[r][m] += pows[r] * yi;
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::InvalidArgument("singular polynomial fit".into()));
        }
        a.swap(col, piv);
        let pivot_row = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != col {
                let f = row[col] / pivot_row[col];
                for c in col..=m {
                    row[c] -= f * pivot_row[c];
                }
            }
        }
    }
    let coeffs = (0..m).map(|r| a[r][m] / a[r][r]).collect();
    Ok((coeffs, mean, spread))
}

/// Integral of the fitted polynomial over `[lo, hi]` in original units.
fn integrate_fit(fit: &(Vec<f64>, f64, f64), lo: f64, hi: f64) -> f64 {
    let (coeffs, mean, spread) = fit;
    let anti = |x: f64| {
        let t = (x - mean) / spread;
        coeffs
            .iter()
            .enumerate()
            .map(|(p, c)| c * t.powi(p as i32 + 1) / (p as f64 + 1.0))
            .sum::<f64>()
            * spread
    };
    anti(hi) - anti(lo)
}

/// Bjøntegaard delta rate in percent: average bitrate difference of
/// `test` against `anchor` over their common PSNR range, from cubic fits
/// of log10(rate) versus PSNR. Negative values are savings.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (a_lo, a_hi) = anchor.psnr_range();
    let (t_lo, t_hi) = test.psnr_range();
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "PSNR ranges [{a_lo}, {a_hi}] and [{t_lo}, {t_hi}] do not overlap"
        )));
    }
    let fit = |c: &RdCurve| {
        let xs: Vec<f64> = c.points.iter().map(|p| p.psnr).collect();
        let ys: Vec<f64> = c.points.iter().map(|p| p.rate.log10()).collect();
        polyfit(&xs, &ys, 3)
    };
    let fa = fit(anchor)?;
    let ft = fit(test)?;
    let avg = (integrate_fit(&ft, lo, hi) - integrate_fit(&fa, lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}
