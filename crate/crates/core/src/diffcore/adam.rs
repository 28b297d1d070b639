use std::collections::BTreeMap;

use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor2<T>>,
    v: BTreeMap<String, Tensor2<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Learning rate 1e-5, betas (0.9, 0.999), eps 1e-8.
    pub fn with_defaults() -> Self {
        Self::new(1e-5, 0.9, 0.999, 1e-8)
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor2<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor2<T>> {
        self.v.get(name)
    }
}

/// One Adam update applied in place to every parameter that has a
/// gradient. Parameters without a gradient entry are left alone.
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, Tensor2<T>>,
    grads: &BTreeMap<String, Tensor2<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Unbound(format!("gradient for unknown param {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "adam: param {name} is {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);
    let lr = state.lr;
    let eps = state.eps;

    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let (r, c) = p.shape();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor2::zeros(r, c));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor2::zeros(r, c));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gf = gv.to_f64_lossy();
            let mf = b1 * mv.to_f64_lossy() + (1.0 - b1) * gf;
            let vf = b2 * vv.to_f64_lossy() + (1.0 - b2) * gf * gf;
            *mv = T::from_f64_lossy(mf);
            *vv = T::from_f64_lossy(vf);
            let m_hat = mf / corr1;
            let v_hat = vf / corr2;
            let update = lr * m_hat / (v_hat.sqrt() + eps);
            *pv = T::from_f64_lossy(pv.to_f64_lossy() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> BTreeMap<String, Tensor2<f64>> {
        BTreeMap::from([(name.to_string(), Tensor2::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single("w", 1.5);
        let g = single("w", 0.0);
        let mut s = AdamState::with_defaults();
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p["w"].item(), Some(1.5));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        for g in [1e-3, 0.5, -7.0, 1e4] {
            let mut p = single("w", 0.0);
            let mut s = AdamState::new(1e-3, 0.9, 0.999, 1e-8);
            adam_step(&mut p, &single("w", g), &mut s).unwrap();
            let moved = p["w"].item().unwrap();
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((moved - want).abs() < 1e-12, "g={g}: {moved} vs {want}");
            assert!((moved.abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut p = single("w", 0.0);
        let g = single("w", 0.3);
        let mut s = AdamState::new(1e-2, 0.9, 0.999, 1e-8);
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut s).unwrap();
            let now = p["w"].item().unwrap();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor2::<f64>::zeros(2, 2))]);
        let g = BTreeMap::from([("w".to_string(), Tensor2::<f64>::zeros(2, 3))]);
        let mut s = AdamState::with_defaults();
        assert!(adam_step(&mut p, &g, &mut s).is_err());
        assert_eq!(s.step, 0);
    }
}
