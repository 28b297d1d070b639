//! Loss, mini-batch training and finite-difference gradient checking.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, adam_step, AdamState, ParamSet, Real, Tape, Tensor2};
use crate::error::{Error, Result};
use crate::geometry::Block;
use crate::model::{
    model_channels, prepare_block, record_forward, record_loss, Component, ModelConfig, ModelParams, PreparedBlock,
};
use crate::synth::DEFAULT_QPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub component: Component,
    pub seed: u64,
    pub qp_set: Vec<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 10,
            component: Component::Y,
            seed: 0,
            qp_set: DEFAULT_QPS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A degraded block (YUV on 0..=255, with steps) and the clean YUV values
/// of the same points.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub block: Block,
    pub target: Vec<[f64; 3]>,
}

/// `sum_j (restored_j - target_j)^2` over every entry.
pub fn mse_loss<T: Real>(restored: &Tensor2<T>, target: &Tensor2<T>) -> Result<f64> {
    if restored.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "restored {:?} vs target {:?}",
            restored.shape(),
            target.shape()
        )));
    }
    Ok(restored.sub(target)?.sum_squares().to_f64_lossy())
}

/// Builds the graph inputs and scaled targets for every sample.
pub fn prepare_samples<T: Real>(
    samples: &[TrainSample],
    config: &ModelConfig,
    component: Component,
) -> Result<Vec<PreparedBlock<T>>> {
    let channels = model_channels(config, Some(component))?;
    samples
        .par_iter()
        .map(|s| prepare_block(&s.block, &channels, config)?.with_target(&s.target, &channels))
        .collect()
}

/// Loss and parameter gradients for one prepared sample.
pub fn loss_and_gradients<T: Real>(
    tape: &Tape,
    loss: diffcore::NodeId,
    sample: &PreparedBlock<T>,
    model: &ModelParams<T>,
) -> Result<(f64, ParamSet<T>)> {
    let eval = diffcore::forward(tape, &sample.inputs, &model.params)?;
    let value = eval
        .value(loss)
        .item()
        .expect("loss is scalar")
        .to_f64_lossy();
    let grads = diffcore::backward(tape, &eval, loss)?;
    Ok((value, grads))
}

pub fn loss_value<T: Real>(sample: &PreparedBlock<T>, model: &ModelParams<T>) -> Result<f64> {
    let (mut tape, nodes) = record_forward(&model.config);
    let loss = record_loss(&mut tape, &nodes);
    let eval = diffcore::forward(&tape, &sample.inputs, &model.params)?;
    Ok(eval.value(loss).item().expect("scalar").to_f64_lossy())
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub model: ModelParams<T>,
    /// Mean per-sample loss seen during each epoch.
    pub history: Vec<f64>,
    pub steps: u64,
}

/// Mini-batch Adam on prepared samples. Gradients are averaged over each
/// batch; the sample order is reshuffled every epoch from `config.seed`.
pub fn train_prepared<T: Real>(
    samples: &[PreparedBlock<T>],
    mut model: ModelParams<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(i) = samples.iter().position(|s| s.target().is_none()) {
        return Err(Error::InvalidArgument(format!("sample {i} has no target")));
    }
    let (mut tape, nodes) = record_forward(&model.config);
    let loss = record_loss(&mut tape, &nodes);
    let mut adam = AdamState::new(config.lr, config.beta1, config.beta2, config.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, ParamSet<T>)> = batch
                .par_iter()
                .map(|&i| loss_and_gradients(&tape, loss, &samples[i], &model))
                .collect::<Result<_>>()?;
            let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
            let mut mean: BTreeMap<String, Tensor2<T>> = BTreeMap::new();
            for (value, grads) in results {
                epoch_loss += value;
                for (name, g) in grads {
                    match mean.get_mut(&name) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            mean.insert(name, g);
                        }
                    }
                }
            }
            for g in mean.values_mut() {
                *g = g.scale(inv);
            }
            adam_step(&mut model.params, &mean, &mut adam)?;
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        on_epoch(epoch, mean_loss);
        history.push(mean_loss);
    }
    Ok(TrainOutcome {
        model,
        history,
        steps: adam.step,
    })
}

/// Prepares the samples for `config.component` and trains.
pub fn train<T: Real>(dataset: &[TrainSample], model: ModelParams<T>, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let prepared = prepare_samples(dataset, &model.config, config.component)?;
    train_prepared(&prepared, model, config, |_, _| {})
}

/// Coarse grouping of parameters for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Conv,
    Attention,
    Bottleneck,
    Head,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        if name.starts_with("head.") {
            ParamKind::Head
        } else if name.contains(".bottleneck.") {
            ParamKind::Bottleneck
        } else if name.contains(".delta.") || name.contains(".gamma.") || name.contains(".phi.") {
            ParamKind::Attention
        } else {
            ParamKind::Conv
        }
    }
}

/// Denominator floor for relative errors, so that near-zero gradients are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub kind: ParamKind,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn max_for(&self, kind: ParamKind) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the per-sample loss with central
/// differences `(L(p + h) - L(p - h)) / 2h` on `per_kind` randomly chosen
/// scalars of every parameter kind.
pub fn gradient_check(
    model: &ModelParams<f64>,
    sample: &PreparedBlock<f64>,
    step: f64,
    per_kind: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if sample.target().is_none() {
        return Err(Error::InvalidArgument("gradient check needs a target".into()));
    }
    let (mut tape, nodes) = record_forward(&model.config);
    let loss = record_loss(&mut tape, &nodes);
    let (_, grads) = loss_and_gradients(&tape, loss, sample, model)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_kind: BTreeMap<ParamKind, Vec<(&String, usize)>> = BTreeMap::new();
    for (name, t) in &model.params {
        let slots = by_kind.entry(ParamKind::of(name)).or_default();
        slots.extend((0..t.data().len()).map(|i| (name, i)));
    }
    let mut picks = Vec::new();
    for slots in by_kind.values() {
        for _ in 0..per_kind.min(slots.len()) {
            picks.push(slots[rng.random_range(0..slots.len())]);
        }
    }

    let entries: Vec<GradCheckEntry> = picks
        .par_iter()
        .map(|&(name, index)| -> Result<GradCheckEntry> {
            let mut probe = model.clone();
            let eval_at = |probe: &mut ModelParams<f64>, value: f64| -> Result<f64> {
                probe.params.get_mut(name).expect("name from model").data_mut()[index] = value;
                let ev = diffcore::forward(&tape, &sample.inputs, &probe.params)?;
                Ok(ev.value(loss).item().expect("scalar"))
            };
            let base = model.params[name].data()[index];
            let plus = eval_at(&mut probe, base + step)?;
            let minus = eval_at(&mut probe, base - step)?;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads[name].data()[index];
            Ok(GradCheckEntry {
                name: name.clone(),
                index,
                kind: ParamKind::of(name),
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            })
        })
        .collect::<Result<_>>()?;
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{partition_blocks, PointCloud};
    use crate::model::build_model;
    use crate::synth::{synth_degrade, synthetic_cloud};

    fn t(values: &[f64]) -> Tensor2<f64> {
        Tensor2::column(values)
    }

    #[test]
    fn loss_cases() {
        assert_eq!(mse_loss(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_loss(&t(&[1.0, 2.0]), &t(&[0.0, 0.0])).unwrap(), 5.0);
        assert!(mse_loss(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut want = 0.0;
        for i in 0..100 {
            want += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((mse_loss(&t(&a), &t(&b)).unwrap() - want).abs() < 1e-12);
    }

    pub(crate) fn tiny_samples(count: usize, qp: u32, seed: u64) -> Vec<TrainSample> {
        let cloud = synthetic_cloud(32 * count, seed);
        let d = synth_degrade(&cloud, &[qp], seed + 1).unwrap();
        let target = PointCloud {
            coords: d.cloud.coords.clone(),
            attrs: d.target.clone(),
            qsteps: None,
        };
        partition_blocks(&d.cloud, 32)
            .unwrap()
            .into_iter()
            .zip(partition_blocks(&target, 32).unwrap())
            .map(|(block, tb)| TrainSample {
                block,
                target: tb.cloud.attrs,
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let model: ModelParams<f32> = build_model(&ModelConfig::tiny()).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let out = train(&tiny_samples(3, 46, 1), model.clone(), &cfg).unwrap();
        assert_eq!(out.model, model);
        assert!(out.history.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(out.steps, 6);
    }

    #[test]
    fn training_is_deterministic() {
        let model: ModelParams<f32> = build_model(&ModelConfig::tiny()).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let data = tiny_samples(4, 46, 2);
        let a = train(&data, model.clone(), &cfg).unwrap();
        let b = train(&data, model, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn empty_dataset_rejected() {
        let model: ModelParams<f32> = build_model(&ModelConfig::tiny()).unwrap();
        assert!(train(&[], model, &TrainConfig::default()).is_err());
    }

    #[test]
    fn param_kinds() {
        assert_eq!(ParamKind::of("head.layer4.theta0"), ParamKind::Head);
        assert_eq!(ParamKind::of("branch1.bottleneck.w0"), ParamKind::Bottleneck);
        assert_eq!(ParamKind::of("branch0.layer1.phi.b1"), ParamKind::Attention);
        assert_eq!(ParamKind::of("branch2.layer0.theta2"), ParamKind::Conv);
    }

    #[test]
    fn zero_loss_sample_has_zero_gradients() {
        let mut model: ModelParams<f64> = build_model(&ModelConfig::tiny()).unwrap();
        model.randomize_output_layer(3);
        let sample = &tiny_samples(1, 46, 5)[0];
        let channels = [0];
        let prepared = prepare_block::<f64>(&sample.block, &channels, &model.config).unwrap();
        let out = crate::model::forward_prepared(&prepared, &model).unwrap();
        let mut prepared = prepared;
        prepared.inputs.insert("target".into(), out);
        let report = gradient_check(&model, &prepared, 1e-6, 5, 1).unwrap();
        for e in &report.entries {
            assert!(e.analytic.abs() < 1e-12 && e.numeric.abs() < 1e-8, "{e:?}");
        }
    }
}
