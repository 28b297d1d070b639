//! The full multi-scale network: per-scale extraction branches,
//! distance-weighted upsampling, the Chebyshev reconstruction head, and the
//! residual connection.
//!
//! Parameters live in a flat name → tensor map. Names follow
//! `branch{s}.layer{l}.theta{k}` for graph convolutions,
//! `branch{s}.layer{l}.{delta,gamma,phi}.{w,b}{i}` for attention MLPs,
//! `branch{s}.bottleneck.{w,b}{i}` and `head.layer{i}.theta{k}`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, NodeId, ParamSet, Real, Tape, Tensor2};
use crate::error::{Error, Result};
use crate::geometry::{
    combine_blocks, farthest_from_centroid, farthest_point_sample, normalize_block_coords, partition_blocks,
    Block, InterpolationPlan, PointCloud,
};
use crate::graph::GraphOperator;
use crate::layers::{
    attention_on_tape, bottleneck_on_tape, cheb_conv_on_tape, AttentionParams, ChebConvParams, MlpParams,
};
use crate::metrics::{rgb_to_yuv_all, yuv_to_rgb_all};

/// Attribute values enter the network divided by this.
pub const ATTR_SCALE: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Y,
    U,
    V,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Y, Component::U, Component::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "Y" => Ok(Component::Y),
            "U" => Ok(Component::U),
            "V" => Ok(Component::V),
            other => Err(Error::InvalidArgument(format!("unknown component `{other}`"))),
        }
    }
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::Y => "Y",
            Component::U => "U",
            Component::V => "V",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub block_size: usize,
    /// Points per scale; the first must equal `block_size`.
    pub scales: Vec<usize>,
    pub cheb_order: usize,
    pub layout: Vec<LayerKind>,
    /// Output width of every extraction layer.
    pub feature_width: usize,
    pub mlp_depth: usize,
    pub bottleneck_width: usize,
    pub head_widths: Vec<usize>,
    pub rescale_laplacian: bool,
    /// Neighbors used by the upsampling interpolation.
    pub interp_k: usize,
    /// Restore Y, U and V together (4 inputs, 3 outputs) instead of one
    /// component per model.
    pub joint: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block_size: 2048,
            scales: vec![2048, 1024, 512],
            cheb_order: 3,
            layout: vec![LayerKind::Conv, LayerKind::Attention, LayerKind::Conv, LayerKind::Attention],
            feature_width: 64,
            mlp_depth: 2,
            bottleneck_width: 64,
            head_widths: vec![512, 256, 128, 64, 1],
            rescale_laplacian: false,
            interp_k: 3,
            joint: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and quick experiments: 32-point
    /// blocks, scales 32/16/8, all widths 8.
    pub fn tiny() -> Self {
        Self {
            block_size: 32,
            scales: vec![32, 16, 8],
            feature_width: 8,
            bottleneck_width: 8,
            head_widths: vec![8, 8, 8, 8, 1],
            ..Self::default()
        }
    }

    /// Attribute channels restored by one model.
    pub fn channels(&self) -> usize {
        if self.joint {
            3
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.block_size == 0 {
            return bad("block_size must be positive".into());
        }
        if self.scales.first() != Some(&self.block_size) {
            return bad(format!(
                "first scale must equal block_size {} (got {:?})",
                self.block_size, self.scales
            ));
        }
        if self.scales.windows(2).any(|w| w[1] >= w[0]) || self.scales.contains(&0) {
            return bad(format!("scales must be positive and strictly decreasing: {:?}", self.scales));
        }
        if !(1..=6).contains(&self.cheb_order) {
            return bad(format!("cheb_order must be in 1..=6, got {}", self.cheb_order));
        }
        if self.layout.is_empty() {
            return bad("extraction layout is empty".into());
        }
        if self.feature_width == 0 || self.bottleneck_width == 0 || self.mlp_depth == 0 {
            return bad("widths and MLP depth must be at least 1".into());
        }
        if self.head_widths.is_empty() || self.head_widths.contains(&0) {
            return bad("head widths must be non-empty and positive".into());
        }
        if *self.head_widths.last().unwrap() != self.channels() {
            return bad(format!(
                "head must end at width {} for this model, got {:?}",
                self.channels(),
                self.head_widths
            ));
        }
        let smallest = *self.scales.last().unwrap();
        if self.interp_k == 0 || (self.scales.len() > 1 && self.interp_k > smallest) {
            return bad(format!("interp_k {} invalid for smallest scale {smallest}", self.interp_k));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.channels() + 1
    }

    fn mlp_dims(&self, input: usize, width: usize) -> Vec<usize> {
        std::iter::once(input).chain(std::iter::repeat_n(width, self.mlp_depth)).collect()
    }
}

/// Learnable weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn head_output_prefix(&self) -> String {
        format!("head.layer{}", self.config.head_widths.len() - 1)
    }

    /// Replaces the zero-initialized last head layer with random weights.
    /// A fresh model is the identity map, which makes every upstream
    /// gradient zero; checks that need a non-trivial network use this.
    pub fn randomize_output_layer(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prefix = self.head_output_prefix();
        let widths = &self.config.head_widths;
        let c_in = if widths.len() > 1 {
            widths[widths.len() - 2]
        } else {
            self.config.scales.len() * self.config.bottleneck_width
        };
        let c_out = *widths.last().unwrap();
        ChebConvParams::<T>::init(&mut rng, self.config.cheb_order, c_in, c_out).insert_into(&prefix, &mut self.params);
    }

    /// Sets every parameter of the last head layer to zero.
    pub fn zero_output_layer(&mut self) {
        let prefix = format!("{}.", self.head_output_prefix());
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(&prefix) {
                *t = Tensor2::zeros(t.rows(), t.cols());
            }
        }
    }

    /// Checks that every expected parameter exists with the right shape.
    pub fn validate(&self) -> Result<()> {
        let reference: ModelParams<T> = build_model(&self.config)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                self.params.len()
            )));
        }
        for (name, t) in &reference.params {
            match self.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

/// Deterministic initialization from `config.seed`. The last head layer is
/// zero so the untrained network returns its input unchanged.
pub fn build_model<T: Real>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    let fw = config.feature_width;
    for s in 0..config.scales.len() {
        for (l, kind) in config.layout.iter().enumerate() {
            let prefix = format!("branch{s}.layer{l}");
            let c_in = if l == 0 { config.input_width() } else { fw };
            match kind {
                LayerKind::Conv => {
                    ChebConvParams::<T>::init(&mut rng, config.cheb_order, c_in, fw).insert_into(&prefix, &mut params)
                }
                LayerKind::Attention => {
                    AttentionParams::<T>::init(&mut rng, &config.mlp_dims(c_in, fw)).insert_into(&prefix, &mut params)
                }
            }
        }
        let cat = config.layout.len() * fw;
        MlpParams::<T>::init(&mut rng, &config.mlp_dims(cat, config.bottleneck_width))
            .insert_into(&format!("branch{s}.bottleneck"), &mut params);
    }
    let mut c_in = config.scales.len() * config.bottleneck_width;
    let last = config.head_widths.len() - 1;
    for (i, &w) in config.head_widths.iter().enumerate() {
        let layer = if i == last {
            ChebConvParams::zeros(config.cheb_order, c_in, w)
        } else {
            ChebConvParams::<T>::init(&mut rng, config.cheb_order, c_in, w)
        };
        layer.insert_into(&format!("head.layer{i}"), &mut params);
        c_in = w;
    }
    Ok(ModelParams {
        config: config.clone(),
        params,
    })
}

/// Names of the constant tape inputs.
fn scale_input(s: usize, what: &str) -> String {
    format!("scale{s}.{what}")
}

const ATTR_INPUT: &str = "attr";
const TARGET_INPUT: &str = "target";

/// Nodes of a recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub residual: NodeId,
    pub output: NodeId,
}

/// Records the whole network for `config` on a fresh tape.
pub fn record_forward(config: &ModelConfig) -> (Tape, ForwardNodes) {
    let mut tape = Tape::new();
    let mut branch_outputs = Vec::with_capacity(config.scales.len());
    for s in 0..config.scales.len() {
        let lap = tape.input(scale_input(s, "laplacian"));
        let h0 = tape.input(scale_input(s, "features"));
        let q = tape.input(scale_input(s, "qweights"));
        let mut h = h0;
        let mut collected = Vec::with_capacity(config.layout.len());
        for (l, kind) in config.layout.iter().enumerate() {
            let prefix = format!("branch{s}.layer{l}");
            h = match kind {
                LayerKind::Conv => cheb_conv_on_tape(&mut tape, lap, h, &prefix, config.cheb_order, true),
                LayerKind::Attention => attention_on_tape(&mut tape, h, q, &prefix, config.mlp_depth).output,
            };
            tape.label(h, prefix);
            collected.push(h);
        }
        let mut hb = bottleneck_on_tape(&mut tape, &collected, &format!("branch{s}.bottleneck"), config.mlp_depth);
        if s > 0 {
            let up = tape.input(scale_input(s, "upsample"));
            hb = tape.matmul(up, hb);
        }
        branch_outputs.push(hb);
    }
    let fused = if branch_outputs.len() == 1 {
        branch_outputs[0]
    } else {
        tape.concat_cols(&branch_outputs)
    };
    let lap0 = tape.input(scale_input(0, "laplacian"));
    let mut h = fused;
    let last = config.head_widths.len() - 1;
    for i in 0..=last {
        h = cheb_conv_on_tape(&mut tape, lap0, h, &format!("head.layer{i}"), config.cheb_order, i < last);
    }
    let residual = tape.label(h, "residual");
    let attr = tape.input(ATTR_INPUT);
    let output = tape.add(attr, residual);
    tape.mark_output("restored", output);
    tape.mark_output("residual", residual);
    (tape, ForwardNodes { residual, output })
}

/// Adds the per-sample loss `sum (restored - target)^2` to a recorded
/// forward pass.
pub fn record_loss(tape: &mut Tape, nodes: &ForwardNodes) -> NodeId {
    let target = tape.input(TARGET_INPUT);
    let diff = tape.sub(nodes.output, target);
    tape.sum_squares(diff)
}

/// Everything about a block that does not depend on the weights: graphs,
/// sampling, interpolation matrices and scaled inputs.
#[derive(Debug, Clone)]
pub struct PreparedBlock<T: Real> {
    pub inputs: HashMap<String, Tensor2<T>>,
    pub n: usize,
    pub channels: usize,
}

impl<T: Real> PreparedBlock<T> {
    /// The scaled input attributes (n x channels).
    pub fn attributes(&self) -> &Tensor2<T> {
        &self.inputs[ATTR_INPUT]
    }

    /// Attaches a ground-truth target on the 0..=255 scale.
    pub fn with_target(mut self, target: &[[f64; 3]], channels: &[usize]) -> Result<Self> {
        if target.len() != self.n || channels.len() != self.channels {
            return Err(Error::Shape(format!(
                "target of {} points / {} channels for block of {} / {}",
                target.len(),
                channels.len(),
                self.n,
                self.channels
            )));
        }
        self.inputs.insert(TARGET_INPUT.into(), scaled_channels(target, channels));
        Ok(self)
    }

    pub fn target(&self) -> Option<&Tensor2<T>> {
        self.inputs.get(TARGET_INPUT)
    }
}

fn scaled_channels<T: Real>(attrs: &[[f64; 3]], channels: &[usize]) -> Tensor2<T> {
    let mut t = Tensor2::zeros(attrs.len(), channels.len());
    for (i, a) in attrs.iter().enumerate() {
        for (j, &c) in channels.iter().enumerate() {
            t.set(i, j, T::from_f64_lossy(a[c] / ATTR_SCALE));
        }
    }
    t
}

/// Channel indices a model restores: one component or all three.
pub fn model_channels(config: &ModelConfig, component: Option<Component>) -> Result<Vec<usize>> {
    match (config.joint, component) {
        (true, _) => Ok(vec![0, 1, 2]),
        (false, Some(c)) => Ok(vec![c.index()]),
        (false, None) => Err(Error::InvalidArgument("per-component model needs a component".into())),
    }
}

/// Builds the weight-independent inputs for `block` (YUV attributes on the
/// 0..=255 scale, quantization steps required).
pub fn prepare_block<T: Real>(block: &Block, channels: &[usize], config: &ModelConfig) -> Result<PreparedBlock<T>> {
    config.validate()?;
    let cloud = &block.cloud;
    cloud.validate()?;
    let n = cloud.len();
    if n != config.block_size {
        return Err(Error::Shape(format!(
            "block has {n} points, model expects {}",
            config.block_size
        )));
    }
    if channels.len() != config.channels() {
        return Err(Error::Shape(format!(
            "{} channels for a model restoring {}",
            channels.len(),
            config.channels()
        )));
    }
    let qsteps = cloud
        .qsteps
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("block has no quantization steps".into()))?;
    let qmax = qsteps.iter().copied().fold(0.0, f64::max);
    let qnorm: Vec<f64> = qsteps.iter().map(|q| q / qmax).collect();

    let coords = normalize_block_coords(&cloud.coords);
    let attrs = scaled_channels::<T>(&cloud.attrs, channels);

    let coarsest = config.scales.get(1).copied().unwrap_or(0);
    let order = if coarsest > 0 {
        farthest_point_sample(&coords, coarsest, farthest_from_centroid(&coords))?
    } else {
        Vec::new()
    };

    let mut inputs = HashMap::new();
    for (s, &m) in config.scales.iter().enumerate() {
        let idx: Vec<usize> = if s == 0 { (0..n).collect() } else { order[..m].to_vec() };
        let sub_coords: Vec<_> = idx.iter().map(|&i| coords[i]).collect();
        let mut graph = GraphOperator::from_coords(&sub_coords)?;
        if config.rescale_laplacian {
            graph = graph.with_lambda_max();
        }
        inputs.insert(scale_input(s, "laplacian"), graph.filter_matrix::<T>(config.rescale_laplacian));
        let sub_attr = attrs.gather_rows(&idx);
        let q_col = Tensor2::from_vec(m, 1, idx.iter().map(|&i| T::from_f64_lossy(qnorm[i])).collect())?;
        inputs.insert(scale_input(s, "features"), Tensor2::concat_cols(&[&sub_attr, &q_col])?);
        inputs.insert(scale_input(s, "qweights"), q_col);
        if s > 0 {
            let plan = InterpolationPlan::new(&sub_coords, &coords, config.interp_k)?;
            inputs.insert(scale_input(s, "upsample"), plan.to_matrix());
        }
    }
    inputs.insert(ATTR_INPUT.into(), attrs);
    Ok(PreparedBlock {
        inputs,
        n,
        channels: channels.len(),
    })
}

/// Runs the network on a prepared block; returns restored attributes on
/// the internal 0..=1 scale (n x channels).
pub fn forward_prepared<T: Real>(prepared: &PreparedBlock<T>, model: &ModelParams<T>) -> Result<Tensor2<T>> {
    let (tape, nodes) = record_forward(&model.config);
    Ok(diffcore::forward(&tape, &prepared.inputs, &model.params)?.into_value(nodes.output))
}

/// Restores one component of a YUV block (attributes on 0..=255). The
/// result is on the internal 0..=1 scale, n x 1.
pub fn forward<T: Real>(block: &Block, component: Component, model: &ModelParams<T>) -> Result<Tensor2<T>> {
    let channels = model_channels(&model.config, Some(component))?;
    forward_prepared(&prepare_block(block, &channels, &model.config)?, model)
}

/// Per-component models used to restore a full cloud.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum RestorationModels<T: Real = f32> {
    PerComponent([ModelParams<T>; 3]),
    Joint(ModelParams<T>),
}

impl<T: Real> RestorationModels<T> {
    fn block_size(&self) -> Result<usize> {
        match self {
            RestorationModels::Joint(m) => {
                if !m.config.joint {
                    return Err(Error::Config("joint restoration needs a joint model".into()));
                }
                Ok(m.config.block_size)
            }
            RestorationModels::PerComponent(ms) => {
                if ms.iter().any(|m| m.config.joint) {
                    return Err(Error::Config("per-component restoration given a joint model".into()));
                }
                let n = ms[0].config.block_size;
                if ms.iter().any(|m| m.config.block_size != n) {
                    return Err(Error::Config("component models disagree on block size".into()));
                }
                Ok(n)
            }
        }
    }
}

/// Full pipeline on an RGB cloud: convert to YUV, split into blocks,
/// restore every component of every block, recombine and convert back to
/// 8-bit RGB. Geometry is passed through untouched.
pub fn restore_cloud<T: Real>(cloud: &PointCloud, qsteps: &[f64], models: &RestorationModels<T>) -> Result<PointCloud> {
    if qsteps.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "{} quantization steps for {} points",
            qsteps.len(),
            cloud.len()
        )));
    }
    let n = models.block_size()?;
    let yuv = PointCloud::new(cloud.coords.clone(), rgb_to_yuv_all(&cloud.attrs)?, Some(qsteps.to_vec()))?;
    let blocks = partition_blocks(&yuv, n)?;
    let restored: Vec<Block> = blocks
        .par_iter()
        .map(|block| -> Result<Block> {
            let mut out = block.clone();
            let mut write = |values: &Tensor2<T>, channels: &[usize]| {
                for (i, a) in out.cloud.attrs.iter_mut().enumerate() {
                    for (j, &c) in channels.iter().enumerate() {
                        a[c] = values.get(i, j).to_f64_lossy() * ATTR_SCALE;
                    }
                }
            };
            match models {
                RestorationModels::Joint(m) => {
                    let ch = [0, 1, 2];
                    write(&forward_prepared(&prepare_block(block, &ch, &m.config)?, m)?, &ch);
                }
                RestorationModels::PerComponent(ms) => {
                    for (c, m) in ms.iter().enumerate() {
                        write(&forward_prepared(&prepare_block(block, &[c], &m.config)?, m)?, &[c]);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let combined = combine_blocks(&restored)?;
    Ok(PointCloud {
        coords: cloud.coords.clone(),
        attrs: yuv_to_rgb_all(&combined.attrs),
        qsteps: None,
    })
}
