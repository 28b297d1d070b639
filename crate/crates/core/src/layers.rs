//! Network building blocks. Each layer has a tape-recording form used by
//! the model (parameters referenced by name prefix) and a standalone form
//! taking typed parameters.

use std::collections::HashMap;

use rand::Rng;

use crate::diffcore::{self, NodeId, ParamSet, Real, Tape, Tensor2};
use crate::error::{Error, Result};
use crate::graph::{cheb_apply_on_tape, GraphOperator};

/// Uniform Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor2<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64_lossy(rng.random_range(-limit..=limit)))
        .collect();
    Tensor2::from_vec(fan_in, fan_out, data).expect("length matches")
}

/// One affine layer: `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real> {
    pub weight: Tensor2<T>,
    pub bias: Tensor2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T: Real> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> MlpParams<T> {
    /// `dims = [F_0, F_1, ..., F_depth]`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        Self {
            layers: dims
                .windows(2)
                .map(|w| Dense {
                    weight: glorot(rng, w[0], w[1]),
                    bias: Tensor2::zeros(1, w[1]),
                })
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("MLP depth must be at least 1".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::Shape(format!("MLP layer {i}: bias does not match weight")));
            }
            if i > 0 && self.layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::Shape(format!("MLP layer {i}: input width does not chain")));
            }
        }
        Ok(())
    }

    pub fn insert_into(&self, prefix: &str, set: &mut ParamSet<T>) {
        for (i, l) in self.layers.iter().enumerate() {
            set.insert(format!("{prefix}.w{i}"), l.weight.clone());
            set.insert(format!("{prefix}.b{i}"), l.bias.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChebConvParams<T: Real> {
    pub theta: Vec<Tensor2<T>>,
}

impl<T: Real> ChebConvParams<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, order: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            theta: (0..order).map(|_| glorot(rng, c_in, c_out)).collect(),
        }
    }

    pub fn zeros(order: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            theta: (0..order).map(|_| Tensor2::zeros(c_in, c_out)).collect(),
        }
    }

    pub fn insert_into(&self, prefix: &str, set: &mut ParamSet<T>) {
        for (k, t) in self.theta.iter().enumerate() {
            set.insert(format!("{prefix}.theta{k}"), t.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Real> {
    pub mlp_delta: MlpParams<T>,
    pub mlp_gamma: MlpParams<T>,
    pub mlp_phi: MlpParams<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: &[usize]) -> Self {
        Self {
            mlp_delta: MlpParams::init(rng, dims),
            mlp_gamma: MlpParams::init(rng, dims),
            mlp_phi: MlpParams::init(rng, dims),
        }
    }

    pub fn insert_into(&self, prefix: &str, set: &mut ParamSet<T>) {
        self.mlp_delta.insert_into(&format!("{prefix}.delta"), set);
        self.mlp_gamma.insert_into(&format!("{prefix}.gamma"), set);
        self.mlp_phi.insert_into(&format!("{prefix}.phi"), set);
    }
}

/// Intermediates of one weighted attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T: Real> {
    /// `S = MLP_delta(H) MLP_gamma(H)^T`
    pub similarity: Tensor2<T>,
    /// `M_ij = q_i S_ij`
    pub weighted_logits: Tensor2<T>,
    /// Row-wise softmax of `M`.
    pub attention: Tensor2<T>,
}

pub fn mlp_on_tape(tape: &mut Tape, x: NodeId, prefix: &str, depth: usize, final_relu: bool) -> NodeId {
    let mut h = x;
    for i in 0..depth {
        let w = tape.param(format!("{prefix}.w{i}"));
        let b = tape.param(format!("{prefix}.b{i}"));
        let xw = tape.matmul(h, w);
        h = tape.add_row(xw, b);
        if i + 1 < depth || final_relu {
            h = tape.relu(h);
        }
    }
    h
}

pub fn cheb_conv_on_tape(
    tape: &mut Tape,
    laplacian: NodeId,
    h: NodeId,
    prefix: &str,
    order: usize,
    relu: bool,
) -> NodeId {
    let theta: Vec<NodeId> = (0..order).map(|k| tape.param(format!("{prefix}.theta{k}"))).collect();
    let out = cheb_apply_on_tape(tape, laplacian, h, &theta);
    if relu {
        tape.relu(out)
    } else {
        out
    }
}

/// Nodes produced by [`attention_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub output: NodeId,
    pub similarity: NodeId,
    pub weighted_logits: NodeId,
    pub attention: NodeId,
}

/// `softmax_rows(q ⊙ (MLP_δ(H) MLP_γ(H)^T)) MLP_φ(H)`, where row i of
/// the similarity is multiplied by `q_i`.
pub fn attention_on_tape(tape: &mut Tape, h: NodeId, q: NodeId, prefix: &str, depth: usize) -> AttentionNodes {
    let d = mlp_on_tape(tape, h, &format!("{prefix}.delta"), depth, true);
    let g = mlp_on_tape(tape, h, &format!("{prefix}.gamma"), depth, true);
    let phi = mlp_on_tape(tape, h, &format!("{prefix}.phi"), depth, true);
    let similarity = tape.matmul_t(d, g);
    let weighted_logits = tape.scale_rows(similarity, q);
    let attention = tape.row_softmax(weighted_logits);
    let output = tape.matmul(attention, phi);
    AttentionNodes {
        output,
        similarity,
        weighted_logits,
        attention,
    }
}

/// Column concatenation of every collected feature map followed by the
/// bottleneck MLP.
pub fn bottleneck_on_tape(tape: &mut Tape, features: &[NodeId], prefix: &str, depth: usize) -> NodeId {
    let cat = if features.len() == 1 {
        features[0]
    } else {
        tape.concat_cols(features)
    };
    mlp_on_tape(tape, cat, prefix, depth, true)
}

fn single_input<T: Real>(name: &str, t: &Tensor2<T>) -> HashMap<String, Tensor2<T>> {
    HashMap::from([(name.to_string(), t.clone())])
}

pub fn mlp_forward<T: Real>(h: &Tensor2<T>, params: &MlpParams<T>, final_relu: bool) -> Result<Tensor2<T>> {
    params.validate()?;
    let mut tape = Tape::new();
    let x = tape.input("h");
    let out = mlp_on_tape(&mut tape, x, "mlp", params.depth(), final_relu);
    let mut set = ParamSet::new();
    params.insert_into("mlp", &mut set);
    Ok(diffcore::forward(&tape, &single_input("h", h), &set)?.into_value(out))
}

pub fn cheb_conv_layer<T: Real>(
    graph: &GraphOperator,
    h: &Tensor2<T>,
    params: &ChebConvParams<T>,
    relu: bool,
) -> Result<Tensor2<T>> {
    let out = crate::graph::cheb_apply(&graph.laplacian.cast(), h, &params.theta)?;
    Ok(if relu { out.relu() } else { out })
}

pub fn weighted_graph_attention<T: Real>(
    h: &Tensor2<T>,
    q: &Tensor2<T>,
    params: &AttentionParams<T>,
) -> Result<(Tensor2<T>, AttentionTrace<T>)> {
    if q.cols() != 1 || q.rows() != h.rows() {
        return Err(Error::Shape(format!(
            "quantization weights {:?} for {} points",
            q.shape(),
            h.rows()
        )));
    }
    if let Some(bad) = q.data().iter().find(|v| !(**v > T::zero())) {
        return Err(Error::InvalidArgument(format!("attention weight {bad} is not positive")));
    }
    for m in [&params.mlp_delta, &params.mlp_gamma, &params.mlp_phi] {
        m.validate()?;
    }
    let depth = params.mlp_delta.depth();
    if params.mlp_gamma.depth() != depth || params.mlp_phi.depth() != depth {
        return Err(Error::InvalidArgument("attention MLPs must share depth".into()));
    }
    let mut tape = Tape::new();
    let hn = tape.input("h");
    let qn = tape.input("q");
    let nodes = attention_on_tape(&mut tape, hn, qn, "attn", depth);
    let inputs = HashMap::from([("h".to_string(), h.clone()), ("q".to_string(), q.clone())]);
    let mut set = ParamSet::new();
    params.insert_into("attn", &mut set);
    let eval = diffcore::forward(&tape, &inputs, &set)?;
    let trace = AttentionTrace {
        similarity: eval.value(nodes.similarity).clone(),
        weighted_logits: eval.value(nodes.weighted_logits).clone(),
        attention: eval.value(nodes.attention).clone(),
    };
    Ok((eval.into_value(nodes.output), trace))
}

pub fn bottleneck<T: Real>(features: &[&Tensor2<T>], params: &MlpParams<T>) -> Result<Tensor2<T>> {
    let Some(first) = features.first() else {
        return Err(Error::InvalidArgument("bottleneck over zero feature maps".into()));
    };
    if let Some(bad) = features.iter().find(|f| f.rows() != first.rows()) {
        return Err(Error::Shape(format!(
            "bottleneck inputs have {} and {} rows",
            first.rows(),
            bad.rows()
        )));
    }
    let cat = Tensor2::concat_cols(features)?;
    mlp_forward(&cat, params, true)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::Point;

    fn t(rows: &[&[f64]]) -> Tensor2<f64> {
        Tensor2::from_rows(rows).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2<f64> {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn positive(rng: &mut ChaCha8Rng, n: usize) -> Tensor2<f64> {
        Tensor2::from_vec(n, 1, (0..n).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap()
    }

    #[test]
    fn mlp_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 4, 3);
        let zero = MlpParams {
            layers: vec![Dense { weight: Tensor2::zeros(3, 2), bias: Tensor2::zeros(1, 2) }],
        };
        assert_eq!(mlp_forward(&x, &zero, true).unwrap(), Tensor2::zeros(4, 2));

        let ident = MlpParams {
            layers: vec![Dense { weight: Tensor2::identity(3), bias: Tensor2::zeros(1, 3) }],
        };
        let nonneg = x.map(f64::abs);
        assert_eq!(mlp_forward(&nonneg, &ident, true).unwrap(), nonneg);

        let neg = MlpParams {
            layers: vec![Dense { weight: t(&[&[-1.0]]), bias: t(&[&[0.0]]) }],
        };
        assert_eq!(mlp_forward(&t(&[&[2.0]]), &neg, true).unwrap(), t(&[&[0.0]]));
        assert_eq!(mlp_forward(&t(&[&[2.0]]), &neg, false).unwrap(), t(&[&[-2.0]]));
    }

    #[test]
    fn mlp_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::<f64>::init(&mut rng, &[3, 4, 2]);
        assert!(mlp_forward(&Tensor2::zeros(2, 5), &p, true).is_err());
        let broken = MlpParams {
            layers: vec![p.layers[0].clone(), Dense { weight: Tensor2::zeros(5, 2), bias: Tensor2::zeros(1, 2) }],
        };
        assert!(mlp_forward(&Tensor2::zeros(2, 3), &broken, true).is_err());
    }

    fn two_point_graph() -> GraphOperator {
        let coords: [Point; 2] = [[0.0; 3], [1.0, 0.0, 0.0]];
        GraphOperator::from_coords(&coords).unwrap()
    }

    #[test]
    fn cheb_layer_cases() {
        let g = two_point_graph();
        let h = t(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let zero = ChebConvParams::zeros(3, 2, 4);
        assert_eq!(cheb_conv_layer(&g, &h, &zero, true).unwrap(), Tensor2::zeros(2, 4));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ChebConvParams::init(&mut rng, 3, 2, 2);
        let raw = crate::graph::cheb_apply(&g.laplacian, &h, &p.theta).unwrap();
        assert_eq!(cheb_conv_layer(&g, &h, &p, false).unwrap(), raw);
    }

    #[test]
    fn stacked_cheb_layers_two_point_hand_case() {
        // L = [[1,-1],[-1,1]] for any two-point graph. Layer 1 with
        // theta = ([1], [1]) maps h to (I + L) h = [[2h0 - h1], [2h1 - h0]];
        // layer 2 with theta = ([0], [1]) maps that to L of it.
        let g = two_point_graph();
        let h = t(&[&[3.0], &[1.0]]);
        let first = ChebConvParams { theta: vec![t(&[&[1.0]]), t(&[&[1.0]])] };
        let second = ChebConvParams { theta: vec![t(&[&[0.0]]), t(&[&[1.0]])] };
        let h1 = cheb_conv_layer(&g, &h, &first, true).unwrap();
        assert!(h1.max_abs_diff(&t(&[&[5.0], &[0.0]])).unwrap() < 1e-12);
        let h2 = cheb_conv_layer(&g, &h1, &second, false).unwrap();
        assert!(h2.max_abs_diff(&t(&[&[5.0], &[-5.0]])).unwrap() < 1e-12);
        let h2r = cheb_conv_layer(&g, &h1, &second, true).unwrap();
        assert!(h2r.max_abs_diff(&t(&[&[5.0], &[0.0]])).unwrap() < 1e-12);
    }

    #[test]
    fn attention_single_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::<f64>::init(&mut rng, &[3, 4, 4]);
        let h = random(&mut rng, 1, 3);
        let (out, trace) = weighted_graph_attention(&h, &t(&[&[2.0]]), &p).unwrap();
        assert_eq!(trace.attention, t(&[&[1.0]]));
        let phi = mlp_forward(&h, &p.mlp_phi, true).unwrap();
        assert!(out.max_abs_diff(&phi).unwrap() < 1e-15);
    }

    #[test]
    fn attention_uniform_when_similarity_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = AttentionParams::<f64>::init(&mut rng, &[3, 4, 4]);
        for l in &mut p.mlp_delta.layers {
            l.weight = Tensor2::zeros(l.weight.rows(), l.weight.cols());
        }
        let h = random(&mut rng, 6, 3);
        let q = positive(&mut rng, 6);
        let (out, trace) = weighted_graph_attention(&h, &q, &p).unwrap();
        let phi = mlp_forward(&h, &p.mlp_phi, true).unwrap();
        let mean = phi.column_sums().scale(1.0 / 6.0);
        for r in 0..6 {
            assert!(trace.attention.row(r).iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-15));
            for c in 0..4 {
                assert!((out.get(r, c) - mean.get(0, c)).abs() < 1e-12);
            }
        }
    }

    fn entropy(row: &[f64]) -> f64 {
        -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    #[test]
    fn larger_weight_sharpens_row() {
        // Entropy of softmax(q s) is non-increasing in q for q > 0; sweep
        // q_0 over random similarity matrices and check numerically.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = AttentionParams::<f64>::init(&mut rng, &[3, 5, 5]);
            let h = random(&mut rng, 7, 3);
            let mut q = positive(&mut rng, 7);
            let mut prev = f64::INFINITY;
            for step in 0..30 {
                q.set(0, 0, 0.05 * 1.3f64.powi(step));
                let (_, trace) = weighted_graph_attention(&h, &q, &p).unwrap();
                let e = entropy(trace.attention.row(0));
                assert!(e <= prev + 1e-12, "entropy rose: {prev} -> {e}");
                prev = e;
                // Row 0 concentrates on its largest similarity entry.
                let s = trace.similarity.row(0);
                let argmax = (0..7).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
                let a = trace.attention.row(0);
                assert!(a.iter().all(|&v| v <= a[argmax] + 1e-15));
            }
        }
    }

    #[test]
    fn attention_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.random_range(1..20);
            let p = AttentionParams::<f64>::init(&mut rng, &[4, 6, 6]);
            let h = random(&mut rng, n, 4).scale(3.0);
            let q = positive(&mut rng, n);
            let (out, trace) = weighted_graph_attention(&h, &q, &p).unwrap();
            let phi = mlp_forward(&h, &p.mlp_phi, true).unwrap();
            for r in 0..n {
                let row = trace.attention.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&a| a > 0.0 && a <= 1.0));
                for c in 0..6 {
                    let col: Vec<f64> = (0..n).map(|i| phi.get(i, c)).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert!(out.get(r, c) >= lo - 1e-12 && out.get(r, c) <= hi + 1e-12);
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let m = trace.weighted_logits.get(i, j);
                    assert!((m - q.get(i, 0) * trace.similarity.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rejects_nonpositive_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AttentionParams::<f64>::init(&mut rng, &[2, 2, 2]);
        let h = random(&mut rng, 2, 2);
        assert!(weighted_graph_attention(&h, &t(&[&[1.0], &[0.0]]), &p).is_err());
        assert!(weighted_graph_attention(&h, &t(&[&[1.0], &[-3.0]]), &p).is_err());
    }

    #[test]
    fn bottleneck_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 5, 3).map(f64::abs);
        let ident = MlpParams {
            layers: vec![Dense { weight: Tensor2::identity(3), bias: Tensor2::zeros(1, 3) }],
        };
        assert_eq!(bottleneck(&[&x], &ident).unwrap(), x);

        let a = random(&mut rng, 5, 64);
        let b = random(&mut rng, 5, 64);
        let p = MlpParams::init(&mut rng, &[128, 64, 64]);
        let out = bottleneck(&[&a, &b], &p).unwrap();
        assert_eq!(out.shape(), (5, 64));
        let narrow = MlpParams::init(&mut rng, &[64, 64]);
        assert!(bottleneck(&[&a, &b], &narrow).is_err());

        let perm = [4, 2, 0, 1, 3];
        let permuted = bottleneck(&[&a.gather_rows(&perm), &b.gather_rows(&perm)], &p).unwrap();
        assert_eq!(permuted, out.gather_rows(&perm));

        assert!(bottleneck(&[&a, &random(&mut rng, 4, 64)], &p).is_err());
    }

    #[test]
    fn attention_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AttentionParams::<f64>::init(&mut rng, &[3, 5, 5]);
        let h = random(&mut rng, 8, 3);
        let q = positive(&mut rng, 8);
        let perm = [3, 7, 1, 0, 6, 2, 5, 4];
        let (base, _) = weighted_graph_attention(&h, &q, &p).unwrap();
        let (out, _) = weighted_graph_attention(&h.gather_rows(&perm), &q.gather_rows(&perm), &p).unwrap();
        assert!(out.max_abs_diff(&base.gather_rows(&perm)).unwrap() < 1e-12);
    }
}
