//! Reverse-mode gradients of every tape primitive and layer against
//! central finite differences in double precision.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msgat::diffcore::{forward, gradients, NodeId, Tape, Tensor2};
use msgat::graph::{cheb_apply_on_tape, GraphOperator};
use msgat::layers::{attention_on_tape, bottleneck_on_tape, cheb_conv_on_tape, mlp_on_tape, AttentionParams, ChebConvParams, MlpParams};

type Params = BTreeMap<String, Tensor2<f64>>;
type Inputs = HashMap<String, Tensor2<f64>>;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Random values kept away from zero so ReLU kinks are not straddled.
fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2<f64> {
    Tensor2::from_vec(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..1.5);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
    .unwrap()
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Tensor2<f64> {
    Tensor2::from_vec(n, 1, (0..n).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
}

/// Wraps `out` in a loss with a non-trivial gradient: sum((out - c)^2)
/// where `c` is a fixed random input named `__target`.
fn finish(tape: &mut Tape, out: NodeId, rows: usize, cols: usize, inputs: &mut Inputs, rng: &mut ChaCha8Rng) -> NodeId {
    let c = tape.input("__target");
    inputs.insert("__target".into(), rand_t(rng, rows, cols));
    let d = tape.sub(out, c);
    tape.sum_squares(d)
}

fn check(tape: &Tape, loss: NodeId, inputs: &Inputs, params: &Params, what: &str) {
    let grads = gradients(tape, loss, inputs, params).unwrap();
    let value = |p: &Params| forward(tape, inputs, p).unwrap().value(loss).item().unwrap();
    let mut worst = 0.0f64;
    for (name, t) in params {
        for i in 0..t.data().len() {
            let mut p = params.clone();
            let base = t.data()[i];
            p.get_mut(name).unwrap().data_mut()[i] = base + STEP;
            let plus = value(&p);
            p.get_mut(name).unwrap().data_mut()[i] = base - STEP;
            let minus = value(&p);
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads[name].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel < TOL, "{what}: {name}[{i}] analytic {analytic} numeric {numeric}");
        }
    }
    assert!(worst.is_finite());
}

fn unary(build: impl Fn(&mut Tape, NodeId) -> NodeId, shape: (usize, usize), out_shape: (usize, usize), what: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(what.len() as u64);
    let mut tape = Tape::new();
    let a = tape.param("a");
    let out = build(&mut tape, a);
    let mut inputs = Inputs::new();
    let loss = finish(&mut tape, out, out_shape.0, out_shape.1, &mut inputs, &mut rng);
    let params = Params::from([("a".into(), rand_t(&mut rng, shape.0, shape.1))]);
    check(&tape, loss, &inputs, &params, what);
}

fn binary(
    build: impl Fn(&mut Tape, NodeId, NodeId) -> NodeId,
    a_shape: (usize, usize),
    b_shape: (usize, usize),
    out_shape: (usize, usize),
    what: &str,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(what.len() as u64 + 100);
    let mut tape = Tape::new();
    let a = tape.param("a");
    let b = tape.param("b");
    let out = build(&mut tape, a, b);
    let mut inputs = Inputs::new();
    let loss = finish(&mut tape, out, out_shape.0, out_shape.1, &mut inputs, &mut rng);
    let params = Params::from([
        ("a".into(), rand_t(&mut rng, a_shape.0, a_shape.1)),
        ("b".into(), rand_t(&mut rng, b_shape.0, b_shape.1)),
    ]);
    check(&tape, loss, &inputs, &params, what);
}

#[test]
fn matmul() {
    binary(|t, a, b| t.matmul(a, b), (3, 4), (4, 2), (3, 2), "matmul");
}

#[test]
fn matmul_transposed() {
    binary(|t, a, b| t.matmul_t(a, b), (3, 4), (5, 4), (3, 5), "matmul_t");
}

#[test]
fn add_sub_hadamard() {
    binary(|t, a, b| t.add(a, b), (3, 2), (3, 2), (3, 2), "add");
    binary(|t, a, b| t.sub(a, b), (3, 2), (3, 2), (3, 2), "sub");
    binary(|t, a, b| t.hadamard(a, b), (3, 2), (3, 2), (3, 2), "hadamard");
}

#[test]
fn broadcasts() {
    binary(|t, a, b| t.add_row(a, b), (4, 3), (1, 3), (4, 3), "add_row");
    binary(|t, a, b| t.scale_rows(a, b), (4, 3), (4, 1), (4, 3), "scale_rows");
}

#[test]
fn elementwise() {
    unary(|t, a| t.scale(a, -2.5), (3, 3), (3, 3), "scale");
    unary(|t, a| t.relu(a), (4, 3), (4, 3), "relu");
    unary(|t, a| t.row_softmax(a), (4, 5), (4, 5), "row_softmax");
    unary(|t, a| t.sum_squares(a), (3, 2), (1, 1), "sum_squares");
}

#[test]
fn concat() {
    binary(|t, a, b| t.concat_cols(&[a, b, a]), (3, 2), (3, 1), (3, 5), "concat_cols");
}

fn graph(rng: &mut ChaCha8Rng, n: usize) -> Tensor2<f64> {
    let coords: Vec<[f64; 3]> = (0..n).map(|_| [0, 0, 0].map(|_: i32| rng.random_range(-1.0..1.0))).collect();
    GraphOperator::from_coords(&coords).unwrap().laplacian
}

#[test]
fn chebyshev_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 1..=4 {
        let mut tape = Tape::new();
        let l = tape.input("l");
        let h = tape.param("h");
        let theta: Vec<NodeId> = (0..k).map(|i| tape.param(format!("t{i}"))).collect();
        let out = cheb_apply_on_tape(&mut tape, l, h, &theta);
        let mut inputs = Inputs::from([("l".into(), graph(&mut rng, 6))]);
        let loss = finish(&mut tape, out, 6, 2, &mut inputs, &mut rng);
        let mut params = Params::from([("h".into(), rand_t(&mut rng, 6, 3))]);
        for i in 0..k {
            params.insert(format!("t{i}"), rand_t(&mut rng, 3, 2));
        }
        check(&tape, loss, &inputs, &params, &format!("cheb K={k}"));
    }
}

#[test]
fn mlp_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for final_relu in [false, true] {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let out = mlp_on_tape(&mut tape, x, "m", 2, final_relu);
        let mut inputs = Inputs::from([("x".into(), rand_t(&mut rng, 5, 3))]);
        let loss = finish(&mut tape, out, 5, 4, &mut inputs, &mut rng);
        let mut params = Params::new();
        MlpParams::<f64>::init(&mut rng, &[3, 6, 4]).insert_into("m", &mut params);
        check(&tape, loss, &inputs, &params, "mlp");
    }
}

#[test]
fn cheb_conv_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let l = tape.input("l");
    let x = tape.input("x");
    let out = cheb_conv_on_tape(&mut tape, l, x, "c", 3, true);
    let mut inputs = Inputs::from([("l".into(), graph(&mut rng, 7)), ("x".into(), rand_t(&mut rng, 7, 3))]);
    let loss = finish(&mut tape, out, 7, 4, &mut inputs, &mut rng);
    let mut params = Params::new();
    ChebConvParams::<f64>::init(&mut rng, 3, 3, 4).insert_into("c", &mut params);
    check(&tape, loss, &inputs, &params, "cheb conv");
}

#[test]
fn attention_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let x = tape.input("x");
    let q = tape.input("q");
    let nodes = attention_on_tape(&mut tape, x, q, "a", 2);
    let mut inputs = Inputs::from([("x".into(), rand_t(&mut rng, 6, 3)), ("q".into(), positive(&mut rng, 6))]);
    let loss = finish(&mut tape, nodes.output, 6, 5, &mut inputs, &mut rng);
    let mut params = Params::new();
    AttentionParams::<f64>::init(&mut rng, &[3, 5, 5]).insert_into("a", &mut params);
    check(&tape, loss, &inputs, &params, "attention");
}

#[test]
fn attention_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.param("x");
    let q = tape.param("q");
    let nodes = attention_on_tape(&mut tape, x, q, "a", 1);
    let mut inputs = Inputs::new();
    let loss = finish(&mut tape, nodes.output, 5, 4, &mut inputs, &mut rng);
    let mut params = Params::from([("x".into(), rand_t(&mut rng, 5, 3)), ("q".into(), positive(&mut rng, 5))]);
    AttentionParams::<f64>::init(&mut rng, &[3, 4]).insert_into("a", &mut params);
    check(&tape, loss, &inputs, &params, "attention inputs");
}

#[test]
fn bottleneck_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tape = Tape::new();
    let a = tape.param("fa");
    let b = tape.param("fb");
    let out = bottleneck_on_tape(&mut tape, &[a, b], "bn", 2);
    let mut inputs = Inputs::new();
    let loss = finish(&mut tape, out, 4, 3, &mut inputs, &mut rng);
    let mut params = Params::from([("fa".into(), rand_t(&mut rng, 4, 2)), ("fb".into(), rand_t(&mut rng, 4, 3))]);
    MlpParams::<f64>::init(&mut rng, &[5, 6, 3]).insert_into("bn", &mut params);
    check(&tape, loss, &inputs, &params, "bottleneck");
}
