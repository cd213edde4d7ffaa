//! Analytic gradients of every recorded op against central differences.

use emdt_core::numeric::{NodeId, OpKind, Prng, Tape, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn random_tensor(rng: &mut Prng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            // keep clear of the relu kink
            let v = rng.next_gaussian();
            if v.abs() < 1e-2 {
                v.signum() * 0.5
            } else {
                v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Builds a scalar from parameter values; returns the loss node and the
/// parameter nodes in input order.
type Builder = dyn Fn(&mut Tape, &[Tensor]) -> (NodeId, Vec<NodeId>);

fn check(name: &str, inputs: Vec<Tensor>, build: &Builder) -> f64 {
    let mut tape = Tape::new();
    let (loss, params) = build(&mut tape, &inputs);
    let grads = tape.backward(loss).unwrap();
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, vals);
        t.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, p) in params.iter().enumerate() {
        let analytic = grads.get(*p).expect("gradient for parameter");
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
    worst
}

/// Reduces any tensor node to a scalar through an mse against a fixed
/// random target of the same shape.
fn reduce(tape: &mut Tape, node: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(node).shape().to_vec();
    let mut rng = Prng::new(seed);
    let target = random_tensor(&mut rng, shape[0], shape[1]);
    let t = tape.constant(target);
    tape.mse_loss(node, t).unwrap()
}

fn dims(rng: &mut Prng) -> (usize, usize, usize) {
    (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8))
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = Prng::new(2024);
    for trial in 0..6u64 {
        let (m, k, n) = dims(&mut rng);
        let seed = 100 + trial;

        check(
            "matmul",
            vec![random_tensor(&mut rng, m, k), random_tensor(&mut rng, k, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let b = t.param(v[1].clone());
                let y = t.apply(OpKind::Matmul, &[a, b]).unwrap();
                (reduce(t, y, seed), vec![a, b])
            },
        );
        check(
            "add",
            vec![random_tensor(&mut rng, m, n), random_tensor(&mut rng, m, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let b = t.param(v[1].clone());
                let y = t.add(a, b).unwrap();
                (reduce(t, y, seed), vec![a, b])
            },
        );
        check(
            "add-bias-broadcast",
            vec![random_tensor(&mut rng, m, n), random_tensor(&mut rng, 1, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let b = t.param(v[1].clone());
                let y = t.add_bias(a, b).unwrap();
                (reduce(t, y, seed), vec![a, b])
            },
        );
        check(
            "scale-by-constant",
            vec![random_tensor(&mut rng, m, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let y = t.scale(a, -1.7).unwrap();
                (reduce(t, y, seed), vec![a])
            },
        );
        check("relu", vec![random_tensor(&mut rng, m, n)], &move |t, v| {
            let a = t.param(v[0].clone());
            let y = t.relu(a).unwrap();
            (reduce(t, y, seed), vec![a])
        });
        check(
            "row-softmax",
            vec![random_tensor(&mut rng, m, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let y = t.softmax_rows(a).unwrap();
                (reduce(t, y, seed), vec![a])
            },
        );
        let cols = n.max(2);
        check(
            "layer-norm",
            vec![
                random_tensor(&mut rng, m, cols),
                random_tensor(&mut rng, 1, cols),
                random_tensor(&mut rng, 1, cols),
            ],
            &move |t, v| {
                let x = t.param(v[0].clone());
                let g = t.param(v[1].clone());
                let b = t.param(v[2].clone());
                let y = t.layer_norm(x, g, b).unwrap();
                (reduce(t, y, seed), vec![x, g, b])
            },
        );
        check(
            "concat-rows",
            vec![random_tensor(&mut rng, m, n), random_tensor(&mut rng, k, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let b = t.param(v[1].clone());
                let y = t.concat_rows(&[a, b, a]).unwrap();
                (reduce(t, y, seed), vec![a, b])
            },
        );
        let start = m / 2;
        check(
            "slice-rows",
            vec![random_tensor(&mut rng, m, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let y = t.slice_rows(a, start, m).unwrap();
                (reduce(t, y, seed), vec![a])
            },
        );
        check(
            "mse-loss",
            vec![random_tensor(&mut rng, m, n), random_tensor(&mut rng, m, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let b = t.param(v[1].clone());
                (t.mse_loss(a, b).unwrap(), vec![a, b])
            },
        );
        check(
            "transpose",
            vec![random_tensor(&mut rng, m, n)],
            &move |t, v| {
                let a = t.param(v[0].clone());
                let y = t.transpose(a).unwrap();
                (reduce(t, y, seed), vec![a])
            },
        );
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Prng::new(5);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&mut rng, 8, 8).map(|v| 30.0 * v));
    let y = tape.softmax_rows(x).unwrap();
    for row in tape.value(y).row_iter() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = Prng::new(6);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&mut rng, 8, 8).map(|v| 3.0 * v + 1.0));
    let g = tape.constant(Tensor::filled(1, 8, 1.0));
    let b = tape.constant(Tensor::zeros(1, 8));
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in tape.value(y).row_iter() {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }
}
