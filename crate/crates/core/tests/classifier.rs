use emdt_core::classifier::{fit, fit_traced, split_gain, tune, GbdtConfig, Node, TuningGrid};
use emdt_core::evaluation::roc_auc;
use emdt_core::numeric::{Prng, Tensor};

/// Best single split by brute force over every feature and every gap
/// between adjacent distinct values.
fn exhaustive_root(x: &Tensor, grad: &[f64], hess: &[f64], cfg: &GbdtConfig) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x.cols() {
        let mut values = x.column(f);
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let thr = (w[0] + w[1]) / 2.0;
            let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
            for r in 0..x.rows() {
                if x.get(r, f) < thr {
                    gl += grad[r];
                    hl += hess[r];
                } else {
                    gr += grad[r];
                    hr += hess[r];
                }
            }
            if hl < cfg.min_child_hessian || hr < cfg.min_child_hessian {
                continue;
            }
            let gain = split_gain(gl, hl, gr, hr, cfg.lambda, cfg.min_split_gain);
            if gain > 0.0 && best.is_none_or(|b| gain > b.2) {
                best = Some((f, thr, gain));
            }
        }
    }
    best
}

#[test]
fn first_tree_matches_exhaustive_oracle() {
    let mut rng = Prng::new(11);
    let mut checked_splits = 0;
    for case in 0..25 {
        let n = 10 + rng.below(41);
        let d = 1 + rng.below(3);
        let mut data = rng.gaussian_vec(n * d);
        // coarse values in some cases so ties and duplicate values occur
        if case % 3 == 0 {
            data.iter_mut().for_each(|v| *v = (*v * 2.0).round());
        }
        let x = Tensor::matrix(n, d, data).unwrap();
        let mut y: Vec<u8> = x
            .row_iter()
            .map(|r| u8::from(r[0] + 0.7 * rng.next_gaussian() > 0.3))
            .collect();
        y[0] = 0;
        y[1] = 1;
        for min_child in [0.0, 1.0] {
            let cfg = GbdtConfig {
                trees: 1,
                max_depth: 1,
                min_child_hessian: min_child,
                ..GbdtConfig::default()
            };
            let model = fit(&x, &y, &cfg).unwrap();
            let rate = y.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
            let grad: Vec<f64> = y.iter().map(|&l| rate - f64::from(l)).collect();
            let hess = vec![rate * (1.0 - rate); n];
            let oracle = exhaustive_root(&x, &grad, &hess, &cfg);
            let tree = &model.trees[0];
            match (tree.nodes[0], oracle) {
                (Node::Split { feature, threshold, left, right }, Some((f, thr, _))) => {
                    assert_eq!((feature, threshold), (f, thr), "case {case}");
                    // leaves carry the scaled Newton weights
                    for (child, goes_left) in [(left, true), (right, false)] {
                        let (g, h) = (0..n)
                            .filter(|&r| (x.get(r, f) < thr) == goes_left)
                            .fold((0.0, 0.0), |(g, h), r| (g + grad[r], h + hess[r]));
                        let Node::Leaf { weight } = tree.nodes[child] else {
                            panic!("depth-1 child is a split");
                        };
                        let expected = -g / (h + cfg.lambda) * cfg.learning_rate;
                        assert!((weight - expected).abs() < 1e-12, "case {case}");
                    }
                    checked_splits += 1;
                }
                (Node::Leaf { .. }, None) => {}
                (root, oracle) => panic!("case {case}: root {root:?}, oracle {oracle:?}"),
            }
        }
    }
    assert!(checked_splits >= 25);
}

#[test]
fn training_loss_never_increases() {
    let mut rng = Prng::new(5);
    let n = 400;
    let x = Tensor::matrix(n, 3, rng.gaussian_vec(n * 3)).unwrap();
    let y: Vec<u8> = x
        .row_iter()
        .map(|r| u8::from(r[0] * r[1] + 0.5 * r[2] + 0.5 * rng.next_gaussian() > 0.0))
        .collect();
    let (_, trace) = fit_traced(&x, &y, &GbdtConfig::default()).unwrap();
    assert_eq!(trace.len(), 200);
    for (i, w) in trace.windows(2).enumerate() {
        assert!(w[1] <= w[0] + 1e-12, "round {}: {} -> {}", i + 1, w[0], w[1]);
    }
    assert!(trace[199] < trace[0]);
}

fn separable(n: usize, rng: &mut Prng) -> (Tensor, Vec<u8>) {
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    while y.len() < n {
        let (a, b) = (2.0 * rng.next_f64() - 1.0, 2.0 * rng.next_f64() - 1.0);
        let s = a + 0.5 * b - 0.1;
        if s.abs() < 0.02 {
            continue;
        }
        data.extend([a, b]);
        y.push(u8::from(s > 0.0));
    }
    (Tensor::matrix(n, 2, data).unwrap(), y)
}

#[test]
fn separable_benchmark_auc() {
    let mut rng = Prng::new(8);
    let (x, y) = separable(2000, &mut rng);
    let (xt, yt) = separable(2000, &mut rng);
    let cfg = GbdtConfig {
        trees: 50,
        ..GbdtConfig::default()
    };
    let model = fit(&x, &y, &cfg).unwrap();
    let auc = roc_auc(&model.predict_proba(&xt).unwrap(), &yt).unwrap();
    assert!(auc >= 0.99, "auc {auc}");
}

#[test]
fn tuning_picks_a_grid_point() {
    let mut rng = Prng::new(2);
    let (x, y) = separable(300, &mut rng);
    let (xv, yv) = separable(300, &mut rng);
    let grid = TuningGrid {
        trees: vec![5, 20],
        max_depths: vec![2, 3],
        learning_rates: vec![0.1, 0.3],
    };
    let tuned = tune(&x, &y, &xv, &yv, &grid, &GbdtConfig::default()).unwrap();
    assert!(grid.trees.contains(&tuned.config.trees));
    assert_eq!(tuned.model.trees.len(), tuned.config.trees);
    assert!(tuned.validation_f1 > 0.9);
}
