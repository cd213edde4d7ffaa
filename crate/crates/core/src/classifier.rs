//! Gradient-boosted regression trees for binary labels, second-order
//! boosting with exact greedy splits.

use std::io::Write;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Tensor;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("model expects {expected} features, got {found}")]
    Width { expected: usize, found: usize },
    #[error("invalid classifier config: {0}")]
    Config(String),
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("tree dump: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Gain a split must exceed.
    pub min_split_gain: f64,
    pub min_child_hessian: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            trees: 200,
            max_depth: 6,
            learning_rate: 0.1,
            lambda: 1.0,
            min_split_gain: 0.0,
            min_child_hessian: 1.0,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.trees == 0 || self.max_depth == 0 {
            return Err(ClassifierError::Config(
                "tree count and max depth must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(ClassifierError::Config(format!(
                "learning rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if !(self.lambda >= 0.0) || !(self.min_child_hessian >= 0.0) {
            return Err(ClassifierError::Config(
                "lambda and minimum child hessian must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    /// Log-odds of the training positive rate.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub features: usize,
    pub threshold: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Regularized second-order split gain.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, min_gain: f64) -> f64 {
    let parent = (gl + gr) * (gl + gr) / (hl + hr + lambda);
    gain_with_parent(gl, hl, gr, hr, parent, lambda, min_gain)
}

/// [`split_gain`] with the parent's `G²/(H+λ)` precomputed.
#[inline]
fn gain_with_parent(
    gl: f64,
    hl: f64,
    gr: f64,
    hr: f64,
    parent: f64,
    lambda: f64,
    min_gain: f64,
) -> f64 {
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent) - min_gain
}

fn logistic_loss(margins: &[f64], y: &[u8]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(y)
        .map(|(&m, &l)| {
            // log(1 + e^m) − y·m, computed stably
            let softplus = if m > 0.0 {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            };
            softplus - f64::from(l) * m
        })
        .sum();
    total / margins.len() as f64
}

impl GbdtModel {
    fn check_width(&self, x: &Tensor) -> Result<(), ClassifierError> {
        if x.rows() > 0 && x.cols() != self.features {
            return Err(ClassifierError::Width {
                expected: self.features,
                found: x.cols(),
            });
        }
        Ok(())
    }

    /// Margins using only the first `trees` trees.
    pub fn margins_prefix(&self, x: &Tensor, trees: usize) -> Result<Vec<f64>, ClassifierError> {
        self.check_width(x)?;
        let used = &self.trees[..trees.min(self.trees.len())];
        Ok(x.row_iter()
            .map(|row| self.base_score + used.iter().map(|t| t.predict(row)).sum::<f64>())
            .collect())
    }

    pub fn predict_proba_prefix(
        &self,
        x: &Tensor,
        trees: usize,
    ) -> Result<Vec<f64>, ClassifierError> {
        Ok(self
            .margins_prefix(x, trees)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>, ClassifierError> {
        self.predict_proba_prefix(x, self.trees.len())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>, ClassifierError> {
        Ok(self
            .predict_proba(x)?
            .into_iter()
            .map(|p| u8::from(p >= self.threshold))
            .collect())
    }

    /// Copy keeping only the first `trees` trees.
    pub fn truncated(&self, trees: usize) -> Self {
        Self {
            trees: self.trees[..trees.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }

    /// `tree <t>` headers followed by one line per node:
    /// `<id> split <feature> <threshold> <left> <right>` or `<id> leaf <weight>`.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<(), ClassifierError> {
        writeln!(out, "base_score {}", self.base_score)?;
        for (t, tree) in self.trees.iter().enumerate() {
            writeln!(out, "tree {t}")?;
            for (id, node) in tree.nodes.iter().enumerate() {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => writeln!(out, "{id} split {feature} {threshold} {left} {right}")?,
                    Node::Leaf { weight } => writeln!(out, "{id} leaf {weight}")?,
                }
            }
        }
        Ok(())
    }
}

/// Fits a model; see [`fit_traced`].
pub fn fit(x: &Tensor, y: &[u8], config: &GbdtConfig) -> Result<GbdtModel, ClassifierError> {
    Ok(fit_traced(x, y, config)?.0)
}

/// Fits a model and returns the mean training logistic loss after each
/// boosting round.
pub fn fit_traced(
    x: &Tensor,
    y: &[u8],
    config: &GbdtConfig,
) -> Result<(GbdtModel, Vec<f64>), ClassifierError> {
    config.validate()?;
    let n = x.rows();
    if y.len() != n {
        return Err(ClassifierError::LabelCount {
            rows: n,
            labels: y.len(),
        });
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == n {
        return Err(ClassifierError::SingleClass);
    }
    let rate = positives as f64 / n as f64;
    let base_score = (rate / (1.0 - rate)).ln();
    let columns = SortedColumns::new(x);
    let mut margins = vec![base_score; n];
    let mut trees = Vec::with_capacity(config.trees);
    let mut trace = Vec::with_capacity(config.trees);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..config.trees {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - f64::from(y[i]);
            hess[i] = p * (1.0 - p);
        }
        let (tree, leaf_of) = grow_tree(x, &columns, &grad, &hess, config);
        for (m, leaf) in margins.iter_mut().zip(&leaf_of) {
            if let Node::Leaf { weight } = tree.nodes[*leaf as usize] {
                *m += weight;
            }
        }
        trees.push(tree);
        trace.push(logistic_loss(&margins, y));
    }
    Ok((
        GbdtModel {
            base_score,
            trees,
            features: x.cols(),
            threshold: config.threshold,
        },
        trace,
    ))
}

/// Per feature, `(value, row)` sorted by value then row.
struct SortedColumns {
    columns: Vec<Vec<(f64, u32)>>,
    rows: usize,
}

impl SortedColumns {
    fn new(x: &Tensor) -> Self {
        let columns = (0..x.cols())
            .map(|f| {
                let mut col: Vec<(f64, u32)> =
                    (0..x.rows()).map(|r| (x.get(r, f), r as u32)).collect();
                col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                col
            })
            .collect();
        Self {
            columns,
            rows: x.rows(),
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

#[derive(Clone, Copy)]
struct Entry {
    value: f64,
    g: f64,
    h: f64,
    row: u32,
}

/// A node still open for splitting. Its rows occupy `start..end` in every
/// feature's entry list, in that feature's sorted order.
#[derive(Clone, Copy)]
struct Open {
    id: usize,
    start: usize,
    end: usize,
    g: f64,
    h: f64,
}

/// Best split of one segment of one sorted feature.
fn scan_segment(
    feature: usize,
    seg: &[Entry],
    node: &Open,
    config: &GbdtConfig,
    best: &mut Option<Candidate>,
) {
    let parent = node.g * node.g / (node.h + config.lambda);
    let (mut gl, mut hl) = (0.0, 0.0);
    let mut last = f64::NAN;
    for e in seg {
        if e.value > last {
            let (gr, hr) = (node.g - gl, node.h - hl);
            if hl >= config.min_child_hessian && hr >= config.min_child_hessian {
                let gain = gain_with_parent(
                    gl,
                    hl,
                    gr,
                    hr,
                    parent,
                    config.lambda,
                    config.min_split_gain,
                );
                // strict comparison keeps the lowest feature and threshold
                if gain > 0.0 && best.is_none_or(|b| gain > b.gain) {
                    *best = Some(Candidate {
                        gain,
                        feature,
                        threshold: midpoint(last, e.value),
                    });
                }
            }
        }
        gl += e.g;
        hl += e.h;
        last = e.value;
    }
}

/// Best split of every open node. Per-feature results are merged in
/// feature order, so ties go to the lowest feature whether or not the
/// scan runs in parallel.
fn best_splits(entries: &[Vec<Entry>], frontier: &[Open], config: &GbdtConfig) -> Vec<Option<Candidate>> {
    let scan = |(feature, list): (usize, &Vec<Entry>)| -> Vec<Option<Candidate>> {
        frontier
            .iter()
            .map(|open| {
                let mut b = None;
                scan_segment(feature, &list[open.start..open.end], open, config, &mut b);
                b
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let per_feature: Vec<Vec<Option<Candidate>>> = entries.par_iter().enumerate().map(scan).collect();
    #[cfg(not(feature = "parallel"))]
    let per_feature: Vec<Vec<Option<Candidate>>> = entries.iter().enumerate().map(scan).collect();
    let mut best = vec![None; frontier.len()];
    for found in per_feature {
        for (b, f) in best.iter_mut().zip(found) {
            if let Some(f) = f {
                if b.is_none_or(|b: Candidate| f.gain > b.gain) {
                    *b = Some(f);
                }
            }
        }
    }
    best
}

/// Stable in-place partition of one feature list into the children of
/// each open node. Rows of new leaves are dropped, so segments only move
/// toward the front.
fn partition_list(list: &mut Vec<Entry>, frontier: &[Open], side: &[u8]) {
    let mut spill = Vec::new();
    let mut out = 0;
    for open in frontier {
        spill.clear();
        for i in open.start..open.end {
            let e = list[i];
            match side[e.row as usize] {
                1 => {
                    list[out] = e;
                    out += 1;
                }
                2 => spill.push(e),
                _ => {}
            }
        }
        list[out..out + spill.len()].copy_from_slice(&spill);
        out += spill.len();
    }
    list.truncate(out);
}

/// Grows one tree level by level. Returns the tree and each row's leaf.
fn grow_tree(
    x: &Tensor,
    columns: &SortedColumns,
    grad: &[f64],
    hess: &[f64],
    config: &GbdtConfig,
) -> (Tree, Vec<u32>) {
    let n = columns.rows;
    let mut nodes = vec![Node::Leaf { weight: 0.0 }];
    let mut leaf_of = vec![0u32; n];
    let mut entries: Vec<Vec<Entry>> = columns
        .columns
        .iter()
        .map(|col| {
            col.iter()
                .map(|&(value, row)| Entry {
                    value,
                    g: grad[row as usize],
                    h: hess[row as usize],
                    row,
                })
                .collect()
        })
        .collect();
    let mut frontier = vec![Open {
        id: 0,
        start: 0,
        end: n,
        g: grad.iter().sum(),
        h: hess.iter().sum(),
    }];
    let leaf_weight = |o: &Open| -o.g / (o.h + config.lambda) * config.learning_rate;
    // 0 drop, 1 left, 2 right
    let mut side = vec![0u8; n];

    for depth in 0..=config.max_depth {
        if frontier.is_empty() {
            break;
        }
        let best = if depth < config.max_depth {
            best_splits(&entries, &frontier, config)
        } else {
            vec![None; frontier.len()]
        };

        let mut next = Vec::new();
        let mut write = 0;
        for (open, b) in frontier.iter().zip(&best) {
            // any feature list holds the node's rows; with no features
            // the root can't split and owns every row
            let rows = || -> Vec<u32> {
                match entries.first() {
                    Some(list) => list[open.start..open.end].iter().map(|e| e.row).collect(),
                    None => (0..n as u32).collect(),
                }
            };
            match b {
                None => {
                    nodes[open.id] = Node::Leaf {
                        weight: leaf_weight(open),
                    };
                    for r in rows() {
                        leaf_of[r as usize] = open.id as u32;
                        side[r as usize] = 0;
                    }
                }
                Some(c) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes[open.id] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                    };
                    let (mut gl, mut hl, mut gr, mut hr, mut nl) = (0.0, 0.0, 0.0, 0.0, 0);
                    for r in rows() {
                        let r = r as usize;
                        if x.get(r, c.feature) < c.threshold {
                            side[r] = 1;
                            gl += grad[r];
                            hl += hess[r];
                            nl += 1;
                        } else {
                            side[r] = 2;
                            gr += grad[r];
                            hr += hess[r];
                        }
                    }
                    let len = open.end - open.start;
                    next.push(Open {
                        id: left,
                        start: write,
                        end: write + nl,
                        g: gl,
                        h: hl,
                    });
                    next.push(Open {
                        id: left + 1,
                        start: write + nl,
                        end: write + len,
                        g: gr,
                        h: hr,
                    });
                    write += len;
                }
            }
        }
        if next.is_empty() {
            break;
        }
        let partition = |list: &mut Vec<Entry>| partition_list(list, &frontier, &side);
        #[cfg(feature = "parallel")]
        entries.par_iter_mut().for_each(partition);
        #[cfg(not(feature = "parallel"))]
        entries.iter_mut().for_each(partition);
        frontier = next;
    }
    (Tree { nodes }, leaf_of)
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = (a + b) / 2.0;
    // guard against m == a for adjacent floats
    if m > a {
        m
    } else {
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub trees: Vec<usize>,
    pub max_depths: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            trees: vec![100, 200, 400],
            max_depths: vec![4, 6, 8],
            learning_rates: vec![0.05, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tuned {
    pub config: GbdtConfig,
    pub model: GbdtModel,
    pub validation_f1: f64,
}

/// Picks the grid point with the best validation F1. Each (depth, rate)
/// pair is fit once with the largest tree count and scored at every
/// smaller count by prefix. Ties keep the earliest point in
/// depth → rate → trees order.
pub fn tune(
    train_x: &Tensor,
    train_y: &[u8],
    val_x: &Tensor,
    val_y: &[u8],
    grid: &TuningGrid,
    base: &GbdtConfig,
) -> Result<Tuned, ClassifierError> {
    let max_trees = *grid.trees.iter().max().ok_or(ClassifierError::EmptyGrid)?;
    if grid.max_depths.is_empty() || grid.learning_rates.is_empty() {
        return Err(ClassifierError::EmptyGrid);
    }
    let mut trees_sorted = grid.trees.clone();
    trees_sorted.sort_unstable();
    let mut best: Option<Tuned> = None;
    for &depth in &grid.max_depths {
        for &rate in &grid.learning_rates {
            let cfg = GbdtConfig {
                trees: max_trees,
                max_depth: depth,
                learning_rate: rate,
                ..*base
            };
            let model = fit(train_x, train_y, &cfg)?;
            for &t in &trees_sorted {
                let probs = model.predict_proba_prefix(val_x, t)?;
                let pred: Vec<u8> = probs.iter().map(|&p| u8::from(p >= cfg.threshold)).collect();
                let f1 = crate::evaluation::ConfusionCounts::from_labels(val_y, &pred)
                    .map(|c| c.metrics().f1)
                    .unwrap_or(0.0);
                if best.as_ref().is_none_or(|b| f1 > b.validation_f1) {
                    best = Some(Tuned {
                        config: GbdtConfig { trees: t, ..cfg },
                        model: model.truncated(t),
                        validation_f1: f1,
                    });
                }
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}
