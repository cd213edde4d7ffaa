//! Transformer noise predictor: embedding, one Transformer block and a
//! per-row linear projection back to one scalar per feature.
//!
//! ```text
//! Z   = embed(x, t)                          (d+1) × D
//! Z'  = LN₁(Z  + MHA(Z))                     heads of width D/heads, W_O
//! Out = LN₂(Z' + W₂·relu(W₁·Z' + b₁) + b₂)
//! ε̂_j = Out_j · w_P + b_P                    j = 1 … d (time row dropped)
//! ```
//!
//! That is the default post-norm block. With [`NormPlacement::Pre`] the
//! norms move in front of each sublayer instead. Pre-norm sees a feature
//! row `x_j·ψ_j` only as `sign(x_j)·LN(ψ_j)`, so attention loses every
//! feature magnitude.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedder, EmbeddingConfig, EmbeddingError};
use crate::numeric::{NodeId, NumericError, Prng, Tape, Tensor};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("invalid denoiser config: {0}")]
    Config(String),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the two layer norms sit relative to their sublayers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    /// `LN(x + f(x))`.
    #[default]
    Post,
    /// `x + f(LN(x))`.
    Pre,
}

impl NormPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Post => "post",
            Self::Pre => "pre",
        }
    }
}

impl std::str::FromStr for NormPlacement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "post" => Ok(Self::Post),
            "pre" => Ok(Self::Pre),
            other => Err(format!("unknown norm placement {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub embedding: EmbeddingConfig,
    /// Record width `d`.
    pub features: usize,
    pub heads: usize,
    pub ff_dim: usize,
    #[serde(default)]
    pub norm: NormPlacement,
    pub init_seed: u64,
}

impl DenoiserConfig {
    pub fn new(embedding: EmbeddingConfig, features: usize) -> Self {
        Self {
            embedding,
            features,
            heads: 2,
            ff_dim: embedding.dim,
            norm: NormPlacement::Post,
            init_seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim
    }

    pub fn head_dim(&self) -> usize {
        self.embedding.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        self.embedding.validate()?;
        if self.heads == 0 || self.embedding.dim % self.heads != 0 {
            return Err(DenoiserError::Config(format!(
                "{} heads do not divide D = {}",
                self.heads, self.embedding.dim
            )));
        }
        if self.ff_dim == 0 || self.features == 0 {
            return Err(DenoiserError::Config(
                "feed-forward width and feature count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable tensors of the noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_offset: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_offset: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
    pub w_p: Tensor,
    pub b_p: Tensor,
    pub norm: NormPlacement,
}

impl DenoiserParams {
    /// Weights drawn from `N(0, 1/D)`, biases and offsets zero, gains one.
    /// The output projection starts at zero so the untrained model predicts
    /// no noise.
    pub fn init(config: &DenoiserConfig, rng: &mut Prng) -> Result<Self, DenoiserError> {
        config.validate()?;
        let d = config.dim();
        let std = 1.0 / (d as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| std * rng.next_gaussian()).collect();
            Tensor::matrix(rows, cols, data).expect("shape")
        };
        let dk = config.head_dim();
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        for _ in 0..config.heads {
            w_q.push(gauss(d, dk));
            w_k.push(gauss(d, dk));
            w_v.push(gauss(d, dk));
        }
        let w_o = gauss(d, d);
        let w_1 = gauss(d, config.ff_dim);
        let w_2 = gauss(config.ff_dim, d);
        let w_p = Tensor::zeros(d, 1);
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            ln1_gain: Tensor::filled(1, d, 1.0),
            ln1_offset: Tensor::zeros(1, d),
            ln2_gain: Tensor::filled(1, d, 1.0),
            ln2_offset: Tensor::zeros(1, d),
            w_1,
            b_1: Tensor::zeros(1, config.ff_dim),
            w_2,
            b_2: Tensor::zeros(1, d),
            w_p,
            b_p: Tensor::zeros(1, 1),
            norm: config.norm,
        })
    }

    /// Every entry random, including biases, gains and the output
    /// projection. Used to exercise all gradient paths.
    pub fn random(config: &DenoiserConfig, rng: &mut Prng) -> Result<Self, DenoiserError> {
        let mut p = Self::init(config, rng)?;
        let std = 1.0 / (config.dim() as f64).sqrt();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += std * rng.next_gaussian();
            }
        }
        Ok(p)
    }

    /// Every matrix and bias zero; layer-norm gains stay at one.
    pub fn zeros(config: &DenoiserConfig) -> Self {
        let d = config.dim();
        let dk = config.head_dim();
        Self {
            w_q: vec![Tensor::zeros(d, dk); config.heads],
            w_k: vec![Tensor::zeros(d, dk); config.heads],
            w_v: vec![Tensor::zeros(d, dk); config.heads],
            w_o: Tensor::zeros(d, d),
            ln1_gain: Tensor::filled(1, d, 1.0),
            ln1_offset: Tensor::zeros(1, d),
            ln2_gain: Tensor::filled(1, d, 1.0),
            ln2_offset: Tensor::zeros(1, d),
            w_1: Tensor::zeros(d, config.ff_dim),
            b_1: Tensor::zeros(1, config.ff_dim),
            w_2: Tensor::zeros(config.ff_dim, d),
            b_2: Tensor::zeros(1, d),
            w_p: Tensor::zeros(d, 1),
            b_p: Tensor::zeros(1, 1),
            norm: config.norm,
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    /// Parameters with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for h in 0..self.heads() {
            out.push((format!("attn.w_q.{h}"), &self.w_q[h]));
            out.push((format!("attn.w_k.{h}"), &self.w_k[h]));
            out.push((format!("attn.w_v.{h}"), &self.w_v[h]));
        }
        out.push(("attn.w_o".into(), &self.w_o));
        out.push(("norm1.gain".into(), &self.ln1_gain));
        out.push(("norm1.offset".into(), &self.ln1_offset));
        out.push(("norm2.gain".into(), &self.ln2_gain));
        out.push(("norm2.offset".into(), &self.ln2_offset));
        out.push(("ffn.w_1".into(), &self.w_1));
        out.push(("ffn.b_1".into(), &self.b_1));
        out.push(("ffn.w_2".into(), &self.w_2));
        out.push(("ffn.b_2".into(), &self.b_2));
        out.push(("proj.w".into(), &self.w_p));
        out.push(("proj.b".into(), &self.b_p));
        out
    }

    /// Same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for ((q, k), v) in self
            .w_q
            .iter_mut()
            .zip(self.w_k.iter_mut())
            .zip(self.w_v.iter_mut())
        {
            out.push(q);
            out.push(k);
            out.push(v);
        }
        out.push(&mut self.w_o);
        out.push(&mut self.ln1_gain);
        out.push(&mut self.ln1_offset);
        out.push(&mut self.ln2_gain);
        out.push(&mut self.ln2_offset);
        out.push(&mut self.w_1);
        out.push(&mut self.b_1);
        out.push(&mut self.w_2);
        out.push(&mut self.b_2);
        out.push(&mut self.w_p);
        out.push(&mut self.b_p);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn record(&self, tape: &mut Tape) -> ParamNodes {
        let nodes = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        ParamNodes {
            nodes,
            heads: self.heads(),
            norm: self.norm,
        }
    }
}

/// Tape handles of recorded parameters, in [`DenoiserParams::named`] order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    nodes: Vec<NodeId>,
    heads: usize,
    norm: NormPlacement,
}

impl ParamNodes {
    pub fn all(&self) -> &[NodeId] {
        &self.nodes
    }
    fn q(&self, h: usize) -> NodeId {
        self.nodes[3 * h]
    }
    fn k(&self, h: usize) -> NodeId {
        self.nodes[3 * h + 1]
    }
    fn v(&self, h: usize) -> NodeId {
        self.nodes[3 * h + 2]
    }
    fn tail(&self, i: usize) -> NodeId {
        self.nodes[3 * self.heads + i]
    }
    fn w_o(&self) -> NodeId {
        self.tail(0)
    }
    fn ln1(&self) -> (NodeId, NodeId) {
        (self.tail(1), self.tail(2))
    }
    fn ln2(&self) -> (NodeId, NodeId) {
        (self.tail(3), self.tail(4))
    }
    fn ffn(&self) -> (NodeId, NodeId, NodeId, NodeId) {
        (self.tail(5), self.tail(6), self.tail(7), self.tail(8))
    }
    fn proj(&self) -> (NodeId, NodeId) {
        (self.tail(9), self.tail(10))
    }
}

/// Multi-head self-attention over each `tokens`-row block of `x`
/// independently. Returns the mapped output and, per head and block,
/// the attention weight nodes.
pub fn attention_graph(
    tape: &mut Tape,
    p: &ParamNodes,
    x: NodeId,
    batch: usize,
    tokens: usize,
) -> Result<(NodeId, Vec<NodeId>), NumericError> {
    let dk = tape.value(p.q(0)).cols();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = Vec::new();
    let mut total: Option<NodeId> = None;
    for h in 0..p.heads {
        let q = tape.matmul(x, p.q(h))?;
        let k = tape.matmul(x, p.k(h))?;
        let v = tape.matmul(x, p.v(h))?;
        let mut blocks = Vec::with_capacity(batch);
        for b in 0..batch {
            let (qb, kb, vb) = if batch == 1 {
                (q, k, v)
            } else {
                let (s, e) = (b * tokens, (b + 1) * tokens);
                (
                    tape.slice_rows(q, s, e)?,
                    tape.slice_rows(k, s, e)?,
                    tape.slice_rows(v, s, e)?,
                )
            };
            let kt = tape.transpose(kb)?;
            let scores = tape.matmul(qb, kt)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.softmax_rows(scores)?;
            weights.push(a);
            blocks.push(tape.matmul(a, vb)?);
        }
        let head = if blocks.len() == 1 {
            blocks[0]
        } else {
            tape.concat_rows(&blocks)?
        };
        // concat(heads)·W_O = Σ_h head_h · W_O[h·dk .. (h+1)·dk]
        let w_o_h = tape.slice_rows(p.w_o(), h * dk, (h + 1) * dk)?;
        let part = tape.matmul(head, w_o_h)?;
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    Ok((total.expect("at least one head"), weights))
}

/// One Transformer block on stacked `tokens`-row blocks.
pub fn block_graph(
    tape: &mut Tape,
    p: &ParamNodes,
    z: NodeId,
    batch: usize,
    tokens: usize,
) -> Result<NodeId, NumericError> {
    let (g1, o1) = p.ln1();
    let (g2, o2) = p.ln2();
    match p.norm {
        NormPlacement::Post => {
            let (attn, _) = attention_graph(tape, p, z, batch, tokens)?;
            let z1 = tape.add(z, attn)?;
            let z1 = tape.layer_norm(z1, g1, o1)?;
            let f = ffn_graph(tape, p, z1)?;
            let z2 = tape.add(z1, f)?;
            tape.layer_norm(z2, g2, o2)
        }
        NormPlacement::Pre => {
            let n1 = tape.layer_norm(z, g1, o1)?;
            let (attn, _) = attention_graph(tape, p, n1, batch, tokens)?;
            let z1 = tape.add(z, attn)?;
            let n2 = tape.layer_norm(z1, g2, o2)?;
            let f = ffn_graph(tape, p, n2)?;
            tape.add(z1, f)
        }
    }
}

fn ffn_graph(tape: &mut Tape, p: &ParamNodes, x: NodeId) -> Result<NodeId, NumericError> {
    let (w1, b1, w2, b2) = p.ffn();
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let f = tape.matmul(h, w2)?;
    tape.add_bias(f, b2)
}

/// Full predictor on an embedded batch; returns a `(batch · d) × 1` node.
pub fn predict_graph(
    tape: &mut Tape,
    p: &ParamNodes,
    embedded: NodeId,
    batch: usize,
    features: usize,
) -> Result<NodeId, NumericError> {
    let tokens = features + 1;
    let out = block_graph(tape, p, embedded, batch, tokens)?;
    let (wp, bp) = p.proj();
    let proj = tape.matmul(out, wp)?;
    let proj = tape.add_bias(proj, bp)?;
    let rows: Vec<NodeId> = (0..batch)
        .map(|b| tape.slice_rows(proj, b * tokens, b * tokens + features))
        .collect::<Result<_, _>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

/// Self-attention of one `(d+1) × D` matrix, without normalization.
pub fn attention(z: &Tensor, params: &DenoiserParams) -> Result<Tensor, NumericError> {
    Ok(attention_with_weights(z, params)?.0)
}

/// Attention output and each head's weight matrix.
pub fn attention_with_weights(
    z: &Tensor,
    params: &DenoiserParams,
) -> Result<(Tensor, Vec<Tensor>), NumericError> {
    let mut tape = Tape::new();
    let p = params.record(&mut tape);
    let x = tape.constant(z.clone());
    let (out, weights) = attention_graph(&mut tape, &p, x, 1, z.rows())?;
    let weights = weights.iter().map(|w| tape.value(*w).clone()).collect();
    Ok((tape.value(out).clone(), weights))
}

pub fn transformer_block(z: &Tensor, params: &DenoiserParams) -> Result<Tensor, NumericError> {
    let mut tape = Tape::new();
    let p = params.record(&mut tape);
    let x = tape.constant(z.clone());
    let out = block_graph(&mut tape, &p, x, 1, z.rows())?;
    Ok(tape.value(out).clone())
}

/// `ε̂` for one record at timestep `t`.
pub fn predict_noise(
    x: &[f64],
    t: usize,
    params: &DenoiserParams,
    config: &DenoiserConfig,
) -> Result<Vec<f64>, DenoiserError> {
    let embedder = Embedder::new(config.embedding, x.len())?;
    let xs = Tensor::row_vector(x.to_vec());
    Ok(predict_noise_batch(&xs, &[t], params, &embedder)?.into_data())
}

/// `ε̂` for each row of `xs` (`B × d`), returned as `B × d`.
pub fn predict_noise_batch(
    xs: &Tensor,
    ts: &[usize],
    params: &DenoiserParams,
    embedder: &Embedder,
) -> Result<Tensor, DenoiserError> {
    let batch = xs.rows();
    let d = embedder.features();
    if batch == 0 {
        return Ok(Tensor::zeros(0, d));
    }
    let rows: Vec<&[f64]> = xs.row_iter().collect();
    let embedded = embedder.embed_batch(&rows, ts)?;
    let mut tape = Tape::new();
    let p = params.record(&mut tape);
    let z = tape.constant(embedded);
    let out = predict_graph(&mut tape, &p, z, batch, d)?;
    Ok(Tensor::matrix(batch, d, tape.value(out).data().to_vec())?)
}

const CHECKPOINT_MAGIC: &str = "emdt-checkpoint 1";

/// Writes config fields then every named parameter as
/// `param <name> <rows> <cols>` followed by one line of row-major values.
/// Values use the shortest representation that parses back bit-exactly.
pub fn write_checkpoint<W: Write>(
    mut out: W,
    config: &DenoiserConfig,
    params: &DenoiserParams,
) -> Result<(), DenoiserError> {
    let e = &config.embedding;
    let mut s = String::new();
    writeln!(s, "{CHECKPOINT_MAGIC}").ok();
    writeln!(s, "features {}", config.features).ok();
    writeln!(s, "dim {}", e.dim).ok();
    writeln!(s, "feature_scale {}", e.feature_scale).ok();
    writeln!(s, "time_scale {}", e.time_scale).ok();
    writeln!(s, "timesteps {}", e.timesteps).ok();
    writeln!(s, "heads {}", config.heads).ok();
    writeln!(s, "ff_dim {}", config.ff_dim).ok();
    writeln!(s, "norm {}", config.norm.as_str()).ok();
    writeln!(s, "init_seed {}", config.init_seed).ok();
    for (name, t) in params.named() {
        writeln!(s, "param {name} {} {}", t.rows(), t.cols()).ok();
        let line: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", line.join(" ")).ok();
    }
    writeln!(s, "end").ok();
    out.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(
    input: R,
) -> Result<(DenoiserConfig, DenoiserParams), DenoiserError> {
    let mut lines = input.lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, String), DenoiserError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(DenoiserError::Checkpoint {
                line: 0,
                message: format!("unexpected end of file, wanted {expect}"),
            }),
        }
    };
    let bad = |line: usize, message: String| DenoiserError::Checkpoint { line, message };

    let (n, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(bad(n, format!("bad header {magic:?}")));
    }
    let mut field = |key: &str| -> Result<(usize, String), DenoiserError> {
        let (n, l) = next(key)?;
        let mut it = l.splitn(2, ' ');
        if it.next() != Some(key) {
            return Err(bad(n, format!("expected field `{key}`")));
        }
        Ok((n, it.next().unwrap_or("").to_string()))
    };
    fn parse<T: std::str::FromStr>(n: usize, v: &str) -> Result<T, DenoiserError> {
        v.trim().parse().map_err(|_| DenoiserError::Checkpoint {
            line: n,
            message: format!("cannot parse {v:?}"),
        })
    }
    let (n, v) = field("features")?;
    let features = parse(n, &v)?;
    let (n, v) = field("dim")?;
    let dim = parse(n, &v)?;
    let (n, v) = field("feature_scale")?;
    let feature_scale = parse(n, &v)?;
    let (n, v) = field("time_scale")?;
    let time_scale = parse(n, &v)?;
    let (n, v) = field("timesteps")?;
    let timesteps = parse(n, &v)?;
    let (n, v) = field("heads")?;
    let heads = parse(n, &v)?;
    let (n, v) = field("ff_dim")?;
    let ff_dim = parse(n, &v)?;
    let (n, v) = field("norm")?;
    let norm = parse(n, &v)?;
    let (n, v) = field("init_seed")?;
    let init_seed = parse(n, &v)?;
    drop(field);
    let config = DenoiserConfig {
        embedding: EmbeddingConfig {
            dim,
            feature_scale,
            time_scale,
            timesteps,
        },
        features,
        heads,
        ff_dim,
        norm,
        init_seed,
    };
    config.validate()?;

    let mut params = DenoiserParams::zeros(&config);
    let names: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(names) {
        let (n, header) = next(&name)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "param" || parts[1] != name {
            return Err(bad(n, format!("expected `param {name} ..`, got {header:?}")));
        }
        let rows: usize = parse(n, parts[2])?;
        let cols: usize = parse(n, parts[3])?;
        if [rows, cols] != shape[..] {
            return Err(bad(
                n,
                format!("{name} has shape {rows}×{cols}, config implies {shape:?}"),
            ));
        }
        let (n, values) = next(&name)?;
        let data: Vec<f64> = values
            .split_whitespace()
            .map(|v| parse(n, v))
            .collect::<Result<_, _>>()?;
        *slot = Tensor::matrix(rows, cols, data).map_err(|e| bad(n, e.to_string()))?;
    }
    let (n, end) = next("end")?;
    if end.trim() != "end" {
        return Err(bad(n, "missing end marker".into()));
    }
    Ok((config, params))
}
