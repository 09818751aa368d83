//! A small post-layer-norm transformer encoder over bytes, with a
//! token-labeling or CLS-pooled sequence-classification head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{fetch, Graph, ParamSet, Tensor, Var, VarMap};
use crate::data::{Example, ExampleLabels, Role, TaskKind};
use crate::error::{contract, Result};

pub const PAD: usize = 256;
pub const CLS: usize = 257;
pub const SEP: usize = 258;
pub const VOCAB_SIZE: usize = 260;

const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub task_kind: TaskKind,
    pub n_labels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 64,
            max_len: 32,
            task_kind: TaskKind::TokenLabeling,
            n_labels: 5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return contract("max_len must be at least 2");
        }
        if self.n_labels < 2 {
            return contract("n_labels must be at least 2");
        }
        if self.vocab_size < VOCAB_SIZE {
            return contract(format!("vocab_size must be at least {VOCAB_SIZE}"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `[CLS] bytes.. [SEP]`, with the bytes truncated to `max_len - 2`.
pub fn tokenize(text: &[u8], max_len: usize) -> Vec<usize> {
    let keep = max_len.saturating_sub(2).min(text.len());
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    ids.extend(text[..keep].iter().map(|&b| b as usize));
    ids.push(SEP);
    ids
}

/// Base-model parameters, stored flat in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.d_ffn;
        let bound_d = 1.0 / (d as f64).sqrt();
        let bound_f = 1.0 / (f as f64).sqrt();
        let mut p = ParamSet::new();
        p.insert("embed.tok", normal(&mut rng, &[config.vocab_size, d], 1.0));
        p.insert("embed.pos", normal(&mut rng, &[config.max_len, d], 0.5));
        for l in 0..config.n_layers {
            for w in ["q", "k", "v", "o"] {
                p.insert(
                    format!("layers.{l}.attn.{w}"),
                    uniform(&mut rng, &[d, d], bound_d),
                );
            }
            p.insert(
                format!("layers.{l}.ffn.w1"),
                uniform(&mut rng, &[d, f], bound_d),
            );
            p.insert(format!("layers.{l}.ffn.b1"), Tensor::zeros(&[f]));
            p.insert(
                format!("layers.{l}.ffn.w2"),
                uniform(&mut rng, &[f, d], bound_f),
            );
            p.insert(format!("layers.{l}.ffn.b2"), Tensor::zeros(&[d]));
            for ln in ["ln1", "ln2"] {
                p.insert(format!("layers.{l}.{ln}.gain"), Tensor::full(&[d], 1.0));
                p.insert(format!("layers.{l}.{ln}.bias"), Tensor::zeros(&[d]));
            }
        }
        p.insert("head.w", uniform(&mut rng, &[d, config.n_labels], bound_d));
        p.insert("head.b", Tensor::zeros(&[config.n_labels]));
        Ok(EncoderParams {
            config: config.clone(),
            params: p,
        })
    }

    /// Number of scalar parameters implied by `config`.
    pub fn expected_count(config: &EncoderConfig) -> usize {
        let d = config.d_model;
        let f = config.d_ffn;
        let per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
        config.vocab_size * d
            + config.max_len * d
            + config.n_layers * per_layer
            + d * config.n_labels
            + config.n_labels
    }
}

/// Padded model input for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub attention_mask: Vec<Vec<u8>>,
    pub labels: BatchLabels,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchLabels {
    Token(Vec<Vec<Option<usize>>>),
    Sequence(Vec<usize>),
}

impl Batch {
    pub fn from_examples(examples: &[&Example], role: Role) -> Result<Batch> {
        let Some(first) = examples.first() else {
            return contract("batch needs at least one example");
        };
        let seq_len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(examples.len());
        let mut attention_mask = Vec::with_capacity(examples.len());
        for ex in examples {
            let mut ids = ex.tokens.clone();
            let mut mask = vec![1u8; ids.len()];
            ids.resize(seq_len, PAD);
            mask.resize(seq_len, 0);
            token_ids.push(ids);
            attention_mask.push(mask);
        }
        let labels = match &first.labels {
            ExampleLabels::Token(_) => BatchLabels::Token(
                examples
                    .iter()
                    .map(|e| match &e.labels {
                        ExampleLabels::Token(t) => {
                            let mut t = t.clone();
                            t.resize(seq_len, None);
                            Ok(t)
                        }
                        _ => contract("mixed label kinds in batch"),
                    })
                    .collect::<Result<_>>()?,
            ),
            ExampleLabels::Sequence(_) => BatchLabels::Sequence(
                examples
                    .iter()
                    .map(|e| match &e.labels {
                        ExampleLabels::Sequence(l) => Ok(*l),
                        _ => contract("mixed label kinds in batch"),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Batch {
            token_ids,
            attention_mask,
            labels,
            role,
        })
    }

    pub fn size(&self) -> usize {
        self.token_ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    /// Number of supervised positions (tokens) or sequences.
    pub fn labeled_count(&self) -> usize {
        match &self.labels {
            BatchLabels::Token(rows) => rows
                .iter()
                .zip(&self.attention_mask)
                .map(|(r, m)| {
                    r.iter()
                        .zip(m)
                        .filter(|(l, &m)| l.is_some() && m == 1)
                        .count()
                })
                .sum(),
            BatchLabels::Sequence(l) => l.len(),
        }
    }

    /// Concatenates two batches along the example axis, re-padding as needed.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let seq_len = self.seq_len().max(other.seq_len());
        let pad = |b: &Batch| -> (Vec<Vec<usize>>, Vec<Vec<u8>>) {
            let ids = b
                .token_ids
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.resize(seq_len, PAD);
                    r
                })
                .collect();
            let mask = b
                .attention_mask
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.resize(seq_len, 0);
                    r
                })
                .collect();
            (ids, mask)
        };
        let (mut ids, mut mask) = pad(self);
        let (ids2, mask2) = pad(other);
        ids.extend(ids2);
        mask.extend(mask2);
        let labels = match (&self.labels, &other.labels) {
            (BatchLabels::Token(a), BatchLabels::Token(b)) => BatchLabels::Token(
                a.iter()
                    .chain(b)
                    .map(|r| {
                        let mut r = r.clone();
                        r.resize(seq_len, None);
                        r
                    })
                    .collect(),
            ),
            (BatchLabels::Sequence(a), BatchLabels::Sequence(b)) => {
                BatchLabels::Sequence(a.iter().chain(b).copied().collect())
            }
            _ => return contract("cannot concatenate batches with different label kinds"),
        };
        Ok(Batch {
            token_ids: ids,
            attention_mask: mask,
            labels,
            role: self.role,
        })
    }
}

/// Replaces the hidden state after `layer` with `transform(hidden)`.
pub struct RtnHook<'a, 'g> {
    pub layer: usize,
    pub transform: &'a dyn Fn(Var<'g>) -> Result<Var<'g>>,
}

pub struct ForwardOutput<'g> {
    pub logits: Var<'g>,
    /// Index 0 is the embedding output, index k the output of layer k.
    pub hidden: Vec<Var<'g>>,
    /// Attention probabilities per layer, `[batch, heads, seq, seq]`.
    pub attention: Vec<Var<'g>>,
    /// Layer-norm outputs before gain and bias, two per layer.
    pub normalized: Vec<Var<'g>>,
}

pub fn forward<'g>(
    config: &EncoderConfig,
    params: &VarMap<'g>,
    batch: &Batch,
    hook: Option<RtnHook<'_, 'g>>,
) -> Result<ForwardOutput<'g>> {
    if let Some(h) = &hook {
        if h.layer > config.n_layers {
            return contract(format!(
                "hook layer {} outside [0, {}]",
                h.layer, config.n_layers
            ));
        }
    }
    let b = batch.size();
    let t = batch.seq_len();
    if b == 0 || t == 0 {
        return contract("empty batch");
    }
    if t > config.max_len {
        return contract(format!(
            "sequence length {t} exceeds max_len {}",
            config.max_len
        ));
    }
    let d = config.d_model;
    let heads = config.n_heads;
    let dh = config.head_dim();
    let tok = fetch(params, "embed.tok")?;
    let graph = tok.graph();

    let ids: Vec<usize> = batch.token_ids.iter().flatten().copied().collect();
    let pos = fetch(params, "embed.pos")?.slice(0, 0, t)?;
    let mut x = tok.embedding(&ids, &[b, t])?.add(pos)?;

    let bias = mask_bias(graph, batch, heads);
    let mut hidden = Vec::with_capacity(config.n_layers + 1);
    let mut attention = Vec::with_capacity(config.n_layers);
    let mut normalized = Vec::with_capacity(2 * config.n_layers);
    let apply_hook = |layer: usize, x: Var<'g>| -> Result<Var<'g>> {
        match &hook {
            Some(h) if h.layer == layer => (h.transform)(x),
            _ => Ok(x),
        }
    };
    x = apply_hook(0, x)?;
    hidden.push(x);

    for l in 0..config.n_layers {
        let p = |name: &str| fetch(params, &format!("layers.{l}.{name}"));
        let split = |v: Var<'g>| v.reshape(&[b, t, heads, dh])?.permute(&[0, 2, 1, 3]);
        let q = split(x.matmul(p("attn.q")?)?)?;
        let k = x
            .matmul(p("attn.k")?)?
            .reshape(&[b, t, heads, dh])?
            .permute(&[0, 2, 3, 1])?;
        let v = split(x.matmul(p("attn.v")?)?)?;
        let scores = q.matmul(k)?.scale(1.0 / (dh as f64).sqrt())?.add(bias)?;
        let probs = scores.softmax()?;
        attention.push(probs);
        let ctx = probs
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        let attn_out = ctx.matmul(p("attn.o")?)?;

        let n1 = x.add(attn_out)?.layer_norm(LN_EPS)?;
        normalized.push(n1);
        x = n1.mul(p("ln1.gain")?)?.add(p("ln1.bias")?)?;

        let ff = x
            .matmul(p("ffn.w1")?)?
            .add(p("ffn.b1")?)?
            .relu()?
            .matmul(p("ffn.w2")?)?
            .add(p("ffn.b2")?)?;
        let n2 = x.add(ff)?.layer_norm(LN_EPS)?;
        normalized.push(n2);
        x = n2.mul(p("ln2.gain")?)?.add(p("ln2.bias")?)?;

        x = apply_hook(l + 1, x)?;
        hidden.push(x);
    }

    let head_in = match config.task_kind {
        TaskKind::TokenLabeling => x,
        TaskKind::SequenceClassification => x.slice(1, 0, 1)?.reshape(&[b, d])?,
    };
    let logits = head_in
        .matmul(fetch(params, "head.w")?)?
        .add(fetch(params, "head.b")?)?;
    Ok(ForwardOutput {
        logits,
        hidden,
        attention,
        normalized,
    })
}

/// Additive attention bias: 0 for real keys, a large negative for padding.
fn mask_bias<'g>(graph: &'g Graph, batch: &Batch, heads: usize) -> Var<'g> {
    let (b, t) = (batch.size(), batch.seq_len());
    let mut data = Vec::with_capacity(b * heads * t * t);
    for mask in &batch.attention_mask {
        for _ in 0..heads * t {
            data.extend(
                mask.iter()
                    .map(|&m| if m == 1 { 0.0 } else { MASKED_SCORE }),
            );
        }
    }
    graph.constant(Tensor::new(vec![b, heads, t, t], data).expect("mask shape"))
}

/// Mean cross-entropy over labeled positions (or over sequences).
pub fn task_loss<'g>(logits: Var<'g>, batch: &Batch) -> Result<Var<'g>> {
    let shape = logits.shape();
    match &batch.labels {
        BatchLabels::Token(labels) => {
            let c = *shape.last().unwrap_or(&0);
            let rows: usize = shape[..shape.len() - 1].iter().product();
            let targets: Vec<Option<usize>> = labels
                .iter()
                .zip(&batch.attention_mask)
                .flat_map(|(row, mask)| {
                    row.iter()
                        .zip(mask)
                        .map(|(l, &m)| if m == 1 { *l } else { None })
                })
                .collect();
            if targets.len() != rows {
                return contract(format!(
                    "{} labels for logits of shape {:?}",
                    targets.len(),
                    shape
                ));
            }
            logits.reshape(&[rows, c])?.cross_entropy(&targets)
        }
        BatchLabels::Sequence(labels) => {
            let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
            logits.cross_entropy(&targets)
        }
    }
}

/// Argmax predictions aligned with the batch labels: one per token
/// (`None` where the gold label is absent) or one per sequence.
pub fn predictions(logits: &Tensor, batch: &Batch) -> BatchLabels {
    let c = *logits.shape().last().unwrap_or(&1);
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    };
    let rows: Vec<usize> = logits.data().chunks(c).map(argmax).collect();
    match &batch.labels {
        BatchLabels::Token(labels) => {
            let t = batch.seq_len();
            BatchLabels::Token(
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(j, l)| l.map(|_| rows[i * t + j]))
                            .collect()
                    })
                    .collect(),
            )
        }
        BatchLabels::Sequence(_) => BatchLabels::Sequence(rows),
    }
}
