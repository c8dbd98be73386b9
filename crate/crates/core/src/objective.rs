//! Margin-based contrastive loss over mini-batches of paraphrase pairs.
//!
//! For a gold pair `(x1, x2)` with in-batch negatives `t1`, `t2` the loss is
//!
//! ```text
//! max(0, δ - cos(g1, g2) + cos(g1, g(t1))) + max(0, δ - cos(g1, g2) + cos(g2, g(t2)))
//! ```
//!
//! averaged over the batch, plus `λ_c ||W_c - anchor||²` and
//! `λ_w ||W_w_initial - W_w||²` restricted to the rows the batch touches.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::encoders::{Encoder, EncoderGrads, Forward};
use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine, cosine_with_grads, finite_diff_check, Matrix, Rng};
use crate::optim::OptimizerKind;
use crate::textdata::EmbeddingTable;

/// Negative-example selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Most similar in-batch phrase.
    Max,
    /// MAX with probability 0.5, otherwise a uniform in-batch phrase.
    Mix,
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampling::Max => "max",
            Sampling::Mix => "mix",
        })
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Sampling::Max),
            "mix" => Ok(Sampling::Mix),
            _ => Err(Error::Config(format!("unknown sampling strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub delta: f64,
    pub lambda_c: f64,
    pub lambda_w: f64,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub clip_gradients: bool,
    pub epochs: usize,
    pub seed: u64,
    /// When false, `W_w` stays at its initial values.
    pub update_embeddings: bool,
}

pub const CLIP_THRESHOLD: f64 = 1.0;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            delta: 0.4,
            lambda_c: 1e-5,
            lambda_w: 1e-7,
            batch_size: 100,
            sampling: Sampling::Max,
            optimizer: OptimizerKind::AdaGrad,
            learning_rate: 0.05,
            clip_gradients: true,
            epochs: 10,
            seed: 1,
            update_embeddings: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad flag {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "delta",
        "lambda_c",
        "lambda_w",
        "batch_size",
        "sampling",
        "optimizer",
        "learning_rate",
        "clip",
        "epochs",
        "seed",
        "update_embeddings",
    ];

    /// Sets one field from its textual `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "delta" => self.delta = parse(key, value)?,
            "lambda_c" => self.lambda_c = parse(key, value)?,
            "lambda_w" => self.lambda_w = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "sampling" => self.sampling = value.trim().parse()?,
            "optimizer" => self.optimizer = value.trim().parse()?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "clip" => self.clip_gradients = parse_flag(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "update_embeddings" => self.update_embeddings = parse_flag(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_w", self.lambda_w)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_lines(&self) -> Vec<String> {
        vec![
            format!("delta={}", self.delta),
            format!("lambda_c={}", self.lambda_c),
            format!("lambda_w={}", self.lambda_w),
            format!("batch_size={}", self.batch_size),
            format!("sampling={}", self.sampling),
            format!("optimizer={}", self.optimizer),
            format!("learning_rate={}", self.learning_rate),
            format!("clip={}", self.clip_gradients),
            format!("epochs={}", self.epochs),
            format!("seed={}", self.seed),
            format!("update_embeddings={}", self.update_embeddings),
        ]
    }
}

/// A phrase pair as embedding-row ids.
pub type IdPair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    First,
    Second,
}

/// Reference to one phrase of one pair in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhraseRef {
    pub pair: usize,
    pub side: Side,
}

/// Chosen negatives for one gold pair and which branch produced each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Negatives {
    pub t1: PhraseRef,
    pub t2: PhraseRef,
    pub t1_from_max: bool,
    pub t2_from_max: bool,
}

fn encoding<'a>(encoded: &'a [(Vec<f64>, Vec<f64>)], r: PhraseRef) -> &'a [f64] {
    match r.side {
        Side::First => &encoded[r.pair].0,
        Side::Second => &encoded[r.pair].1,
    }
}

/// Candidate pool for `anchor`: both phrases of every other pair, in
/// (pair index, side) order.
fn pool(batch_len: usize, anchor: usize) -> impl Iterator<Item = PhraseRef> {
    (0..batch_len)
        .filter(move |&j| j != anchor)
        .flat_map(|j| [PhraseRef { pair: j, side: Side::First }, PhraseRef { pair: j, side: Side::Second }])
}

/// Most cosine-similar phrase to the anchor phrase among the other pairs.
/// Ties go to the lowest (pair index, side).
pub fn select_negative_max(encoded: &[(Vec<f64>, Vec<f64>)], anchor: usize, side: Side) -> Result<PhraseRef> {
    if encoded.len() < 2 {
        return Err(Error::Contract("negative selection needs at least 2 pairs".into()));
    }
    let a = encoding(encoded, PhraseRef { pair: anchor, side });
    let mut best: Option<(f64, PhraseRef)> = None;
    for cand in pool(encoded.len(), anchor) {
        let c = cosine(a, encoding(encoded, cand))
            .map_err(|_| Error::Degenerate(format!("zero-norm encoding for pair {} {:?}", cand.pair, cand.side)))?;
        if best.map_or(true, |(b, _)| c > b) {
            best = Some((c, cand));
        }
    }
    Ok(best.expect("pool is non-empty").1)
}

/// Uniform draw from the anchor's candidate pool.
pub fn select_negative_random(batch_len: usize, anchor: usize, rng: &mut Rng) -> PhraseRef {
    let k = rng.below(2 * (batch_len - 1));
    pool(batch_len, anchor).nth(k).expect("index within pool")
}

/// Negatives for every pair in the batch.
///
/// Under MIX each side of each pair independently flips a fair coin: heads
/// uses MAX, tails a uniform pool member.
pub fn select_negatives(encoded: &[(Vec<f64>, Vec<f64>)], sampling: Sampling, rng: &mut Rng) -> Result<Vec<Negatives>> {
    if encoded.len() < 2 {
        return Err(Error::Contract("negative selection needs at least 2 pairs".into()));
    }
    let mut pick = |i: usize, side: Side| -> Result<(PhraseRef, bool)> {
        match sampling {
            Sampling::Max => Ok((select_negative_max(encoded, i, side)?, true)),
            Sampling::Mix => {
                if rng.bernoulli(0.5) {
                    Ok((select_negative_max(encoded, i, side)?, true))
                } else {
                    Ok((select_negative_random(encoded.len(), i, rng), false))
                }
            }
        }
    };
    (0..encoded.len())
        .map(|i| {
            let (t1, t1_from_max) = pick(i, Side::First)?;
            let (t2, t2_from_max) = pick(i, Side::Second)?;
            Ok(Negatives { t1, t2, t1_from_max, t2_from_max })
        })
        .collect()
}

/// Forward passes for both phrases of every pair.
pub fn encode_batch(encoder: &Encoder, table: &EmbeddingTable, batch: &[IdPair]) -> Result<Vec<(Forward, Forward)>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let fa = encoder.forward(table, a).map_err(|e| annotate(e, i))?;
            let fb = encoder.forward(table, b).map_err(|e| annotate(e, i))?;
            Ok((fa, fb))
        })
        .collect()
}

fn annotate(e: Error, pair: usize) -> Error {
    match e {
        Error::EmptyInput(m) => Error::EmptyInput(format!("pair {pair}: {m}")),
        other => other,
    }
}

pub fn outputs(forwards: &[(Forward, Forward)]) -> Vec<(Vec<f64>, Vec<f64>)> {
    forwards.iter().map(|(a, b)| (a.output.clone(), b.output.clone())).collect()
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Mean hinge loss plus regularizers.
    pub value: f64,
    /// Mean hinge loss alone.
    pub hinge: f64,
    pub grads: EncoderGrads,
    /// Whether each pair's two hinge terms were active.
    pub active: Vec<(bool, bool)>,
}

fn degenerate(r: PhraseRef) -> impl FnOnce(Error) -> Error {
    move |_| Error::Degenerate(format!("zero-norm encoding for pair {} {:?} phrase", r.pair, r.side))
}

/// Adds `λ_c ||W_c - anchor||²` and `λ_w Σ_rows ||W_w - W_w_ref||²` to `grads`,
/// returning the penalty value. `word_ref` defaults to the table's initial rows.
pub(crate) fn add_regularizers(
    encoder: &Encoder,
    table: &EmbeddingTable,
    rows: &BTreeSet<usize>,
    lambda_c: f64,
    lambda_w: f64,
    comp_anchor: Option<&[Matrix]>,
    grads: &mut EncoderGrads,
) -> f64 {
    let mut penalty = 0.0;
    if lambda_c > 0.0 {
        for (k, (_, m)) in encoder.params().iter().enumerate() {
            let g = grads.comp[k].as_mut_slice();
            for (j, &w) in m.as_slice().iter().enumerate() {
                let diff = w - comp_anchor.map_or(0.0, |a| a[k].as_slice()[j]);
                penalty += lambda_c * diff * diff;
                g[j] += 2.0 * lambda_c * diff;
            }
        }
    }
    if lambda_w > 0.0 {
        for &r in rows {
            let diff: Vec<f64> = table.row(r).iter().zip(table.initial_row(r)).map(|(c, i)| c - i).collect();
            penalty += lambda_w * diff.iter().map(|d| d * d).sum::<f64>();
            grads.add_word(r, 2.0 * lambda_w, &diff);
        }
    }
    penalty
}

/// Loss and gradients for one batch, given forward passes and negatives.
pub fn batch_loss_from_forwards(
    encoder: &Encoder,
    table: &EmbeddingTable,
    forwards: &[(Forward, Forward)],
    negatives: &[Negatives],
    config: &TrainConfig,
) -> Result<BatchLoss> {
    if forwards.len() != negatives.len() {
        return Err(Error::Contract(format!("{} pairs but {} negative sets", forwards.len(), negatives.len())));
    }
    let b = forwards.len();
    let out = |r: PhraseRef| -> &[f64] {
        match r.side {
            Side::First => &forwards[r.pair].0.output,
            Side::Second => &forwards[r.pair].1.output,
        }
    };
    let out_dim = forwards.first().map_or(0, |f| f.0.output.len());
    // d loss / d g for every phrase in the batch
    let mut dout = vec![(vec![0.0; out_dim], vec![0.0; out_dim]); b];
    let mut hinge_sum = 0.0;
    let mut active = Vec::with_capacity(b);
    let scale = 1.0 / b as f64;
    for (i, neg) in negatives.iter().enumerate() {
        let r1 = PhraseRef { pair: i, side: Side::First };
        let r2 = PhraseRef { pair: i, side: Side::Second };
        let (c12, d12_1, d12_2) = cosine_with_grads(out(r1), out(r2)).map_err(degenerate(r1))?;
        let (c1t, d1t_1, d1t_t) = cosine_with_grads(out(r1), out(neg.t1)).map_err(degenerate(neg.t1))?;
        let (c2t, d2t_2, d2t_t) = cosine_with_grads(out(r2), out(neg.t2)).map_err(degenerate(neg.t2))?;
        let h1 = config.delta - c12 + c1t;
        let h2 = config.delta - c12 + c2t;
        let (a1, a2) = (h1 > 0.0, h2 > 0.0);
        active.push((a1, a2));
        let mut slot = |r: PhraseRef, s: f64, g: &[f64]| {
            let dst = match r.side {
                Side::First => &mut dout[r.pair].0,
                Side::Second => &mut dout[r.pair].1,
            };
            axpy(s * scale, g, dst);
        };
        if a1 {
            hinge_sum += h1;
            slot(r1, -1.0, &d12_1);
            slot(r2, -1.0, &d12_2);
            slot(r1, 1.0, &d1t_1);
            slot(neg.t1, 1.0, &d1t_t);
        }
        if a2 {
            hinge_sum += h2;
            slot(r1, -1.0, &d12_1);
            slot(r2, -1.0, &d12_2);
            slot(r2, 1.0, &d2t_2);
            slot(neg.t2, 1.0, &d2t_t);
        }
    }

    let mut grads = EncoderGrads::zeros_like(encoder);
    let mut rows = BTreeSet::new();
    for ((fa, fb), (ga, gb)) in forwards.iter().zip(&dout) {
        rows.extend(fa.ids.iter().chain(&fb.ids).copied());
        if ga.iter().any(|&v| v != 0.0) {
            encoder.backward_into(table, fa, ga, &mut grads)?;
        }
        if gb.iter().any(|&v| v != 0.0) {
            encoder.backward_into(table, fb, gb, &mut grads)?;
        }
    }
    let hinge = hinge_sum * scale;
    let anchor = encoder.regularization_anchor();
    let penalty =
        add_regularizers(encoder, table, &rows, config.lambda_c, config.lambda_w, anchor.as_deref(), &mut grads);
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient in batch loss".into()));
    }
    Ok(BatchLoss { value: hinge + penalty, hinge, grads, active })
}

/// Encodes the batch and evaluates [`batch_loss_from_forwards`].
pub fn batch_loss(
    encoder: &Encoder,
    table: &EmbeddingTable,
    batch: &[IdPair],
    negatives: &[Negatives],
    config: &TrainConfig,
) -> Result<BatchLoss> {
    let forwards = encode_batch(encoder, table, batch)?;
    batch_loss_from_forwards(encoder, table, &forwards, negatives, config)
}

/// Mean over pairs of `2 cos(g1, g2) - cos(g(t1), g1) - cos(g(t2), g2)`.
pub fn fit_diagnostic(encoder: &Encoder, table: &EmbeddingTable, batch: &[IdPair], negatives: &[Negatives]) -> Result<f64> {
    if batch.is_empty() || batch.len() != negatives.len() {
        return Err(Error::Contract("fit diagnostic needs a non-empty batch with aligned negatives".into()));
    }
    let enc = outputs(&encode_batch(encoder, table, batch)?);
    let mut total = 0.0;
    for (i, n) in negatives.iter().enumerate() {
        let r1 = PhraseRef { pair: i, side: Side::First };
        let r2 = PhraseRef { pair: i, side: Side::Second };
        let c12 = cosine(encoding(&enc, r1), encoding(&enc, r2)).map_err(degenerate(r1))?;
        let c1 = cosine(encoding(&enc, n.t1), encoding(&enc, r1)).map_err(degenerate(n.t1))?;
        let c2 = cosine(encoding(&enc, n.t2), encoding(&enc, r2)).map_err(degenerate(n.t2))?;
        total += 2.0 * c12 - c1 - c2;
    }
    Ok(total / batch.len() as f64)
}

/// Finite-difference check of [`batch_loss`] gradients, with negatives held
/// fixed. Covers every compositional parameter and every embedding row the
/// batch touches; returns the max relative error.
pub fn gradient_check(
    encoder: &Encoder,
    table: &EmbeddingTable,
    batch: &[IdPair],
    negatives: &[Negatives],
    config: &TrainConfig,
    eps: f64,
) -> Result<f64> {
    let loss = batch_loss(encoder, table, batch, negatives, config)?;
    let dim = table.dim();
    let ncomp = encoder.num_params();
    let rows: BTreeSet<usize> = batch.iter().flat_map(|(a, b)| a.iter().chain(b)).copied().collect();
    let rows: Vec<usize> = rows.into_iter().collect();
    let mut params = encoder.flat_params();
    let mut analytic = loss.grads.flat_comp();
    for &r in &rows {
        params.extend_from_slice(table.row(r));
        match loss.grads.words.get(&r) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(dim)),
        }
    }
    let mut enc = encoder.clone();
    let mut tab = table.clone();
    finite_diff_check(
        |p| {
            enc.set_flat_params(&p[..ncomp])?;
            for (k, &r) in rows.iter().enumerate() {
                tab.row_mut(r).copy_from_slice(&p[ncomp + k * dim..ncomp + (k + 1) * dim]);
            }
            Ok(batch_loss(&enc, &tab, batch, negatives, config)?.value)
        },
        &params,
        &analytic,
        eps,
    )
}
