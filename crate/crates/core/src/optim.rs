//! AdaGrad and Adam updates, global-norm clipping, and the paraphrase
//! training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::encoders::{Encoder, EncoderGrads};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::objective::{
    batch_loss_from_forwards, encode_batch, outputs, select_negatives, IdPair, TrainConfig, CLIP_THRESHOLD,
};
use crate::textdata::{EmbeddingTable, PairDataset};

pub const ADAGRAD_EPS: f64 = 1e-8;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdaGrad,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdaGrad => "adagrad",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adagrad" => Ok(OptimizerKind::AdaGrad),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

fn check_finite(grads: &[f64]) -> Result<()> {
    if grads.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite gradient".into()))
    }
}

/// `G += g²; p -= lr · g / (√G + ε)`
pub fn adagrad_step(sum_sq: &mut [f64], params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if sum_sq.len() != params.len() || grads.len() != params.len() {
        return Err(Error::Contract("adagrad: state, parameter and gradient lengths differ".into()));
    }
    check_finite(grads)?;
    for ((g_acc, p), &g) in sum_sq.iter_mut().zip(params.iter_mut()).zip(grads) {
        *g_acc += g * g;
        *p -= lr * g / (g_acc.sqrt() + ADAGRAD_EPS);
    }
    Ok(())
}

/// Bias-corrected Adam update; `t` is the 1-based step count.
pub fn adam_step(m: &mut [f64], v: &mut [f64], t: u64, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if m.len() != params.len() || v.len() != params.len() || grads.len() != params.len() {
        return Err(Error::Contract("adam: state, parameter and gradient lengths differ".into()));
    }
    if t == 0 {
        return Err(Error::Contract("adam step counter starts at 1".into()));
    }
    check_finite(grads)?;
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((mi, vi), p), &g) in m.iter_mut().zip(v.iter_mut()).zip(params.iter_mut()).zip(grads) {
        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Scales every gradient by `threshold / N` when the global L2 norm `N`
/// exceeds `threshold`. Returns the pre-clip norm.
pub fn clip_global(grads: &mut [&mut [f64]], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!("clip threshold must be positive, got {threshold}")));
    }
    for g in grads.iter() {
        check_finite(g)?;
    }
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

/// [`clip_global`] over compositional and word gradients together.
pub fn clip_encoder_grads(grads: &mut EncoderGrads, threshold: f64) -> Result<f64> {
    let mut slices: Vec<&mut [f64]> = grads.comp.iter_mut().map(|m| m.as_mut_slice()).collect();
    slices.extend(grads.words.values_mut().map(|g| g.as_mut_slice()));
    clip_global(&mut slices, threshold)
}

/// Identifies one parameter block for optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Comp(usize),
    Word(usize),
    Head(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum SlotState {
    AdaGrad { sum_sq: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
}

/// Per-parameter accumulators, created lazily on first update.
///
/// Embedding rows only receive updates (and, for Adam, moment decay) on steps
/// where they have a gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    slots: BTreeMap<Slot, SlotState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, t: 0, slots: BTreeMap::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Call once per optimizer step, before the per-slot updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: Slot, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let n = params.len();
        let kind = self.kind;
        let state = self.slots.entry(slot).or_insert_with(|| match kind {
            OptimizerKind::AdaGrad => SlotState::AdaGrad { sum_sq: vec![0.0; n] },
            OptimizerKind::Adam => SlotState::Adam { m: vec![0.0; n], v: vec![0.0; n] },
        });
        match state {
            SlotState::AdaGrad { sum_sq } => adagrad_step(sum_sq, params, grads, self.lr),
            SlotState::Adam { m, v } => adam_step(m, v, self.t.max(1), params, grads, self.lr),
        }
    }

    /// Every squared accumulator (AdaGrad `G`, Adam `v`) is non-negative.
    pub fn accumulators_nonnegative(&self) -> bool {
        self.slots.values().all(|s| match s {
            SlotState::AdaGrad { sum_sq } => sum_sq.iter().all(|&g| g >= 0.0),
            SlotState::Adam { v, .. } => v.iter().all(|&x| x >= 0.0),
        })
    }

    /// Applies encoder gradients: compositional blocks always, word rows
    /// only when `update_words`.
    pub fn apply_encoder_grads(
        &mut self,
        encoder: &mut Encoder,
        table: &mut EmbeddingTable,
        grads: &EncoderGrads,
        update_words: bool,
    ) -> Result<()> {
        for (k, (m, g)) in encoder.params_mut().into_iter().zip(&grads.comp).enumerate() {
            self.update(Slot::Comp(k), m.as_mut_slice(), g.as_slice())?;
        }
        if update_words {
            for (&id, g) in &grads.words {
                self.update(Slot::Word(id), table.row_mut(id), g)?;
            }
        }
        Ok(())
    }
}

/// Per-epoch mean hinge loss (unregularized).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Splits `order` into batches of `size`; a trailing single pair joins the
/// previous batch since it has no in-batch negatives of its own.
pub fn make_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

pub fn to_id_pairs(table: &EmbeddingTable, data: &PairDataset) -> Vec<IdPair> {
    data.pairs.iter().map(|(a, b)| (table.ids(a), table.ids(b))).collect()
}

/// Trains `encoder` and `table` in place on paraphrase pairs.
pub fn train(encoder: &mut Encoder, table: &mut EmbeddingTable, data: &PairDataset, config: &TrainConfig) -> Result<TrainLog> {
    train_with_progress(encoder, table, data, config, None)
}

/// Like [`train`], also writing `epoch TAB mean_loss` lines to `progress`.
pub fn train_with_progress(
    encoder: &mut Encoder,
    table: &mut EmbeddingTable,
    data: &PairDataset,
    config: &TrainConfig,
    mut progress: Option<&mut dyn Write>,
) -> Result<TrainLog> {
    config.validate()?;
    if data.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 pairs, got {}", data.len())));
    }
    let pairs = to_id_pairs(table, data);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..config.epochs {
        Rng::derive(config.seed, 2 * epoch as u64).shuffle(&mut order);
        let mut sampler = Rng::derive(config.seed, 2 * epoch as u64 + 1);
        let mut hinge_total = 0.0;
        for (bi, idx) in make_batches(&order, config.batch_size).iter().enumerate() {
            let batch: Vec<IdPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
            let mut step = || -> Result<f64> {
                let forwards = encode_batch(encoder, table, &batch)?;
                let negs = select_negatives(&outputs(&forwards), config.sampling, &mut sampler)?;
                let mut loss = batch_loss_from_forwards(encoder, table, &forwards, &negs, config)?;
                if !config.update_embeddings {
                    loss.grads.words.clear();
                }
                if config.clip_gradients {
                    clip_encoder_grads(&mut loss.grads, CLIP_THRESHOLD)?;
                }
                opt.begin_step();
                opt.apply_encoder_grads(encoder, table, &loss.grads, config.update_embeddings)?;
                Ok(loss.hinge * batch.len() as f64)
            };
            hinge_total += step().map_err(|e| batch_error(e, epoch, bi))?;
        }
        let mean = hinge_total / pairs.len() as f64;
        log::info!("epoch {} mean loss {mean:.6}", epoch + 1);
        if let Some(out) = progress.as_deref_mut() {
            writeln!(out, "{}\t{mean}", epoch + 1)?;
        }
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

fn batch_error(e: Error, epoch: usize, batch: usize) -> Error {
    let at = format!("epoch {} batch {batch}", epoch + 1);
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{at}: {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("{at}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Architecture;
    use crate::objective::Sampling;
    use crate::synth::{SynthConfig, SynthCorpus};

    #[test]
    fn clip_examples() {
        let mut a = vec![0.3, 0.4];
        clip_global(&mut [a.as_mut_slice()], 1.0).unwrap();
        assert_eq!(a, vec![0.3, 0.4]);
        let mut b = vec![3.0, 4.0];
        let n = clip_global(&mut [b.as_mut_slice()], 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert!((b[0] - 0.6).abs() < 1e-15 && (b[1] - 0.8).abs() < 1e-15);
        let mut c = vec![f64::NAN];
        assert!(matches!(clip_global(&mut [c.as_mut_slice()], 1.0), Err(Error::Numeric(_))));
        assert!(clip_global(&mut [b.as_mut_slice()], 0.0).is_err());
    }

    #[test]
    fn adagrad_examples() {
        let (mut g, mut p) = (vec![0.0], vec![0.0]);
        adagrad_step(&mut g, &mut p, &[1.0], 0.05).unwrap();
        assert!((p[0] + 0.05 / (1.0 + 1e-8)).abs() < 1e-15);
        let before = p[0];
        adagrad_step(&mut g, &mut p, &[1.0], 0.05).unwrap();
        assert!((p[0] - before + 0.05 / (2f64.sqrt() + 1e-8)).abs() < 1e-15);
        let (mut g0, mut p0) = (vec![0.0], vec![1.5]);
        adagrad_step(&mut g0, &mut p0, &[0.0], 0.05).unwrap();
        assert_eq!((g0[0], p0[0]), (0.0, 1.5));
        assert!(adagrad_step(&mut g0, &mut p0, &[f64::INFINITY], 0.05).is_err());
    }

    #[test]
    fn adam_examples() {
        for g in [1e-3, 0.5, -7.0] {
            let (mut m, mut v, mut p) = (vec![0.0], vec![0.0], vec![0.0]);
            adam_step(&mut m, &mut v, 1, &mut p, &[g], 0.001).unwrap();
            assert!((p[0].abs() - 0.001).abs() < 1e-6, "{}", p[0]);
        }
        let (mut m, mut v, mut p) = (vec![0.0], vec![0.0], vec![2.0]);
        for t in 1..=10 {
            adam_step(&mut m, &mut v, t, &mut p, &[0.0], 0.001).unwrap();
        }
        assert_eq!(p[0], 2.0);

        // hand recursion for constant g = 1
        let (mut m, mut v, mut p) = (vec![0.0], vec![0.0], vec![0.0]);
        let (mut hm, mut hv, mut hp) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3u64 {
            adam_step(&mut m, &mut v, t, &mut p, &[1.0], 0.001).unwrap();
            hm = 0.9 * hm + 0.1;
            hv = 0.999 * hv + 0.001;
            let mh = hm / (1.0 - 0.9f64.powi(t as i32));
            let vh = hv / (1.0 - 0.999f64.powi(t as i32));
            hp -= 0.001 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((m[0] - 0.271).abs() < 1e-15);
        assert!((v[0] - 0.002997001).abs() < 1e-15);
        assert!((p[0] - hp).abs() < 1e-15);
        assert!((p[0] + 0.003).abs() < 1e-7);
    }

    #[test]
    fn batching_keeps_partial_and_merges_singletons() {
        let order: Vec<usize> = (0..7).collect();
        assert_eq!(make_batches(&order, 3), vec![vec![0, 1, 2], vec![3, 4, 5, 6]]);
        assert_eq!(make_batches(&order, 4), vec![vec![0, 1, 2, 3], vec![4, 5, 6]]);
        assert_eq!(make_batches(&order, 10), vec![order.clone()]);
    }

    fn small_corpus() -> SynthCorpus {
        SynthCorpus::generate(&SynthConfig { pairs: 60, ..SynthConfig::default() })
    }

    fn cfg() -> TrainConfig {
        TrainConfig { batch_size: 10, epochs: 2, lambda_w: 1e-4, ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_parameters() {
        let corpus = small_corpus();
        for config in [TrainConfig { epochs: 0, ..cfg() }, TrainConfig { learning_rate: 0.0, ..cfg() }] {
            let mut table = corpus.table.clone();
            let mut enc = Encoder::new(Architecture::Projection { out: 8 }, table.dim(), &mut Rng::new(1)).unwrap();
            let before = (enc.clone(), table.clone());
            train(&mut enc, &mut table, &corpus.train, &config).unwrap();
            assert_eq!((enc, table), before);
        }
    }

    #[test]
    fn frozen_embeddings_stay_at_initial() {
        let corpus = small_corpus();
        let mut table = corpus.table.clone();
        let mut enc = Encoder::new(Architecture::Rnn { activation: crate::Activation::Tanh }, table.dim(), &mut Rng::new(1)).unwrap();
        let before = enc.clone();
        let config = TrainConfig { update_embeddings: false, ..cfg() };
        train(&mut enc, &mut table, &corpus.train, &config).unwrap();
        assert_eq!(table.current(), table.initial());
        assert_ne!(enc, before);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = small_corpus();
        let run = |sampling| {
            let mut table = corpus.table.clone();
            let mut enc = Encoder::new(Architecture::Lstm { output_gate: true }, table.dim(), &mut Rng::new(4)).unwrap();
            let config = TrainConfig { sampling, optimizer: OptimizerKind::Adam, learning_rate: 0.005, ..cfg() };
            let log = train(&mut enc, &mut table, &corpus.train, &config).unwrap();
            (enc, table, log)
        };
        for s in [Sampling::Max, Sampling::Mix] {
            let (e1, t1, l1) = run(s);
            let (e2, t2, l2) = run(s);
            assert_eq!(e1.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       e2.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(t1, t2);
            assert_eq!(l1, l2);
        }
    }

    #[test]
    fn accumulators_stay_nonnegative() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        let mut rng = Rng::new(0);
        let mut p = vec![0.0; 4];
        for _ in 0..20 {
            opt.begin_step();
            let g: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            opt.update(Slot::Comp(0), &mut p, &g).unwrap();
            assert!(opt.accumulators_nonnegative());
        }
    }

    #[test]
    fn regularizer_pulls_toward_initial() {
        // with no task signal (inactive hinges) only the λ_w term moves the row
        let rows = vec![("a".to_string(), vec![1.0, 0.0]), ("b".to_string(), vec![0.0, 1.0])];
        let mut table = EmbeddingTable::from_rows(rows, crate::textdata::UnkRule::Mean).unwrap();
        let a = table.id("a");
        table.row_mut(a)[0] = 1.5;
        let data = PairDataset {
            pairs: vec![(vec!["a".into()], vec!["a".into()]), (vec!["b".into()], vec!["b".into()])],
        };
        let config = TrainConfig { batch_size: 2, epochs: 1, lambda_w: 0.1, lambda_c: 0.0, delta: 0.1, clip_gradients: false, ..TrainConfig::default() };
        let mut enc = Encoder::Average;
        train(&mut enc, &mut table, &data, &config).unwrap();
        let moved = table.row(a)[0];
        assert!(moved < 1.5 && moved > 1.0, "{moved}");
        assert_eq!(table.row(a)[1], 0.0);
    }
}
