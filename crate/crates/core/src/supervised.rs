//! Supervised task heads on top of sentence encoders.
//!
//! Pair tasks (similarity, entailment) combine the two encodings into
//! `h× = hL ⊙ hR` and `h+ = |hL - hR|`, pass them through a sigmoid hidden
//! layer and a softmax. Similarity regresses a score in `[1, K]` through the
//! expectation `ŷ = r·p̂` with `r = [1..K]` and is trained with KL divergence
//! against a two-point target distribution. Entailment (3 classes) and
//! sentiment (2 classes, single sentence) use negative log-likelihood.

use std::collections::BTreeSet;

use crate::encoders::{Encoder, EncoderGrads, Forward};
use crate::error::{Error, Result};
use crate::numerics::{axpy, finite_diff_check, pearson, sigmoid, softmax, Matrix, Rng};
use crate::objective::{add_regularizers, TrainConfig};
use crate::optim::{train as train_pairs, OptimizerKind, Optimizer, Slot};
use crate::textdata::{EmbeddingTable, LabeledDataset, LabeledPairDataset, PairDataset, ScoredPairDataset};

/// Floor applied to predicted probabilities inside [`kl_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Elementwise product and absolute difference.
pub fn pair_features(h_l: &[f64], h_r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if h_l.len() != h_r.len() {
        return Err(Error::Contract(format!("pair features of lengths {} and {}", h_l.len(), h_r.len())));
    }
    let times = h_l.iter().zip(h_r).map(|(a, b)| a * b).collect();
    let plus = h_l.iter().zip(h_r).map(|(a, b)| (a - b).abs()).collect();
    Ok((times, plus))
}

/// Two-point distribution over `1..=K` whose expectation is `y`.
pub fn target_distribution(y: f64, k: usize) -> Result<Vec<f64>> {
    if k < 1 || !(y >= 1.0 && y <= k as f64) {
        return Err(Error::Domain(format!("score {y} outside [1, {k}]")));
    }
    let fl = y.floor();
    let lo = fl as usize; // 1-based index of the lower class
    let mut p = vec![0.0; k];
    p[lo - 1] = fl - y + 1.0;
    if lo < k {
        p[lo] = y - fl;
    }
    Ok(p)
}

/// `KL(p || p̂)` with `0 log 0 = 0`; `p̂` is floored at [`PROB_FLOOR`].
pub fn kl_loss(p: &[f64], p_hat: &[f64]) -> Result<f64> {
    if p.len() != p_hat.len() {
        return Err(Error::Contract(format!("distributions of lengths {} and {}", p.len(), p_hat.len())));
    }
    if let Some(bad) = p_hat.iter().find(|&&q| !(q > 0.0)) {
        return Err(Error::Numeric(format!("predicted probability {bad} is not positive")));
    }
    Ok(p.iter()
        .zip(p_hat)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum())
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Hidden sigmoid layer over pair features, then a softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PairHead {
    pub w_times: Matrix,
    pub w_plus: Matrix,
    pub b_h: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

/// Sigmoid layer over one encoding, then a 2-way softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SentimentHead {
    pub w_h: Matrix,
    pub b_h: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    Similarity { head: PairHead, k: usize },
    Entailment(PairHead),
    Sentiment(SentimentHead),
}

impl PairHead {
    pub fn new(input: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        PairHead {
            w_times: Matrix::glorot(hidden, input, rng),
            w_plus: Matrix::glorot(hidden, input, rng),
            b_h: Matrix::zeros(hidden, 1),
            w_out: Matrix::glorot(classes, hidden, rng),
            b_out: Matrix::zeros(classes, 1),
        }
    }

    pub fn zeroed(input: usize, hidden: usize, classes: usize) -> Self {
        PairHead {
            w_times: Matrix::zeros(hidden, input),
            w_plus: Matrix::zeros(hidden, input),
            b_h: Matrix::zeros(hidden, 1),
            w_out: Matrix::zeros(classes, hidden),
            b_out: Matrix::zeros(classes, 1),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.w_times.cols() != dim || self.w_plus.cols() != dim {
            return Err(Error::Contract(format!("head expects {}-dimensional encodings, got {dim}", self.w_times.cols())));
        }
        Ok(())
    }

    /// Class probabilities for a sentence pair.
    pub fn probabilities(&self, h_l: &[f64], h_r: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(h_l, h_r)?.1))
    }

    /// Hidden activations and output logits.
    fn logits(&self, h_l: &[f64], h_r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(h_l.len())?;
        let (times, plus) = pair_features(h_l, h_r)?;
        let mut a = self.b_h.as_slice().to_vec();
        self.w_times.matvec_acc(&times, &mut a);
        self.w_plus.matvec_acc(&plus, &mut a);
        let hs: Vec<f64> = a.into_iter().map(sigmoid).collect();
        let mut z = self.b_out.as_slice().to_vec();
        self.w_out.matvec_acc(&hs, &mut z);
        Ok((hs, z))
    }

    /// Backprop of `dz` (gradient at the logits); returns `(dhL, dhR)`.
    fn backward(&self, h_l: &[f64], h_r: &[f64], hs: &[f64], dz: &[f64], grads: &mut [Matrix]) -> (Vec<f64>, Vec<f64>) {
        let (times, plus) = pair_features(h_l, h_r).expect("shapes checked in forward");
        grads[3].add_outer(dz, hs);
        axpy(1.0, dz, grads[4].as_mut_slice());
        let mut dhs = vec![0.0; hs.len()];
        self.w_out.matvec_t_acc(dz, &mut dhs);
        let da: Vec<f64> = dhs.iter().zip(hs).map(|(d, s)| d * s * (1.0 - s)).collect();
        grads[0].add_outer(&da, &times);
        grads[1].add_outer(&da, &plus);
        axpy(1.0, &da, grads[2].as_mut_slice());
        let mut dtimes = vec![0.0; h_l.len()];
        let mut dplus = vec![0.0; h_l.len()];
        self.w_times.matvec_t_acc(&da, &mut dtimes);
        self.w_plus.matvec_t_acc(&da, &mut dplus);
        let mut dl = vec![0.0; h_l.len()];
        let mut dr = vec![0.0; h_l.len()];
        for k in 0..h_l.len() {
            let sign = (h_l[k] - h_r[k]).signum() * f64::from(h_l[k] != h_r[k]);
            dl[k] = dtimes[k] * h_r[k] + dplus[k] * sign;
            dr[k] = dtimes[k] * h_l[k] - dplus[k] * sign;
        }
        (dl, dr)
    }
}

impl SentimentHead {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        SentimentHead {
            w_h: Matrix::glorot(hidden, input, rng),
            b_h: Matrix::zeros(hidden, 1),
            w_out: Matrix::glorot(2, hidden, rng),
            b_out: Matrix::zeros(2, 1),
        }
    }

    pub fn zeroed(input: usize, hidden: usize) -> Self {
        SentimentHead {
            w_h: Matrix::zeros(hidden, input),
            b_h: Matrix::zeros(hidden, 1),
            w_out: Matrix::zeros(2, hidden),
            b_out: Matrix::zeros(2, 1),
        }
    }

    pub fn probabilities(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(h)?.1))
    }

    fn logits(&self, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if h.len() != self.w_h.cols() {
            return Err(Error::Contract(format!("head expects {}-dimensional encodings, got {}", self.w_h.cols(), h.len())));
        }
        let mut a = self.b_h.as_slice().to_vec();
        self.w_h.matvec_acc(h, &mut a);
        let hs: Vec<f64> = a.into_iter().map(sigmoid).collect();
        let mut z = self.b_out.as_slice().to_vec();
        self.w_out.matvec_acc(&hs, &mut z);
        Ok((hs, z))
    }

    fn backward(&self, h: &[f64], hs: &[f64], dz: &[f64], grads: &mut [Matrix]) -> Vec<f64> {
        grads[2].add_outer(dz, hs);
        axpy(1.0, dz, grads[3].as_mut_slice());
        let mut dhs = vec![0.0; hs.len()];
        self.w_out.matvec_t_acc(dz, &mut dhs);
        let da: Vec<f64> = dhs.iter().zip(hs).map(|(d, s)| d * s * (1.0 - s)).collect();
        grads[0].add_outer(&da, h);
        axpy(1.0, &da, grads[1].as_mut_slice());
        let mut dh = vec![0.0; h.len()];
        self.w_h.matvec_t_acc(&da, &mut dh);
        dh
    }
}

impl TaskHead {
    pub fn similarity(input: usize, hidden: usize, k: usize, rng: &mut Rng) -> Self {
        TaskHead::Similarity { head: PairHead::new(input, hidden, k, rng), k }
    }

    pub fn entailment(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        TaskHead::Entailment(PairHead::new(input, hidden, 3, rng))
    }

    /// Hidden width equals the encoding width.
    pub fn sentiment(input: usize, rng: &mut Rng) -> Self {
        TaskHead::Sentiment(SentimentHead::new(input, input, rng))
    }

    pub fn task_name(&self) -> &'static str {
        match self {
            TaskHead::Similarity { .. } => "similarity",
            TaskHead::Entailment(_) => "entailment",
            TaskHead::Sentiment(_) => "sentiment",
        }
    }

    /// Named parameters; names ending in `.w*` are weights, `.b*` biases.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            TaskHead::Similarity { head: h, .. } | TaskHead::Entailment(h) => vec![
                ("head.w_times", &h.w_times),
                ("head.w_plus", &h.w_plus),
                ("head.b_h", &h.b_h),
                ("head.w_out", &h.w_out),
                ("head.b_out", &h.b_out),
            ],
            TaskHead::Sentiment(h) => vec![
                ("head.w_h", &h.w_h),
                ("head.b_h", &h.b_h),
                ("head.w_out", &h.w_out),
                ("head.b_out", &h.b_out),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            TaskHead::Similarity { head: h, .. } | TaskHead::Entailment(h) => {
                vec![&mut h.w_times, &mut h.w_plus, &mut h.b_h, &mut h.w_out, &mut h.b_out]
            }
            TaskHead::Sentiment(h) => vec![&mut h.w_h, &mut h.b_h, &mut h.w_out, &mut h.b_out],
        }
    }

    /// Which parameters the `λ_s` penalty covers (weights, not biases).
    fn penalized(&self) -> Vec<bool> {
        self.params().iter().map(|(n, _)| n.starts_with("head.w")).collect()
    }

    fn zero_grads(&self) -> Vec<Matrix> {
        self.params().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|(_, m)| m.as_slice().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params().iter().map(|(_, m)| m.as_slice().len()).sum();
        if flat.len() != total {
            return Err(Error::Contract(format!("expected {total} head values, got {}", flat.len())));
        }
        let mut off = 0;
        for m in self.params_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `(p̂, ŷ)` for the similarity head.
    pub fn similarity_forward(&self, h_l: &[f64], h_r: &[f64]) -> Result<(Vec<f64>, f64)> {
        match self {
            TaskHead::Similarity { head, .. } => {
                let p = head.probabilities(h_l, h_r)?;
                let y = p.iter().enumerate().map(|(i, pi)| (i + 1) as f64 * pi).sum();
                Ok((p, y))
            }
            _ => Err(Error::Contract(format!("{} head has no similarity output", self.task_name()))),
        }
    }

    /// Class probabilities from one (sentiment) or two (pair tasks) encodings.
    pub fn class_probabilities(&self, encodings: &[&[f64]]) -> Result<Vec<f64>> {
        match (self, encodings) {
            (TaskHead::Similarity { head, .. } | TaskHead::Entailment(head), [l, r]) => head.probabilities(l, r),
            (TaskHead::Sentiment(head), [h]) => head.probabilities(h),
            _ => Err(Error::Contract(format!(
                "{} head given {} encodings",
                self.task_name(),
                encodings.len()
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TaskHead::Similarity { k, .. } => *k,
            TaskHead::Entailment(_) => 3,
            TaskHead::Sentiment(_) => 2,
        }
    }
}

/// Negative log-likelihood of `label` under the head's softmax.
pub fn classify_loss(head: &TaskHead, encodings: &[&[f64]], label: usize) -> Result<f64> {
    if label >= head.num_classes() {
        return Err(Error::Domain(format!("label {label} outside 0..{}", head.num_classes())));
    }
    let z = match (head, encodings) {
        (TaskHead::Similarity { head, .. } | TaskHead::Entailment(head), [l, r]) => head.logits(l, r)?.1,
        (TaskHead::Sentiment(h), [x]) => h.logits(x)?.1,
        _ => return Err(Error::Contract(format!("{} head given {} encodings", head.task_name(), encodings.len()))),
    };
    Ok(-log_softmax(&z)[label])
}

/// Training data for one supervised task.
#[derive(Debug, Clone, Copy)]
pub enum TaskData<'a> {
    Similarity(&'a ScoredPairDataset),
    Entailment(&'a LabeledPairDataset),
    Sentiment(&'a LabeledDataset),
}

impl TaskData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Similarity(d) => d.items.len(),
            TaskData::Entailment(d) => d.items.len(),
            TaskData::Sentiment(d) => d.items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pretrained encoder and embeddings used to initialize and regularize.
#[derive(Debug, Clone)]
pub struct UniversalPrior {
    pub encoder: Encoder,
    pub table: EmbeddingTable,
}

#[derive(Debug, Clone)]
pub enum Mode {
    /// Embeddings regularized to their initial values, `W_c` to zero.
    Scratch,
    /// Start from the prior and regularize `W_w` and `W_c` toward it.
    Universal(UniversalPrior),
    /// Encoder and embeddings fixed; only the head trains.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub lambda_s: f64,
    pub lambda_w: f64,
    pub lambda_c: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clip_gradients: bool,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            lambda_s: 1e-5,
            lambda_w: 1e-6,
            lambda_c: 1e-5,
            batch_size: 25,
            optimizer: OptimizerKind::AdaGrad,
            learning_rate: 0.05,
            epochs: 10,
            seed: 1,
            clip_gradients: false,
        }
    }
}

pub const DEFAULT_HIDDEN: usize = 150;
pub const DEFAULT_K: usize = 5;

/// Encoder, embeddings and task head trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedModel {
    pub encoder: Encoder,
    pub table: EmbeddingTable,
    pub head: TaskHead,
}

/// Sentences of one example as row ids, plus its target.
enum Example {
    Pair(Vec<usize>, Vec<usize>, Target),
    Single(Vec<usize>, usize),
}

enum Target {
    Dist(Vec<f64>),
    Class(usize),
}

fn examples(table: &EmbeddingTable, head: &TaskHead, data: TaskData) -> Result<Vec<Example>> {
    match (head, data) {
        (TaskHead::Similarity { k, .. }, TaskData::Similarity(d)) => d
            .items
            .iter()
            .map(|s| Ok(Example::Pair(table.ids(&s.left), table.ids(&s.right), Target::Dist(target_distribution(s.gold, *k)?))))
            .collect(),
        (TaskHead::Entailment(_), TaskData::Entailment(d)) => d
            .items
            .iter()
            .map(|(a, b, l)| {
                if *l >= 3 {
                    return Err(Error::Domain(format!("entailment label {l} outside 0..3")));
                }
                Ok(Example::Pair(table.ids(a), table.ids(b), Target::Class(*l)))
            })
            .collect(),
        (TaskHead::Sentiment(_), TaskData::Sentiment(d)) => d
            .items
            .iter()
            .map(|(s, l)| {
                if *l >= 2 {
                    return Err(Error::Domain(format!("sentiment label {l} outside 0..2")));
                }
                Ok(Example::Single(table.ids(s), *l))
            })
            .collect(),
        (h, _) => Err(Error::Contract(format!("{} head given data for a different task", h.task_name()))),
    }
}

/// Loss value and gradient at the logits for one example.
fn logit_loss(z: &[f64], target: &Target) -> (f64, Vec<f64>) {
    let logp = log_softmax(z);
    let p_hat: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    match target {
        Target::Dist(p) => {
            let value = p.iter().zip(&logp).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &lq)| pi * (pi.ln() - lq)).sum();
            (value, p_hat.iter().zip(p).map(|(q, pi)| q - pi).collect())
        }
        Target::Class(c) => {
            let mut dz = p_hat;
            dz[*c] -= 1.0;
            (-logp[*c], dz)
        }
    }
}

struct BatchResult {
    value: f64,
    enc_grads: EncoderGrads,
    head_grads: Vec<Matrix>,
}

struct Anchors<'a> {
    comp: Option<Vec<Matrix>>,
    /// Reference rows for the λ_w term; `None` uses the table's initial rows.
    words: Option<&'a EmbeddingTable>,
}

fn batch_objective(
    model: &SupervisedModel,
    exs: &[Example],
    idx: &[usize],
    frozen: bool,
    anchors: &Anchors,
    cfg: &SupervisedConfig,
    cache: Option<&[(Vec<f64>, Option<Vec<f64>>)]>,
) -> Result<BatchResult> {
    let mut enc_grads = EncoderGrads::zeros_like(&model.encoder);
    let mut head_grads = model.head.zero_grads();
    let scale = 1.0 / idx.len() as f64;
    let mut value = 0.0;
    let mut rows = BTreeSet::new();
    let fwd = |ids: &[usize]| model.encoder.forward(&model.table, ids);
    for &i in idx {
        match &exs[i] {
            Example::Pair(a, b, target) => {
                let (fa, fb): (Option<Forward>, Option<Forward>);
                let (ha, hb) = match cache {
                    Some(c) => {
                        fa = None;
                        fb = None;
                        (c[i].0.clone(), c[i].1.clone().expect("pair example cached with two encodings"))
                    }
                    None => {
                        let x = fwd(a)?;
                        let y = fwd(b)?;
                        let out = (x.output.clone(), y.output.clone());
                        fa = Some(x);
                        fb = Some(y);
                        out
                    }
                };
                let head = match &model.head {
                    TaskHead::Similarity { head, .. } | TaskHead::Entailment(head) => head,
                    TaskHead::Sentiment(_) => unreachable!("checked when building examples"),
                };
                let (hs, z) = head.logits(&ha, &hb)?;
                let (v, mut dz) = logit_loss(&z, target);
                value += v * scale;
                dz.iter_mut().for_each(|d| *d *= scale);
                let (dl, dr) = head.backward(&ha, &hb, &hs, &dz, &mut head_grads);
                if !frozen {
                    rows.extend(a.iter().chain(b).copied());
                    model.encoder.backward_into(&model.table, fa.as_ref().unwrap(), &dl, &mut enc_grads)?;
                    model.encoder.backward_into(&model.table, fb.as_ref().unwrap(), &dr, &mut enc_grads)?;
                }
            }
            Example::Single(s, label) => {
                let head = match &model.head {
                    TaskHead::Sentiment(h) => h,
                    _ => unreachable!("checked when building examples"),
                };
                let (f, h) = match cache {
                    Some(c) => (None, c[i].0.clone()),
                    None => {
                        let f = fwd(s)?;
                        let h = f.output.clone();
                        (Some(f), h)
                    }
                };
                let (hs, z) = head.logits(&h)?;
                let (v, mut dz) = logit_loss(&z, &Target::Class(*label));
                value += v * scale;
                dz.iter_mut().for_each(|d| *d *= scale);
                let dh = head.backward(&h, &hs, &dz, &mut head_grads);
                if !frozen {
                    rows.extend(s.iter().copied());
                    model.encoder.backward_into(&model.table, f.as_ref().unwrap(), &dh, &mut enc_grads)?;
                }
            }
        }
    }

    if cfg.lambda_s > 0.0 {
        for ((pen, (_, m)), g) in model.head.penalized().into_iter().zip(model.head.params()).zip(head_grads.iter_mut()) {
            if pen {
                value += cfg.lambda_s * m.sq_norm();
                axpy(2.0 * cfg.lambda_s, m.as_slice(), g.as_mut_slice());
            }
        }
    }
    if !frozen {
        value += add_regularizers(
            &model.encoder,
            &model.table,
            &BTreeSet::new(),
            cfg.lambda_c,
            0.0,
            anchors.comp.as_deref(),
            &mut enc_grads,
        );
        if cfg.lambda_w > 0.0 {
            for &r in &rows {
                let reference = anchors.words.map_or_else(|| model.table.initial_row(r), |t| t.row(r));
                let diff: Vec<f64> = model.table.row(r).iter().zip(reference).map(|(c, i)| c - i).collect();
                value += cfg.lambda_w * diff.iter().map(|d| d * d).sum::<f64>();
                enc_grads.add_word(r, 2.0 * cfg.lambda_w, &diff);
            }
        }
    }
    Ok(BatchResult { value, enc_grads, head_grads })
}

fn prepare<'a>(model: &mut SupervisedModel, mode: &'a Mode) -> Result<Anchors<'a>> {
    match mode {
        Mode::Universal(prior) => {
            if prior.encoder.architecture() != model.encoder.architecture()
                || prior.encoder.num_params() != model.encoder.num_params()
                || prior.table.current().shape() != model.table.current().shape()
            {
                return Err(Error::Contract("universal prior does not match the model's shapes".into()));
            }
            model.encoder = prior.encoder.clone();
            model.table = prior.table.clone();
            model.table.rebase_initial();
            Ok(Anchors {
                comp: Some(prior.encoder.params().into_iter().map(|(_, m)| m.clone()).collect()),
                words: Some(&prior.table),
            })
        }
        Mode::Scratch | Mode::Frozen => Ok(Anchors { comp: model.encoder.regularization_anchor(), words: None }),
    }
}

/// Trains `model` on `data` under `mode`, returning per-epoch mean losses
/// (including regularizers).
pub fn train_supervised(model: &mut SupervisedModel, data: TaskData, mode: &Mode, cfg: &SupervisedConfig) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("no supervised training examples".into()));
    }
    let anchors = prepare(model, mode)?;
    let frozen = matches!(mode, Mode::Frozen);
    let exs = examples(&model.table, &model.head, data)?;
    let cache: Option<Vec<(Vec<f64>, Option<Vec<f64>>)>> = if frozen {
        Some(
            exs.iter()
                .map(|e| match e {
                    Example::Pair(a, b, _) => Ok((
                        model.encoder.forward(&model.table, a)?.output,
                        Some(model.encoder.forward(&model.table, b)?.output),
                    )),
                    Example::Single(s, _) => Ok((model.encoder.forward(&model.table, s)?.output, None)),
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..exs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        Rng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut r = batch_objective(model, &exs, idx, frozen, &anchors, cfg, cache.as_deref())?;
            total += r.value * idx.len() as f64;
            if cfg.clip_gradients {
                let mut slices: Vec<&mut [f64]> = r.head_grads.iter_mut().map(|m| m.as_mut_slice()).collect();
                slices.extend(r.enc_grads.comp.iter_mut().map(|m| m.as_mut_slice()));
                slices.extend(r.enc_grads.words.values_mut().map(|g| g.as_mut_slice()));
                crate::optim::clip_global(&mut slices, 1.0)?;
            }
            opt.begin_step();
            for (k, (m, g)) in model.head.params_mut().into_iter().zip(&r.head_grads).enumerate() {
                opt.update(Slot::Head(k), m.as_mut_slice(), g.as_slice())?;
            }
            if !frozen {
                opt.apply_encoder_grads(&mut model.encoder, &mut model.table, &r.enc_grads, true)?;
            }
        }
        losses.push(total / exs.len() as f64);
    }
    Ok(losses)
}

/// Finite-difference check of the supervised objective on the examples
/// `idx`, over head, compositional and touched embedding parameters.
pub fn supervised_gradient_check(
    model: &SupervisedModel,
    data: TaskData,
    idx: &[usize],
    cfg: &SupervisedConfig,
    eps: f64,
) -> Result<f64> {
    let exs = examples(&model.table, &model.head, data)?;
    let anchors = Anchors { comp: model.encoder.regularization_anchor(), words: None };
    let r = batch_objective(model, &exs, idx, false, &anchors, cfg, None)?;
    let rows: Vec<usize> = idx
        .iter()
        .flat_map(|&i| match &exs[i] {
            Example::Pair(a, b, _) => a.iter().chain(b).copied().collect::<Vec<_>>(),
            Example::Single(s, _) => s.clone(),
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let dim = model.table.dim();
    let nhead = model.head.flat_params().len();
    let ncomp = model.encoder.num_params();
    let mut params = model.head.flat_params();
    params.extend(model.encoder.flat_params());
    let mut analytic: Vec<f64> = r.head_grads.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    analytic.extend(r.enc_grads.flat_comp());
    for &row in &rows {
        params.extend_from_slice(model.table.row(row));
        match r.enc_grads.words.get(&row) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(dim)),
        }
    }
    let mut probe = model.clone();
    finite_diff_check(
        |p| {
            probe.head.set_flat_params(&p[..nhead])?;
            probe.encoder.set_flat_params(&p[nhead..nhead + ncomp])?;
            for (k, &row) in rows.iter().enumerate() {
                let off = nhead + ncomp + k * dim;
                probe.table.row_mut(row).copy_from_slice(&p[off..off + dim]);
            }
            Ok(batch_objective(&probe, &exs, idx, false, &anchors, cfg, None)?.value)
        },
        &params,
        &analytic,
        eps,
    )
}

impl SupervisedModel {
    pub fn predict_similarity(&self, left: &[String], right: &[String]) -> Result<f64> {
        let l = self.encoder.encode(&self.table, left)?;
        let r = self.encoder.encode(&self.table, right)?;
        Ok(self.head.similarity_forward(&l, &r)?.1)
    }

    /// Most probable class for one or two sentences.
    pub fn predict_class(&self, sentences: &[&[String]]) -> Result<usize> {
        let enc: Vec<Vec<f64>> = sentences.iter().map(|s| self.encoder.encode(&self.table, s)).collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = enc.iter().map(Vec::as_slice).collect();
        let p = self.head.class_probabilities(&refs)?;
        Ok(p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0))
    }

    /// Pearson of `ŷ` against gold for the similarity head.
    pub fn similarity_pearson(&self, data: &ScoredPairDataset) -> Result<f64> {
        let preds = data.items.iter().map(|s| self.predict_similarity(&s.left, &s.right)).collect::<Result<Vec<_>>>()?;
        let gold: Vec<f64> = data.items.iter().map(|s| s.gold).collect();
        pearson(&preds, &gold)
    }

    /// Mean KL between targets and predictions on a scored set.
    pub fn mean_kl(&self, data: &ScoredPairDataset) -> Result<f64> {
        let k = self.head.num_classes();
        let mut total = 0.0;
        for s in &data.items {
            let l = self.encoder.encode(&self.table, &s.left)?;
            let r = self.encoder.encode(&self.table, &s.right)?;
            let (p_hat, _) = self.head.similarity_forward(&l, &r)?;
            total += kl_loss(&target_distribution(s.gold, k)?, &p_hat)?;
        }
        Ok(total / data.items.len() as f64)
    }

    pub fn accuracy(&self, data: TaskData) -> Result<f64> {
        let (hits, n) = match data {
            TaskData::Entailment(d) => (
                d.items.iter().map(|(a, b, l)| Ok((self.predict_class(&[a, b])? == *l) as usize)).sum::<Result<usize>>()?,
                d.items.len(),
            ),
            TaskData::Sentiment(d) => (
                d.items.iter().map(|(s, l)| Ok((self.predict_class(&[s])? == *l) as usize)).sum::<Result<usize>>()?,
                d.items.len(),
            ),
            TaskData::Similarity(_) => return Err(Error::Contract("accuracy is defined for classification tasks".into())),
        };
        Ok(hits as f64 / n as f64)
    }
}

/// A projection encoder that maps averaged embeddings to a wider space,
/// trained on paraphrase pairs and then used as a fixed featurizer.
pub fn raise_dimension(
    table: &EmbeddingTable,
    target_dim: usize,
    pairs: &PairDataset,
    config: &TrainConfig,
) -> Result<(Encoder, EmbeddingTable)> {
    if target_dim <= table.dim() {
        return Err(Error::Config(format!(
            "target dimension {target_dim} must exceed the embedding dimension {}",
            table.dim()
        )));
    }
    let mut rng = Rng::derive(config.seed, 0x9e37);
    let mut encoder = Encoder::new(crate::Architecture::Projection { out: target_dim }, table.dim(), &mut rng)?;
    let mut table = table.clone();
    train_pairs(&mut encoder, &mut table, pairs, config)?;
    Ok((encoder, table))
}
