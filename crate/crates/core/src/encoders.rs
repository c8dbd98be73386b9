//! Compositional sentence encoders and their analytic gradients.
//!
//! Every encoder maps a token-id sequence to a vector `g(x)` using the shared
//! [`EmbeddingTable`] for word rows and its own compositional parameters
//! `W_c`. [`Encoder::forward`] returns a [`Forward`] that owns the activations
//! needed by [`Encoder::backward`], so forward/backward pairs are reentrant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{axpy, sigmoid, Matrix, Rng};
use crate::textdata::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn grad(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Architecture choice plus its structural hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Average,
    Projection { out: usize },
    Dan { layers: usize, out: usize, activation: Activation },
    Rnn { activation: Activation },
    IRnn,
    Lstm { output_gate: bool },
}

impl Architecture {
    /// Short name used on the command line and in model manifests.
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Average => "average",
            Architecture::Projection { .. } => "proj",
            Architecture::Dan { .. } => "dan",
            Architecture::Rnn { .. } => "rnn",
            Architecture::IRnn => "irnn",
            Architecture::Lstm { .. } => "lstm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dan {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

/// Shared by the classic RNN and the identity-RNN.
#[derive(Debug, Clone, PartialEq)]
pub struct Recurrent {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Matrix,
    pub activation: Activation,
}

/// Input and forget gates read the previous cell state through peephole
/// matrices; the output gate (when present) reads the current one.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_xi: Matrix,
    pub w_hi: Matrix,
    pub w_ci: Matrix,
    pub b_i: Matrix,
    pub w_xf: Matrix,
    pub w_hf: Matrix,
    pub w_cf: Matrix,
    pub b_f: Matrix,
    pub w_xc: Matrix,
    pub w_hc: Matrix,
    pub b_c: Matrix,
    pub output: Option<OutputGate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputGate {
    pub w_xo: Matrix,
    pub w_ho: Matrix,
    pub w_co: Matrix,
    pub b_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Average,
    Projection(Projection),
    Dan(Dan),
    Rnn(Recurrent),
    IRnn(Recurrent),
    Lstm(Lstm),
}

/// Gradients mirroring an encoder's parameters, plus sparse word-row gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    /// Aligned with [`Encoder::params`].
    pub comp: Vec<Matrix>,
    /// Embedding row id -> gradient row.
    pub words: BTreeMap<usize, Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &Encoder) -> Self {
        EncoderGrads {
            comp: enc.params().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect(),
            words: BTreeMap::new(),
        }
    }

    pub fn add_word(&mut self, id: usize, scale: f64, grad: &[f64]) {
        let row = self.words.entry(id).or_insert_with(|| vec![0.0; grad.len()]);
        axpy(scale, grad, row);
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (a, b) in self.comp.iter_mut().zip(&other.comp) {
            axpy(1.0, b.as_slice(), a.as_mut_slice());
        }
        for (&id, g) in &other.words {
            self.add_word(id, 1.0, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.comp {
            m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
        for g in self.words.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let comp: f64 = self.comp.iter().map(Matrix::sq_norm).sum();
        let words: f64 = self.words.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
        comp + words
    }

    pub fn is_finite(&self) -> bool {
        self.comp.iter().all(|m| m.as_slice().iter().all(|x| x.is_finite()))
            && self.words.values().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Compositional gradients flattened in [`Encoder::flat_params`] order.
    pub fn flat_comp(&self) -> Vec<f64> {
        self.comp.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}

/// Output of a forward pass plus the cached activations for backward.
#[derive(Debug, Clone)]
pub struct Forward {
    pub ids: Vec<usize>,
    pub output: Vec<f64>,
    cache: Cache,
}

#[derive(Debug, Clone)]
enum Cache {
    Mean { mean: Vec<f64> },
    Dan { inputs: Vec<Vec<f64>>, pre: Vec<Vec<f64>>, post: Vec<Vec<f64>> },
    Recurrent { hs: Vec<Vec<f64>>, pre: Vec<Vec<f64>> },
    Lstm { steps: Vec<LstmStep> },
}

#[derive(Debug, Clone)]
struct LstmStep {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    o: Option<Vec<f64>>,
}

fn bias(n: usize) -> Matrix {
    Matrix::zeros(n, 1)
}

impl Encoder {
    /// Freshly initialized encoder for embeddings of width `dim`.
    ///
    /// Matrices are Glorot-uniform and biases zero, except the identity-RNN
    /// which starts at identity weights so that it computes the word average.
    pub fn new(arch: Architecture, dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(match arch {
            Architecture::Average => Encoder::Average,
            Architecture::Projection { out } => {
                if out == 0 {
                    return Err(Error::Config("projection output size must be positive".into()));
                }
                Encoder::Projection(Projection { w: Matrix::glorot(out, dim, rng), b: bias(out) })
            }
            Architecture::Dan { layers, out, activation } => {
                if !(1..=2).contains(&layers) {
                    return Err(Error::Config(format!("DAN supports 1 or 2 layers, got {layers}")));
                }
                if out == 0 {
                    return Err(Error::Config("DAN output size must be positive".into()));
                }
                let mut ls = Vec::with_capacity(layers);
                let mut fan_in = dim;
                for _ in 0..layers {
                    ls.push(DenseLayer { w: Matrix::glorot(out, fan_in, rng), b: bias(out) });
                    fan_in = out;
                }
                Encoder::Dan(Dan { layers: ls, activation })
            }
            Architecture::Rnn { activation } => Encoder::Rnn(Recurrent {
                w_x: Matrix::glorot(dim, dim, rng),
                w_h: Matrix::glorot(dim, dim, rng),
                b: bias(dim),
                activation,
            }),
            Architecture::IRnn => Encoder::IRnn(Recurrent::identity(dim)),
            Architecture::Lstm { output_gate } => {
                let mut sq = || Matrix::glorot(dim, dim, rng);
                let (w_xi, w_hi, w_ci) = (sq(), sq(), sq());
                let (w_xf, w_hf, w_cf) = (sq(), sq(), sq());
                let (w_xc, w_hc) = (sq(), sq());
                let output = output_gate.then(|| OutputGate { w_xo: sq(), w_ho: sq(), w_co: sq(), b_o: bias(dim) });
                Encoder::Lstm(Lstm {
                    w_xi,
                    w_hi,
                    w_ci,
                    b_i: bias(dim),
                    w_xf,
                    w_hf,
                    w_cf,
                    b_f: bias(dim),
                    w_xc,
                    w_hc,
                    b_c: bias(dim),
                    output,
                })
            }
        })
    }

    /// Encoder with every compositional parameter set to zero.
    pub fn zeroed(arch: Architecture, dim: usize) -> Result<Self> {
        let mut enc = Encoder::new(arch, dim, &mut Rng::new(0))?;
        for m in enc.params_mut() {
            m.fill(0.0);
        }
        Ok(enc)
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Encoder::Average => Architecture::Average,
            Encoder::Projection(p) => Architecture::Projection { out: p.w.rows() },
            Encoder::Dan(d) => Architecture::Dan {
                layers: d.layers.len(),
                out: d.layers[0].w.rows(),
                activation: d.activation,
            },
            Encoder::Rnn(r) => Architecture::Rnn { activation: r.activation },
            Encoder::IRnn(_) => Architecture::IRnn,
            Encoder::Lstm(l) => Architecture::Lstm { output_gate: l.output.is_some() },
        }
    }

    /// Width of the embedding rows this encoder consumes, when fixed by its parameters.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Encoder::Average => None,
            Encoder::Projection(p) => Some(p.w.cols()),
            Encoder::Dan(d) => Some(d.layers[0].w.cols()),
            Encoder::Rnn(r) | Encoder::IRnn(r) => Some(r.w_x.cols()),
            Encoder::Lstm(l) => Some(l.w_xi.cols()),
        }
    }

    pub fn output_dim(&self, dim: usize) -> usize {
        match self {
            Encoder::Projection(p) => p.w.rows(),
            Encoder::Dan(d) => d.layers.last().expect("DAN has layers").w.rows(),
            _ => dim,
        }
    }

    /// Named compositional parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        match self {
            Encoder::Average => vec![],
            Encoder::Projection(p) => vec![("proj.w".into(), &p.w), ("proj.b".into(), &p.b)],
            Encoder::Dan(d) => d
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| [(format!("layer{}.w", i + 1), &l.w), (format!("layer{}.b", i + 1), &l.b)])
                .collect(),
            Encoder::Rnn(r) | Encoder::IRnn(r) => {
                vec![("w_x".into(), &r.w_x), ("w_h".into(), &r.w_h), ("b".into(), &r.b)]
            }
            Encoder::Lstm(l) => {
                let mut v: Vec<(String, &Matrix)> = vec![
                    ("w_xi".into(), &l.w_xi),
                    ("w_hi".into(), &l.w_hi),
                    ("w_ci".into(), &l.w_ci),
                    ("b_i".into(), &l.b_i),
                    ("w_xf".into(), &l.w_xf),
                    ("w_hf".into(), &l.w_hf),
                    ("w_cf".into(), &l.w_cf),
                    ("b_f".into(), &l.b_f),
                    ("w_xc".into(), &l.w_xc),
                    ("w_hc".into(), &l.w_hc),
                    ("b_c".into(), &l.b_c),
                ];
                if let Some(o) = &l.output {
                    v.extend([
                        ("w_xo".into(), &o.w_xo),
                        ("w_ho".into(), &o.w_ho),
                        ("w_co".into(), &o.w_co),
                        ("b_o".into(), &o.b_o),
                    ]);
                }
                v
            }
        }
    }

    /// Same order as [`Encoder::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Encoder::Average => vec![],
            Encoder::Projection(p) => vec![&mut p.w, &mut p.b],
            Encoder::Dan(d) => d.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect(),
            Encoder::Rnn(r) | Encoder::IRnn(r) => vec![&mut r.w_x, &mut r.w_h, &mut r.b],
            Encoder::Lstm(l) => {
                let mut v = vec![
                    &mut l.w_xi,
                    &mut l.w_hi,
                    &mut l.w_ci,
                    &mut l.b_i,
                    &mut l.w_xf,
                    &mut l.w_hf,
                    &mut l.w_cf,
                    &mut l.b_f,
                    &mut l.w_xc,
                    &mut l.w_hc,
                    &mut l.b_c,
                ];
                if let Some(o) = &mut l.output {
                    v.extend([&mut o.w_xo, &mut o.w_ho, &mut o.w_co, &mut o.b_o]);
                }
                v
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|(_, m)| m.as_slice().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "expected {} compositional values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for m in self.params_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Point the compositional L2 penalty pulls toward; `None` means zero.
    ///
    /// The identity-RNN is regularized back to its identity initialization.
    pub fn regularization_anchor(&self) -> Option<Vec<Matrix>> {
        match self {
            Encoder::IRnn(r) => {
                let id = Recurrent::identity(r.w_x.cols());
                Some(vec![id.w_x, id.w_h, id.b])
            }
            _ => None,
        }
    }

    fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        match self.input_dim() {
            Some(d) if d != table.dim() => Err(Error::Contract(format!(
                "encoder expects {d}-dimensional embeddings, table has {}",
                table.dim()
            ))),
            _ => Ok(()),
        }
    }

    /// Encodes a token sequence (unknown tokens map to the unknown row).
    pub fn encode(&self, table: &EmbeddingTable, tokens: &[String]) -> Result<Vec<f64>> {
        Ok(self.forward(table, &table.ids(tokens))?.output)
    }

    pub fn forward(&self, table: &EmbeddingTable, ids: &[usize]) -> Result<Forward> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("cannot encode an empty token sequence".into()));
        }
        self.check_table(table)?;
        let (output, cache) = match self {
            Encoder::Average => {
                let mean = mean_rows(table, ids);
                (mean.clone(), Cache::Mean { mean })
            }
            Encoder::Projection(p) => {
                let mean = mean_rows(table, ids);
                let mut out = p.b.as_slice().to_vec();
                p.w.matvec_acc(&mean, &mut out);
                (out, Cache::Mean { mean })
            }
            Encoder::Dan(d) => {
                let mut h = mean_rows(table, ids);
                let (mut inputs, mut pre, mut post) = (vec![], vec![], vec![]);
                for l in &d.layers {
                    let mut z = l.b.as_slice().to_vec();
                    l.w.matvec_acc(&h, &mut z);
                    let y: Vec<f64> = z.iter().map(|&v| d.activation.apply(v)).collect();
                    inputs.push(std::mem::replace(&mut h, y.clone()));
                    pre.push(z);
                    post.push(y);
                }
                (h, Cache::Dan { inputs, pre, post })
            }
            Encoder::Rnn(r) | Encoder::IRnn(r) => {
                let n = r.w_h.rows();
                let mut hs = vec![vec![0.0; n]];
                let mut pre = Vec::with_capacity(ids.len());
                for &id in ids {
                    let mut z = r.b.as_slice().to_vec();
                    r.w_x.matvec_acc(table.row(id), &mut z);
                    r.w_h.matvec_acc(hs.last().unwrap(), &mut z);
                    hs.push(z.iter().map(|&v| r.activation.apply(v)).collect());
                    pre.push(z);
                }
                let mut out = hs.last().unwrap().clone();
                if matches!(self, Encoder::IRnn(_)) {
                    let len = ids.len() as f64;
                    out.iter_mut().for_each(|v| *v /= len);
                }
                (out, Cache::Recurrent { hs, pre })
            }
            Encoder::Lstm(l) => {
                let n = l.w_hi.rows();
                let mut h = vec![0.0; n];
                let mut c = vec![0.0; n];
                let mut steps = Vec::with_capacity(ids.len());
                for &id in ids {
                    let step = l.step(table.row(id), &h, &c);
                    h = step.h();
                    c = step.c.clone();
                    steps.push(step);
                }
                (h, Cache::Lstm { steps })
            }
        };
        Ok(Forward { ids: ids.to_vec(), output, cache })
    }

    /// Gradients of `out_grad · g(x)` w.r.t. every compositional parameter
    /// and every embedding row used by the sequence.
    pub fn backward(&self, table: &EmbeddingTable, fwd: &Forward, out_grad: &[f64]) -> Result<EncoderGrads> {
        let mut grads = EncoderGrads::zeros_like(self);
        self.backward_into(table, fwd, out_grad, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Encoder::backward`] but accumulates into `grads`.
    pub fn backward_into(
        &self,
        table: &EmbeddingTable,
        fwd: &Forward,
        out_grad: &[f64],
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        if out_grad.len() != fwd.output.len() {
            return Err(Error::Contract(format!(
                "output gradient has {} entries, encoding has {}",
                out_grad.len(),
                fwd.output.len()
            )));
        }
        if grads.comp.len() != self.params().len() {
            return Err(Error::Contract("gradient buffer does not match encoder".into()));
        }
        let ids = &fwd.ids;
        let inv_n = 1.0 / ids.len() as f64;
        match (self, &fwd.cache) {
            (Encoder::Average, Cache::Mean { .. }) => {
                for &id in ids {
                    grads.add_word(id, inv_n, out_grad);
                }
            }
            (Encoder::Projection(p), Cache::Mean { mean }) => {
                grads.comp[0].add_outer(out_grad, mean);
                axpy(1.0, out_grad, grads.comp[1].as_mut_slice());
                let mut dmean = vec![0.0; p.w.cols()];
                p.w.matvec_t_acc(out_grad, &mut dmean);
                for &id in ids {
                    grads.add_word(id, inv_n, &dmean);
                }
            }
            (Encoder::Dan(d), Cache::Dan { inputs, pre, post }) => {
                let mut g = out_grad.to_vec();
                for (k, l) in d.layers.iter().enumerate().rev() {
                    let dz: Vec<f64> = g
                        .iter()
                        .zip(&pre[k])
                        .zip(&post[k])
                        .map(|((&gi, &z), &y)| gi * d.activation.grad(z, y))
                        .collect();
                    grads.comp[2 * k].add_outer(&dz, &inputs[k]);
                    axpy(1.0, &dz, grads.comp[2 * k + 1].as_mut_slice());
                    let mut prev = vec![0.0; l.w.cols()];
                    l.w.matvec_t_acc(&dz, &mut prev);
                    g = prev;
                }
                for &id in ids {
                    grads.add_word(id, inv_n, &g);
                }
            }
            (Encoder::Rnn(r) | Encoder::IRnn(r), Cache::Recurrent { hs, pre }) => {
                let mut dh = out_grad.to_vec();
                if matches!(self, Encoder::IRnn(_)) {
                    dh.iter_mut().for_each(|v| *v *= inv_n);
                }
                for t in (0..ids.len()).rev() {
                    let dz: Vec<f64> = dh
                        .iter()
                        .zip(&pre[t])
                        .zip(&hs[t + 1])
                        .map(|((&g, &z), &y)| g * r.activation.grad(z, y))
                        .collect();
                    let x = table.row(ids[t]);
                    grads.comp[0].add_outer(&dz, x);
                    grads.comp[1].add_outer(&dz, &hs[t]);
                    axpy(1.0, &dz, grads.comp[2].as_mut_slice());
                    let mut dx = vec![0.0; r.w_x.cols()];
                    r.w_x.matvec_t_acc(&dz, &mut dx);
                    grads.add_word(ids[t], 1.0, &dx);
                    let mut dh_prev = vec![0.0; r.w_h.cols()];
                    r.w_h.matvec_t_acc(&dz, &mut dh_prev);
                    dh = dh_prev;
                }
            }
            (Encoder::Lstm(l), Cache::Lstm { steps }) => l.backward(table, ids, steps, out_grad, grads),
            _ => return Err(Error::Contract("forward cache does not match encoder".into())),
        }
        Ok(())
    }
}

fn mean_rows(table: &EmbeddingTable, ids: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; table.dim()];
    for &id in ids {
        axpy(1.0, table.row(id), &mut mean);
    }
    let n = ids.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

impl Recurrent {
    /// Identity weights, zero bias, identity activation.
    pub fn identity(dim: usize) -> Self {
        Recurrent {
            w_x: Matrix::identity(dim),
            w_h: Matrix::identity(dim),
            b: bias(dim),
            activation: Activation::Identity,
        }
    }
}

impl LstmStep {
    fn h(&self) -> Vec<f64> {
        match &self.o {
            Some(o) => o.iter().zip(&self.c).map(|(o, c)| o * c.tanh()).collect(),
            None => self.c.iter().map(|c| c.tanh()).collect(),
        }
    }
}

impl Lstm {
    fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
        let gate = |wx: &Matrix, wh: &Matrix, wc: Option<(&Matrix, &[f64])>, b: &Matrix| {
            let mut a = b.as_slice().to_vec();
            wx.matvec_acc(x, &mut a);
            wh.matvec_acc(h_prev, &mut a);
            if let Some((wc, c)) = wc {
                wc.matvec_acc(c, &mut a);
            }
            a
        };
        let i: Vec<f64> = gate(&self.w_xi, &self.w_hi, Some((&self.w_ci, c_prev)), &self.b_i)
            .into_iter()
            .map(sigmoid)
            .collect();
        let f: Vec<f64> = gate(&self.w_xf, &self.w_hf, Some((&self.w_cf, c_prev)), &self.b_f)
            .into_iter()
            .map(sigmoid)
            .collect();
        let g: Vec<f64> = gate(&self.w_xc, &self.w_hc, None, &self.b_c).into_iter().map(f64::tanh).collect();
        let c: Vec<f64> = (0..c_prev.len()).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let o = self.output.as_ref().map(|og| {
            gate(&og.w_xo, &og.w_ho, Some((&og.w_co, &c)), &og.b_o).into_iter().map(sigmoid).collect()
        });
        LstmStep { h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), i, f, g, c, o }
    }

    fn backward(
        &self,
        table: &EmbeddingTable,
        ids: &[usize],
        steps: &[LstmStep],
        out_grad: &[f64],
        grads: &mut EncoderGrads,
    ) {
        let n = self.w_hi.rows();
        let dx_dim = self.w_xi.cols();
        let mut dh = out_grad.to_vec();
        let mut dc_next = vec![0.0; n];
        for t in (0..ids.len()).rev() {
            let s = &steps[t];
            let x = table.row(ids[t]);
            let tc: Vec<f64> = s.c.iter().map(|c| c.tanh()).collect();
            let mut dx = vec![0.0; dx_dim];
            let mut dh_prev = vec![0.0; n];
            let mut dc = dc_next.clone();

            if let (Some(o), Some(og)) = (&s.o, &self.output) {
                let da_o: Vec<f64> = (0..n).map(|k| dh[k] * tc[k] * o[k] * (1.0 - o[k])).collect();
                for k in 0..n {
                    dc[k] += dh[k] * o[k] * (1.0 - tc[k] * tc[k]);
                }
                og.w_co.matvec_t_acc(&da_o, &mut dc);
                grads.comp[11].add_outer(&da_o, x);
                grads.comp[12].add_outer(&da_o, &s.h_prev);
                grads.comp[13].add_outer(&da_o, &s.c);
                axpy(1.0, &da_o, grads.comp[14].as_mut_slice());
                og.w_xo.matvec_t_acc(&da_o, &mut dx);
                og.w_ho.matvec_t_acc(&da_o, &mut dh_prev);
            } else {
                for k in 0..n {
                    dc[k] += dh[k] * (1.0 - tc[k] * tc[k]);
                }
            }

            let da_i: Vec<f64> = (0..n).map(|k| dc[k] * s.g[k] * s.i[k] * (1.0 - s.i[k])).collect();
            let da_f: Vec<f64> = (0..n).map(|k| dc[k] * s.c_prev[k] * s.f[k] * (1.0 - s.f[k])).collect();
            let da_c: Vec<f64> = (0..n).map(|k| dc[k] * s.i[k] * (1.0 - s.g[k] * s.g[k])).collect();

            grads.comp[0].add_outer(&da_i, x);
            grads.comp[1].add_outer(&da_i, &s.h_prev);
            grads.comp[2].add_outer(&da_i, &s.c_prev);
            axpy(1.0, &da_i, grads.comp[3].as_mut_slice());
            grads.comp[4].add_outer(&da_f, x);
            grads.comp[5].add_outer(&da_f, &s.h_prev);
            grads.comp[6].add_outer(&da_f, &s.c_prev);
            axpy(1.0, &da_f, grads.comp[7].as_mut_slice());
            grads.comp[8].add_outer(&da_c, x);
            grads.comp[9].add_outer(&da_c, &s.h_prev);
            axpy(1.0, &da_c, grads.comp[10].as_mut_slice());

            self.w_xi.matvec_t_acc(&da_i, &mut dx);
            self.w_xf.matvec_t_acc(&da_f, &mut dx);
            self.w_xc.matvec_t_acc(&da_c, &mut dx);
            self.w_hi.matvec_t_acc(&da_i, &mut dh_prev);
            self.w_hf.matvec_t_acc(&da_f, &mut dh_prev);
            self.w_hc.matvec_t_acc(&da_c, &mut dh_prev);

            let mut dc_prev: Vec<f64> = (0..n).map(|k| dc[k] * s.f[k]).collect();
            self.w_ci.matvec_t_acc(&da_i, &mut dc_prev);
            self.w_cf.matvec_t_acc(&da_f, &mut dc_prev);

            grads.add_word(ids[t], 1.0, &dx);
            dh = dh_prev;
            dc_next = dc_prev;
        }
    }
}
