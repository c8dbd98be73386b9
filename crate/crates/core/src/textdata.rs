//! Tokenization, vocabulary, embedding text files and TSV datasets.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Name given to the unknown-word slot.
pub const UNK_TOKEN: &str = "<unk>";

pub type Tokens = Vec<String>;

/// Splits on runs of Unicode whitespace, optionally lowercasing.
pub fn tokenize(text: &str, lowercase: bool) -> Tokens {
    text.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

/// Dense token inventory. Ids are `0..len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk_id: usize,
}

impl Vocab {
    /// Builds a vocabulary from unique tokens; `unk` must be one of them.
    pub fn new(tokens: Vec<String>, unk: &str) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format(i + 1, format!("duplicate token {t:?}")));
            }
        }
        let unk_id = *index
            .get(unk)
            .ok_or_else(|| Error::Contract(format!("vocabulary lacks unknown token {unk:?}")))?;
        Ok(Vocab { tokens, index, unk_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Exact lookup without unknown-word fallback.
    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unknown slot.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(self.unk_id)
    }
}

/// How the unknown-word row is built when the file does not provide one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnkRule {
    /// Mean of all loaded rows.
    #[default]
    Mean,
    Zero,
}

/// Word embedding matrix `W_w` plus the frozen copy it was loaded as.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocab,
    current: Matrix,
    initial: Matrix,
    /// True when the unknown row was synthesized at load time rather than read.
    synthetic_unk: bool,
}

impl EmbeddingTable {
    /// Builds a table from token/row pairs. A `<unk>` entry, if present, is
    /// used as-is; otherwise one is appended following `unk_rule`.
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>, unk_rule: UnkRule) -> Result<Self> {
        let Some(dim) = rows.first().map(|(_, v)| v.len()) else {
            return Err(Error::EmptyInput("no embedding rows".into()));
        };
        if dim == 0 {
            return Err(Error::format(1, "embedding dimension must be positive"));
        }
        let has_unk = rows.iter().any(|(t, _)| t == UNK_TOKEN);
        let mut tokens = Vec::with_capacity(rows.len() + 1);
        let mut data = Vec::with_capacity((rows.len() + 1) * dim);
        for (i, (t, v)) in rows.into_iter().enumerate() {
            if v.len() != dim {
                return Err(Error::format(i + 1, format!("expected {dim} values, found {}", v.len())));
            }
            tokens.push(t);
            data.extend(v);
        }
        if !has_unk {
            let n = tokens.len() as f64;
            let unk_row: Vec<f64> = match unk_rule {
                UnkRule::Mean => (0..dim)
                    .map(|d| data.iter().skip(d).step_by(dim).sum::<f64>() / n)
                    .collect(),
                UnkRule::Zero => vec![0.0; dim],
            };
            tokens.push(UNK_TOKEN.to_string());
            data.extend(unk_row);
        }
        let vocab = Vocab::new(tokens, UNK_TOKEN)?;
        let current = Matrix::from_vec(vocab.len(), dim, data)?;
        Ok(EmbeddingTable { vocab, initial: current.clone(), current, synthetic_unk: !has_unk })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.current.cols()
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.vocab.id(token)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    /// Current row for `token`, or the unknown row.
    pub fn lookup(&self, token: &str) -> &[f64] {
        self.current.row(self.vocab.id(token))
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.current.row(id)
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        self.current.row_mut(id)
    }

    pub fn initial_row(&self, id: usize) -> &[f64] {
        self.initial.row(id)
    }

    pub fn current(&self) -> &Matrix {
        &self.current
    }

    pub fn initial(&self) -> &Matrix {
        &self.initial
    }

    pub fn has_synthetic_unk(&self) -> bool {
        self.synthetic_unk
    }

    /// Makes the current values the new reference point (`W_w_initial`).
    pub fn rebase_initial(&mut self) {
        self.initial = self.current.clone();
    }
}

/// Reads the word-vector text format: `token v1 ... vD` per line.
pub fn load_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    load_embeddings_with(reader, UnkRule::Mean)
}

pub fn load_embeddings_with<R: BufRead>(reader: R, unk_rule: UnkRule) -> Result<EmbeddingTable> {
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let token = fields.next().expect("non-empty line has a field").to_string();
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| Error::format(lineno, format!("bad float {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => return Err(Error::format(lineno, "no vector values")),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(
                    lineno,
                    format!("dimension mismatch: expected {d}, found {}", values.len()),
                ))
            }
            _ => {}
        }
        if let Some(prev) = seen.insert(token.clone(), lineno) {
            return Err(Error::format(lineno, format!("duplicate token {token:?} (first at line {prev})")));
        }
        rows.push((token, values));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("embedding file has no entries".into()));
    }
    EmbeddingTable::from_rows(rows, unk_rule)
}

pub fn load_embeddings_file(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    load_embeddings(BufReader::new(File::open(path)?))
}

/// Writes the table in the text format. A synthesized unknown row is only
/// written when `with_synthetic_unk` is set; a row read from file always is.
pub fn save_embeddings<W: Write>(table: &EmbeddingTable, mut w: W, with_synthetic_unk: bool) -> Result<()> {
    let unk = table.vocab.unk_id();
    for (id, token) in table.vocab.tokens().iter().enumerate() {
        if id == unk && table.synthetic_unk && !with_synthetic_unk {
            continue;
        }
        write!(w, "{token}")?;
        for v in table.row(id) {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_embeddings_file(table: &EmbeddingTable, path: impl AsRef<Path>, with_synthetic_unk: bool) -> Result<()> {
    save_embeddings(table, BufWriter::new(File::create(path)?), with_synthetic_unk)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<(Tokens, Tokens)>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Occurrence counts of every token on both sides.
    pub fn token_counts(&self) -> HashMap<String, u64> {
        let mut counts = HashMap::new();
        for (a, b) in &self.pairs {
            for t in a.iter().chain(b) {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub left: Tokens,
    pub right: Tokens,
    pub gold: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredPairDataset {
    pub items: Vec<ScoredPair>,
}

impl ScoredPairDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Single sentences with class labels (sentiment-style).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<(Tokens, usize)>,
    pub num_classes: usize,
}

/// Sentence pairs with class labels (entailment-style).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPairDataset {
    pub items: Vec<(Tokens, Tokens, usize)>,
    pub num_classes: usize,
}

fn tsv_lines<R: BufRead>(reader: R, columns: usize) -> impl Iterator<Item = Result<(usize, Vec<String>)>> {
    reader.lines().enumerate().filter_map(move |(i, line)| {
        let lineno = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            return None;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() != columns {
            return Some(Err(Error::format(
                lineno,
                format!("expected {columns} tab-separated columns, found {}", fields.len()),
            )));
        }
        Some(Ok((lineno, fields)))
    })
}

fn sentence(field: &str, lineno: usize, lowercase: bool) -> Result<Tokens> {
    let toks = tokenize(field, lowercase);
    if toks.is_empty() {
        return Err(Error::data(lineno, "empty sentence"));
    }
    Ok(toks)
}

fn parse_label(field: &str, lineno: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::format(lineno, format!("label {field:?} is not a non-negative integer")))
}

/// `s1 TAB s2` per line.
pub fn load_pairs<R: BufRead>(reader: R, lowercase: bool) -> Result<PairDataset> {
    let mut pairs = Vec::new();
    for row in tsv_lines(reader, 2) {
        let (lineno, f) = row?;
        pairs.push((sentence(&f[0], lineno, lowercase)?, sentence(&f[1], lineno, lowercase)?));
    }
    Ok(PairDataset { pairs })
}

/// `s1 TAB s2 TAB score` per line.
pub fn load_scored_pairs<R: BufRead>(reader: R, lowercase: bool) -> Result<ScoredPairDataset> {
    let mut items = Vec::new();
    for row in tsv_lines(reader, 3) {
        let (lineno, f) = row?;
        let left = sentence(&f[0], lineno, lowercase)?;
        let right = sentence(&f[1], lineno, lowercase)?;
        let gold = f[2]
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|g| g.is_finite())
            .ok_or_else(|| Error::format(lineno, format!("score {:?} is not a finite number", f[2])))?;
        items.push(ScoredPair { left, right, gold });
    }
    Ok(ScoredPairDataset { items })
}

/// `sentence TAB label` per line. The class count is `max(2, max label + 1)`.
pub fn load_labeled<R: BufRead>(reader: R, lowercase: bool) -> Result<LabeledDataset> {
    let mut items = Vec::new();
    for row in tsv_lines(reader, 2) {
        let (lineno, f) = row?;
        items.push((sentence(&f[0], lineno, lowercase)?, parse_label(&f[1], lineno)?));
    }
    let num_classes = items.iter().map(|(_, l)| l + 1).max().unwrap_or(0).max(2);
    Ok(LabeledDataset { items, num_classes })
}

/// `s1 TAB s2 TAB label` per line.
pub fn load_labeled_pairs<R: BufRead>(reader: R, lowercase: bool) -> Result<LabeledPairDataset> {
    let mut items = Vec::new();
    for row in tsv_lines(reader, 3) {
        let (lineno, f) = row?;
        items.push((
            sentence(&f[0], lineno, lowercase)?,
            sentence(&f[1], lineno, lowercase)?,
            parse_label(&f[2], lineno)?,
        ));
    }
    let num_classes = items.iter().map(|(_, _, l)| l + 1).max().unwrap_or(0).max(2);
    Ok(LabeledPairDataset { items, num_classes })
}

pub fn load_pairs_file(path: impl AsRef<Path>, lowercase: bool) -> Result<PairDataset> {
    load_pairs(BufReader::new(File::open(path)?), lowercase)
}

pub fn load_scored_pairs_file(path: impl AsRef<Path>, lowercase: bool) -> Result<ScoredPairDataset> {
    load_scored_pairs(BufReader::new(File::open(path)?), lowercase)
}
