//! Similarity evaluation and analysis tools.

use std::collections::HashMap;
use std::fmt;

use crate::encoders::{Architecture, Encoder};
use crate::error::{Error, Result};
use crate::numerics::{cosine, pearson, spearman, Rng};
use crate::objective::TrainConfig;
use crate::optim::train;
use crate::textdata::{EmbeddingTable, PairDataset, ScoredPairDataset, Tokens};

/// Upper bounds of the length bins; the last bin is open-ended.
pub const BIN_LABELS: [&str; 7] = ["<=4", "5", "6", "7", "8", "9", ">=10"];

#[derive(Debug, Clone, PartialEq)]
pub struct BinReport {
    pub label: &'static str,
    /// `None` when the bin has fewer than two pairs.
    pub pearson: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
    pub bins: Option<Vec<BinReport>>,
}

impl EvalReport {
    /// `metric TAB value` lines, followed by `bin TAB pearson TAB n` rows.
    pub fn to_tsv(&self, with_spearman: bool) -> String {
        let mut out = format!("pearson\t{}\n", self.pearson);
        if with_spearman {
            out.push_str(&format!("spearman\t{}\n", self.spearman));
        }
        out.push_str(&format!("n\t{}\n", self.n));
        for b in self.bins.iter().flatten() {
            match b.pearson {
                Some(p) => out.push_str(&format!("{}\t{}\t{}\n", b.label, p, b.n)),
                None => out.push_str(&format!("{}\tNA\t{}\n", b.label, b.n)),
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv(true))
    }
}

/// Cosine of the two encodings for each pair.
pub fn predictions(encoder: &Encoder, table: &EmbeddingTable, data: &ScoredPairDataset) -> Result<Vec<f64>> {
    data.items
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = encoder.encode(table, &s.left)?;
            let b = encoder.encode(table, &s.right)?;
            cosine(&a, &b).map_err(|e| match e {
                Error::Degenerate(msg) => Error::Degenerate(format!("pair {}: {msg}", i + 1)),
                other => other,
            })
        })
        .collect()
}

pub fn evaluate(encoder: &Encoder, table: &EmbeddingTable, data: &ScoredPairDataset) -> Result<EvalReport> {
    if data.items.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 scored pairs, got {}", data.items.len())));
    }
    let preds = predictions(encoder, table, data)?;
    let gold: Vec<f64> = data.items.iter().map(|s| s.gold).collect();
    Ok(EvalReport { pearson: pearson(&preds, &gold)?, spearman: spearman(&preds, &gold)?, n: preds.len(), bins: None })
}

/// Index into [`BIN_LABELS`] for a pair of sentence lengths.
pub fn length_bin(left: usize, right: usize) -> usize {
    left.max(right).clamp(4, 10) - 4
}

pub fn length_binned(encoder: &Encoder, table: &EmbeddingTable, data: &ScoredPairDataset) -> Result<EvalReport> {
    let mut report = evaluate(encoder, table, data)?;
    let preds = predictions(encoder, table, data)?;
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); BIN_LABELS.len()];
    for (s, p) in data.items.iter().zip(&preds) {
        let g = &mut groups[length_bin(s.left.len(), s.right.len())];
        g.0.push(*p);
        g.1.push(s.gold);
    }
    report.bins = Some(
        groups
            .iter()
            .zip(BIN_LABELS)
            .map(|((p, g), label)| BinReport {
                label,
                // constant predictions or gold within a bin also leave it uncomputable
                pearson: if p.len() >= 2 { pearson(p, g).ok() } else { None },
                n: p.len(),
            })
            .collect(),
    );
    Ok(report)
}

/// Share of token occurrences whose reference count is below `threshold`.
pub fn oov_fraction<'a, I>(sentences: I, reference_counts: &HashMap<String, u64>, threshold: u64) -> Result<f64>
where
    I: IntoIterator<Item = &'a Tokens>,
{
    if threshold < 1 {
        return Err(Error::Config("OOV threshold must be at least 1".into()));
    }
    let (mut rare, mut total) = (0usize, 0usize);
    for tok in sentences.into_iter().flatten() {
        total += 1;
        if reference_counts.get(tok).copied().unwrap_or(0) < threshold {
            rare += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no tokens to count".into()));
    }
    Ok(rare as f64 / total as f64)
}

/// All sentences of a scored set, left then right.
pub fn scored_sentences(data: &ScoredPairDataset) -> impl Iterator<Item = &Tokens> {
    data.items.iter().flat_map(|s| [&s.left, &s.right])
}

/// L1 norm of each row, in vocabulary order.
pub fn word_importance(table: &EmbeddingTable) -> Vec<(String, f64)> {
    table
        .vocab()
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), table.row(i).iter().map(|v| v.abs()).sum()))
        .collect()
}

/// Scales each row by its weight (missing tokens keep weight 1). The result
/// treats the scaled rows as its initial values. A synthesized unknown row is
/// rebuilt from the scaled rows.
pub fn reweight(base: &EmbeddingTable, weights: &HashMap<String, f64>) -> Result<EmbeddingTable> {
    let rows = base
        .vocab()
        .tokens()
        .iter()
        .enumerate()
        .filter(|&(i, _)| !(base.has_synthetic_unk() && i == base.vocab().unk_id()))
        .map(|(i, t)| {
            let w = weights.get(t).copied().unwrap_or(1.0);
            (t.clone(), base.row(i).iter().map(|v| if w == 1.0 { *v } else { v * w }).collect())
        })
        .collect();
    let mut table = EmbeddingTable::from_rows(rows, crate::textdata::UnkRule::Mean)?;
    table.rebase_initial();
    Ok(table)
}

/// `total / max(count, 1)` for every token in `vocab`.
pub fn frequency_weights<'a, I>(vocab: I, counts: &HashMap<String, u64>, total: u64) -> Result<HashMap<String, f64>>
where
    I: IntoIterator<Item = &'a String>,
{
    if total == 0 {
        return Err(Error::Config("total token count must be positive".into()));
    }
    Ok(vocab
        .into_iter()
        .map(|t| (t.clone(), total as f64 / counts.get(t).copied().unwrap_or(0).max(1) as f64))
        .collect())
}

/// The `k` nearest tokens to `token` by cosine among the `restrict` most
/// frequent vocabulary entries (count ties broken by vocabulary order). The
/// query itself is excluded; similarity ties are broken by token order.
pub fn nearest_neighbors(
    table: &EmbeddingTable,
    token: &str,
    k: usize,
    restrict: usize,
    counts: &HashMap<String, u64>,
) -> Result<Vec<(String, f64)>> {
    let vocab = table.vocab();
    if restrict > vocab.len() {
        return Err(Error::Config(format!("restrict {restrict} exceeds vocabulary size {}", vocab.len())));
    }
    let query = table.id(token);
    let mut by_freq: Vec<usize> = (0..vocab.len()).collect();
    by_freq.sort_by_key(|&i| std::cmp::Reverse(counts.get(vocab.token(i)).copied().unwrap_or(0)));
    let q = table.row(query);
    let mut scored = Vec::with_capacity(restrict);
    for &i in by_freq.iter().take(restrict) {
        if i == query {
            continue;
        }
        // zero rows have no direction and are skipped
        if let Ok(c) = cosine(q, table.row(i)) {
            scored.push((vocab.token(i).to_string(), c));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveOrder {
    /// Keep file order.
    Ordered,
    /// One seeded permutation shared by all sizes.
    Random,
}

impl std::str::FromStr for CurveOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordered" => Ok(CurveOrder::Ordered),
            "random" => Ok(CurveOrder::Random),
            _ => Err(Error::Config(format!("unknown curve order {s:?} (expected ordered or random)"))),
        }
    }
}

/// `n, n/2, n/4, ...` while at least 10.
pub fn curve_sizes(n: usize) -> Vec<usize> {
    std::iter::successors(Some(n), |&s| Some(s / 2)).take_while(|&s| s >= 10).collect()
}

/// Trains a fresh model on nested prefixes of `dataset` and reports the mean
/// Pearson over `eval_sets` for each size, largest first.
pub fn data_size_curve(
    arch: Architecture,
    init: &EmbeddingTable,
    dataset: &PairDataset,
    order: CurveOrder,
    config: &TrainConfig,
    eval_sets: &[ScoredPairDataset],
) -> Result<Vec<(usize, f64)>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("no training pairs for the curve".into()));
    }
    if eval_sets.is_empty() {
        return Err(Error::EmptyInput("no evaluation sets for the curve".into()));
    }
    let mut pairs = dataset.pairs.clone();
    if order == CurveOrder::Random {
        Rng::derive(config.seed, 0xc0).shuffle(&mut pairs);
    }
    let mut out = Vec::new();
    for size in curve_sizes(pairs.len()) {
        let subset = PairDataset { pairs: pairs[..size].to_vec() };
        let mut table = init.clone();
        let mut encoder = Encoder::new(arch, init.dim(), &mut Rng::derive(config.seed, 0xe1))?;
        train(&mut encoder, &mut table, &subset, config)?;
        let mut total = 0.0;
        for set in eval_sets {
            total += evaluate(&encoder, &table, set)?.pearson;
        }
        log::info!("curve size {size} done");
        out.push((size, total / eval_sets.len() as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textdata::{ScoredPair, UnkRule};

    fn toks(s: &str) -> Tokens {
        s.split_whitespace().map(String::from).collect()
    }

    fn table(rows: &[(&str, &[f64])]) -> EmbeddingTable {
        EmbeddingTable::from_rows(rows.iter().map(|(t, r)| (t.to_string(), r.to_vec())).collect(), UnkRule::Mean).unwrap()
    }

    #[test]
    fn oracle_dataset_scores_one() {
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.6, 0.8]), ("c", &[0.0, 1.0]), ("d", &[-1.0, 0.2])]);
        let sents = ["a", "b", "c", "d", "a b", "c d"];
        let mut data = ScoredPairDataset::default();
        for (i, l) in sents.iter().enumerate() {
            for r in &sents[i + 1..] {
                let gold = cosine(&Encoder::Average.encode(&t, &toks(l)).unwrap(), &Encoder::Average.encode(&t, &toks(r)).unwrap()).unwrap();
                data.items.push(ScoredPair { left: toks(l), right: toks(r), gold });
            }
        }
        let rep = evaluate(&Encoder::Average, &t, &data).unwrap();
        assert!((rep.pearson - 1.0).abs() < 1e-12);
        assert!((rep.spearman - 1.0).abs() < 1e-12);
        assert_eq!(rep.n, data.items.len());

        // symmetric in sentence order
        let swapped = ScoredPairDataset {
            items: data.items.iter().map(|s| ScoredPair { left: s.right.clone(), right: s.left.clone(), gold: s.gold }).collect(),
        };
        assert_eq!(predictions(&Encoder::Average, &t, &swapped).unwrap(), predictions(&Encoder::Average, &t, &data).unwrap());

        data.items.truncate(1);
        assert!(matches!(evaluate(&Encoder::Average, &t, &data), Err(Error::Degenerate(_))));
    }

    #[test]
    fn degenerate_encoding_names_pair() {
        let t = table(&[("a", &[1.0, 0.0]), ("z", &[0.0, 0.0])]);
        let data = ScoredPairDataset {
            items: vec![
                ScoredPair { left: toks("a"), right: toks("a"), gold: 1.0 },
                ScoredPair { left: toks("a"), right: toks("z"), gold: 2.0 },
            ],
        };
        match evaluate(&Encoder::Average, &t, &data) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("pair 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bins() {
        assert_eq!(BIN_LABELS[length_bin(3, 11)], ">=10");
        assert_eq!(BIN_LABELS[length_bin(4, 4)], "<=4");
        assert_eq!(BIN_LABELS[length_bin(1, 7)], "7");
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.3, 1.0])]);
        let mut rng = Rng::new(3);
        let mut data = ScoredPairDataset::default();
        for _ in 0..60 {
            let mk = |rng: &mut Rng| -> Tokens { (0..1 + rng.below(12)).map(|_| if rng.bernoulli(0.5) { "a" } else { "b" }.to_string()).collect() };
            let (l, r) = (mk(&mut rng), mk(&mut rng));
            data.items.push(ScoredPair { left: l, right: r, gold: rng.uniform(0.0, 5.0) });
        }
        let rep = length_binned(&Encoder::Average, &t, &data).unwrap();
        let bins = rep.bins.as_ref().unwrap();
        assert_eq!(bins.len(), 7);
        assert_eq!(bins.iter().map(|b| b.n).sum::<usize>(), rep.n);
        assert!(bins.iter().all(|b| b.n >= 2 || b.pearson.is_none()));
        assert_eq!(rep.to_tsv(true).lines().count(), 3 + 7);
    }

    #[test]
    fn oov_examples() {
        let counts: HashMap<String, u64> = [("a", 200u64), ("b", 100), ("c", 5)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let s1 = toks("a b a b");
        assert_eq!(oov_fraction([&s1], &counts, 100).unwrap(), 0.0);
        let s2 = toks("x y z");
        assert_eq!(oov_fraction([&s2], &counts, 100).unwrap(), 1.0);
        let s3 = toks("a a a b b c x y a b");
        assert!((oov_fraction([&s3], &counts, 100).unwrap() - 0.3).abs() < 1e-15);
        assert!(oov_fraction([&s3], &counts, 0).is_err());
        let mut last = 1.0;
        for th in (1..=300).rev() {
            let f = oov_fraction([&s3], &counts, th).unwrap();
            assert!(f <= last);
            last = f;
        }
    }

    #[test]
    fn importance_and_reweight() {
        let t = table(&[("z", &[0.0, 0.0, 0.0]), ("w", &[1.0, -2.0, 3.0])]);
        let imp: HashMap<_, _> = word_importance(&t).into_iter().collect();
        assert_eq!(imp["z"], 0.0);
        assert_eq!(imp["w"], 6.0);

        let same = reweight(&t, &HashMap::new()).unwrap();
        assert_eq!(same.current(), t.current());
        let doubled = reweight(&t, &[("w".to_string(), 2.0)].into_iter().collect()).unwrap();
        let imp2: HashMap<_, _> = word_importance(&doubled).into_iter().collect();
        assert_eq!(imp2["w"], 12.0);
        assert_eq!(doubled.initial_row(doubled.id("w")), doubled.lookup("w"));
        let zeroed = reweight(&t, &[("w".to_string(), 0.0)].into_iter().collect()).unwrap();
        assert!(zeroed.lookup("w").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reweight_ones_reproduces_report() {
        let t = table(&[("a", &[1.0, 0.1]), ("b", &[0.6, 0.8]), ("c", &[-0.2, 1.0])]);
        let data = ScoredPairDataset {
            items: vec![
                ScoredPair { left: toks("a b"), right: toks("c"), gold: 1.0 },
                ScoredPair { left: toks("a"), right: toks("b c"), gold: 3.0 },
                ScoredPair { left: toks("a c"), right: toks("b"), gold: 2.0 },
            ],
        };
        let ones: HashMap<String, f64> = t.vocab().tokens().iter().map(|s| (s.clone(), 1.0)).collect();
        let rw = reweight(&t, &ones).unwrap();
        assert_eq!(evaluate(&Encoder::Average, &rw, &data).unwrap(), evaluate(&Encoder::Average, &t, &data).unwrap());

        let w: HashMap<String, f64> = [("a".to_string(), 3.0), ("b".to_string(), 0.5)].into_iter().collect();
        let rw = reweight(&t, &w).unwrap();
        let c0 = cosine(t.lookup("a"), t.lookup("b")).unwrap();
        let c1 = cosine(rw.lookup("a"), rw.lookup("b")).unwrap();
        assert!((c0 - c1).abs() < 1e-12);
    }

    #[test]
    fn frequency_weight_examples() {
        let counts: HashMap<String, u64> = [("a".to_string(), 100u64), ("b".to_string(), 50), ("c".to_string(), 25)].into_iter().collect();
        let vocab: Vec<String> = ["a", "b", "c", "x"].iter().map(|s| s.to_string()).collect();
        let w = frequency_weights(&vocab, &counts, 100).unwrap();
        assert_eq!(w["a"], 1.0);
        assert_eq!(w["x"], 100.0);
        assert_eq!(w["b"], 2.0 * w["a"]);
        assert_eq!(w["c"], 2.0 * w["b"]);
        assert!(frequency_weights(&vocab, &counts, 0).is_err());
    }

    #[test]
    fn nearest_neighbor_examples() {
        let t = table(&[
            ("a", &[1.0, 0.0]),
            ("b", &[0.8, 0.6]),
            ("dup", &[2.0, 0.0]),
            ("c", &[0.0, 1.0]),
            ("d", &[-1.0, 0.1]),
        ]);
        let counts: HashMap<String, u64> = t.vocab().tokens().iter().map(|s| (s.clone(), 10)).collect();
        let nn = nearest_neighbors(&t, "a", 1, t.len(), &counts).unwrap();
        assert_eq!(nn[0].0, "dup");
        assert!((nn[0].1 - 1.0).abs() < 1e-12);
        let all = nearest_neighbors(&t, "a", 10, t.len(), &counts).unwrap();
        assert!(all.iter().all(|(tok, _)| tok != "a"));

        // brute force over every query
        for q in ["a", "b", "dup", "c", "d"] {
            let qi = t.id(q);
            let mut brute: Vec<(String, f64)> = (0..t.len())
                .filter(|&i| i != qi)
                .filter_map(|i| cosine(t.row(qi), t.row(i)).ok().map(|c| (t.vocab().token(i).to_string(), c)))
                .collect();
            brute.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            brute.truncate(3);
            assert_eq!(nearest_neighbors(&t, q, 3, t.len(), &counts).unwrap(), brute);
        }

        // restriction to the most frequent tokens
        let mut counts = counts;
        counts.insert("dup".into(), 0);
        let nn = nearest_neighbors(&t, "a", 1, 4, &counts).unwrap();
        assert_eq!(nn[0].0, "b");
        assert!(nearest_neighbors(&t, "a", 1, t.len() + 1, &counts).is_err());
    }

    #[test]
    fn curve_size_rule() {
        assert_eq!(curve_sizes(35), vec![35, 17]);
        assert_eq!(curve_sizes(9), Vec::<usize>::new());
        assert_eq!(curve_sizes(80), vec![80, 40, 20, 10]);
    }

    #[test]
    fn ordered_and_random_curves_differ() {
        use crate::synth::{SynthConfig, SynthCorpus};
        let corpus = SynthCorpus::generate(&SynthConfig { pairs: 40, eval_pairs: 60, ..SynthConfig::default() });
        // early pairs pair tokens across topics; only the late ones carry signal
        let mut rng = Rng::new(5);
        let mut pairs = Vec::new();
        for _ in 0..40 {
            let a = rng.below(10);
            let b = (a + 1 + rng.below(9)) % 10;
            pairs.push((toks(&format!("t{a}_0 t{a}_1")), toks(&format!("t{b}_2 t{b}_3"))));
        }
        pairs.extend(corpus.train.pairs.iter().cloned());
        let data = PairDataset { pairs };
        let cfg = TrainConfig { batch_size: 10, epochs: 2, ..TrainConfig::default() };
        let evals = [corpus.eval.clone()];
        let ordered = data_size_curve(Architecture::Average, &corpus.table, &data, CurveOrder::Ordered, &cfg, &evals).unwrap();
        let random = data_size_curve(Architecture::Average, &corpus.table, &data, CurveOrder::Random, &cfg, &evals).unwrap();
        assert_eq!(ordered.iter().map(|r| r.0).collect::<Vec<_>>(), vec![80, 40, 20, 10]);
        assert_ne!(ordered, random);
    }
}
