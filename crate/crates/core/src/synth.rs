//! Small latent-topic corpora for desk-scale experiments and tests.
//!
//! Tokens belong to topics (`t{topic}_{k}`). The meaning of a training pair
//! is one topic or a combination of two; both phrases draw tokens from each
//! of its topics, repeating `shared` of the first phrase's tokens per topic.
//! The scored evaluation set pairs a two-token phrase with one whose tokens
//! are a graded mix of the same topic and another topic, with gold
//! `1 + 4·(same-topic share)`. Initial word vectors are Gaussian with a
//! tunable share of per-topic signal; every row, filler included, has the
//! same marginal scale.

use crate::numerics::Rng;
use crate::textdata::{EmbeddingTable, PairDataset, ScoredPair, ScoredPairDataset, Tokens, UnkRule};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub topics: usize,
    pub tokens_per_topic: usize,
    pub pairs: usize,
    pub eval_pairs: usize,
    pub dim: usize,
    pub init_std: f64,
    /// Share of each topic token's variance that comes from a per-topic
    /// centroid, in `[0, 1]`. Every row keeps standard deviation `init_std`.
    pub topic_signal: f64,
    /// Topics mixed in each training pair (1 or 2).
    pub topics_per_pair: usize,
    /// Per topic, how many of the first phrase's tokens reappear in the second.
    pub shared: usize,
    /// Token added to every phrase, when set.
    pub filler: Option<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 10,
            tokens_per_topic: 5,
            pairs: 200,
            eval_pairs: 200,
            dim: 10,
            init_std: 0.5,
            topic_signal: 0.3,
            topics_per_pair: 2,
            shared: 1,
            filler: None,
            seed: 2016,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub table: EmbeddingTable,
    pub train: PairDataset,
    pub eval: ScoredPairDataset,
    pub topics: Vec<Vec<String>>,
}

impl SynthCorpus {
    pub fn generate(cfg: &SynthConfig) -> Self {
        assert!(cfg.topics >= 2 && cfg.tokens_per_topic >= 5, "need 2+ topics of 5+ tokens");
        assert!((0.0..=1.0).contains(&cfg.topic_signal), "topic_signal must lie in [0, 1]");
        let mut rng = Rng::new(cfg.seed);
        let topics: Vec<Vec<String>> = (0..cfg.topics)
            .map(|t| (0..cfg.tokens_per_topic).map(|k| format!("t{t}_{k}")).collect())
            .collect();

        let centroids: Vec<Vec<f64>> = (0..cfg.topics).map(|_| (0..cfg.dim).map(|_| rng.normal()).collect()).collect();
        let (sig, noise) = (cfg.topic_signal.sqrt(), (1.0 - cfg.topic_signal).sqrt());
        let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
        for (t, topic) in topics.iter().enumerate() {
            for tok in topic {
                let row = centroids[t].iter().map(|c| cfg.init_std * (sig * c + noise * rng.normal())).collect();
                rows.push((tok.clone(), row));
            }
        }
        if let Some(f) = &cfg.filler {
            rows.push((f.clone(), (0..cfg.dim).map(|_| cfg.init_std * rng.normal()).collect()));
        }
        let table = EmbeddingTable::from_rows(rows, UnkRule::Mean).expect("synthetic rows are well formed");

        let with_filler = |mut p: Tokens, rng: &mut Rng| {
            if let Some(f) = &cfg.filler {
                let at = rng.below(p.len() + 1);
                p.insert(at, f.clone());
            }
            p
        };

        let mut train = PairDataset::default();
        for _ in 0..cfg.pairs {
            let ta = rng.below(cfg.topics);
            let tb = (ta + 1 + rng.below(cfg.topics - 1)) % cfg.topics;
            let chosen: &[usize] = if cfg.topics_per_pair >= 2 { &[ta, tb] } else { &[ta] };
            let (mut a, mut b) = (Tokens::new(), Tokens::new());
            for &t in chosen {
                let topic = &topics[t];
                let mut idx: Vec<usize> = (0..topic.len()).collect();
                rng.shuffle(&mut idx);
                // two token-disjoint draws from the topic
                let per = if chosen.len() == 1 { 2 } else { 1 };
                let n1 = per + rng.below(2);
                let n2 = per + rng.below((topic.len() - n1 - per + 1).min(2));
                let keep = cfg.shared.min(n1);
                a.extend(idx[..n1].iter().map(|&i| topic[i].clone()));
                b.extend(idx[..keep].iter().chain(&idx[n1..n1 + n2]).map(|&i| topic[i].clone()));
            }
            rng.shuffle(&mut a);
            rng.shuffle(&mut b);
            let a = with_filler(a, &mut rng);
            let b = with_filler(b, &mut rng);
            train.pairs.push((a, b));
        }

        let mut eval = ScoredPairDataset::default();
        for _ in 0..cfg.eval_pairs {
            let ta = rng.below(cfg.topics);
            let tb = (ta + 1 + rng.below(cfg.topics - 1)) % cfg.topics;
            let mut idx: Vec<usize> = (0..cfg.tokens_per_topic).collect();
            rng.shuffle(&mut idx);
            let left: Tokens = idx[..2].iter().map(|&i| topics[ta][i].clone()).collect();
            let same = rng.below(4);
            let mut right: Tokens = idx[2..2 + same].iter().map(|&i| topics[ta][i].clone()).collect();
            let mut other: Vec<usize> = (0..cfg.tokens_per_topic).collect();
            rng.shuffle(&mut other);
            right.extend(other[..3 - same].iter().map(|&i| topics[tb][i].clone()));
            rng.shuffle(&mut right);
            let left = with_filler(left, &mut rng);
            let right = with_filler(right, &mut rng);
            eval.items.push(ScoredPair { left, right, gold: 1.0 + 4.0 * same as f64 / 3.0 });
        }

        SynthCorpus { table, train, eval, topics }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig::default();
        let a = SynthCorpus::generate(&cfg);
        let b = SynthCorpus::generate(&cfg);
        assert_eq!(a.train, b.train);
        assert_eq!(a.table, b.table);
        assert_eq!(a.train.len(), 200);
        assert_eq!(a.table.len(), 51); // 50 topic tokens + unk
        let topics_of = |p: &Tokens| -> std::collections::BTreeSet<String> {
            p.iter().map(|t| t.split('_').next().unwrap().to_string()).collect()
        };
        for (x, y) in &a.train.pairs {
            assert_eq!(topics_of(x), topics_of(y));
            assert_eq!(topics_of(x).len(), 2);
            let overlap = x.iter().filter(|t| y.contains(t)).count();
            assert_eq!(overlap, 2, "{x:?} {y:?}");
        }
        let disjoint = SynthCorpus::generate(&SynthConfig { shared: 0, topics_per_pair: 1, ..cfg });
        for (x, y) in &disjoint.train.pairs {
            assert!(x.iter().all(|t| !y.contains(t)));
            assert_eq!(topics_of(x), topics_of(y));
        }
        assert!(a.eval.items.iter().all(|s| (1.0..=5.0).contains(&s.gold)));
    }

    #[test]
    fn filler_in_every_phrase() {
        let c = SynthCorpus::generate(&SynthConfig { filler: Some("the".into()), ..SynthConfig::default() });
        assert!(c.train.pairs.iter().all(|(a, b)| a.contains(&"the".to_string()) && b.contains(&"the".to_string())));
        assert!(c.table.vocab().get("the").is_some());
    }
}
