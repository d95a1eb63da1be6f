//! Corpus ingestion: answer sets, QA pairs, labels, vocabularies, embedding
//! tables, padded index sequences, and negative sampling.
//!
//! All inputs are pre-tokenized, whitespace-separated text. Index 0 of every
//! vocabulary is the padding token and index 1 the unknown token; the padding
//! embedding row is pinned at zero so padded positions cannot contribute to
//! convolution sums.

pub mod episode;
pub mod loader;
pub mod synthetic;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use episode::{sample_episode, Episode, EpisodeItem};

/// Reserved padding index.
pub const PAD_INDEX: usize = 0;
/// Reserved unknown-token index.
pub const UNK_INDEX: usize = 1;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// The five question-type classes, in their fixed one-hot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelClass {
    Background,
    Cause,
    Claim,
    Fact,
    Influence,
}

pub const NUM_CLASSES: usize = 5;

impl LabelClass {
    pub const ALL: [LabelClass; NUM_CLASSES] = [
        LabelClass::Background,
        LabelClass::Cause,
        LabelClass::Claim,
        LabelClass::Fact,
        LabelClass::Influence,
    ];

    pub fn index(self) -> usize {
        match self {
            LabelClass::Background => 0,
            LabelClass::Cause => 1,
            LabelClass::Claim => 2,
            LabelClass::Fact => 3,
            LabelClass::Influence => 4,
        }
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelClass::Background => "background",
            LabelClass::Cause => "cause",
            LabelClass::Claim => "claim",
            LabelClass::Fact => "fact",
            LabelClass::Influence => "influence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownLabelClass(s.to_string()))
    }

    /// 5-dimensional standard-basis vector for this class.
    pub fn one_hot(self) -> [f64; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.index()] = 1.0;
        v
    }
}

impl std::fmt::Display for LabelClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Token/index bijection with reserved padding and unknown entries.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// A vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let mut v = Vocab { index: HashMap::new(), tokens: Vec::new() };
        v.push(PAD_TOKEN);
        v.push(UNK_TOKEN);
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let idx = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), idx);
        idx
    }

    /// Adds a token if absent; returns its index either way.
    pub fn add(&mut self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None => self.push(token),
        }
    }

    /// Builds a vocabulary from corpus tokens in first-appearance order.
    pub fn from_corpus<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to the unknown index.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Word-vector table aligned with a [`Vocab`]: one row per token, row 0
/// all-zero for padding.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    table: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn new(table: Tensor, trainable: bool) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::shape("EmbeddingTable::new", "[v,d]", format!("{:?}", table.shape())));
        }
        let mut t = EmbeddingTable { table, trainable };
        t.zero_pad_row();
        Ok(t)
    }

    /// Seeded random rows in `[-0.1, 0.1]` for every vocabulary entry.
    pub fn random(vocab_size: usize, dim: usize, trainable: bool, rng: &mut impl Rng) -> Self {
        let mut t = EmbeddingTable {
            table: Tensor::uniform(vec![vocab_size, dim], 0.1, rng),
            trainable,
        };
        t.zero_pad_row();
        t
    }

    fn zero_pad_row(&mut self) {
        let d = self.dim();
        for v in &mut self.table.data_mut()[..d] {
            *v = 0.0;
        }
    }

    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        let d = self.dim();
        &self.table.data()[idx * d..(idx + 1) * d]
    }

    /// Appends a row (used when extending the vocabulary).
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim() {
            return Err(Error::shape("EmbeddingTable::push_row", format!("{}", self.dim()), format!("{}", row.len())));
        }
        let rows = self.rows();
        let dim = self.dim();
        let mut data = std::mem::replace(&mut self.table, Tensor::zeros(vec![1, 1]));
        let mut vec = data.data_mut().to_vec();
        vec.extend_from_slice(row);
        data = Tensor::new(vec![rows + 1, dim], vec)?;
        self.table = data;
        Ok(())
    }

    /// Elementwise max over the embedding rows of `tokens` — the fixed-size
    /// sequence summary fed to the labeler. Empty input gives a zero vector.
    pub fn max_pool_tokens(&self, tokens: &[&str], vocab: &Vocab) -> Vec<f64> {
        let d = self.dim();
        if tokens.is_empty() {
            return vec![0.0; d];
        }
        let mut out = vec![f64::NEG_INFINITY; d];
        for t in tokens {
            let row = self.row(vocab.lookup(t));
            for (o, &v) in out.iter_mut().zip(row) {
                if v > *o {
                    *o = v;
                }
            }
        }
        out
    }
}

/// Insertion-ordered candidate answers, each a nonempty token list.
#[derive(Debug, Clone, Default)]
pub struct AnswerSet {
    ids: Vec<String>,
    tokens: Vec<Vec<String>>,
    by_id: HashMap<String, usize>,
}

impl AnswerSet {
    pub fn new() -> Self {
        AnswerSet::default()
    }

    pub fn insert(&mut self, id: &str, tokens: Vec<String>) -> Result<usize> {
        if self.by_id.contains_key(id) {
            return Err(Error::invalid("AnswerSet::insert", format!("duplicate answer id {:?}", id)));
        }
        if tokens.is_empty() {
            return Err(Error::invalid("AnswerSet::insert", format!("answer {:?} has no tokens", id)));
        }
        let idx = self.ids.len();
        self.ids.push(id.to_string());
        self.tokens.push(tokens);
        self.by_id.insert(id.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn tokens(&self, idx: usize) -> &[String] {
        &self.tokens[idx]
    }

    pub fn tokens_by_id(&self, id: &str) -> Option<&[String]> {
        self.position(id).map(|i| self.tokens(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.ids.iter().map(|s| s.as_str()).zip(self.tokens.iter().map(|t| t.as_slice()))
    }
}

/// One question with its gold answer and optional type label.
#[derive(Debug, Clone)]
pub struct QaPair {
    pub qid: String,
    pub question: Vec<String>,
    pub answer_id: String,
    pub label: Option<LabelClass>,
}

/// A loaded corpus: the answer set plus QA pairs referencing it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub answers: AnswerSet,
    pub pairs: Vec<QaPair>,
}

impl Corpus {
    /// All distinct tokens in questions and answers, first-appearance order.
    pub fn unique_tokens(&self) -> Vec<String> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for (_, toks) in self.answers.iter() {
            for t in toks {
                if seen.insert(t.clone(), ()).is_none() {
                    out.push(t.clone());
                }
            }
        }
        for p in &self.pairs {
            for t in &p.question {
                if seen.insert(t.clone(), ()).is_none() {
                    out.push(t.clone());
                }
            }
        }
        out
    }
}

/// Maps tokens to indices, truncating or right-padding to exactly `n_max`.
///
/// Longer inputs keep their first `n_max` tokens; shorter inputs are padded
/// with the reserved index 0. An empty token list produces an all-padding
/// sequence (with a warning, not an error).
pub fn encode_sequence(tokens: &[&str], vocab: &Vocab, n_max: usize) -> Result<Vec<usize>> {
    if n_max == 0 {
        return Err(Error::invalid("encode_sequence", "n_max must be >= 1"));
    }
    if tokens.is_empty() {
        log::warn!("encoding an empty token list: emitting all-padding sequence");
    }
    let mut out = Vec::with_capacity(n_max);
    for t in tokens.iter().take(n_max) {
        out.push(vocab.lookup(t));
    }
    out.resize(n_max, PAD_INDEX);
    Ok(out)
}

/// Draws `count` distinct non-gold answer ids uniformly without replacement.
pub fn negative_sample(
    pair: &QaPair,
    answers: &AnswerSet,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<String>> {
    if count >= answers.len() {
        return Err(Error::invalid(
            "negative_sample",
            format!("count {} must be below the answer-set size {}", count, answers.len()),
        ));
    }
    let mut candidates: Vec<usize> = (0..answers.len())
        .filter(|&i| answers.id(i) != pair.answer_id)
        .collect();
    // Partial Fisher-Yates: the first `count` entries are a uniform sample.
    for i in 0..count {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    Ok(candidates[..count].iter().map(|&i| answers.id(i).to_string()).collect())
}

/// Seeded shuffle helper shared by episode sampling and training loops.
pub(crate) fn shuffled<T: Clone>(items: &[T], rng: &mut impl Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_answers() -> AnswerSet {
        let mut a = AnswerSet::new();
        for i in 0..10 {
            a.insert(&format!("a{}", i), vec![format!("tok{}", i)]).unwrap();
        }
        a
    }

    fn pair_for(answers: &AnswerSet) -> QaPair {
        QaPair {
            qid: "q0".into(),
            question: vec!["w".into()],
            answer_id: answers.id(0).to_string(),
            label: None,
        }
    }

    #[test]
    fn label_one_hot_is_standard_basis() {
        for (i, c) in LabelClass::ALL.iter().enumerate() {
            let v = c.one_hot();
            assert_eq!(v[i], 1.0);
            assert_eq!(v.iter().sum::<f64>(), 1.0);
        }
        assert_eq!(LabelClass::parse("cause").unwrap(), LabelClass::Cause);
        assert!(LabelClass::parse("banana").is_err());
    }

    #[test]
    fn encode_pads_and_truncates() {
        let vocab = Vocab::from_corpus(["alpha", "beta", "gamma"]);
        let enc = encode_sequence(&["alpha", "beta", "gamma"], &vocab, 5).unwrap();
        assert_eq!(enc.len(), 5);
        assert_eq!(&enc[3..], &[PAD_INDEX, PAD_INDEX]);
        assert!(enc[..3].iter().all(|&i| i >= 2));

        let long: Vec<String> = (0..120).map(|i| format!("t{}", i)).collect();
        let long_refs: Vec<&str> = long.iter().map(|s| s.as_str()).collect();
        let vocab2 = Vocab::from_corpus(long_refs.iter().copied());
        let enc2 = encode_sequence(&long_refs, &vocab2, 100).unwrap();
        assert_eq!(enc2.len(), 100);
        assert_eq!(enc2[99], vocab2.lookup("t99"));
    }

    #[test]
    fn encode_maps_unknown_to_unk() {
        let vocab = Vocab::from_corpus(["known"]);
        let enc = encode_sequence(&["mystery"], &vocab, 2).unwrap();
        assert_eq!(enc[0], UNK_INDEX);
    }

    #[test]
    fn encode_empty_gives_all_padding() {
        let vocab = Vocab::new();
        let enc = encode_sequence(&[], &vocab, 4).unwrap();
        assert_eq!(enc, vec![PAD_INDEX; 4]);
    }

    #[test]
    fn padding_never_precedes_real_token() {
        let vocab = Vocab::from_corpus(["x", "y"]);
        for toks in [vec![], vec!["x"], vec!["x", "y"]] {
            let enc = encode_sequence(&toks, &vocab, 4).unwrap();
            let first_pad = enc.iter().position(|&i| i == PAD_INDEX).unwrap_or(enc.len());
            assert!(enc[first_pad..].iter().all(|&i| i == PAD_INDEX));
        }
    }

    #[test]
    fn negative_sample_excludes_gold_and_is_distinct() {
        let answers = tiny_answers();
        let pair = pair_for(&answers);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample = negative_sample(&pair, &answers, 5, &mut rng).unwrap();
        assert_eq!(sample.len(), 5);
        let mut dedup = sample.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
        assert!(!sample.contains(&pair.answer_id));
    }

    #[test]
    fn negative_sample_two_answer_set_is_forced() {
        let mut answers = AnswerSet::new();
        answers.insert("gold", vec!["g".into()]).unwrap();
        answers.insert("other", vec!["o".into()]).unwrap();
        let pair = QaPair {
            qid: "q".into(),
            question: vec![],
            answer_id: "gold".into(),
            label: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = negative_sample(&pair, &answers, 1, &mut rng).unwrap();
        assert_eq!(sample, vec!["other".to_string()]);
    }

    #[test]
    fn negative_sample_deterministic_under_seed() {
        let answers = tiny_answers();
        let pair = pair_for(&answers);
        let a = negative_sample(&pair, &answers, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = negative_sample(&pair, &answers, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_sample_rejects_count_at_size() {
        let answers = tiny_answers();
        let pair = pair_for(&answers);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(negative_sample(&pair, &answers, 10, &mut rng).is_err());
    }

    #[test]
    fn negative_sample_is_uniform_chi_square() {
        // 1e5 single draws over a 10-answer set (9 non-gold candidates):
        // chi-square with df=8 must stay under the p=0.01 critical value.
        let answers = tiny_answers();
        let pair = pair_for(&answers);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            let s = negative_sample(&pair, &answers, 1, &mut rng).unwrap();
            *counts.entry(s[0].clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 9);
        let expected = draws as f64 / 9.0;
        let chi2: f64 = counts
            .values()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        // Critical value of chi-square(df=8) at p=0.01.
        assert!(chi2 < 20.090, "chi2={}", chi2);
    }

    #[test]
    fn embedding_pad_row_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::random(4, 3, true, &mut rng);
        assert!(table.row(PAD_INDEX).iter().all(|&v| v == 0.0));
        assert!(table.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn max_pool_tokens_is_elementwise_max() {
        let mut table = EmbeddingTable::new(
            Tensor::matrix(4, 2, vec![0.0, 0.0, 0.5, 0.5, 1.0, -1.0, -2.0, 3.0]).unwrap(),
            false,
        )
        .unwrap();
        table.trainable = false;
        let mut vocab = Vocab::new();
        vocab.add("a");
        vocab.add("b");
        let pooled = table.max_pool_tokens(&["a", "b"], &vocab);
        assert_eq!(pooled, vec![1.0, 3.0]);
        assert_eq!(table.max_pool_tokens(&[], &vocab), vec![0.0, 0.0]);
    }
}
