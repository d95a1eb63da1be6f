//! Okapi BM25 over an inverted index — the word-form matching baseline.
//!
//! Uses the non-negative idf variant `ln((N - df + 0.5) / (df + 0.5) + 1)`
//! with `k1 = 1.2`, `b = 0.75` by default. Documents are stored in
//! lexicographic answer-id order so that index-based ranking accumulates
//! term contributions in exactly the same arithmetic order as a brute-force
//! document-at-a-time scan, making the two bit-identical.

use std::collections::HashMap;

use crate::data::AnswerSet;
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Copy)]
struct Posting {
    doc: usize,
    tf: u32,
}

/// Immutable term/document statistics for a built answer set.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_lengths: Vec<usize>,
    avgdl: f64,
    k1: f64,
    b: f64,
}

impl InvertedIndex {
    pub fn build(answers: &AnswerSet) -> Result<Self> {
        Self::build_with(answers, DEFAULT_K1, DEFAULT_B)
    }

    pub fn build_with(answers: &AnswerSet, k1: f64, b: f64) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::invalid("InvertedIndex::build", "empty answer set"));
        }
        let mut order: Vec<usize> = (0..answers.len()).collect();
        order.sort_by(|&a, &b| answers.id(a).cmp(answers.id(b)));

        let mut doc_ids = Vec::with_capacity(order.len());
        let mut doc_lengths = Vec::with_capacity(order.len());
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        for (doc, &orig) in order.iter().enumerate() {
            doc_ids.push(answers.id(orig).to_string());
            let tokens = answers.tokens(orig);
            doc_lengths.push(tokens.len());
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t.as_str()).or_insert(0) += 1;
            }
            // Insertion per doc in ascending doc order keeps postings sorted.
            let mut terms: Vec<(&str, u32)> = tf.into_iter().collect();
            terms.sort_unstable();
            for (term, count) in terms {
                postings.entry(term.to_string()).or_default().push(Posting { doc, tf: count });
            }
        }
        let avgdl = doc_lengths.iter().sum::<usize>() as f64 / doc_lengths.len() as f64;
        Ok(InvertedIndex { postings, doc_ids, doc_lengths, avgdl, k1, b })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, |p| p.len())
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.doc_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_score(&self, tf: f64, dl: f64, idf: f64) -> f64 {
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl))
    }

    /// BM25 score of one answer for a query token multiset; each occurrence
    /// of a duplicated query term contributes separately.
    pub fn score(&self, question: &[&str], answer_id: &str) -> Result<f64> {
        let doc = self
            .doc_ids
            .binary_search_by(|id| id.as_str().cmp(answer_id))
            .map_err(|_| Error::UnknownAnswerId(answer_id.to_string()))?;
        let dl = self.doc_lengths[doc] as f64;
        let mut total = 0.0;
        for term in question {
            if let Some(plist) = self.postings.get(*term) {
                if let Ok(pos) = plist.binary_search_by(|p| p.doc.cmp(&doc)) {
                    total += self.term_score(plist[pos].tf as f64, dl, self.idf(term));
                }
            }
        }
        Ok(total)
    }

    /// Ranks all documents by descending score with lexicographic answer-id
    /// tie-break, truncated to `top_k`.
    pub fn rank(&self, question: &[&str], top_k: usize) -> Vec<(String, f64)> {
        let mut scores = vec![0.0f64; self.doc_count()];
        for term in question {
            if let Some(plist) = self.postings.get(*term) {
                let idf = self.idf(term);
                for p in plist {
                    scores[p.doc] += self.term_score(p.tf as f64, self.doc_lengths[p.doc] as f64, idf);
                }
            }
        }
        let mut order: Vec<usize> = (0..self.doc_count()).collect();
        // doc index order equals id order, so a stable sort by descending
        // score yields the lexicographic tie-break for free.
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        order
            .into_iter()
            .take(top_k)
            .map(|d| (self.doc_ids[d].clone(), scores[d]))
            .collect()
    }

    /// Document-at-a-time reference scorer: same arithmetic, no index.
    pub fn rank_brute_force(&self, question: &[&str], top_k: usize) -> Vec<(String, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.doc_count())
            .map(|doc| {
                let dl = self.doc_lengths[doc] as f64;
                let mut total = 0.0;
                for term in question {
                    if let Some(plist) = self.postings.get(*term) {
                        if let Ok(pos) = plist.binary_search_by(|p| p.doc.cmp(&doc)) {
                            total += self.term_score(plist[pos].tf as f64, dl, self.idf(term));
                        }
                    }
                }
                (doc, total)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(top_k)
            .map(|(d, s)| (self.doc_ids[d].clone(), s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(docs: &[(&str, &str)]) -> AnswerSet {
        let mut a = AnswerSet::new();
        for (id, text) in docs {
            a.insert(id, text.split_whitespace().map(str::to_string).collect()).unwrap();
        }
        a
    }

    #[test]
    fn document_frequencies_counted() {
        let index = InvertedIndex::build(&set(&[("d1", "a b"), ("d2", "b c")])).unwrap();
        assert_eq!(index.doc_frequency("b"), 2);
        assert_eq!(index.doc_frequency("a"), 1);
        assert_eq!(index.doc_frequency("c"), 1);
        assert_eq!(index.doc_frequency("zzz"), 0);
    }

    #[test]
    fn single_doc_avgdl_is_its_length() {
        let index = InvertedIndex::build(&set(&[("d1", "x y z")])).unwrap();
        assert_eq!(index.avgdl(), 3.0);
    }

    #[test]
    fn empty_set_rejected() {
        assert!(InvertedIndex::build(&AnswerSet::new()).is_err());
    }

    #[test]
    fn absent_term_scores_zero() {
        let index = InvertedIndex::build(&set(&[("d1", "alpha beta")])).unwrap();
        assert_eq!(index.score(&["gamma"], "d1").unwrap(), 0.0);
    }

    #[test]
    fn single_doc_closed_form() {
        // N=1, df=1: idf = ln((0.5/1.5) + 1) = ln(4/3); tf=1 at dl=avgdl
        // gives tf-norm (k1+1)/(1+k1) = 1, so the score is exactly ln(4/3).
        let index = InvertedIndex::build(&set(&[("d1", "alpha beta gamma")])).unwrap();
        let score = index.score(&["alpha"], "d1").unwrap();
        assert!((score - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicate_query_terms_each_contribute() {
        let index = InvertedIndex::build(&set(&[("d1", "alpha beta"), ("d2", "beta")])).unwrap();
        let once = index.score(&["alpha"], "d1").unwrap();
        let twice = index.score(&["alpha", "alpha"], "d1").unwrap();
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn unknown_answer_id_rejected() {
        let index = InvertedIndex::build(&set(&[("d1", "a")])).unwrap();
        assert!(matches!(index.score(&["a"], "nope"), Err(Error::UnknownAnswerId(_))));
    }

    #[test]
    fn rank_matches_brute_force_on_random_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n_docs = rng.gen_range(2..50);
            let mut answers = AnswerSet::new();
            for d in 0..n_docs {
                let len = rng.gen_range(1..12);
                let toks: Vec<String> = (0..len).map(|_| format!("t{}", rng.gen_range(0..30))).collect();
                answers.insert(&format!("doc{:03}", d), toks).unwrap();
            }
            let index = InvertedIndex::build(&answers).unwrap();
            let q: Vec<String> = (0..rng.gen_range(1..6)).map(|_| format!("t{}", rng.gen_range(0..30))).collect();
            let q_refs: Vec<&str> = q.iter().map(|s| s.as_str()).collect();
            let via_index = index.rank(&q_refs, n_docs);
            let via_brute = index.rank_brute_force(&q_refs, n_docs);
            assert_eq!(via_index.len(), via_brute.len());
            for (a, b) in via_index.iter().zip(&via_brute) {
                assert_eq!(a.0, b.0);
                assert_eq!(a.1.to_bits(), b.1.to_bits(), "scores must match bitwise");
            }
        }
    }

    #[test]
    fn unknown_query_is_deterministic_zero_ranking() {
        let index = InvertedIndex::build(&set(&[("b", "x"), ("a", "y"), ("c", "z")])).unwrap();
        let ranked = index.rank(&["unseen"], 3);
        assert_eq!(
            ranked.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
        assert!(ranked.iter().all(|&(_, s)| s == 0.0));
    }

    #[test]
    fn extra_occurrence_never_decreases_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let reps = rng.gen_range(1..6);
            let filler = rng.gen_range(0..6);
            let mut toks: Vec<String> = vec!["hit".to_string(); reps];
            toks.extend((0..filler).map(|i| format!("f{}", i)));
            let mut toks_more = toks.clone();
            toks_more.push("hit".to_string());

            let mut a1 = AnswerSet::new();
            a1.insert("d", toks).unwrap();
            a1.insert("other", vec!["pad".to_string(); 3]).unwrap();
            let mut a2 = AnswerSet::new();
            a2.insert("d", toks_more).unwrap();
            a2.insert("other", vec!["pad".to_string(); 3]).unwrap();

            // Same avgdl on both sides keeps the comparison about tf only.
            let i1 = InvertedIndex::build_with(&a1, DEFAULT_K1, 0.0).unwrap();
            let i2 = InvertedIndex::build_with(&a2, DEFAULT_K1, 0.0).unwrap();
            let s1 = i1.score(&["hit"], "d").unwrap();
            let s2 = i2.score(&["hit"], "d").unwrap();
            assert!(s2 >= s1, "tf {} -> {} decreased score {} -> {}", reps, reps + 1, s1, s2);
        }
    }

    #[test]
    fn scores_nonnegative() {
        let index = InvertedIndex::build(&set(&[("d1", "a a a"), ("d2", "a b")])).unwrap();
        for id in ["d1", "d2"] {
            assert!(index.score(&["a", "b"], id).unwrap() >= 0.0);
        }
    }
}
