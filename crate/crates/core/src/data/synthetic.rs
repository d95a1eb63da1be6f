//! Synthetic corpus generators for desk-scale verification.
//!
//! Two tasks:
//! - `fewshot`: five Gaussian cluster classes in a configurable dimension,
//!   emitted as an embedding file plus labeled question files. With
//!   separation well above noise, a nearest-centroid classifier is near
//!   perfect, giving an independent oracle for labeler training runs.
//! - `retrieval`: answers built from token bags in groups of five (one per
//!   class) that share content tokens and differ in a few answer-unique
//!   tokens plus a per-class token. Questions are noisy subsets of their gold
//!   answer's tokens plus a class-marker token absent from every answer. At
//!   zero noise the unique tokens pin the gold answer for word-form matchers;
//!   as noise replaces them, only the class label disambiguates within a
//!   group. A paraphrase mode maps every question token to a synonym form
//!   unseen on the answer side.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{LabelClass, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FewshotConfig {
    /// Embedding dimension of the generated vectors.
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Tokens per question; the consumer max-pools them back into one vector.
    pub tokens_per_item: usize,
    /// Distance of each class centroid from the origin.
    pub separation: f64,
    /// Standard deviation of per-token noise around the centroid.
    pub noise: f64,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig {
            dim: 16,
            train_per_class: 30,
            test_per_class: 30,
            tokens_per_item: 3,
            separation: 4.0,
            noise: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalConfig {
    /// Number of answer groups; each group holds one answer per class.
    pub groups: usize,
    /// Content tokens shared by the five answers of a group.
    pub content_tokens: usize,
    /// Tokens unique to each answer.
    pub unique_tokens: usize,
    /// Content tokens sampled into each question.
    pub question_content: usize,
    pub questions_per_answer_train: usize,
    pub questions_per_answer_test: usize,
    /// Probability that a unique token in a question is replaced by a random
    /// content token, blurring the word-form signal within a group.
    pub noise: f64,
    /// Replace every question token with a synonym form absent from answers.
    pub paraphrase: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            groups: 10,
            content_tokens: 6,
            unique_tokens: 3,
            question_content: 4,
            questions_per_answer_train: 3,
            questions_per_answer_test: 2,
            noise: 0.0,
            paraphrase: false,
        }
    }
}

#[derive(Debug, Clone)]
pub enum SyntheticTask {
    Fewshot(FewshotConfig),
    Retrieval(RetrievalConfig),
}

/// Paths of the files a generator wrote.
#[derive(Debug, Clone)]
pub struct SyntheticPaths {
    pub answers: PathBuf,
    pub qa_train: PathBuf,
    pub qa_test: PathBuf,
    pub embeddings: Option<PathBuf>,
}

/// Writes a synthetic corpus into `out_dir` with deterministic contents for a
/// given config and rng state.
pub fn generate_synthetic(task: &SyntheticTask, out_dir: &Path, rng: &mut impl Rng) -> Result<SyntheticPaths> {
    fs::create_dir_all(out_dir)?;
    match task {
        SyntheticTask::Fewshot(cfg) => generate_fewshot(cfg, out_dir, rng),
        SyntheticTask::Retrieval(cfg) => generate_retrieval(cfg, out_dir, rng),
    }
}

fn class_answer_id(class: LabelClass) -> String {
    format!("ans_{}", class.name())
}

fn generate_fewshot(cfg: &FewshotConfig, out_dir: &Path, rng: &mut impl Rng) -> Result<SyntheticPaths> {
    if cfg.dim == 0 || cfg.tokens_per_item == 0 {
        return Err(Error::invalid("generate_synthetic", "fewshot dim and tokens_per_item must be >= 1"));
    }
    if cfg.separation == 0.0 && cfg.noise == 0.0 {
        log::warn!("fewshot config is degenerate: separation 0 with noise 0 collapses all classes");
    }

    // Class centroids: random directions scaled to `separation`.
    let mut centroids = Vec::with_capacity(NUM_CLASSES);
    for _ in 0..NUM_CLASSES {
        let mut v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x *= cfg.separation / norm;
        }
        centroids.push(v);
    }

    let mut embeddings = String::new();
    let total_tokens = NUM_CLASSES * (cfg.train_per_class + cfg.test_per_class) * cfg.tokens_per_item;
    writeln!(embeddings, "{} {}", total_tokens, cfg.dim).unwrap();

    let mut qa_train = String::new();
    let mut qa_test = String::new();
    for (split, per_class, qa) in [
        ("train", cfg.train_per_class, &mut qa_train),
        ("test", cfg.test_per_class, &mut qa_test),
    ] {
        for class in LabelClass::ALL {
            for item in 0..per_class {
                let mut tokens = Vec::with_capacity(cfg.tokens_per_item);
                for t in 0..cfg.tokens_per_item {
                    let token = format!("w_{}_{}_{}_{}", split, class.name(), item, t);
                    let mut line = token.clone();
                    for k in 0..cfg.dim {
                        let noise: f64 = StandardNormal.sample(rng);
                        write!(line, " {}", centroids[class.index()][k] + cfg.noise * noise).unwrap();
                    }
                    embeddings.push_str(&line);
                    embeddings.push('\n');
                    tokens.push(token);
                }
                writeln!(
                    qa,
                    "q_{}_{}_{}\t{}\t{}\t{}",
                    split,
                    class.name(),
                    item,
                    tokens.join(" "),
                    class_answer_id(class),
                    class.name()
                )
                .unwrap();
            }
        }
    }

    let mut answers = String::new();
    for class in LabelClass::ALL {
        writeln!(answers, "{}\tabout_{}", class_answer_id(class), class.name()).unwrap();
    }

    let paths = SyntheticPaths {
        answers: out_dir.join("answers.tsv"),
        qa_train: out_dir.join("qa_train.tsv"),
        qa_test: out_dir.join("qa_test.tsv"),
        embeddings: Some(out_dir.join("embeddings.txt")),
    };
    fs::write(&paths.answers, answers)?;
    fs::write(&paths.qa_train, qa_train)?;
    fs::write(&paths.qa_test, qa_test)?;
    fs::write(paths.embeddings.as_ref().unwrap(), embeddings)?;
    Ok(paths)
}

fn generate_retrieval(cfg: &RetrievalConfig, out_dir: &Path, rng: &mut impl Rng) -> Result<SyntheticPaths> {
    if cfg.groups == 0 || cfg.content_tokens == 0 || cfg.unique_tokens == 0 {
        return Err(Error::invalid(
            "generate_synthetic",
            "retrieval groups, content_tokens and unique_tokens must be >= 1",
        ));
    }
    if cfg.question_content > cfg.content_tokens {
        return Err(Error::invalid(
            "generate_synthetic",
            "question_content cannot exceed content_tokens",
        ));
    }

    let content_token = |g: usize, t: usize| format!("topic{:03}_{}", g, t);
    let unique_token = |g: usize, c: usize, t: usize| format!("detail{:03}_{}_{}", g, c, t);
    let marker_token = |class: LabelClass| format!("type_{}", class.name());
    let answer_id = |g: usize, class: LabelClass| format!("a{:03}_{}", g, class.name());

    let mut answers = String::new();
    for g in 0..cfg.groups {
        for class in LabelClass::ALL {
            let mut tokens = vec![format!("cls_{}", class.name())];
            for t in 0..cfg.content_tokens {
                tokens.push(content_token(g, t));
            }
            for t in 0..cfg.unique_tokens {
                tokens.push(unique_token(g, class.index(), t));
            }
            writeln!(answers, "{}\t{}", answer_id(g, class), tokens.join(" ")).unwrap();
        }
    }

    // Global content pool for noise replacements.
    let pool: Vec<String> = (0..cfg.groups)
        .flat_map(|g| (0..cfg.content_tokens).map(move |t| content_token(g, t)))
        .collect();

    let paraphrased = |tok: &str, on: bool| if on { format!("{}_q", tok) } else { tok.to_string() };

    let mut qa_train = String::new();
    let mut qa_test = String::new();
    for (split, per_answer, qa) in [
        ("train", cfg.questions_per_answer_train, &mut qa_train),
        ("test", cfg.questions_per_answer_test, &mut qa_test),
    ] {
        for g in 0..cfg.groups {
            for class in LabelClass::ALL {
                for q in 0..per_answer {
                    let mut tokens = vec![marker_token(class)];
                    for t in 0..cfg.unique_tokens {
                        if rng.gen::<f64>() < cfg.noise {
                            tokens.push(pool[rng.gen_range(0..pool.len())].clone());
                        } else {
                            tokens.push(unique_token(g, class.index(), t));
                        }
                    }
                    // Sampled content prefix; rotation keeps coverage even.
                    for t in 0..cfg.question_content {
                        tokens.push(content_token(g, (t + q) % cfg.content_tokens));
                    }
                    let tokens: Vec<String> =
                        tokens.iter().map(|t| paraphrased(t, cfg.paraphrase)).collect();
                    writeln!(
                        qa,
                        "q_{}_{:03}_{}_{}\t{}\t{}\t{}",
                        split,
                        g,
                        class.name(),
                        q,
                        tokens.join(" "),
                        answer_id(g, class),
                        class.name()
                    )
                    .unwrap();
                }
            }
        }
    }

    let paths = SyntheticPaths {
        answers: out_dir.join("answers.tsv"),
        qa_train: out_dir.join("qa_train.tsv"),
        qa_test: out_dir.join("qa_test.tsv"),
        embeddings: None,
    };
    fs::write(&paths.answers, answers)?;
    fs::write(&paths.qa_train, qa_train)?;
    fs::write(&paths.qa_test, qa_test)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm25::InvertedIndex;
    use crate::data::loader::{load_answers, load_embeddings, load_qa, VocabPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fewshot_nearest_centroid_oracle_is_near_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FewshotConfig { separation: 6.0, noise: 0.5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let paths = generate_synthetic(&SyntheticTask::Fewshot(cfg), dir.path(), &mut rng).unwrap();

        let answers = load_answers(&paths.answers).unwrap();
        let train = load_qa(&paths.qa_train, &answers).unwrap();
        let test = load_qa(&paths.qa_test, &answers).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let (vocab, table) =
            load_embeddings(paths.embeddings.as_ref().unwrap(), VocabPolicy::Fixed, &[], &mut r2).unwrap();

        // Centroids from the train split.
        let mut sums = vec![vec![0.0; table.dim()]; NUM_CLASSES];
        let mut counts = vec![0usize; NUM_CLASSES];
        for p in &train {
            let toks: Vec<&str> = p.question.iter().map(|s| s.as_str()).collect();
            let v = table.max_pool_tokens(&toks, &vocab);
            let c = p.label.unwrap().index();
            for (s, x) in sums[c].iter_mut().zip(&v) {
                *s += x;
            }
            counts[c] += 1;
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            for x in s.iter_mut() {
                *x /= n as f64;
            }
        }

        let mut hits = 0usize;
        for p in &test {
            let toks: Vec<&str> = p.question.iter().map(|s| s.as_str()).collect();
            let v = table.max_pool_tokens(&toks, &vocab);
            let best = (0..NUM_CLASSES)
                .min_by(|&a, &b| {
                    let da: f64 = sums[a].iter().zip(&v).map(|(c, x)| (c - x) * (c - x)).sum();
                    let db: f64 = sums[b].iter().zip(&v).map(|(c, x)| (c - x) * (c - x)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == p.label.unwrap().index() {
                hits += 1;
            }
        }
        let acc = hits as f64 / test.len() as f64;
        assert!(acc > 0.99, "nearest-centroid accuracy {}", acc);
    }

    #[test]
    fn noiseless_retrieval_puts_gold_first_under_bm25() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RetrievalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let paths = generate_synthetic(&SyntheticTask::Retrieval(cfg), dir.path(), &mut rng).unwrap();
        let answers = load_answers(&paths.answers).unwrap();
        let test = load_qa(&paths.qa_test, &answers).unwrap();
        let index = InvertedIndex::build(&answers).unwrap();
        for p in &test {
            let toks: Vec<&str> = p.question.iter().map(|s| s.as_str()).collect();
            let ranked = index.rank(&toks, 1);
            assert_eq!(ranked[0].0, p.answer_id, "question {}", p.qid);
        }
    }

    #[test]
    fn paraphrase_removes_all_word_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RetrievalConfig { paraphrase: true, groups: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let paths = generate_synthetic(&SyntheticTask::Retrieval(cfg), dir.path(), &mut rng).unwrap();
        let answers = load_answers(&paths.answers).unwrap();
        let test = load_qa(&paths.qa_test, &answers).unwrap();
        let answer_vocab: std::collections::HashSet<&str> =
            answers.iter().flat_map(|(_, toks)| toks.iter().map(|s| s.as_str())).collect();
        for p in &test {
            for t in &p.question {
                assert!(!answer_vocab.contains(t.as_str()), "token {} leaks into answers", t);
            }
        }
    }

    #[test]
    fn fixed_seed_gives_byte_identical_files() {
        let cfg = SyntheticTask::Fewshot(FewshotConfig {
            train_per_class: 3,
            test_per_class: 2,
            ..Default::default()
        });
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = generate_synthetic(&cfg, d1.path(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let p2 = generate_synthetic(&cfg, d2.path(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (a, b) in [
            (&p1.answers, &p2.answers),
            (&p1.qa_train, &p2.qa_train),
            (&p1.qa_test, &p2.qa_test),
            (p1.embeddings.as_ref().unwrap(), p2.embeddings.as_ref().unwrap()),
        ] {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }
}
