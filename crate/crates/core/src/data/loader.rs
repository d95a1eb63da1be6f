//! Line-delimited corpus file loaders.
//!
//! Formats:
//! - answers file: `id<TAB>token token ...`
//! - qa file: `qid<TAB>question tokens<TAB>answer_id[<TAB>label]`
//! - embeddings file: header `V d`, then `token v1 ... vd` per line
//!
//! Every malformed line is rejected with its path and line number.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::data::{AnswerSet, EmbeddingTable, LabelClass, QaPair, Vocab, PAD_TOKEN, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    Ok(BufReader::new(File::open(path)?).lines())
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Loads the answer set, enforcing unique ids and nonempty token lists.
pub fn load_answers(path: &Path) -> Result<AnswerSet> {
    let mut answers = AnswerSet::new();
    for (lineno, line) in open_lines(path)?.enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::MalformedRecord {
            path: path_str(path),
            line: lineno,
            reason: "expected `id<TAB>text`".into(),
        })?;
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        answers.insert(id, tokens).map_err(|e| Error::MalformedRecord {
            path: path_str(path),
            line: lineno,
            reason: e.to_string(),
        })?;
    }
    if answers.is_empty() {
        return Err(Error::invalid("load_answers", format!("{}: no answers", path_str(path))));
    }
    Ok(answers)
}

/// Loads QA pairs, checking that every gold answer id exists in `answers`
/// and that labels, when present, name one of the five classes.
pub fn load_qa(path: &Path, answers: &AnswerSet) -> Result<Vec<QaPair>> {
    let mut pairs = Vec::new();
    for (lineno, line) in open_lines(path)?.enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::MalformedRecord {
                path: path_str(path),
                line: lineno,
                reason: format!("expected 3 or 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let qid = fields[0].trim();
        if qid.is_empty() {
            return Err(Error::MalformedRecord {
                path: path_str(path),
                line: lineno,
                reason: "empty qid".into(),
            });
        }
        let question: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
        let answer_id = fields[2].trim();
        if !answers.contains(answer_id) {
            return Err(Error::IntegrityViolation {
                path: path_str(path),
                line: lineno,
                reason: format!("answer id {:?} not in the answer set", answer_id),
            });
        }
        let label = match fields.get(3) {
            Some(s) if !s.trim().is_empty() => {
                Some(LabelClass::parse(s.trim()).map_err(|e| Error::MalformedRecord {
                    path: path_str(path),
                    line: lineno,
                    reason: e.to_string(),
                })?)
            }
            _ => None,
        };
        pairs.push(QaPair {
            qid: qid.to_string(),
            question,
            answer_id: answer_id.to_string(),
            label,
        });
    }
    Ok(pairs)
}

/// Policy for corpus tokens missing from the embedding file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabPolicy {
    /// Missing tokens map to the unknown index.
    Fixed,
    /// Missing tokens get fresh seeded random rows in `[-0.1, 0.1]`.
    Extend,
}

/// Loads a plain-text embedding file (`V d` header, `token v1 ... vd` rows).
///
/// The vocabulary is the file's tokens plus the reserved padding/unknown
/// entries. Duplicate tokens keep their first index but the last vector wins
/// (with a warning). Under [`VocabPolicy::Extend`], `corpus_tokens` absent
/// from the file are appended with seeded random rows.
pub fn load_embeddings(
    path: &Path,
    policy: VocabPolicy,
    corpus_tokens: &[String],
    rng: &mut impl Rng,
) -> Result<(Vocab, EmbeddingTable)> {
    let mut lines = open_lines(path)?.enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::MalformedRecord {
        path: path_str(path),
        line: 1,
        reason: "missing header".into(),
    })?;
    let header = header?;
    let mut hp = header.split_whitespace();
    let declared: usize = hp
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::MalformedRecord {
            path: path_str(path),
            line: 1,
            reason: "header must be `V d`".into(),
        })?;
    let dim: usize = hp
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::MalformedRecord {
            path: path_str(path),
            line: 1,
            reason: "header must be `V d`".into(),
        })?;
    if dim == 0 {
        return Err(Error::MalformedRecord {
            path: path_str(path),
            line: 1,
            reason: "embedding dimension must be positive".into(),
        });
    }

    let mut vocab = Vocab::new();
    // Row storage starts with the two reserved rows.
    let mut rows: Vec<Vec<f64>> = vec![vec![0.0; dim], vec![0.0; dim]];
    let mut seen = 0usize;
    for (lineno, line) in lines {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or_else(|| Error::MalformedRecord {
            path: path_str(path),
            line: lineno,
            reason: "missing token".into(),
        })?;
        let values: Vec<f64> = parts
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::MalformedRecord {
                    path: path_str(path),
                    line: lineno,
                    reason: format!("bad float {:?}", s),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::MalformedRecord {
                path: path_str(path),
                line: lineno,
                reason: format!("expected {} values, got {}", dim, values.len()),
            });
        }
        if token == PAD_TOKEN {
            log::warn!("{}:{}: ignoring vector for reserved token {:?}", path_str(path), lineno, token);
            continue;
        }
        if token == UNK_TOKEN {
            rows[1] = values;
            continue;
        }
        match vocab.get(token) {
            Some(idx) => {
                log::warn!("{}:{}: duplicate token {:?}; last occurrence wins", path_str(path), lineno, token);
                rows[idx] = values;
            }
            None => {
                let idx = vocab.add(token);
                debug_assert_eq!(idx, rows.len());
                rows.push(values);
            }
        }
    }
    if seen != declared {
        log::warn!(
            "{}: header declares {} vectors but file has {}",
            path_str(path),
            declared,
            seen
        );
    }

    if policy == VocabPolicy::Extend {
        for t in corpus_tokens {
            if vocab.get(t).is_none() && t != PAD_TOKEN && t != UNK_TOKEN {
                let idx = vocab.add(t);
                debug_assert_eq!(idx, rows.len());
                rows.push((0..dim).map(|_| rng.gen_range(-0.1..=0.1)).collect());
            }
        }
    }

    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let table = EmbeddingTable::new(Tensor::new(vec![rows.len(), dim], flat)?, true)?;
    Ok((vocab, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn loads_small_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let ans = write_file(&dir, "answers.tsv", "a1\tthe first answer\na2\tthe second\n");
        let qa = write_file(&dir, "qa.tsv", "q1\twhat is it\ta1\tfact\n");
        let answers = load_answers(&ans).unwrap();
        assert_eq!(answers.len(), 2);
        let pairs = load_qa(&qa, &answers).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].answer_id, "a1");
        assert_eq!(pairs[0].label, Some(LabelClass::Fact));
    }

    #[test]
    fn dangling_answer_id_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        let ans = write_file(&dir, "answers.tsv", "a1\tsomething\n");
        let qa = write_file(&dir, "qa.tsv", "q1\twords\ta9\n");
        let answers = load_answers(&ans).unwrap();
        let err = load_qa(&qa, &answers).unwrap_err().to_string();
        assert!(err.contains("a9"), "error should name the id: {}", err);
        assert!(err.contains(":1"), "error should carry the line: {}", err);
    }

    #[test]
    fn duplicate_answer_id_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let ans = write_file(&dir, "answers.tsv", "a1\tx\na1\ty\n");
        let err = load_answers(&ans).unwrap_err().to_string();
        assert!(err.contains(":2"), "{}", err);
        assert!(err.contains("a1"), "{}", err);
    }

    #[test]
    fn malformed_answer_line_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ans = write_file(&dir, "answers.tsv", "no-tab-here\n");
        assert!(load_answers(&ans).is_err());
    }

    #[test]
    fn bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ans = write_file(&dir, "answers.tsv", "a1\tx\n");
        let qa = write_file(&dir, "qa.tsv", "q1\tw\ta1\tnonsense\n");
        let answers = load_answers(&ans).unwrap();
        assert!(load_qa(&qa, &answers).is_err());
    }

    #[test]
    fn embeddings_reserve_pad_and_unk_rows() {
        let dir = tempfile::tempdir().unwrap();
        let emb = write_file(&dir, "emb.txt", "2 3\nalpha 1 2 3\nbeta 4 5 6\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (vocab, table) = load_embeddings(&emb, VocabPolicy::Fixed, &[], &mut rng).unwrap();
        assert_eq!(vocab.len(), 4);
        assert_eq!(table.rows(), 4);
        assert_eq!(table.dim(), 3);
        assert!(table.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(table.row(vocab.lookup("alpha")), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn duplicate_token_last_occurrence_wins() {
        let dir = tempfile::tempdir().unwrap();
        let emb = write_file(&dir, "emb.txt", "3 2\nw 1 1\nv 2 2\nw 9 9\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (vocab, table) = load_embeddings(&emb, VocabPolicy::Fixed, &[], &mut rng).unwrap();
        assert_eq!(table.row(vocab.lookup("w")), &[9.0, 9.0]);
        assert_eq!(vocab.len(), 4);
    }

    #[test]
    fn inconsistent_dimension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let emb = write_file(&dir, "emb.txt", "2 3\na 1 2 3\nb 4 5\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = load_embeddings(&emb, VocabPolicy::Fixed, &[], &mut rng).unwrap_err();
        assert!(err.to_string().contains(":3"), "{}", err);
    }

    #[test]
    fn extend_policy_appends_corpus_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let emb = write_file(&dir, "emb.txt", "1 2\nknown 1 2\n");
        let corpus = vec!["known".to_string(), "fresh".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (vocab, table) = load_embeddings(&emb, VocabPolicy::Extend, &corpus, &mut rng).unwrap();
        let idx = vocab.get("fresh").expect("fresh token added");
        assert!(table.row(idx).iter().all(|&v| (-0.1..=0.1).contains(&v)));
        assert!(table.row(idx).iter().any(|&v| v != 0.0));

        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let (vocab_f, _) = load_embeddings(&emb, VocabPolicy::Fixed, &corpus, &mut rng2).unwrap();
        assert!(vocab_f.get("fresh").is_none());
    }
}
