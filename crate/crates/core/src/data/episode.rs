//! Episode construction for one-shot labeler training.
//!
//! An episode presents `shots` labeled support items per class in shuffled
//! order, then a block of shuffled query items disjoint from the support.

use rand::Rng;

use crate::data::{shuffled, LabelClass, NUM_CLASSES};
use crate::error::{Error, Result};

/// One labeled item: a fixed-size input vector and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    pub input: Vec<f64>,
    pub label: LabelClass,
}

/// A support prefix plus query block. Support composition is exactly
/// `shots` items per class (zero is allowed, giving a query-only episode).
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<EpisodeItem>,
    pub queries: Vec<EpisodeItem>,
}

impl Episode {
    /// Validates the per-class support composition.
    pub fn new(support: Vec<EpisodeItem>, queries: Vec<EpisodeItem>) -> Result<Self> {
        if support.len() % NUM_CLASSES != 0 {
            return Err(Error::invalid(
                "Episode::new",
                format!("support size {} is not a multiple of {}", support.len(), NUM_CLASSES),
            ));
        }
        let shots = support.len() / NUM_CLASSES;
        for class in LabelClass::ALL {
            let count = support.iter().filter(|it| it.label == class).count();
            if count != shots {
                return Err(Error::invalid(
                    "Episode::new",
                    format!("class {} has {} support items, expected {}", class, count, shots),
                ));
            }
        }
        if queries.is_empty() {
            return Err(Error::invalid("Episode::new", "no query items"));
        }
        Ok(Episode { support, queries })
    }

    pub fn shots(&self) -> usize {
        self.support.len() / NUM_CLASSES
    }

    pub fn steps(&self) -> usize {
        self.support.len() + self.queries.len()
    }

    /// Support followed by queries, the order the model consumes.
    pub fn items(&self) -> impl Iterator<Item = &EpisodeItem> {
        self.support.iter().chain(self.queries.iter())
    }

    /// Applies a class permutation consistently to every item (training
    /// augmentation so the classifier binds labels within the episode).
    pub fn permute_classes(&self, perm: &[usize; NUM_CLASSES]) -> Episode {
        let map = |it: &EpisodeItem| EpisodeItem {
            input: it.input.clone(),
            label: LabelClass::from_index(perm[it.label.index()]).expect("permutation stays in range"),
        };
        Episode {
            support: self.support.iter().map(map).collect(),
            queries: self.queries.iter().map(map).collect(),
        }
    }
}

/// Samples an episode from a labeled pool: `shots` support plus
/// `queries_per_class` query items per class, all drawn without replacement
/// so support and queries are disjoint.
pub fn sample_episode(
    pool: &[EpisodeItem],
    shots: usize,
    queries_per_class: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let needed = shots + queries_per_class;
    let mut support = Vec::with_capacity(shots * NUM_CLASSES);
    let mut queries = Vec::with_capacity(queries_per_class * NUM_CLASSES);
    for class in LabelClass::ALL {
        let members: Vec<&EpisodeItem> = pool.iter().filter(|it| it.label == class).collect();
        if members.len() < needed {
            return Err(Error::InsufficientClassItems {
                class: class.name().to_string(),
                available: members.len(),
                needed,
            });
        }
        let picks = shuffled(&members, rng);
        for it in &picks[..shots] {
            support.push((*it).clone());
        }
        for it in &picks[shots..needed] {
            queries.push((*it).clone());
        }
    }
    let support = shuffled(&support, rng);
    let queries = shuffled(&queries, rng);
    Episode::new(support, queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(per_class: usize) -> Vec<EpisodeItem> {
        let mut items = Vec::new();
        for class in LabelClass::ALL {
            for i in 0..per_class {
                items.push(EpisodeItem {
                    input: vec![class.index() as f64, i as f64],
                    label: class,
                });
            }
        }
        items
    }

    #[test]
    fn ten_shot_episode_has_fifty_support_items() {
        let p = pool(12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&p, 10, 2, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 50);
        assert_eq!(ep.queries.len(), 10);
        assert_eq!(ep.shots(), 10);
    }

    #[test]
    fn one_shot_episode_has_one_per_class() {
        let p = pool(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&p, 1, 1, &mut rng).unwrap();
        for class in LabelClass::ALL {
            assert_eq!(ep.support.iter().filter(|it| it.label == class).count(), 1);
        }
    }

    #[test]
    fn same_seed_gives_identical_episode() {
        let p = pool(6);
        let a = sample_episode(&p, 2, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_episode(&p, 2, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn insufficient_class_named_in_error() {
        let mut p = pool(4);
        p.retain(|it| it.label != LabelClass::Claim || it.input[1] < 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_episode(&p, 2, 1, &mut rng).unwrap_err().to_string();
        assert!(err.contains("claim"), "{}", err);
    }

    #[test]
    fn support_and_queries_disjoint() {
        let p = pool(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&p, 3, 2, &mut rng).unwrap();
        for q in &ep.queries {
            assert!(!ep.support.contains(q));
        }
    }

    #[test]
    fn permutation_relabels_consistently() {
        let p = pool(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&p, 1, 1, &mut rng).unwrap();
        let perm = [1, 2, 3, 4, 0];
        let permuted = ep.permute_classes(&perm);
        for (orig, new) in ep.items().zip(permuted.items()) {
            assert_eq!(new.label.index(), perm[orig.label.index()]);
            assert_eq!(new.input, orig.input);
        }
    }
}
