//! Retrieval and labeling evaluation, plus gate-weight heatmap export.
//!
//! The retrieval protocol is macro-averaged top-k: each question retrieves
//! its top `k` candidates, scores hit/k precision and hit/1 recall against a
//! single gold answer, and the report averages per-question values before
//! forming F1. The protocol name is embedded in every report.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{LabelClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RETRIEVAL_PROTOCOL: &str = "macro-averaged top-k, single gold per question";

/// Per-class slice of a retrieval report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: LabelClass,
    pub questions: usize,
    /// Share of evaluated questions in this class, percent.
    pub proportion: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro-averaged precision/recall/F1 at a cutoff, as percentages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub protocol: String,
    pub k: usize,
    pub question_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Option<Vec<ClassBreakdown>>,
}

/// Exact-match labeling accuracy with a 5x5 confusion matrix
/// (rows = gold, columns = predicted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelingReport {
    pub accuracy: f64,
    pub shots: Option<usize>,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub total: usize,
}

/// One point of an accuracy-versus-shots curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotCurvePoint {
    pub shots: usize,
    pub accuracy: f64,
}

/// Per-token salience record derived from gated-flow output magnitudes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub side: HeatmapSide,
    pub tokens: Vec<String>,
    /// Normalized to max 1 per sequence (unless all activations are zero).
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapSide {
    Question,
    Answer,
}

impl std::fmt::Display for HeatmapSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeatmapSide::Question => "question",
            HeatmapSide::Answer => "answer",
        })
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Computes the macro-averaged top-k report.
///
/// `rankings` maps each question to its full descending candidate order;
/// every qid must have a gold id. When `labels` covers all questions, the
/// report carries a per-class breakdown.
pub fn retrieval_metrics(
    rankings: &[(String, Vec<String>)],
    gold: &HashMap<String, String>,
    labels: Option<&HashMap<String, LabelClass>>,
    k: usize,
) -> Result<RetrievalReport> {
    if k == 0 {
        return Err(Error::invalid("retrieval_metrics", "k must be >= 1"));
    }
    if rankings.is_empty() {
        return Err(Error::invalid("retrieval_metrics", "no rankings supplied"));
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut class_p = [0.0f64; NUM_CLASSES];
    let mut class_r = [0.0f64; NUM_CLASSES];
    let mut class_n = [0usize; NUM_CLASSES];
    let mut all_labeled = labels.is_some();

    for (qid, ranked) in rankings {
        let gold_id = gold
            .get(qid)
            .ok_or_else(|| Error::invalid("retrieval_metrics", format!("question {:?} has no gold answer", qid)))?;
        let hit = ranked.iter().take(k).any(|id| id == gold_id);
        let p = if hit { 1.0 / k as f64 } else { 0.0 };
        let r = if hit { 1.0 } else { 0.0 };
        p_sum += p;
        r_sum += r;
        match labels.and_then(|m| m.get(qid)) {
            Some(&c) => {
                class_p[c.index()] += p;
                class_r[c.index()] += r;
                class_n[c.index()] += 1;
            }
            None => all_labeled = false,
        }
    }

    let n = rankings.len() as f64;
    let precision = 100.0 * p_sum / n;
    let recall = 100.0 * r_sum / n;
    let per_class = if all_labeled {
        Some(
            LabelClass::ALL
                .iter()
                .map(|&c| {
                    let i = c.index();
                    let cn = class_n[i] as f64;
                    let (p, r) = if class_n[i] > 0 {
                        (100.0 * class_p[i] / cn, 100.0 * class_r[i] / cn)
                    } else {
                        (0.0, 0.0)
                    };
                    ClassBreakdown {
                        class: c,
                        questions: class_n[i],
                        proportion: 100.0 * cn / n,
                        precision: p,
                        recall: r,
                        f1: f1_of(p, r),
                    }
                })
                .collect(),
        )
    } else {
        None
    };

    Ok(RetrievalReport {
        protocol: RETRIEVAL_PROTOCOL.to_string(),
        k,
        question_count: rankings.len(),
        precision,
        recall,
        f1: f1_of(precision, recall),
        per_class,
    })
}

/// Exact-match accuracy over aligned prediction/gold lists.
pub fn labeling_accuracy(
    predictions: &[LabelClass],
    gold: &[LabelClass],
    shots: Option<usize>,
) -> Result<LabelingReport> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid(
            "labeling_accuracy",
            format!("{} predictions for {} gold labels", predictions.len(), gold.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("labeling_accuracy", "empty prediction list"));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut hits = 0usize;
    for (p, g) in predictions.iter().zip(gold) {
        confusion[g.index()][p.index()] += 1;
        if p == g {
            hits += 1;
        }
    }
    Ok(LabelingReport {
        accuracy: 100.0 * hits as f64 / gold.len() as f64,
        shots,
        confusion,
        total: gold.len(),
    })
}

/// Runs a trainer at each shot count and collects the resulting accuracies.
pub fn shot_curve(
    mut train_and_eval: impl FnMut(usize) -> Result<f64>,
    shots: &[usize],
) -> Result<Vec<ShotCurvePoint>> {
    let mut out = Vec::with_capacity(shots.len());
    for &s in shots {
        out.push(ShotCurvePoint { shots: s, accuracy: train_and_eval(s)? });
    }
    Ok(out)
}

/// Derives per-token salience from gated feature maps.
///
/// Each map is `(width, [h x (n_max + width - 1)])` — one per filter width,
/// as produced by the encoder. A token at column `j` is covered by the
/// `width` wide-conv positions `j ..= j + width - 1`; its weight is the mean
/// L2 norm of the gated output columns over all covering positions of all
/// widths, normalized so the sequence maximum is 1. Padding columns beyond
/// `tokens.len()` are excluded; an empty token list yields an empty record.
pub fn export_gate_heatmap(
    gated_maps: &[(usize, Tensor)],
    tokens: &[String],
    side: HeatmapSide,
) -> HeatmapRecord {
    if tokens.is_empty() {
        return HeatmapRecord { side, tokens: Vec::new(), weights: Vec::new() };
    }
    let mut weights = vec![0.0f64; tokens.len()];
    for (j, w) in weights.iter_mut().enumerate() {
        let mut total = 0.0;
        let mut positions = 0usize;
        for (width, map) in gated_maps {
            let shape = map.shape();
            let (h, t_out) = (shape[0], shape[1]);
            for t in j..j + width {
                if t >= t_out {
                    continue;
                }
                let mut sq = 0.0;
                for r in 0..h {
                    let v = map.data()[r * t_out + t];
                    sq += v * v;
                }
                total += sq.sqrt();
                positions += 1;
            }
        }
        *w = if positions > 0 { total / positions as f64 } else { 0.0 };
    }
    let max = weights.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for w in &mut weights {
            *w /= max;
        }
    }
    HeatmapRecord { side, tokens: tokens.to_vec(), weights }
}
