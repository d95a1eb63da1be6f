//! Max-margin training and ranking for the gated convolutional encoder.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cgnn::{encode_on_tape, rank_answers, CgnnModel};
use crate::data::{encode_sequence, negative_sample, AnswerSet, LabelClass, QaPair};
use crate::error::{Error, Result};
use crate::tensor::adagrad::AdaGradState;
use crate::tensor::tape::Tape;

#[derive(Debug, Clone)]
pub struct TrainRetrieverOpts {
    pub epochs: usize,
    /// False answers sampled per positive pair.
    pub negatives: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Train on the loss exactly as printed instead of the standard
    /// ranking hinge (comparison mode).
    pub paper_literal_loss: bool,
}

impl Default for TrainRetrieverOpts {
    fn default() -> Self {
        TrainRetrieverOpts {
            epochs: 30,
            negatives: 20,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            paper_literal_loss: false,
        }
    }
}

/// One line of the loss trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Trains the encoder with the max-margin objective: one optimizer step per
/// QA pair, `negatives` sampled false answers each. `labels`, when given,
/// supplies the class attached to each question (the map is prepared once by
/// the caller, from gold annotations or a labeler).
///
/// Aborts with the offending epoch if the loss stops being finite.
pub fn train_retriever(
    model: &mut CgnnModel,
    answers: &AnswerSet,
    pairs: &[QaPair],
    labels: Option<&HashMap<String, LabelClass>>,
    opts: &TrainRetrieverOpts,
    rng: &mut impl Rng,
) -> Result<Vec<EpochRecord>> {
    if pairs.is_empty() {
        return Err(Error::invalid("train_retriever", "no training pairs"));
    }
    if opts.negatives >= answers.len() {
        return Err(Error::invalid(
            "train_retriever",
            format!("{} negatives requested with only {} answers", opts.negatives, answers.len()),
        ));
    }
    let n_max = model.config.n_max;
    let question_indices: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| {
            let refs: Vec<&str> = p.question.iter().map(|s| s.as_str()).collect();
            encode_sequence(&refs, &model.vocab, n_max)
        })
        .collect::<Result<_>>()?;
    let answer_indices: HashMap<&str, Vec<usize>> = answers
        .iter()
        .map(|(id, toks)| {
            let refs: Vec<&str> = toks.iter().map(|s| s.as_str()).collect();
            Ok((id, encode_sequence(&refs, &model.vocab, n_max)?))
        })
        .collect::<Result<_>>()?;

    let mut optimizer = AdaGradState::new(opts.learning_rate, opts.weight_decay)?;
    let mut trace = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for (pi, pair) in pairs.iter().enumerate() {
            let negatives = negative_sample(pair, answers, opts.negatives, rng)?;
            let label = labels.and_then(|m| m.get(&pair.qid).copied());

            let mut tape = Tape::new();
            let vars = model.vars(&mut tape);
            let q = encode_on_tape(&mut tape, &vars, &model.config, &question_indices[pi], label, Some(&mut *rng))?;
            let pos = encode_on_tape(
                &mut tape,
                &vars,
                &model.config,
                &answer_indices[pair.answer_id.as_str()],
                None,
                Some(&mut *rng),
            )?;
            let pos_score = tape.cosine(q.pooled, pos.pooled)?;

            let mut terms = Vec::with_capacity(negatives.len());
            for neg_id in &negatives {
                let neg = encode_on_tape(
                    &mut tape,
                    &vars,
                    &model.config,
                    &answer_indices[neg_id.as_str()],
                    None,
                    Some(&mut *rng),
                )?;
                let neg_score = tape.cosine(q.pooled, neg.pooled)?;
                if opts.paper_literal_loss {
                    let diff = tape.sub(pos_score, neg_score)?;
                    terms.push(tape.affine(diff, 1.0, model.config.margin));
                } else {
                    let diff = tape.sub(neg_score, pos_score)?;
                    let shifted = tape.affine(diff, 1.0, model.config.margin);
                    terms.push(tape.relu(shifted));
                }
            }
            let loss = if opts.paper_literal_loss {
                let stacked = tape.concat(&terms, 0)?;
                let row = tape.reshape(stacked, vec![1, terms.len()])?;
                let max = tape.max_pool_rows(row)?;
                tape.sum(max)
            } else {
                let stacked = tape.concat(&terms, 0)?;
                tape.sum(stacked)
            };
            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1 });
            }
            loss_sum += loss_val;

            tape.backward(loss)?;
            apply_gradients(model, &tape, &vars, &mut optimizer)?;
        }
        let mean_loss = loss_sum / pairs.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1 });
        }
        trace.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(trace)
}

fn apply_gradients(
    model: &mut CgnnModel,
    tape: &Tape,
    vars: &super::CgnnVars,
    optimizer: &mut AdaGradState,
) -> Result<()> {
    let mut ordered = vec![vars.emb];
    for &(w, b) in &vars.filters {
        ordered.push(w);
        ordered.push(b);
    }
    ordered.extend([
        vars.gate_in_w,
        vars.gate_in_b,
        vars.gate_forget_w,
        vars.gate_forget_b,
        vars.gate_out_w,
        vars.gate_out_b,
        vars.cell_bias,
    ]);
    let params = model.named_params_mut();
    debug_assert_eq!(params.len(), ordered.len());
    for ((name, tensor, decay), var) in params.into_iter().zip(ordered) {
        if let Some(grad) = tape.grad(var) {
            optimizer.step_param(&name, tensor, grad, decay)?;
        }
    }
    Ok(())
}

/// Ranks every answer for every question with a frozen model; answer
/// representations are computed once and reused.
pub fn rank_all(
    model: &CgnnModel,
    answers: &AnswerSet,
    pairs: &[QaPair],
    labels: Option<&HashMap<String, LabelClass>>,
) -> Result<Vec<(String, Vec<String>)>> {
    let reps = super::answer_representations(model, answers)?;
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let refs: Vec<&str> = pair.question.iter().map(|s| s.as_str()).collect();
        let indices = encode_sequence(&refs, &model.vocab, model.config.n_max)?;
        let label = labels.and_then(|m| m.get(&pair.qid).copied());
        let enc = model.encode(&indices, label)?;
        let ranked = rank_answers(&enc.representation, &reps);
        out.push((pair.qid.clone(), ranked.into_iter().map(|(id, _)| id).collect()));
    }
    Ok(out)
}

/// Mean reciprocal rank of the gold answer, a training-progress probe.
pub fn mean_reciprocal_rank(
    model: &CgnnModel,
    answers: &AnswerSet,
    pairs: &[QaPair],
    labels: Option<&HashMap<String, LabelClass>>,
) -> Result<f64> {
    let rankings = rank_all(model, answers, pairs, labels)?;
    let mut total = 0.0;
    for ((_, ranked), pair) in rankings.iter().zip(pairs) {
        let rank = ranked
            .iter()
            .position(|id| *id == pair.answer_id)
            .expect("gold answer is always in the candidate set");
        total += 1.0 / (rank + 1) as f64;
    }
    Ok(total / pairs.len() as f64)
}
