//! Episodic forward pass, meta-training loop, and deployment prediction.
//!
//! Episodes use the offset-label presentation: the input at step `t` is the
//! item vector concatenated with the one-hot of the *previous* step's label
//! (zeros at the first step), so the model must fetch the current label from
//! memory rather than read it off the input. The loss is the mean negative
//! log-likelihood over all support and query steps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Episode, EpisodeItem, LabelClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ntm::{
    controller_step, least_used_mask, read_memory, usage_update, write_memory, write_weights,
    NtmModel, NtmVars,
};
use crate::tensor::adagrad::AdaGradState;
use crate::tensor::tape::{Tape, Var};

/// Memory init value (small constant so first-step cosine reads are defined).
pub const MEMORY_INIT: f64 = 1e-6;

/// Per-episode forward results.
#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    /// Class distribution at every step (support then queries).
    pub step_probs: Vec<[f64; NUM_CLASSES]>,
    pub mean_nll: f64,
}

/// Step-level state snapshot used by invariant tests.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub read_weights: Vec<Vec<f64>>,
    pub write_weights: Vec<Vec<f64>>,
    pub usage: Vec<f64>,
    pub least_used: Vec<bool>,
    pub memory_abs_max: f64,
}

pub(crate) struct EpisodeGraph {
    pub loss: Var,
    pub step_probs: Vec<[f64; NUM_CLASSES]>,
    pub traces: Vec<StepTrace>,
}

/// Builds the full differentiable episode graph on `tape`.
///
/// Memory starts at a small constant, usage and read weights uniform, the
/// controller state at zero. Within a step: the write heads fire first
/// (using the previous step's read weights and least-used slots), then the
/// reads address the updated memory, then the classifier consumes
/// `hidden ⊕ reads`. Usage and least-used bookkeeping are value-level (the
/// argmin is not differentiable) and feed the next step's write as constants.
pub(crate) fn episode_graph(
    tape: &mut Tape,
    vars: &NtmVars,
    model: &NtmModel,
    episode: &Episode,
) -> Result<EpisodeGraph> {
    let cfg = &model.config;
    let n = cfg.memory_slots;
    let m = cfg.memory_width;
    let r = cfg.read_heads;
    let s = cfg.controller_size;

    let mut memory = tape.constant(vec![n, m], vec![MEMORY_INIT; n * m])?;
    let mut hidden = tape.constant(vec![s], vec![0.0; s])?;
    let mut cell = tape.constant(vec![s], vec![0.0; s])?;
    let uniform = vec![1.0 / n as f64; n];
    let mut read_w: Vec<Var> = (0..r)
        .map(|_| tape.constant(vec![n], uniform.clone()))
        .collect::<Result<_>>()?;
    let mut usage = uniform.clone();
    let (_, mut lu_slots) = least_used_mask(&usage, r);

    let mut losses = Vec::with_capacity(episode.steps());
    let mut step_probs = Vec::with_capacity(episode.steps());
    let mut traces = Vec::with_capacity(episode.steps());
    let mut prev_label: Option<LabelClass> = None;

    for item in episode.items() {
        if item.input.len() != cfg.input_dim {
            return Err(Error::shape(
                "episode_forward",
                format!("input vectors of length {}", cfg.input_dim),
                format!("{}", item.input.len()),
            ));
        }
        // x_t ⊕ one-hot(y_{t-1}); zero label vector at the first step.
        let mut input = Vec::with_capacity(cfg.controller_input());
        input.extend_from_slice(&item.input);
        match prev_label {
            Some(l) => input.extend_from_slice(&l.one_hot()),
            None => input.extend_from_slice(&[0.0; NUM_CLASSES]),
        }
        let input = tape.constant(vec![cfg.controller_input()], input)?;
        let (h, c) = controller_step(tape, vars, input, hidden, cell)?;
        hidden = h;
        cell = c;

        // Write phase: each head blends previous reads with its least-used
        // slot, optionally erasing that slot first when the blend favors it.
        let mut new_write_w = Vec::with_capacity(r);
        for (j, head) in vars.heads.iter().enumerate() {
            let gate = {
                let d = tape.dot(head.gate_w, hidden)?;
                tape.add(d, head.gate_b)?
            };
            let v_prev: Vec<f64> = (0..n).map(|i| if i == lu_slots[j] { 1.0 } else { 0.0 }).collect();
            let v_prev = tape.constant(vec![n], v_prev)?;
            let w = write_weights(tape, read_w[j], v_prev, gate)?;

            if cfg.pre_write_erase && crate::tensor::tape::sigmoid(tape.value(gate)[0]) < 0.5 {
                let mut mask = vec![1.0; n * m];
                for x in &mut mask[lu_slots[j] * m..(lu_slots[j] + 1) * m] {
                    *x = 0.0;
                }
                let mask = tape.constant(vec![n, m], mask)?;
                memory = tape.mul(memory, mask)?;
            }

            let erase = {
                let p = tape.matvec(head.erase_w, hidden)?;
                let p = tape.add(p, head.erase_b)?;
                tape.sigmoid(p)
            };
            let content = {
                let p = tape.matvec(head.content_w, hidden)?;
                let p = tape.add(p, head.content_b)?;
                tape.tanh(p)
            };
            memory = write_memory(tape, memory, w, erase, content)?;
            new_write_w.push(w);
        }

        // Read phase on the updated memory.
        let mut reads = Vec::with_capacity(r);
        let mut new_read_w = Vec::with_capacity(r);
        for head in &vars.heads {
            let key = tape.matvec(head.key_w, hidden)?;
            let (w, read) = read_memory(tape, memory, key)?;
            new_read_w.push(w);
            reads.push(read);
        }

        let mut output_parts = vec![hidden];
        output_parts.extend(reads.iter().copied());
        let output = tape.concat(&output_parts, 0)?;
        let logits = {
            let p = tape.matvec(vars.cls_w, output)?;
            tape.add(p, vars.cls_b)?
        };
        let probs_vec = crate::tensor::tape::softmax_raw(tape.value(logits));
        let mut probs = [0.0; NUM_CLASSES];
        probs.copy_from_slice(&probs_vec);
        step_probs.push(probs);
        losses.push(tape.cross_entropy(logits, item.label.index())?);

        // Value-level usage/least-used bookkeeping for the next step.
        let mut r_sum = vec![0.0; n];
        let mut w_sum = vec![0.0; n];
        for j in 0..r {
            for (acc, &v) in r_sum.iter_mut().zip(tape.value(new_read_w[j])) {
                *acc += v;
            }
            for (acc, &v) in w_sum.iter_mut().zip(tape.value(new_write_w[j])) {
                *acc += v;
            }
        }
        usage = usage_update(&usage, &r_sum, &w_sum, cfg.gamma);
        let (lu_mask, slots) = least_used_mask(&usage, r);
        lu_slots = slots;

        traces.push(StepTrace {
            read_weights: new_read_w.iter().map(|&w| tape.value(w).to_vec()).collect(),
            write_weights: new_write_w.iter().map(|&w| tape.value(w).to_vec()).collect(),
            usage: usage.clone(),
            least_used: lu_mask,
            memory_abs_max: tape.value(memory).iter().fold(0.0f64, |a, &v| a.max(v.abs())),
        });

        read_w = new_read_w;
        prev_label = Some(item.label);
    }

    let stacked = tape.concat(&losses, 0)?;
    let total = tape.sum(stacked);
    let loss = tape.affine(total, 1.0 / episode.steps() as f64, 0.0);
    Ok(EpisodeGraph { loss, step_probs, traces })
}

/// Pure forward pass: per-step class distributions and the mean NLL.
pub fn episode_forward(model: &NtmModel, episode: &Episode) -> Result<EpisodeOutput> {
    let mut tape = Tape::new();
    let vars = model.vars(&mut tape);
    let graph = episode_graph(&mut tape, &vars, model, episode)?;
    Ok(EpisodeOutput {
        step_probs: graph.step_probs,
        mean_nll: tape.value(graph.loss)[0],
    })
}

/// Forward pass that also returns per-step head/usage snapshots.
pub fn episode_forward_traced(model: &NtmModel, episode: &Episode) -> Result<(EpisodeOutput, Vec<StepTrace>)> {
    let mut tape = Tape::new();
    let vars = model.vars(&mut tape);
    let graph = episode_graph(&mut tape, &vars, model, episode)?;
    Ok((
        EpisodeOutput {
            step_probs: graph.step_probs,
            mean_nll: tape.value(graph.loss)[0],
        },
        graph.traces,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainLabelerOpts {
    pub shots: usize,
    pub episodes: usize,
    pub queries_per_class: usize,
    /// Held-out accuracy is appended to the curve every this many episodes.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Random class-permutation augmentation per training episode.
    pub permute_classes: bool,
}

impl Default for TrainLabelerOpts {
    fn default() -> Self {
        TrainLabelerOpts {
            shots: 10,
            episodes: 2000,
            queries_per_class: 1,
            eval_every: 200,
            eval_episodes: 20,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            permute_classes: true,
        }
    }
}

/// One line of the accuracy curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRecord {
    pub episode_index: usize,
    pub shots: usize,
    pub held_out_accuracy: f64,
}

/// Episodic meta-training with AdaGrad. Held-out accuracy is measured on
/// `eval_pool` episodes (falling back to the training pool) and recorded
/// periodically plus once at the end. Aborts if the loss stops being finite.
pub fn train_labeler(
    model: &mut NtmModel,
    pool: &[EpisodeItem],
    eval_pool: Option<&[EpisodeItem]>,
    opts: &TrainLabelerOpts,
    rng: &mut impl Rng,
) -> Result<Vec<CurveRecord>> {
    let mut optimizer = AdaGradState::new(opts.learning_rate, opts.weight_decay)?;
    let mut curve = Vec::new();
    let held_out = eval_pool.unwrap_or(pool);

    for index in 0..opts.episodes {
        let mut episode = sample_episode(pool, opts.shots, opts.queries_per_class, rng)?;
        if opts.permute_classes {
            let mut perm = [0usize, 1, 2, 3, 4];
            perm.shuffle(rng);
            episode = episode.permute_classes(&perm);
        }

        let mut tape = Tape::new();
        let vars = model.vars(&mut tape);
        let graph = episode_graph(&mut tape, &vars, model, &episode)?;
        let loss_val = tape.value(graph.loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::DivergedEpisode { episode: index + 1 });
        }
        tape.backward(graph.loss)?;

        let ordered = NtmModel::ordered_vars(&vars);
        let params = model.named_params_mut();
        debug_assert_eq!(params.len(), ordered.len());
        for ((name, tensor, decay), var) in params.into_iter().zip(ordered) {
            if let Some(grad) = tape.grad(var) {
                optimizer.step_param(&name, tensor, grad, decay)?;
            }
        }

        let at_checkpoint = (index + 1) % opts.eval_every == 0 || index + 1 == opts.episodes;
        if at_checkpoint {
            let eval_seed: u64 = rng.gen();
            let accuracy = evaluate_episodes(
                model,
                held_out,
                opts.shots,
                opts.queries_per_class,
                opts.eval_episodes,
                eval_seed,
            )?;
            curve.push(CurveRecord {
                episode_index: index + 1,
                shots: opts.shots,
                held_out_accuracy: accuracy,
            });
        }
    }
    Ok(curve)
}

/// Mean query-step accuracy over freshly sampled episodes from `pool`.
pub fn evaluate_episodes(
    model: &NtmModel,
    pool: &[EpisodeItem],
    shots: usize,
    queries_per_class: usize,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..episodes {
        let episode = sample_episode(pool, shots, queries_per_class, &mut rng)?;
        let out = episode_forward(model, &episode)?;
        let query_probs = &out.step_probs[episode.support.len()..];
        for (probs, item) in query_probs.iter().zip(&episode.queries) {
            let pred = argmax(probs);
            if pred == item.label.index() {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Labels one question by replaying the labeled pool as the episode prefix
/// (in a seeded order) and predicting at the final query step.
///
/// Uneven pools are equalized by trimming each class to the smallest
/// per-class count so the support composition invariant holds. With
/// `support_replay = false` the prefix is skipped and the model predicts
/// from its trained weights alone.
pub fn predict_label(
    model: &NtmModel,
    pool: &[EpisodeItem],
    question: &[f64],
    support_replay: bool,
    seed: u64,
) -> Result<LabelClass> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = if support_replay {
        let per_class_min = LabelClass::ALL
            .iter()
            .map(|&c| pool.iter().filter(|it| it.label == c).count())
            .min()
            .unwrap_or(0);
        let mut support = Vec::with_capacity(per_class_min * NUM_CLASSES);
        for class in LabelClass::ALL {
            support.extend(pool.iter().filter(|it| it.label == class).take(per_class_min).cloned());
        }
        support.shuffle(&mut rng);
        support
    } else {
        Vec::new()
    };
    let query = EpisodeItem {
        input: question.to_vec(),
        // Placeholder; prediction reads the distribution, not the loss.
        label: LabelClass::Background,
    };
    let episode = Episode::new(support, vec![query])?;
    let out = episode_forward(model, &episode)?;
    let probs = out.step_probs.last().expect("episode has at least the query step");
    Ok(LabelClass::from_index(argmax(probs)).expect("argmax over 5 classes"))
}

pub(crate) fn argmax(probs: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for i in 1..NUM_CLASSES {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best
}
