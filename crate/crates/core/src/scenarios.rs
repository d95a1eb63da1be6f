//! Fixed tiny-model scenarios for end-to-end gradient verification.
//!
//! Both scenarios build a deterministic model and input set from a seed,
//! define the loss exactly as training computes it (dropout disabled), and
//! hand the parameter list to the central-difference checker. They back the
//! `gradcheck` command and the test suites.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cgnn::{encode_on_tape, Ablation, CgnnConfig, CgnnModel};
use crate::data::{EmbeddingTable, Episode, EpisodeItem, LabelClass, Vocab};
use crate::error::Result;
use crate::ntm::episode::episode_graph;
use crate::ntm::{NtmConfig, NtmModel};
use crate::tensor::gradcheck::{finite_diff_check, CheckedParam, GradCheckConfig, GradCheckReport};
use crate::tensor::tape::Tape;

fn write_params_into_cgnn(model: &mut CgnnModel, params: &[CheckedParam]) {
    for ((_, tensor, _), p) in model.named_params_mut().into_iter().zip(params) {
        tensor.data_mut().copy_from_slice(p.tensor.data());
    }
}

fn write_params_into_ntm(model: &mut NtmModel, params: &[CheckedParam]) {
    for ((_, tensor, _), p) in model.named_params_mut().into_iter().zip(params) {
        tensor.data_mut().copy_from_slice(p.tensor.data());
    }
}

/// Scoring-plus-hinge gradient check on a tiny encoder
/// (d=8, n_max=12, h=6, one width-3 bank, label rows on, 2 negatives).
pub fn check_cgnn(tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let config = CgnnConfig {
        widths: vec![3],
        hidden: 6,
        embedding_dim: 8,
        n_max: 12,
        margin: 0.1,
        label_dims: 5,
        dropout: 0.0,
        ablation: Ablation::Full,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocab::new();
    for i in 0..14 {
        vocab.add(&format!("w{}", i));
    }
    let table = EmbeddingTable::random(vocab.len(), config.embedding_dim, true, &mut rng);
    let template = CgnnModel::init(config.clone(), vocab, table, &mut rng)?;

    let seq = |rng: &mut ChaCha8Rng, real: usize| -> Vec<usize> {
        let mut s: Vec<usize> = (0..real).map(|_| rng.gen_range(2..16)).collect();
        s.resize(config.n_max, 0);
        s
    };
    let question = seq(&mut rng, 7);
    let positive = seq(&mut rng, 9);
    let negatives = [seq(&mut rng, 8), seq(&mut rng, 6)];
    let label = Some(LabelClass::Cause);

    let loss_of = |model: &CgnnModel| -> Result<(f64, Option<(Tape, Vec<crate::tensor::tape::Var>)>)> {
        let mut tape = Tape::new();
        let vars = model.vars(&mut tape);
        let q = encode_on_tape(&mut tape, &vars, &model.config, &question, label, None::<&mut ChaCha8Rng>)?;
        let pos = encode_on_tape(&mut tape, &vars, &model.config, &positive, None, None::<&mut ChaCha8Rng>)?;
        let pos_score = tape.cosine(q.pooled, pos.pooled)?;
        let mut terms = Vec::new();
        for neg_idx in &negatives {
            let neg = encode_on_tape(&mut tape, &vars, &model.config, neg_idx, None, None::<&mut ChaCha8Rng>)?;
            let neg_score = tape.cosine(q.pooled, neg.pooled)?;
            let diff = tape.sub(neg_score, pos_score)?;
            let shifted = tape.affine(diff, 1.0, model.config.margin);
            terms.push(tape.relu(shifted));
        }
        let stacked = tape.concat(&terms, 0)?;
        let loss = tape.sum(stacked);
        let value = tape.value(loss)[0];
        tape.backward(loss)?;
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
        Ok((value, Some((tape, ordered))))
    };

    let mut params: Vec<CheckedParam> = template
        .named_params()
        .into_iter()
        .map(|(name, tensor, _)| {
            let frozen = if name == "embedding.table" { template.config.embedding_dim } else { 0 };
            CheckedParam::with_frozen_prefix(name, tensor.clone(), frozen)
        })
        .collect();

    let mut scratch = template.clone();
    let cfg = GradCheckConfig { tolerance, seed, ..Default::default() };
    finite_diff_check(
        &mut params,
        |ps| {
            write_params_into_cgnn(&mut scratch, ps);
            Ok(loss_of(&scratch)?.0)
        },
        |ps| {
            let mut model = template.clone();
            write_params_into_cgnn(&mut model, ps);
            let (_, tape_and_vars) = loss_of(&model)?;
            let (tape, ordered) = tape_and_vars.expect("gradient pass always builds the tape");
            Ok(ordered
                .iter()
                .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
                .collect())
        },
        &cfg,
    )
}

/// Three-step episode gradient check on a tiny labeler
/// (N=8 slots, M=10 width, s=6 controller, d=4 inputs).
pub fn check_ntm(tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let config = NtmConfig {
        controller_size: 6,
        read_heads: 2,
        memory_slots: 8,
        memory_width: 10,
        gamma: 0.95,
        input_dim: 4,
        learning_rate: 1e-3,
        pre_write_erase: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = NtmModel::init(config, &mut rng)?;

    let classes = [LabelClass::Fact, LabelClass::Cause, LabelClass::Fact];
    let queries: Vec<EpisodeItem> = classes
        .iter()
        .map(|&label| EpisodeItem {
            input: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label,
        })
        .collect();
    let episode = Episode::new(vec![], queries)?;

    let loss_of = |model: &NtmModel| -> Result<(f64, Tape, Vec<crate::tensor::tape::Var>)> {
        let mut tape = Tape::new();
        let vars = model.vars(&mut tape);
        let graph = episode_graph(&mut tape, &vars, model, &episode)?;
        let value = tape.value(graph.loss)[0];
        tape.backward(graph.loss)?;
        let ordered = NtmModel::ordered_vars(&vars);
        Ok((value, tape, ordered))
    };

    let mut params: Vec<CheckedParam> = template
        .named_params()
        .into_iter()
        .map(|(name, tensor, _)| CheckedParam::new(name, tensor.clone()))
        .collect();

    let mut scratch = template.clone();
    let cfg = GradCheckConfig { tolerance, seed, ..Default::default() };
    finite_diff_check(
        &mut params,
        |ps| {
            write_params_into_ntm(&mut scratch, ps);
            Ok(loss_of(&scratch)?.0)
        },
        |ps| {
            let mut model = template.clone();
            write_params_into_ntm(&mut model, ps);
            let (_, tape, ordered) = loss_of(&model)?;
            Ok(ordered
                .iter()
                .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
                .collect())
        },
        &cfg,
    )
}
