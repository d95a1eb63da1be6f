//! Memory-augmented one-shot question-type labeler.
//!
//! An LSTM controller drives `r` read/write heads over an external `N x M`
//! memory. Reads are content-addressed: cosine similarity between a projected
//! key and every memory row, softmax-normalized. Writes blend the previous
//! read weights with a one-hot mask over the least-used slots (LRUA), gated
//! by a learned scalar. Usage weights decay geometrically and accumulate the
//! read and write weights of every step.
//!
//! Symbol note: the LSTM output gate and the usage weights are distinct
//! state, as are the LSTM cell and the write content vector; they live in
//! separate fields here even where source formulations reuse letters.

pub mod episode;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NtmConfig {
    /// Controller (LSTM) hidden size.
    pub controller_size: usize,
    /// Read/write head count.
    pub read_heads: usize,
    /// Memory slots (N).
    pub memory_slots: usize,
    /// Memory row width (M).
    pub memory_width: usize,
    /// Usage decay.
    pub gamma: f64,
    /// Dimension of the per-question input vector (label one-hot appended
    /// internally, so the controller sees `input_dim + 5`).
    pub input_dim: usize,
    pub learning_rate: f64,
    /// Fully erase each head's least-used slot before writing whenever the
    /// write blend favors the least-used side.
    pub pre_write_erase: bool,
}

impl Default for NtmConfig {
    fn default() -> Self {
        NtmConfig {
            controller_size: 200,
            read_heads: 4,
            memory_slots: 128,
            memory_width: 100,
            gamma: 0.95,
            input_dim: 200,
            learning_rate: 1e-3,
            pre_write_erase: true,
        }
    }
}

impl NtmConfig {
    pub fn controller_input(&self) -> usize {
        self.input_dim + NUM_CLASSES
    }

    pub fn classifier_input(&self) -> usize {
        self.controller_size + self.read_heads * self.memory_width
    }

    fn validate(&self) -> Result<()> {
        if self.read_heads < 1 || self.memory_slots < self.read_heads {
            return Err(Error::invalid("NtmConfig", "need memory_slots >= read_heads >= 1"));
        }
        if self.memory_width < 1 || self.controller_size < 1 || self.input_dim < 1 {
            return Err(Error::invalid("NtmConfig", "memory_width, controller_size, input_dim must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("NtmConfig", "gamma must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One head's projections from the controller state.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// Key projection `[M, s]` (linear).
    pub key_w: Tensor,
    /// Erase projection `[M, s]` + bias, sigmoid-activated.
    pub erase_w: Tensor,
    pub erase_b: Tensor,
    /// Content projection `[M, s]` + bias, tanh-activated.
    pub content_w: Tensor,
    pub content_b: Tensor,
    /// Write-gate projection `[s]` + scalar bias.
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

/// Controller, head, and classifier weights.
#[derive(Debug, Clone)]
pub struct NtmModel {
    pub config: NtmConfig,
    // LSTM gates: input, forget, output, cell candidate.
    pub w_in_i: Tensor,
    pub w_hid_i: Tensor,
    pub b_i: Tensor,
    pub w_in_f: Tensor,
    pub w_hid_f: Tensor,
    pub b_f: Tensor,
    pub w_in_o: Tensor,
    pub w_hid_o: Tensor,
    pub b_o: Tensor,
    pub w_in_c: Tensor,
    pub w_hid_c: Tensor,
    pub b_c: Tensor,
    pub heads: Vec<HeadParams>,
    /// Classifier over `h_t ⊕ m_t`.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl NtmModel {
    pub fn init(config: NtmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let s = config.controller_size;
        let input = config.controller_input();
        let m = config.memory_width;
        let mut gate = Vec::with_capacity(4);
        let mut hid = Vec::with_capacity(4);
        for _ in 0..4 {
            gate.push(Tensor::glorot(vec![s, input], input, s, rng));
            hid.push(Tensor::glorot(vec![s, s], s, s, rng));
        }
        // Head biases start in the clean-write regime: the gate favors the
        // least-used slot and the erase head favors full replacement, so
        // early episodes produce one-hot bindings instead of smeared ones.
        let heads = (0..config.read_heads)
            .map(|_| HeadParams {
                key_w: Tensor::glorot(vec![m, s], s, m, rng),
                erase_w: Tensor::glorot(vec![m, s], s, m, rng),
                erase_b: Tensor::filled(vec![m], 2.0),
                content_w: Tensor::glorot(vec![m, s], s, m, rng),
                content_b: Tensor::zeros(vec![m]),
                gate_w: Tensor::glorot(vec![s], s, 1, rng),
                gate_b: Tensor::filled(vec![1], -2.0),
            })
            .collect();
        let mut hid = hid.into_iter();
        let mut gate = gate.into_iter();
        Ok(NtmModel {
            w_in_i: gate.next().unwrap(),
            w_hid_i: hid.next().unwrap(),
            b_i: Tensor::zeros(vec![s]),
            w_in_f: gate.next().unwrap(),
            w_hid_f: hid.next().unwrap(),
            b_f: Tensor::zeros(vec![s]),
            w_in_o: gate.next().unwrap(),
            w_hid_o: hid.next().unwrap(),
            b_o: Tensor::zeros(vec![s]),
            w_in_c: gate.next().unwrap(),
            w_hid_c: hid.next().unwrap(),
            b_c: Tensor::zeros(vec![s]),
            heads,
            cls_w: Tensor::glorot(
                vec![NUM_CLASSES, config.classifier_input()],
                config.classifier_input(),
                NUM_CLASSES,
                rng,
            ),
            cls_b: Tensor::zeros(vec![NUM_CLASSES]),
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out: Vec<(String, &Tensor, bool)> = vec![
            ("lstm.in.i".into(), &self.w_in_i, true),
            ("lstm.hid.i".into(), &self.w_hid_i, true),
            ("lstm.b.i".into(), &self.b_i, false),
            ("lstm.in.f".into(), &self.w_in_f, true),
            ("lstm.hid.f".into(), &self.w_hid_f, true),
            ("lstm.b.f".into(), &self.b_f, false),
            ("lstm.in.o".into(), &self.w_in_o, true),
            ("lstm.hid.o".into(), &self.w_hid_o, true),
            ("lstm.b.o".into(), &self.b_o, false),
            ("lstm.in.c".into(), &self.w_in_c, true),
            ("lstm.hid.c".into(), &self.w_hid_c, true),
            ("lstm.b.c".into(), &self.b_c, false),
        ];
        for (j, h) in self.heads.iter().enumerate() {
            out.push((format!("head{}.key.w", j), &h.key_w, true));
            out.push((format!("head{}.erase.w", j), &h.erase_w, true));
            out.push((format!("head{}.erase.b", j), &h.erase_b, false));
            out.push((format!("head{}.content.w", j), &h.content_w, true));
            out.push((format!("head{}.content.b", j), &h.content_b, false));
            out.push((format!("head{}.gate.w", j), &h.gate_w, true));
            out.push((format!("head{}.gate.b", j), &h.gate_b, false));
        }
        out.push(("classifier.w".into(), &self.cls_w, true));
        out.push(("classifier.b".into(), &self.cls_b, false));
        out
    }

    pub(crate) fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut out: Vec<(String, &mut Tensor, bool)> = vec![
            ("lstm.in.i".into(), &mut self.w_in_i, true),
            ("lstm.hid.i".into(), &mut self.w_hid_i, true),
            ("lstm.b.i".into(), &mut self.b_i, false),
            ("lstm.in.f".into(), &mut self.w_in_f, true),
            ("lstm.hid.f".into(), &mut self.w_hid_f, true),
            ("lstm.b.f".into(), &mut self.b_f, false),
            ("lstm.in.o".into(), &mut self.w_in_o, true),
            ("lstm.hid.o".into(), &mut self.w_hid_o, true),
            ("lstm.b.o".into(), &mut self.b_o, false),
            ("lstm.in.c".into(), &mut self.w_in_c, true),
            ("lstm.hid.c".into(), &mut self.w_hid_c, true),
            ("lstm.b.c".into(), &mut self.b_c, false),
        ];
        for (j, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{}.key.w", j), &mut h.key_w, true));
            out.push((format!("head{}.erase.w", j), &mut h.erase_w, true));
            out.push((format!("head{}.erase.b", j), &mut h.erase_b, false));
            out.push((format!("head{}.content.w", j), &mut h.content_w, true));
            out.push((format!("head{}.content.b", j), &mut h.content_b, false));
            out.push((format!("head{}.gate.w", j), &mut h.gate_w, true));
            out.push((format!("head{}.gate.b", j), &mut h.gate_b, false));
        }
        out.push(("classifier.w".into(), &mut self.cls_w, true));
        out.push(("classifier.b".into(), &mut self.cls_b, false));
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::json!({ "config": self.config });
        let mut ck = Checkpoint::new("ntm", config);
        for (name, tensor, _) in self.named_params() {
            ck.push(name, tensor.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("ntm")?;
        let config: NtmConfig = serde_json::from_value(ck.config["config"].clone())?;
        config.validate()?;
        let heads = (0..config.read_heads)
            .map(|j| {
                Ok(HeadParams {
                    key_w: ck.require(&format!("head{}.key.w", j))?.clone(),
                    erase_w: ck.require(&format!("head{}.erase.w", j))?.clone(),
                    erase_b: ck.require(&format!("head{}.erase.b", j))?.clone(),
                    content_w: ck.require(&format!("head{}.content.w", j))?.clone(),
                    content_b: ck.require(&format!("head{}.content.b", j))?.clone(),
                    gate_w: ck.require(&format!("head{}.gate.w", j))?.clone(),
                    gate_b: ck.require(&format!("head{}.gate.b", j))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NtmModel {
            w_in_i: ck.require("lstm.in.i")?.clone(),
            w_hid_i: ck.require("lstm.hid.i")?.clone(),
            b_i: ck.require("lstm.b.i")?.clone(),
            w_in_f: ck.require("lstm.in.f")?.clone(),
            w_hid_f: ck.require("lstm.hid.f")?.clone(),
            b_f: ck.require("lstm.b.f")?.clone(),
            w_in_o: ck.require("lstm.in.o")?.clone(),
            w_hid_o: ck.require("lstm.hid.o")?.clone(),
            b_o: ck.require("lstm.b.o")?.clone(),
            w_in_c: ck.require("lstm.in.c")?.clone(),
            w_hid_c: ck.require("lstm.hid.c")?.clone(),
            b_c: ck.require("lstm.b.c")?.clone(),
            heads,
            cls_w: ck.require("classifier.w")?.clone(),
            cls_b: ck.require("classifier.b")?.clone(),
            config,
        })
    }
}

pub(crate) struct HeadVars {
    pub key_w: Var,
    pub erase_w: Var,
    pub erase_b: Var,
    pub content_w: Var,
    pub content_b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
}

pub(crate) struct NtmVars {
    pub w_in: [Var; 4],
    pub w_hid: [Var; 4],
    pub b: [Var; 4],
    pub heads: Vec<HeadVars>,
    pub cls_w: Var,
    pub cls_b: Var,
}

impl NtmModel {
    pub(crate) fn vars(&self, tape: &mut Tape) -> NtmVars {
        NtmVars {
            w_in: [
                tape.leaf(&self.w_in_i, true),
                tape.leaf(&self.w_in_f, true),
                tape.leaf(&self.w_in_o, true),
                tape.leaf(&self.w_in_c, true),
            ],
            w_hid: [
                tape.leaf(&self.w_hid_i, true),
                tape.leaf(&self.w_hid_f, true),
                tape.leaf(&self.w_hid_o, true),
                tape.leaf(&self.w_hid_c, true),
            ],
            b: [
                tape.leaf(&self.b_i, true),
                tape.leaf(&self.b_f, true),
                tape.leaf(&self.b_o, true),
                tape.leaf(&self.b_c, true),
            ],
            heads: self
                .heads
                .iter()
                .map(|h| HeadVars {
                    key_w: tape.leaf(&h.key_w, true),
                    erase_w: tape.leaf(&h.erase_w, true),
                    erase_b: tape.leaf(&h.erase_b, true),
                    content_w: tape.leaf(&h.content_w, true),
                    content_b: tape.leaf(&h.content_b, true),
                    gate_w: tape.leaf(&h.gate_w, true),
                    gate_b: tape.leaf(&h.gate_b, true),
                })
                .collect(),
            cls_w: tape.leaf(&self.cls_w, true),
            cls_b: tape.leaf(&self.cls_b, true),
        }
    }

    /// Gradient harvesting order; must match [`NtmModel::named_params_mut`].
    pub(crate) fn ordered_vars(vars: &NtmVars) -> Vec<Var> {
        let mut out = Vec::new();
        for g in 0..4 {
            out.push(vars.w_in[g]);
            out.push(vars.w_hid[g]);
            out.push(vars.b[g]);
        }
        for h in &vars.heads {
            out.extend([h.key_w, h.erase_w, h.erase_b, h.content_w, h.content_b, h.gate_w, h.gate_b]);
        }
        out.push(vars.cls_w);
        out.push(vars.cls_b);
        out
    }
}

/// One LSTM update. Returns `(hidden, cell)`.
pub(crate) fn controller_step(
    tape: &mut Tape,
    vars: &NtmVars,
    input: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let pre = |tape: &mut Tape, g: usize, input: Var, h_prev: Var| -> Result<Var> {
        let a = tape.matvec(vars.w_in[g], input)?;
        let b = tape.matvec(vars.w_hid[g], h_prev)?;
        let ab = tape.add(a, b)?;
        tape.add(ab, vars.b[g])
    };
    let gate_in = {
        let p = pre(tape, 0, input, h_prev)?;
        tape.sigmoid(p)
    };
    let gate_forget = {
        let p = pre(tape, 1, input, h_prev)?;
        tape.sigmoid(p)
    };
    let gate_out = {
        let p = pre(tape, 2, input, h_prev)?;
        tape.sigmoid(p)
    };
    let candidate = {
        let p = pre(tape, 3, input, h_prev)?;
        tape.tanh(p)
    };
    let kept = tape.mul(gate_forget, c_prev)?;
    let added = tape.mul(gate_in, candidate)?;
    let cell = tape.add(kept, added)?;
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(squashed, gate_out)?;
    Ok((hidden, cell))
}

/// Content-addressed read: cosine scores against each row, softmaxed into
/// read weights, then the weighted row sum. Returns `(weights, read_vector)`.
pub(crate) fn read_memory(tape: &mut Tape, memory: Var, key: Var) -> Result<(Var, Var)> {
    let scores = tape.cosine_rows(memory, key)?;
    let weights = tape.softmax(scores)?;
    let read = tape.vecmat(weights, memory)?;
    Ok((weights, read))
}

/// LRUA write weights: `sigmoid(g) * r_prev + (1 - sigmoid(g)) * v_prev`.
/// `gate` is the raw `[1]` scalar; `v_prev` is the head's one-hot least-used
/// mask from the previous step (a constant).
pub(crate) fn write_weights(tape: &mut Tape, r_prev: Var, v_prev: Var, gate: Var) -> Result<Var> {
    let sg = tape.sigmoid(gate);
    let from_reads = tape.scale_by(r_prev, sg)?;
    let inv = tape.affine(sg, -1.0, 1.0);
    let from_least_used = tape.scale_by(v_prev, inv)?;
    tape.add(from_reads, from_least_used)
}

/// Erase-then-add memory update for one head:
/// `M * (1 - w e^T) + w c^T`.
pub(crate) fn write_memory(tape: &mut Tape, memory: Var, w: Var, erase: Var, content: Var) -> Result<Var> {
    let erase_outer = tape.outer(w, erase)?;
    let keep = tape.affine(erase_outer, -1.0, 1.0);
    let kept = tape.mul(memory, keep)?;
    let add_outer = tape.outer(w, content)?;
    tape.add(kept, add_outer)
}

/// Usage decay-and-accumulate: `u = gamma * u_prev + r_sum + w_sum`.
pub fn usage_update(u_prev: &[f64], r_sum: &[f64], w_sum: &[f64], gamma: f64) -> Vec<f64> {
    u_prev
        .iter()
        .zip(r_sum)
        .zip(w_sum)
        .map(|((&u, &r), &w)| gamma * u + r + w)
        .collect()
}

/// Marks the `r` least-used slots (ties to the lowest index). Returns the
/// boolean mask plus the per-head write candidates: head `j` gets the slot
/// with the `j`-th smallest usage.
pub fn least_used_mask(usage: &[f64], heads: usize) -> (Vec<bool>, Vec<usize>) {
    assert!(heads <= usage.len(), "more heads than slots");
    let mut order: Vec<usize> = (0..usage.len()).collect();
    order.sort_by(|&a, &b| usage[a].total_cmp(&usage[b]).then(a.cmp(&b)));
    let slots: Vec<usize> = order[..heads].to_vec();
    let mut mask = vec![false; usage.len()];
    for &s in &slots {
        mask[s] = true;
    }
    (mask, slots)
}
