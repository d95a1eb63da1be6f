//! Gated convolutional sentence encoder and cosine scorer.
//!
//! Pipeline per sequence: embedding lookup -> optional label-row injection ->
//! dropout (training only) -> per filter width: wide convolution with tanh ->
//! gated flow -> one-max-pooling -> concatenation over widths. Questions and
//! answers share every parameter; the label rows are appended per token on
//! the question side and are structurally zero on the answer side, so shared
//! filters stay shape-compatible.
//!
//! The gated flow runs left to right over convolution output positions. All
//! three gates are computed from the current position's features alone:
//!
//! ```text
//! g_i[t], g_f[t], g_o[t] = sigmoid(W_{i,f,o} c[:,t] + b_{i,f,o})
//! cell[0] = 0
//! cell[t] = cell[t-1] * g_i[t] + g_f[t] * (c[:,t] + w_cell)
//! out[t]  = tanh(cell[t]) * g_o[t]
//! ```
//!
//! Ablations: `single_gate` ties `g_i = 1 - g_f` and fixes `g_o = 1`
//! (highway-style carry/transform); `gates_off` passes the feature map
//! through unchanged.

pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{EmbeddingTable, LabelClass, Vocab, NUM_CLASSES, PAD_INDEX};
use crate::error::{Error, Result};
use crate::tensor::tape::{cosine_raw, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    SingleGate,
    GatesOff,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "single_gate" => Ok(Ablation::SingleGate),
            "gates_off" => Ok(Ablation::GatesOff),
            other => Err(Error::invalid("ablation", format!("unknown ablation {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgnnConfig {
    /// Filter widths; one bank of `hidden` filters per width.
    pub widths: Vec<usize>,
    /// Channels per width (h).
    pub hidden: usize,
    /// Word-embedding dimension (d).
    pub embedding_dim: usize,
    /// Fixed sequence length after truncation/padding.
    pub n_max: usize,
    /// Ranking margin.
    pub margin: f64,
    /// Label rows appended per token: 0 (labels off) or 5.
    pub label_dims: usize,
    /// Dropout probability on the (label-augmented) embedding matrix.
    pub dropout: f64,
    pub ablation: Ablation,
}

impl Default for CgnnConfig {
    fn default() -> Self {
        CgnnConfig {
            widths: vec![4],
            hidden: 200,
            embedding_dim: 200,
            n_max: 100,
            margin: 0.1,
            label_dims: NUM_CLASSES,
            dropout: 0.2,
            ablation: Ablation::Full,
        }
    }
}

impl CgnnConfig {
    /// Input channels seen by the filters: embedding plus label rows.
    pub fn in_channels(&self) -> usize {
        self.embedding_dim + self.label_dims
    }

    /// Dimension of the pooled representation: hidden x number of widths.
    pub fn repr_dim(&self) -> usize {
        self.hidden * self.widths.len()
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w < 1) {
            return Err(Error::invalid("CgnnConfig", "filter widths must be >= 1"));
        }
        if self.hidden < 1 || self.embedding_dim < 1 || self.n_max < 1 {
            return Err(Error::invalid("CgnnConfig", "hidden, embedding_dim and n_max must be >= 1"));
        }
        if self.margin < 0.0 {
            return Err(Error::invalid("CgnnConfig", "margin must be nonnegative"));
        }
        if self.label_dims != 0 && self.label_dims != NUM_CLASSES {
            return Err(Error::invalid("CgnnConfig", format!("label_dims must be 0 or {}", NUM_CLASSES)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("CgnnConfig", "dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One filter bank: weights `[hidden, in_channels, width]` and bias `[hidden]`.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub width: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trained encoder state: embedding table, filter banks, shared gate
/// parameters, and the cell bias vector.
#[derive(Debug, Clone)]
pub struct CgnnModel {
    pub config: CgnnConfig,
    pub vocab: Vocab,
    pub embedding: EmbeddingTable,
    pub filters: Vec<FilterBank>,
    pub gate_in_w: Tensor,
    pub gate_in_b: Tensor,
    pub gate_forget_w: Tensor,
    pub gate_forget_b: Tensor,
    pub gate_out_w: Tensor,
    pub gate_out_b: Tensor,
    /// Learned bias added to the input inside the forget branch.
    pub cell_bias: Tensor,
}

/// Everything `encode` returns: the pooled representation plus the gated
/// feature maps (one per width) for heatmap export.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub representation: Tensor,
    pub gated_maps: Vec<(usize, Tensor)>,
}

/// Gate activations per position, for inspection and tests.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub g_in: Tensor,
    pub g_forget: Tensor,
    pub g_out: Tensor,
}

pub(crate) struct CgnnVars {
    pub emb: Var,
    pub filters: Vec<(Var, Var)>,
    pub gate_in_w: Var,
    pub gate_in_b: Var,
    pub gate_forget_w: Var,
    pub gate_forget_b: Var,
    pub gate_out_w: Var,
    pub gate_out_b: Var,
    pub cell_bias: Var,
}

impl CgnnModel {
    /// Fresh model with Glorot-uniform filters and gates.
    pub fn init(config: CgnnConfig, vocab: Vocab, embedding: EmbeddingTable, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if embedding.dim() != config.embedding_dim {
            return Err(Error::shape(
                "CgnnModel::init",
                format!("embedding dim {}", config.embedding_dim),
                format!("{}", embedding.dim()),
            ));
        }
        if embedding.rows() != vocab.len() {
            return Err(Error::shape(
                "CgnnModel::init",
                format!("{} embedding rows", vocab.len()),
                format!("{}", embedding.rows()),
            ));
        }
        let h = config.hidden;
        let c_in = config.in_channels();
        let filters = config
            .widths
            .iter()
            .map(|&w| FilterBank {
                width: w,
                weight: Tensor::glorot(vec![h, c_in, w], c_in * w, h, rng),
                bias: Tensor::zeros(vec![h]),
            })
            .collect();
        Ok(CgnnModel {
            config,
            vocab,
            embedding,
            filters,
            gate_in_w: Tensor::glorot(vec![h, h], h, h, rng),
            gate_in_b: Tensor::zeros(vec![h]),
            gate_forget_w: Tensor::glorot(vec![h, h], h, h, rng),
            gate_forget_b: Tensor::zeros(vec![h]),
            gate_out_w: Tensor::glorot(vec![h, h], h, h, rng),
            gate_out_b: Tensor::zeros(vec![h]),
            cell_bias: Tensor::zeros(vec![h]),
        })
    }

    /// Named parameters in checkpoint order, with their decay eligibility
    /// (weights decay, biases do not).
    pub fn named_params(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out: Vec<(String, &Tensor, bool)> = vec![(
            "embedding.table".to_string(),
            self.embedding.tensor(),
            true,
        )];
        for f in &self.filters {
            out.push((format!("conv.w{}.weight", f.width), &f.weight, true));
            out.push((format!("conv.w{}.bias", f.width), &f.bias, false));
        }
        out.push(("gate.in.weight".to_string(), &self.gate_in_w, true));
        out.push(("gate.in.bias".to_string(), &self.gate_in_b, false));
        out.push(("gate.forget.weight".to_string(), &self.gate_forget_w, true));
        out.push(("gate.forget.bias".to_string(), &self.gate_forget_b, false));
        out.push(("gate.out.weight".to_string(), &self.gate_out_w, true));
        out.push(("gate.out.bias".to_string(), &self.gate_out_b, false));
        out.push(("gate.cell_bias".to_string(), &self.cell_bias, false));
        out
    }

    pub(crate) fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut out: Vec<(String, &mut Tensor, bool)> = vec![(
            "embedding.table".to_string(),
            self.embedding.tensor_mut(),
            true,
        )];
        for f in &mut self.filters {
            out.push((format!("conv.w{}.weight", f.width), &mut f.weight, true));
            out.push((format!("conv.w{}.bias", f.width), &mut f.bias, false));
        }
        out.push(("gate.in.weight".to_string(), &mut self.gate_in_w, true));
        out.push(("gate.in.bias".to_string(), &mut self.gate_in_b, false));
        out.push(("gate.forget.weight".to_string(), &mut self.gate_forget_w, true));
        out.push(("gate.forget.bias".to_string(), &mut self.gate_forget_b, false));
        out.push(("gate.out.weight".to_string(), &mut self.gate_out_w, true));
        out.push(("gate.out.bias".to_string(), &mut self.gate_out_b, false));
        out.push(("gate.cell_bias".to_string(), &mut self.cell_bias, false));
        out
    }

    pub(crate) fn vars(&self, tape: &mut Tape) -> CgnnVars {
        let train_emb = self.embedding.trainable;
        CgnnVars {
            emb: tape.leaf(self.embedding.tensor(), train_emb),
            filters: self
                .filters
                .iter()
                .map(|f| (tape.leaf(&f.weight, true), tape.leaf(&f.bias, true)))
                .collect(),
            gate_in_w: tape.leaf(&self.gate_in_w, true),
            gate_in_b: tape.leaf(&self.gate_in_b, true),
            gate_forget_w: tape.leaf(&self.gate_forget_w, true),
            gate_forget_b: tape.leaf(&self.gate_forget_b, true),
            gate_out_w: tape.leaf(&self.gate_out_w, true),
            gate_out_b: tape.leaf(&self.gate_out_b, true),
            cell_bias: tape.leaf(&self.cell_bias, true),
        }
    }

    /// Serializes kind `"cgnn"` with the config and vocabulary embedded.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab.tokens(),
            "embedding_trainable": self.embedding.trainable,
        });
        let mut ck = Checkpoint::new("cgnn", config);
        for (name, tensor, _) in self.named_params() {
            ck.push(name, tensor.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("cgnn")?;
        let config: CgnnConfig = serde_json::from_value(ck.config["config"].clone())?;
        config.validate()?;
        let tokens: Vec<String> = serde_json::from_value(ck.config["vocab"].clone())?;
        let trainable = ck.config["embedding_trainable"].as_bool().unwrap_or(true);
        let mut vocab = Vocab::new();
        for t in tokens.iter().skip(2) {
            vocab.add(t);
        }
        let embedding = EmbeddingTable::new(ck.require("embedding.table")?.clone(), trainable)?;
        let filters = config
            .widths
            .iter()
            .map(|&w| {
                Ok(FilterBank {
                    width: w,
                    weight: ck.require(&format!("conv.w{}.weight", w))?.clone(),
                    bias: ck.require(&format!("conv.w{}.bias", w))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CgnnModel {
            config,
            vocab,
            embedding,
            filters,
            gate_in_w: ck.require("gate.in.weight")?.clone(),
            gate_in_b: ck.require("gate.in.bias")?.clone(),
            gate_forget_w: ck.require("gate.forget.weight")?.clone(),
            gate_forget_b: ck.require("gate.forget.bias")?.clone(),
            gate_out_w: ck.require("gate.out.weight")?.clone(),
            gate_out_b: ck.require("gate.out.bias")?.clone(),
            cell_bias: ck.require("gate.cell_bias")?.clone(),
        })
    }

    /// Evaluation-mode encode (no dropout).
    pub fn encode(&self, indices: &[usize], label: Option<LabelClass>) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape);
        let enc = encode_on_tape(
            &mut tape,
            &vars,
            &self.config,
            indices,
            label,
            None::<&mut rand_chacha::ChaCha8Rng>,
        )?;
        Ok(EncoderOutput {
            representation: tape.to_tensor(enc.pooled),
            gated_maps: enc
                .gated_maps
                .iter()
                .map(|&(w, v)| (w, tape.to_tensor(v)))
                .collect(),
        })
    }
}

/// Builds the label-row constant appended below the embedding matrix:
/// `[label_dims, n_max]`, one-hot on every non-padding column for a labeled
/// question, all-zero otherwise (unlabeled question or answer side).
pub fn label_rows(indices: &[usize], label: Option<LabelClass>, label_dims: usize) -> Result<Vec<f64>> {
    if label.is_some() && label_dims == 0 {
        return Err(Error::invalid("attach_label", "label provided but the model was built with label_dims = 0"));
    }
    let n = indices.len();
    let mut rows = vec![0.0; label_dims * n];
    if let Some(class) = label {
        for (j, &idx) in indices.iter().enumerate() {
            if idx != PAD_INDEX {
                rows[class.index() * n + j] = 1.0;
            }
        }
    }
    Ok(rows)
}

pub(crate) struct EncodedSeq {
    pub pooled: Var,
    pub gated_maps: Vec<(usize, Var)>,
}

/// Shared graph builder for one sequence; dropout is applied only when an rng
/// is supplied (training mode).
pub(crate) fn encode_on_tape(
    tape: &mut Tape,
    vars: &CgnnVars,
    config: &CgnnConfig,
    indices: &[usize],
    label: Option<LabelClass>,
    dropout_rng: Option<&mut impl Rng>,
) -> Result<EncodedSeq> {
    if indices.len() != config.n_max {
        return Err(Error::shape("encode", format!("sequence of length {}", config.n_max), format!("{}", indices.len())));
    }
    let mut m = tape.lookup_cols(vars.emb, indices)?;
    if config.label_dims > 0 {
        let rows = label_rows(indices, label, config.label_dims)?;
        let rows = tape.constant(vec![config.label_dims, indices.len()], rows)?;
        m = tape.concat(&[m, rows], 0)?;
    } else if label.is_some() {
        return Err(Error::invalid("encode", "label provided but the model was built with label_dims = 0"));
    }
    if let Some(rng) = dropout_rng {
        m = tape.dropout(m, config.dropout, true, rng)?;
    }

    let mut pooled_parts = Vec::with_capacity(config.widths.len());
    let mut gated_maps = Vec::with_capacity(config.widths.len());
    for (i, &width) in config.widths.iter().enumerate() {
        let (fw, fb) = vars.filters[i];
        let pre = tape.conv_wide(m, fw, fb)?;
        let c = tape.tanh(pre);
        let flow = gated_flow_on_tape(tape, vars, config.ablation, c)?;
        gated_maps.push((width, flow.output));
        pooled_parts.push(tape.max_pool_rows(flow.output)?);
    }
    let pooled = if pooled_parts.len() == 1 {
        pooled_parts[0]
    } else {
        tape.concat(&pooled_parts, 0)?
    };
    Ok(EncodedSeq { pooled, gated_maps })
}

pub(crate) struct FlowVars {
    pub output: Var,
    pub gates: Option<(Var, Var, Var)>,
}

/// The gated recurrence over feature-map positions (see the module docs).
pub(crate) fn gated_flow_on_tape(
    tape: &mut Tape,
    vars: &CgnnVars,
    ablation: Ablation,
    c: Var,
) -> Result<FlowVars> {
    if ablation == Ablation::GatesOff {
        return Ok(FlowVars { output: c, gates: None });
    }
    let t_len = tape.shape(c)[1];
    let h = tape.shape(c)[0];
    let zero = tape.constant(vec![h], vec![0.0; h])?;
    let ones = tape.constant(vec![h], vec![1.0; h])?;

    let mut cell = zero;
    let mut out_cols = Vec::with_capacity(t_len);
    let mut gi_cols = Vec::with_capacity(t_len);
    let mut gf_cols = Vec::with_capacity(t_len);
    let mut go_cols = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let ct = tape.col(c, t)?;
        let gf = {
            let a = tape.matvec(vars.gate_forget_w, ct)?;
            let a = tape.add(a, vars.gate_forget_b)?;
            tape.sigmoid(a)
        };
        let (gi, go) = match ablation {
            Ablation::Full => {
                let gi = {
                    let a = tape.matvec(vars.gate_in_w, ct)?;
                    let a = tape.add(a, vars.gate_in_b)?;
                    tape.sigmoid(a)
                };
                let go = {
                    let a = tape.matvec(vars.gate_out_w, ct)?;
                    let a = tape.add(a, vars.gate_out_b)?;
                    tape.sigmoid(a)
                };
                (gi, go)
            }
            // Highway-style: carry gate is the complement of the transform
            // gate and the output gate is wide open.
            Ablation::SingleGate => (tape.affine(gf, -1.0, 1.0), ones),
            Ablation::GatesOff => unreachable!(),
        };
        let carried = tape.mul(cell, gi)?;
        let shifted = tape.add(ct, vars.cell_bias)?;
        let injected = tape.mul(gf, shifted)?;
        cell = tape.add(carried, injected)?;
        let squashed = tape.tanh(cell);
        out_cols.push(tape.mul(squashed, go)?);
        gi_cols.push(gi);
        gf_cols.push(gf);
        go_cols.push(go);
    }
    let output = tape.stack_cols(&out_cols)?;
    let gi_map = tape.stack_cols(&gi_cols)?;
    let gf_map = tape.stack_cols(&gf_cols)?;
    let go_map = tape.stack_cols(&go_cols)?;
    Ok(FlowVars { output, gates: Some((gi_map, gf_map, go_map)) })
}

/// Runs the gated flow over a plain feature map with the model's parameters,
/// returning the transformed map and the per-position gate values.
pub fn gated_flow(model: &CgnnModel, c: &Tensor) -> Result<(Tensor, Option<GateTrace>)> {
    if c.shape().len() != 2 || c.shape()[0] != model.config.hidden {
        return Err(Error::shape(
            "gated_flow",
            format!("[{}, t] feature map", model.config.hidden),
            format!("{:?}", c.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = model.vars(&mut tape);
    let cv = tape.constant(c.shape().to_vec(), c.data().to_vec())?;
    let flow = gated_flow_on_tape(&mut tape, &vars, model.config.ablation, cv)?;
    let trace = flow.gates.map(|(gi, gf, go)| GateTrace {
        g_in: tape.to_tensor(gi),
        g_forget: tape.to_tensor(gf),
        g_out: tape.to_tensor(go),
    });
    Ok((tape.to_tensor(flow.output), trace))
}

/// Cosine similarity between two pooled representations; zero vectors score 0.
pub fn score_pair(q: &Tensor, a: &Tensor) -> Result<f64> {
    if q.shape() != a.shape() {
        return Err(Error::shape("score_pair", format!("{:?}", q.shape()), format!("{:?}", a.shape())));
    }
    Ok(cosine_raw(q.data(), a.data()))
}

/// Ranking hinge: `sum_a max(0, margin + score(a) - score(gold))`.
///
/// Zero exactly when the positive clears every negative by the margin. An
/// empty negative list yields 0 with a warning.
pub fn hinge_loss(pos: f64, negs: &[f64], margin: f64) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::invalid("hinge_loss", "margin must be nonnegative"));
    }
    if negs.is_empty() {
        log::warn!("hinge_loss called with no negatives; loss is 0");
        return Ok(0.0);
    }
    Ok(negs.iter().map(|&n| (margin + n - pos).max(0.0)).sum())
}

/// The loss exactly as printed in the source description:
/// `max_a (score(gold) - score(a) + margin)`. Kept behind a flag for
/// comparison; minimizing it drives the gold score down.
pub fn hinge_loss_paper_literal(pos: f64, negs: &[f64], margin: f64) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::invalid("hinge_loss", "margin must be nonnegative"));
    }
    if negs.is_empty() {
        log::warn!("hinge_loss called with no negatives; loss is 0");
        return Ok(0.0);
    }
    Ok(negs
        .iter()
        .map(|&n| pos - n + margin)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Sorts answers by descending cosine score against the question
/// representation, breaking ties by lexicographic answer id.
pub fn rank_answers(question_rep: &Tensor, answer_reps: &[(String, Tensor)]) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = answer_reps
        .iter()
        .map(|(id, rep)| (id.clone(), cosine_raw(question_rep.data(), rep.data())))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Encodes every answer once with a frozen model (label rows are zero on the
/// answer side by construction).
pub fn answer_representations(
    model: &CgnnModel,
    answers: &crate::data::AnswerSet,
) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::with_capacity(answers.len());
    for (id, tokens) in answers.iter() {
        let refs: Vec<&str> = tokens.iter().map(|s| s.as_str()).collect();
        let indices = crate::data::encode_sequence(&refs, &model.vocab, model.config.n_max)?;
        let enc = model.encode(&indices, None)?;
        out.push((id.to_string(), enc.representation));
    }
    Ok(out)
}
