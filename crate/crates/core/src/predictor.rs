//! Gated fusion of the inference state into fact nodes, per-node binary
//! scoring, and the class-weighted cross-entropy objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Axis, Matrix, ParamStore, Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictorParams {
    /// (d_hidden + d_node) -> (d_hidden + d_node)
    pub gate: Linear,
    /// (d_hidden + d_node) -> d_node
    pub rep: Linear,
    /// d_node -> 1
    pub classifier: Linear,
}

impl PredictorParams {
    pub fn new(store: &mut ParamStore, d_hidden: usize, d_node: usize, use_bias: bool, rng: &mut impl Rng) -> Self {
        let d = d_hidden + d_node;
        Self {
            gate: Linear::new(store, "predict.gate", d, d, use_bias, rng),
            rep: Linear::new(store, "predict.rep", d, d_node, use_bias, rng),
            classifier: Linear::new(store, "predict.classifier", d_node, 1, use_bias, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on positive (answer) nodes.
    pub a: f64,
    /// Weight on negative nodes.
    pub b: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { a: 0.7, b: 0.3 }
    }
}

impl LossConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::Config(format!("loss weights must be positive, got a={} b={}", self.a, self.b)));
        }
        Ok(())
    }
}

/// `W_rep (σ(W_gate [h, v]) ∘ [h, v])` for every row of `facts`.
pub fn gate_fuse(tape: &mut Tape, store: &ParamStore, p: &PredictorParams, h: Var, facts: Var) -> Result<Var> {
    let n = tape.shape(facts).0;
    if n == 0 {
        return Err(Error::InvalidArgument("gate_fuse: no fact nodes".into()));
    }
    let hb = tape.gather_rows(h, &vec![0; n])?;
    let joint = tape.concat(&[hb, facts], Axis::Cols)?;
    let gate = p.gate.forward(tape, store, joint)?;
    let gate = tape.sigmoid(gate)?;
    let gated = tape.mul(gate, joint)?;
    p.rep.forward(tape, store, gated)
}

/// Independent sigmoid probability per fused row, as an `N x 1` column.
pub fn score(tape: &mut Tape, store: &ParamStore, p: &PredictorParams, fused: Var) -> Result<Var> {
    let logits = p.classifier.forward(tape, store, fused)?;
    tape.sigmoid(logits)
}

fn check_labels(n: usize, labels: &[u8]) -> Result<()> {
    if n != labels.len() {
        return Err(Error::Shape {
            op: "wbce_loss",
            lhs: (n, 1),
            rhs: (labels.len(), 1),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("wbce_loss: labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Weighted binary cross-entropy summed over nodes, on the tape.
pub fn wbce_loss_var(tape: &mut Tape, probs: Var, labels: &[u8], cfg: &LossConfig) -> Result<Var> {
    let (n, c) = tape.shape(probs);
    if c != 1 {
        return Err(Error::Shape { op: "wbce_loss", lhs: (n, c), rhs: (n, 1) });
    }
    check_labels(n, labels)?;
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let ln_p = tape.ln(p)?;
    let ones = tape.constant(Matrix::filled(n, 1, 1.0)?);
    let q = tape.sub(ones, p)?;
    let ln_q = tape.ln(q)?;
    let pos: Vec<f64> = labels.iter().map(|&y| cfg.a * f64::from(y)).collect();
    let neg: Vec<f64> = labels.iter().map(|&y| cfg.b * (1.0 - f64::from(y))).collect();
    let pos = tape.constant(Matrix::col_vector(&pos)?);
    let neg = tape.constant(Matrix::col_vector(&neg)?);
    let t1 = tape.mul(pos, ln_p)?;
    let t2 = tape.mul(neg, ln_q)?;
    let terms = tape.add(t1, t2)?;
    let total = tape.sum_all(terms)?;
    tape.scale(total, -1.0)
}

/// Value-only form of [`wbce_loss_var`].
pub fn wbce_loss(probs: &[f64], labels: &[u8], cfg: &LossConfig) -> Result<f64> {
    check_labels(probs.len(), labels)?;
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("wbce_loss"));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let y = f64::from(y);
        total += cfg.a * y * p.ln() + cfg.b * (1.0 - y) * (1.0 - p).ln();
    }
    Ok(-total)
}

/// Id of the highest-scoring fact node; ties go to the lowest id.
pub fn predict_answer(probs: &[f64], fact_ids: &[i64]) -> Result<i64> {
    if probs.is_empty() || probs.len() != fact_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "predict_answer: {} scores for {} fact ids",
            probs.len(),
            fact_ids.len()
        )));
    }
    let mut best = 0;
    for i in 1..probs.len() {
        let better = probs[i] > probs[best] || (probs[i] == probs[best] && fact_ids[i] < fact_ids[best]);
        if better {
            best = i;
        }
    }
    Ok(fact_ids[best])
}
