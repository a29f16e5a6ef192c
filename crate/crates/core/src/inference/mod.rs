//! The reasoning engine: question encoding, sparse unit activation, per-unit
//! recurrent dynamics, inter-unit communication and the step loop.

mod config;
mod engine;

pub use config::{DataDims, InferenceConfig};
pub use engine::{forward, prepare, ForwardOptions, ForwardOutput, PreparedSample, StepRecord};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{GraphIndex, LayerTag};
use crate::layers::GruCell;
use crate::numerics::{topk_indices, Axis, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    /// vocab_size x d_emb
    pub tokens: ParamId,
    pub gru: GruCell,
    /// n_relations x d_rel
    pub relations: ParamId,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, cfg: &InferenceConfig, dims: &DataDims, rng: &mut impl Rng) -> Self {
        Self {
            tokens: store.add_glorot("encoder.tokens", dims.vocab_size, cfg.d_emb, rng),
            gru: GruCell::new(store, "encoder.gru", cfg.d_emb, cfg.d_hidden, cfg.use_bias, rng),
            relations: store.add_glorot("encoder.relations", dims.n_relations, cfg.d_rel, rng),
        }
    }
}

/// Shared key/value maps over the step input plus one query map per unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationParams {
    /// d_node x d_key
    pub w_e: ParamId,
    /// d_node x d_value
    pub w_v: ParamId,
    /// per unit, d_hidden x d_key
    pub w_q: Vec<ParamId>,
}

impl ActivationParams {
    pub fn new(store: &mut ParamStore, cfg: &InferenceConfig, d_node: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_e: store.add_glorot("activation.w_e", d_node, cfg.d_key, rng),
            w_v: store.add_glorot("activation.w_v", d_node, cfg.d_value, rng),
            w_q: (0..cfg.n_units)
                .map(|k| store.add_glorot(format!("activation.w_q.{k}"), cfg.d_hidden, cfg.d_key, rng))
                .collect(),
        }
    }
}

/// Per-unit query, key and value maps for the exchange between units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommunicationParams {
    pub w_q: Vec<ParamId>,
    pub w_e: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
}

impl CommunicationParams {
    pub fn new(store: &mut ParamStore, cfg: &InferenceConfig, rng: &mut impl Rng) -> Self {
        let mut w_q = Vec::new();
        let mut w_e = Vec::new();
        let mut w_v = Vec::new();
        for k in 0..cfg.n_units {
            w_q.push(store.add_glorot(format!("communication.w_q.{k}"), cfg.d_hidden, cfg.d_key, rng));
            w_e.push(store.add_glorot(format!("communication.w_e.{k}"), cfg.d_hidden, cfg.d_key, rng));
            w_v.push(store.add_glorot(format!("communication.w_v.{k}"), cfg.d_hidden, cfg.d_hidden, rng));
        }
        Self { w_q, w_e, w_v }
    }
}

/// Hidden states of every unit plus the active set chosen this step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitBank {
    pub h: Vec<Var>,
    pub active: Vec<usize>,
}

/// Output of the activation stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    /// Attended input of each active unit, `None` for inactive ones.
    pub a_in: Vec<Option<Var>>,
    /// Attention mass on the real input row, per unit.
    pub input_weight: Vec<f64>,
}

fn inv_sqrt(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// Final state of the question encoder, run from a zero state.
pub fn encode_question(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("question must contain at least one token".into()));
    }
    let (vocab, _) = store.value(p.tokens).shape();
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::InvalidArgument(format!(
            "question token {t} is outside the vocabulary of size {vocab}"
        )));
    }
    let d_hidden = store.value(p.gru.update_rec.weight).rows();
    let table = tape.param(store, p.tokens);
    let mut h = tape.constant(Matrix::zeros(1, d_hidden));
    for &t in tokens {
        let x = tape.gather_rows(table, &[t])?;
        h = p.gru.step(tape, store, x, h)?;
    }
    Ok(h)
}

/// Every unit starts from the question embedding.
pub fn init_units(tape: &Tape, q: Var, cfg: &InferenceConfig) -> Result<UnitBank> {
    let shape = tape.shape(q);
    if shape != (1, cfg.d_hidden) {
        return Err(Error::Shape { op: "init_units", lhs: shape, rhs: (1, cfg.d_hidden) });
    }
    Ok(UnitBank { h: vec![q; cfg.effective().n_units], active: Vec::new() })
}

/// Attention-pooled features of one layer, queried by the global state.
#[allow(clippy::too_many_arguments)]
pub fn read_memory(
    tape: &mut Tape,
    store: &ParamStore,
    w_read: ParamId,
    index: &GraphIndex,
    features: Var,
    layer: LayerTag,
    h_global: Var,
    d_key: usize,
) -> Result<Var> {
    let rows = index.rows(layer);
    if rows.is_empty() {
        return Err(Error::EmptyLayer(layer.as_str()));
    }
    let nodes = tape.gather_rows(features, rows)?;
    let w = tape.param(store, w_read);
    let query = tape.matmul(h_global, w)?;
    let nodes_t = tape.transpose(nodes)?;
    let scores = tape.matmul(query, nodes_t)?;
    let scores = tape.scale(scores, inv_sqrt(d_key))?;
    let att = tape.softmax_rows(scores)?;
    tape.matmul(att, nodes)
}

/// Ranks units by attention on the real input against a zero row and marks
/// the top `k_active` (or the fixed set in `routing`) as active.
pub fn activate_units(
    tape: &mut Tape,
    store: &ParamStore,
    p: &ActivationParams,
    bank: &mut UnitBank,
    m: Var,
    cfg: &InferenceConfig,
    routing: Option<&[usize]>,
) -> Result<StepInput> {
    let (_, d_mem) = tape.shape(m);
    let null = tape.constant(Matrix::zeros(1, d_mem));
    let mm = tape.concat(&[null, m], Axis::Rows)?;
    let w_e = tape.param(store, p.w_e);
    let w_v = tape.param(store, p.w_v);
    let keys = tape.matmul(mm, w_e)?;
    let keys_t = tape.transpose(keys)?;
    let values = tape.matmul(mm, w_v)?;

    let n = bank.h.len();
    let mut weights = Vec::with_capacity(n);
    let mut input_weight = Vec::with_capacity(n);
    for k in 0..n {
        let w_q = tape.param(store, p.w_q[k]);
        let q = tape.matmul(bank.h[k], w_q)?;
        let logits = tape.matmul(q, keys_t)?;
        let logits = tape.scale(logits, inv_sqrt(cfg.d_key))?;
        let att = tape.softmax_rows(logits)?;
        input_weight.push(tape.value(att).get(0, 1));
        weights.push(att);
    }

    bank.active = match routing {
        Some(r) => {
            if r.len() != cfg.active_count() || r.iter().any(|&k| k >= n) {
                return Err(Error::InvalidArgument(format!("fixed routing {r:?} does not fit {n} units")));
            }
            r.to_vec()
        }
        None => topk_indices(&input_weight, cfg.active_count())?,
    };

    let mut a_in = vec![None; n];
    for &k in &bank.active {
        a_in[k] = Some(tape.matmul(weights[k], values)?);
    }
    Ok(StepInput { a_in, input_weight })
}

/// One recurrent step for each active unit; inactive entries stay `None`.
pub fn unit_dynamics(
    tape: &mut Tape,
    store: &ParamStore,
    cells: &[GruCell],
    bank: &UnitBank,
    input: &StepInput,
) -> Result<Vec<Option<Var>>> {
    let mut out = vec![None; bank.h.len()];
    for &k in &bank.active {
        let x = input.a_in[k].ok_or_else(|| Error::InvalidArgument(format!("unit {k} is active but has no input")))?;
        out[k] = Some(cells[k].step(tape, store, x, bank.h[k])?);
    }
    Ok(out)
}

/// Active units attend over every unit's key/value and add the result to
/// their intermediate state; inactive units keep their previous state.
pub fn communicate(
    tape: &mut Tape,
    store: &ParamStore,
    p: &CommunicationParams,
    bank: &UnitBank,
    h_hat: &[Option<Var>],
    cfg: &InferenceConfig,
) -> Result<UnitBank> {
    let n = bank.h.len();
    let current: Vec<Var> = (0..n).map(|k| h_hat[k].unwrap_or(bank.h[k])).collect();
    let mut next = bank.h.clone();
    if cfg.disable_communication {
        for &k in &bank.active {
            next[k] = current[k];
        }
        return Ok(UnitBank { h: next, active: bank.active.clone() });
    }

    let mut keys = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for (j, &h) in current.iter().enumerate() {
        let w_e = tape.param(store, p.w_e[j]);
        let w_v = tape.param(store, p.w_v[j]);
        keys.push(tape.matmul(h, w_e)?);
        values.push(tape.matmul(h, w_v)?);
    }
    let keys = tape.concat(&keys, Axis::Rows)?;
    let keys_t = tape.transpose(keys)?;
    let values = tape.concat(&values, Axis::Rows)?;

    for &k in &bank.active {
        let w_q = tape.param(store, p.w_q[k]);
        let q = tape.matmul(current[k], w_q)?;
        let logits = tape.matmul(q, keys_t)?;
        let logits = tape.scale(logits, inv_sqrt(cfg.d_key))?;
        let att = tape.softmax_rows(logits)?;
        let read = tape.matmul(att, values)?;
        next[k] = tape.add(read, current[k])?;
    }
    Ok(UnitBank { h: next, active: bank.active.clone() })
}

/// Mean over all unit states.
pub fn global_state(tape: &mut Tape, bank: &UnitBank) -> Result<Var> {
    if bank.h.len() == 1 {
        return Ok(bank.h[0]);
    }
    let stacked = tape.concat(&bank.h, Axis::Rows)?;
    tape.mean_rows(stacked)
}
