use crate::error::{Error, Result};
use crate::graph::{GraphIndex, LayerTag, TaskSample};
use crate::memory;
use crate::model::ModelParams;
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::predictor;

use super::{
    activate_units, communicate, encode_question, global_state, init_units, read_memory, unit_dynamics, DataDims,
    InferenceConfig,
};

/// A validated sample in the row layout the engine consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub index: GraphIndex,
    pub features: Matrix,
    pub question: Vec<usize>,
    /// Aligned with `index.fact_ids`.
    pub labels: Vec<u8>,
}

impl PreparedSample {
    pub fn fact_ids(&self) -> &[i64] {
        &self.index.fact_ids
    }
}

pub fn prepare(sample: &TaskSample, dims: &DataDims) -> Result<PreparedSample> {
    let s = sample.canonical();
    let g = &s.graph;
    if g.d_node != dims.d_node {
        return Err(Error::Dataset(format!("sample has d_node {} but the model expects {}", g.d_node, dims.d_node)));
    }
    if let Some(&t) = s.question.iter().find(|&&t| t >= dims.vocab_size) {
        return Err(Error::Dataset(format!("token {t} is outside the vocabulary of size {}", dims.vocab_size)));
    }
    if let Some(e) = g.edges.iter().find(|e| e.relation_id >= dims.n_relations) {
        return Err(Error::Dataset(format!(
            "relation {} is outside the table of size {}",
            e.relation_id, dims.n_relations
        )));
    }
    let index = GraphIndex::new(g)?;
    if index.fact_ids.len() != s.labels.len() {
        return Err(Error::Dataset(format!(
            "{} labels for {} fact nodes",
            s.labels.len(),
            index.fact_ids.len()
        )));
    }
    if index.fact_ids.is_empty() {
        return Err(Error::EmptyLayer(LayerTag::Fact.as_str()));
    }
    Ok(PreparedSample {
        features: g.feature_matrix()?,
        index,
        question: s.question.clone(),
        labels: s.labels.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Extra steps appended after the schedule whose memory read is forced to zero.
    pub zero_tail: usize,
    /// Active set per step to use instead of top-k selection.
    pub routing: Option<&'a [Vec<usize>]>,
    /// Copy every unit state into the trace after each step.
    pub record_states: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// `None` on zero-input probe steps.
    pub modality: Option<LayerTag>,
    pub input_weight: Vec<f64>,
    pub active: Vec<usize>,
    /// Unit states after the step; empty unless requested.
    pub states: Vec<Vec<f64>>,
}

impl StepRecord {
    pub fn modality_label(&self) -> &'static str {
        self.modality.map_or("null", LayerTag::as_str)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One probability per fact node, `n_fact x 1`.
    pub probs: Var,
    /// Final global state.
    pub global: Var,
    /// Final node features.
    pub features: Var,
    pub trace: Vec<StepRecord>,
}

impl ForwardOutput {
    pub fn routing(&self) -> Vec<Vec<usize>> {
        self.trace.iter().map(|r| r.active.clone()).collect()
    }
}

/// Runs the full reasoning loop and scores every fact node.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ModelParams,
    cfg: &InferenceConfig,
    sample: &PreparedSample,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let cfg = cfg.effective();
    let total = cfg.n_steps + opts.zero_tail;
    if let Some(r) = opts.routing {
        if r.len() != total {
            return Err(Error::InvalidArgument(format!("fixed routing covers {} of {total} steps", r.len())));
        }
    }
    let index = &sample.index;
    let q = encode_question(tape, store, &params.encoder, &sample.question)?;
    let mut bank = init_units(tape, q, &cfg)?;
    let relations = tape.param(store, params.encoder.relations);
    let mut features = tape.constant(sample.features.clone());
    let mut trace = Vec::with_capacity(total);

    for t in 0..total {
        let modality = (t < cfg.n_steps).then(|| cfg.layer_at(t));
        let h_global = global_state(tape, &bank)?;
        let m = match modality {
            Some(layer) => read_memory(tape, store, params.read, index, features, layer, h_global, cfg.d_key)?,
            None => tape.constant(Matrix::zeros(1, index.d_node)),
        };
        let routing = opts.routing.map(|r| r[t].as_slice());
        let input = activate_units(tape, store, &params.activation, &mut bank, m, &cfg, routing)?;
        let h_hat = unit_dynamics(tape, store, &params.dynamics, &bank, &input)?;
        bank = communicate(tape, store, &params.communication, &bank, &h_hat, &cfg)?;

        if !cfg.disable_memory_update {
            let h_global = global_state(tape, &bank)?;
            let reduced = memory::reduce(tape, store, &params.reduction, features, h_global)?;
            features =
                memory::update(tape, store, &params.update, index, reduced, h_global, relations, cfg.update_tanh)?;
        }

        let states = if opts.record_states {
            bank.h.iter().map(|&h| tape.value(h).data().to_vec()).collect()
        } else {
            Vec::new()
        };
        trace.push(StepRecord {
            step: t,
            modality,
            input_weight: input.input_weight,
            active: bank.active.clone(),
            states,
        });
    }

    let global = global_state(tape, &bank)?;
    let facts = tape.gather_rows(features, index.fact_rows())?;
    let fused = predictor::gate_fuse(tape, store, &params.predictor, global, facts)?;
    let probs = predictor::score(tape, store, &params.predictor, fused)?;
    Ok(ForwardOutput { probs, global, features, trace })
}
