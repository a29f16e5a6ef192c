//! Parameter layout of the full model and its seeded construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{GraphEdge, GraphNode, LayerTag, MemoryGraph, TaskSample};
use crate::inference::{
    forward, prepare, ActivationParams, CommunicationParams, DataDims, EncoderParams, ForwardOptions,
    InferenceConfig, PreparedSample,
};
use crate::layers::GruCell;
use crate::memory::{ReductionParams, UpdateParams};
use crate::numerics::{grad_check, GradReport, ParamId, ParamStore, Tape};
use crate::predictor::{wbce_loss_var, LossConfig, PredictorParams};

/// Handles into a [`ParamStore`] for every learnable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// d_hidden x d_node
    pub read: ParamId,
    pub activation: ActivationParams,
    /// One independent cell per unit.
    pub dynamics: Vec<GruCell>,
    pub communication: CommunicationParams,
    pub reduction: ReductionParams,
    pub update: UpdateParams,
    pub predictor: PredictorParams,
}

impl ModelParams {
    /// `cfg` must already be the effective configuration.
    pub fn init(store: &mut ParamStore, cfg: &InferenceConfig, dims: &DataDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_node = dims.d_node;
        let encoder = EncoderParams::new(store, cfg, dims, &mut rng);
        let read = store.add_glorot("read", cfg.d_hidden, d_node, &mut rng);
        let activation = ActivationParams::new(store, cfg, d_node, &mut rng);
        let dynamics = (0..cfg.n_units)
            .map(|k| GruCell::new(store, &format!("unit.{k}"), cfg.d_value, cfg.d_hidden, cfg.use_bias, &mut rng))
            .collect();
        let communication = CommunicationParams::new(store, cfg, &mut rng);
        let reduction = ReductionParams::new(store, d_node, cfg.d_hidden, cfg.d_attn, cfg.use_bias, &mut rng);
        let update = UpdateParams::new(store, d_node, cfg.d_rel, cfg.d_rel_out, cfg.d_hidden, cfg.use_bias, &mut rng);
        let predictor = PredictorParams::new(store, cfg.d_hidden, d_node, cfg.use_bias, &mut rng);
        Self { encoder, read, activation, dynamics, communication, reduction, update, predictor }
    }
}

/// Configuration, data dimensions and weights: everything a forward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// As requested; see [`Model::effective`] for the shape actually built.
    pub config: InferenceConfig,
    pub dims: DataDims,
    pub params: ModelParams,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: InferenceConfig, dims: DataDims, seed: u64) -> Result<Self> {
        config.check()?;
        for (name, v) in [("d_node", dims.d_node), ("vocab_size", dims.vocab_size), ("n_relations", dims.n_relations)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let mut store = ParamStore::new();
        let params = ModelParams::init(&mut store, &config.effective(), &dims, seed);
        Ok(Self { config, dims, params, store })
    }

    pub fn effective(&self) -> InferenceConfig {
        self.config.effective()
    }
}

/// Two units, one active, width 4, two steps over a three-node graph.
pub fn gradcheck_setup(seed: u64) -> Result<(Model, PreparedSample)> {
    let cfg = InferenceConfig {
        n_units: 2,
        k_active: 1,
        n_steps: 2,
        d_hidden: 4,
        d_key: 4,
        d_value: 4,
        d_emb: 4,
        d_rel: 2,
        d_rel_out: 4,
        d_attn: 4,
        ..Default::default()
    };
    let dims = DataDims { d_node: 4, vocab_size: 5, n_relations: 2 };
    let model = Model::new(cfg, dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut features = || (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let sample = TaskSample {
        graph: MemoryGraph {
            d_node: 4,
            nodes: vec![
                GraphNode { id: 0, layer: LayerTag::Visual, features: features() },
                GraphNode { id: 1, layer: LayerTag::Semantic, features: features() },
                GraphNode { id: 2, layer: LayerTag::Fact, features: features() },
            ],
            edges: vec![
                GraphEdge { src: 0, dst: 2, relation_id: 0 },
                GraphEdge { src: 1, dst: 2, relation_id: 1 },
            ],
        },
        question: vec![1, 3],
        labels: vec![1],
    };
    let prepared = prepare(&sample, &model.dims)?;
    Ok((model, prepared))
}

/// Finite-difference check of the full loss with routing frozen at the
/// unperturbed active sets.
pub fn model_grad_check(model: &Model, sample: &PreparedSample, eps: f64, seed: u64) -> Result<GradReport> {
    let cfg = model.effective();
    let routing = {
        let mut tape = Tape::new();
        forward(&mut tape, &model.store, &model.params, &cfg, sample, &ForwardOptions::default())?.routing()
    };
    let opts = ForwardOptions { routing: Some(&routing), ..Default::default() };
    let loss = LossConfig::default();
    grad_check(
        |store, tape| {
            let out = forward(tape, store, &model.params, &cfg, sample, &opts)?;
            wbce_loss_var(tape, out.probs, &sample.labels, &loss)
        },
        &model.store,
        eps,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> DataDims {
        DataDims { d_node: 4, vocab_size: 10, n_relations: 3 }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(InferenceConfig::default(), dims(), 5).unwrap();
        let b = Model::new(InferenceConfig::default(), dims(), 5).unwrap();
        let c = Model::new(InferenceConfig::default(), dims(), 6).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn units_have_private_weights() {
        let m = Model::new(InferenceConfig::default(), dims(), 1).unwrap();
        assert_eq!(m.params.dynamics.len(), 8);
        let a = m.store.value(m.params.dynamics[0].cand_in.weight);
        let b = m.store.value(m.params.dynamics[1].cand_in.weight);
        assert_ne!(a, b);
        let names: std::collections::HashSet<_> = m.store.ids().map(|id| m.store.name(id).to_string()).collect();
        assert_eq!(names.len(), m.store.len());
    }

    #[test]
    fn single_unit_builds_one_cell() {
        let cfg = InferenceConfig { single_unit_mode: true, ..Default::default() };
        let m = Model::new(cfg, dims(), 1).unwrap();
        assert_eq!(m.params.dynamics.len(), 1);
        assert_eq!(m.params.activation.w_q.len(), 1);
    }

    #[test]
    fn default_gradcheck_passes() {
        let (m, s) = gradcheck_setup(0).unwrap();
        let r = model_grad_check(&m, &s, 1e-5, 0).unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r}");
    }

    #[test]
    fn gradcheck_absolute_error_is_roundoff_level() {
        for seed in 1..6 {
            let (m, s) = gradcheck_setup(seed).unwrap();
            let r = model_grad_check(&m, &s, 1e-5, seed).unwrap();
            assert!(r.max_abs_error() < 1e-9, "{r}");
            for p in &r.params {
                for x in p.samples.iter().filter(|x| x.analytic.abs() > 1e-6) {
                    assert!(crate::numerics::relative_error(x.analytic, x.numeric) < 1e-4, "{} {x:?}", p.name);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_dims() {
        let d = DataDims { n_relations: 0, ..dims() };
        assert!(Model::new(InferenceConfig::default(), d, 1).is_err());
    }
}
