//! Seeded synthetic question-answer graphs.
//!
//! A dataset shares one latent concept table (one row per vocabulary token).
//! Each sample picks distinct concepts for its fact nodes and marks one as the
//! answer; every question token is a function of the answer concept index, and
//! the visual/semantic nodes wired to the answer carry that concept plus
//! Gaussian noise. Other context nodes carry concepts absent from the sample.
//!
//! Fact nodes carry their own random feature vectors, unrelated to any
//! concept, so the answer can only be found through a fact's neighbours.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, GraphEdge, GraphNode, LayerTag, MemoryGraph, TaskSample};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_visual: usize,
    pub n_semantic: usize,
    pub n_fact: usize,
    pub d_node: usize,
    pub vocab_size: usize,
    pub n_relations: usize,
    pub question_len: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_visual: 12,
            n_semantic: 12,
            n_fact: 4,
            d_node: 8,
            vocab_size: 16,
            n_relations: 2,
            question_len: 3,
            noise_sigma: 0.1,
            seed: 1,
            n_samples: 64,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        let counts = [
            ("n_visual", self.n_visual),
            ("n_semantic", self.n_semantic),
            ("n_fact", self.n_fact),
            ("d_node", self.d_node),
            ("vocab_size", self.vocab_size),
            ("n_relations", self.n_relations),
            ("question_len", self.question_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.vocab_size < self.n_fact.max(2) {
            return Err(Error::Config(format!(
                "vocab_size ({}) must be >= max(n_fact, 2) ({}) so fact concepts are distinct",
                self.vocab_size,
                self.n_fact.max(2)
            )));
        }
        // each fact needs a context node of its own in both layers, otherwise
        // a distractor could share the answer's neighbourhood
        if self.n_visual < self.n_fact || self.n_semantic < self.n_fact {
            return Err(Error::Config(format!(
                "n_visual ({}) and n_semantic ({}) must each be >= n_fact ({})",
                self.n_visual, self.n_semantic, self.n_fact
            )));
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            vocab_size: self.vocab_size,
            n_relations: self.n_relations,
            d_node: Some(self.d_node),
        }
    }
}

/// Generated samples together with the latent ground truth behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub meta: DatasetMeta,
    pub samples: Vec<TaskSample>,
    /// `vocab_size x d_node`; row `c` is concept `c`.
    pub concepts: Matrix,
    /// Answer concept index per sample.
    pub answer_concepts: Vec<usize>,
}

impl GeneratedDataset {
    /// Recovers the answer concept from question tokens alone.
    pub fn concept_from_question(question: &[usize]) -> Option<usize> {
        question.first().copied()
    }

    /// Nearest concept row to `features` (lowest index on ties).
    pub fn nearest_concept(&self, features: &[f64]) -> usize {
        let dist = |c: usize| -> f64 {
            self.concepts.row(c).iter().zip(features).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        (1..self.concepts.rows()).fold(0, |best, c| if dist(c) < dist(best) { c } else { best })
    }

    /// Recovers the answer node id from the question and the latent table:
    /// the only fact node with a neighbour decoding to the question's concept.
    pub fn answer_from_question(&self, sample: &TaskSample) -> Option<i64> {
        let c = Self::concept_from_question(&sample.question)?;
        let g = &sample.graph;
        let mut hits = g.fact_ids().into_iter().filter(|&f| {
            g.neighbors_in(f)
                .unwrap_or_default()
                .iter()
                .any(|(k, _)| g.node(*k).is_some_and(|n| self.nearest_concept(&n.features) == c))
        });
        let first = hits.next()?;
        hits.next().is_none().then_some(first)
    }

    /// Splits off the first `n` samples.
    pub fn split_at(&self, n: usize) -> (Vec<TaskSample>, Vec<TaskSample>) {
        let n = n.min(self.samples.len());
        (self.samples[..n].to_vec(), self.samples[n..].to_vec())
    }
}

fn question_tokens(concept: usize, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|j| (concept + j) % vocab).collect()
}

/// Deterministic in `cfg` (including the seed); samples are generated in
/// sequence so a longer run extends a shorter one.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<GeneratedDataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_node;
    let concept_data: Vec<f64> = (0..cfg.vocab_size * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let concepts = Matrix::new(cfg.vocab_size, d, concept_data)?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut answer_concepts = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let fact_concepts = index::sample(&mut rng, cfg.vocab_size, cfg.n_fact).into_vec();
        let answer_pos = rng.random_range(0..cfg.n_fact);
        let answer_concept = fact_concepts[answer_pos];
        let unrelated: Vec<usize> = (0..cfg.vocab_size)
            .filter(|c| !fact_concepts.contains(c))
            .collect();

        let n_ctx = cfg.n_visual + cfg.n_semantic;
        let fact_id = |i: usize| (n_ctx + i) as i64;
        let mut nodes = Vec::with_capacity(n_ctx + cfg.n_fact);
        let mut edges = Vec::new();

        let mut ctx_offset = 0;
        for (layer, n_layer) in [(LayerTag::Visual, cfg.n_visual), (LayerTag::Semantic, cfg.n_semantic)] {
            // Fact node i is wired to slot i mod n_layer; slots beyond n_fact
            // get one random fact. Slots are then shuffled over node ids.
            let mut slots: Vec<Vec<usize>> = vec![Vec::new(); n_layer];
            for i in 0..cfg.n_fact {
                slots[i % n_layer].push(i);
            }
            for slot in slots.iter_mut().skip(cfg.n_fact) {
                slot.push(rng.random_range(0..cfg.n_fact));
            }
            slots.shuffle(&mut rng);

            for (j, facts) in slots.iter().enumerate() {
                let id = (ctx_offset + j) as i64;
                let base = if facts.contains(&answer_pos) {
                    answer_concept
                } else if unrelated.is_empty() {
                    // every concept is in use; fall back to any non-answer one
                    let others: Vec<usize> = (0..cfg.vocab_size).filter(|&c| c != answer_concept).collect();
                    others[rng.random_range(0..others.len())]
                } else {
                    unrelated[rng.random_range(0..unrelated.len())]
                };
                let features: Vec<f64> = concepts
                    .row(base)
                    .iter()
                    .map(|&c| c + noise.sample(&mut rng))
                    .collect();
                nodes.push(GraphNode { id, layer, features });
                for &f in facts {
                    edges.push(GraphEdge {
                        src: id,
                        dst: fact_id(f),
                        relation_id: rng.random_range(0..cfg.n_relations),
                    });
                }
            }
            ctx_offset += n_layer;
        }

        for i in 0..cfg.n_fact {
            let features = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            nodes.push(GraphNode { id: fact_id(i), layer: LayerTag::Fact, features });
        }
        let labels = (0..cfg.n_fact).map(|i| u8::from(i == answer_pos)).collect();

        let mut sample = TaskSample {
            graph: MemoryGraph { d_node: d, nodes, edges },
            question: question_tokens(answer_concept, cfg.question_len, cfg.vocab_size),
            labels,
        };
        sample.canonicalize();
        samples.push(sample);
        answer_concepts.push(answer_concept);
    }

    Ok(GeneratedDataset {
        meta: cfg.meta(),
        samples,
        concepts,
        answer_concepts,
    })
}
