//! Question-guided memory maintenance between reasoning steps.
//!
//! Each step first shrinks every node toward zero through a per-node two-way
//! attention between its content row and an appended zero row, then rewrites
//! all nodes synchronously from their own features, the sum of relation
//! messages from incoming neighbours, and the global inference state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::GraphIndex;
use crate::layers::Linear;
use crate::numerics::{Axis, Matrix, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReductionParams {
    /// d_node -> d_attn
    pub node: Linear,
    /// d_hidden -> d_attn
    pub state: Linear,
    /// d_attn -> 1
    pub score: Linear,
}

impl ReductionParams {
    pub fn new(
        store: &mut ParamStore,
        d_node: usize,
        d_hidden: usize,
        d_attn: usize,
        use_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            node: Linear::new(store, "reduce.node", d_node, d_attn, use_bias, rng),
            state: Linear::new(store, "reduce.state", d_hidden, d_attn, false, rng),
            score: Linear::new(store, "reduce.score", d_attn, 1, false, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateParams {
    /// (d_node + d_rel) -> d_rel_out
    pub relation: Linear,
    /// (d_node + d_rel_out + d_hidden) -> d_node
    pub node: Linear,
}

impl UpdateParams {
    pub fn new(
        store: &mut ParamStore,
        d_node: usize,
        d_rel: usize,
        d_rel_out: usize,
        d_hidden: usize,
        use_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            relation: Linear::new(store, "update.relation", d_node + d_rel, d_rel_out, use_bias, rng),
            node: Linear::new(store, "update.node", d_node + d_rel_out + d_hidden, d_node, use_bias, rng),
        }
    }

    fn rel_out(&self, store: &ParamStore) -> usize {
        store.value(self.relation.weight).cols()
    }
}

/// Content-row weight of each node's two-way softmax, as an `N x 1` column.
pub fn reduction_weights(
    tape: &mut Tape,
    store: &ParamStore,
    p: &ReductionParams,
    features: Var,
    h: Var,
) -> Result<Var> {
    let (n, d) = tape.shape(features);
    let state = p.state.forward(tape, store, h)?;

    let content = p.node.forward(tape, store, features)?;
    let content = tape.add_row(content, state)?;
    let content = tape.tanh(content)?;
    let content = p.score.forward(tape, store, content)?;

    let zero_row = tape.constant(Matrix::zeros(1, d));
    let null = p.node.forward(tape, store, zero_row)?;
    let null = tape.add(null, state)?;
    let null = tape.tanh(null)?;
    let null = p.score.forward(tape, store, null)?;
    let null = tape.gather_rows(null, &vec![0; n])?;

    let logits = tape.concat(&[content, null], Axis::Cols)?;
    let alpha = tape.softmax_rows(logits)?;
    tape.slice_cols(alpha, 0, 1)
}

/// Scales every node by its content weight; the zero row contributes nothing.
pub fn reduce(tape: &mut Tape, store: &ParamStore, p: &ReductionParams, features: Var, h: Var) -> Result<Var> {
    let alpha = reduction_weights(tape, store, p, features, h)?;
    tape.scale_rows(features, alpha)
}

/// Relation messages summed over incoming edges, one row per node.
pub fn aggregate_all(
    tape: &mut Tape,
    store: &ParamStore,
    p: &UpdateParams,
    index: &GraphIndex,
    features: Var,
    relations: Var,
) -> Result<Var> {
    let n = tape.shape(features).0;
    if index.edge_src.is_empty() {
        return Ok(tape.constant(Matrix::zeros(n, p.rel_out(store))));
    }
    let src = tape.gather_rows(features, &index.edge_src)?;
    let rel = tape.gather_rows(relations, &index.edge_rel)?;
    let pair = tape.concat(&[src, rel], Axis::Cols)?;
    let msgs = p.relation.forward(tape, store, pair)?;
    tape.scatter_add_rows(msgs, &index.edge_dst, n)
}

/// `rel_i` for a single node id.
pub fn aggregate_relations(
    tape: &mut Tape,
    store: &ParamStore,
    p: &UpdateParams,
    index: &GraphIndex,
    features: Var,
    relations: Var,
    node_id: i64,
) -> Result<Var> {
    let row = index.row_of(node_id)?;
    let all = aggregate_all(tape, store, p, index, features, relations)?;
    tape.gather_rows(all, &[row])
}

/// Synchronous node rewrite from old features, relation sums and `h`.
#[allow(clippy::too_many_arguments)]
pub fn update(
    tape: &mut Tape,
    store: &ParamStore,
    p: &UpdateParams,
    index: &GraphIndex,
    features: Var,
    h: Var,
    relations: Var,
    nonlinear: bool,
) -> Result<Var> {
    let n = tape.shape(features).0;
    if n != index.n_nodes {
        return Err(Error::Shape {
            op: "memory::update",
            lhs: (index.n_nodes, index.d_node),
            rhs: tape.shape(features),
        });
    }
    let rel = aggregate_all(tape, store, p, index, features, relations)?;
    let hb = tape.gather_rows(h, &vec![0; n])?;
    let cat = tape.concat(&[features, rel, hb], Axis::Cols)?;
    let out = p.node.forward(tape, store, cat)?;
    if nonlinear {
        tape.tanh(out)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphEdge, GraphNode, LayerTag, MemoryGraph};
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero(store: &mut ParamStore, l: &Linear) {
        for id in std::iter::once(l.weight).chain(l.bias) {
            let (r, c) = store.value(id).shape();
            store.set_value(id, Matrix::zeros(r, c)).unwrap();
        }
    }

    fn graph(n: usize, d: usize, edges: &[(i64, i64, usize)]) -> MemoryGraph {
        MemoryGraph {
            d_node: d,
            nodes: (0..n)
                .map(|i| GraphNode {
                    id: i as i64,
                    layer: LayerTag::ALL[i % 3],
                    features: (0..d).map(|j| ((i * d + j) as f64 * 0.7).sin()).collect(),
                })
                .collect(),
            edges: edges.iter().map(|&(src, dst, relation_id)| GraphEdge { src, dst, relation_id }).collect(),
        }
    }

    #[test]
    fn zero_score_halves_every_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = ReductionParams::new(&mut store, 3, 4, 5, true, &mut rng);
        zero(&mut store, &p.score);
        let g = graph(4, 3, &[]);
        let mut tape = Tape::new();
        let f = tape.constant(g.feature_matrix().unwrap());
        let h = tape.constant(Matrix::row_vector(&[0.3, -0.1, 0.8, 0.2]).unwrap());
        let out = reduce(&mut tape, &store, &p, f, h).unwrap();
        let expected = g.feature_matrix().unwrap().scale(0.5).unwrap();
        assert_eq!(tape.value(out), &expected);
    }

    #[test]
    fn zero_node_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = ReductionParams::new(&mut store, 2, 2, 3, true, &mut rng);
        let mut tape = Tape::new();
        let f = tape.constant(Matrix::zeros(1, 2));
        let h = tape.constant(Matrix::row_vector(&[1.0, -1.0]).unwrap());
        let alpha = reduction_weights(&mut tape, &store, &p, f, h).unwrap();
        assert_eq!(tape.value(alpha).data(), &[0.5]);
        let out = reduce(&mut tape, &store, &p, f, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn reduction_matches_hand_computation() {
        let mut store = ParamStore::new();
        let node = store.add("n", Matrix::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.4]]).unwrap());
        let node_b = store.add("nb", Matrix::row_vector(&[0.05, -0.05]).unwrap());
        let state = store.add("s", Matrix::from_rows(&[vec![0.3, 0.0], vec![-0.6, 0.2]]).unwrap());
        let score = store.add("a", Matrix::col_vector(&[1.5, -0.7]).unwrap());
        let p = ReductionParams {
            node: Linear { weight: node, bias: Some(node_b) },
            state: Linear { weight: state, bias: None },
            score: Linear { weight: score, bias: None },
        };
        let v = [0.8, -1.2];
        let h = [0.4, 0.9];
        // by hand: s_h = h·Wh; content = tanh(v·Wv + b + s_h)·a; null = tanh(b + s_h)·a
        let s_h: [f64; 2] = [0.4 * 0.3 + 0.9 * -0.6, 0.4 * 0.0 + 0.9 * 0.2];
        let c: [f64; 2] = [
            (0.8 * 0.5 + -1.2 * 0.1 + 0.05 + s_h[0]).tanh(),
            (0.8 * -0.2 + -1.2 * 0.4 - 0.05 + s_h[1]).tanh(),
        ];
        let z: [f64; 2] = [(0.05 + s_h[0]).tanh(), (-0.05 + s_h[1]).tanh()];
        let sc = c[0] * 1.5 + c[1] * -0.7;
        let sz = z[0] * 1.5 + z[1] * -0.7;
        let alpha = sc.exp() / (sc.exp() + sz.exp());

        let mut tape = Tape::new();
        let f = tape.constant(Matrix::row_vector(&v).unwrap());
        let hv = tape.constant(Matrix::row_vector(&h).unwrap());
        let out = reduce(&mut tape, &store, &p, f, hv).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - alpha * v[0]).abs() < 1e-14);
        assert!((got[1] - alpha * v[1]).abs() < 1e-14);
    }

    fn update_setup(seed: u64, use_bias: bool) -> (ParamStore, UpdateParams, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = UpdateParams::new(&mut store, 2, 2, 4, 3, use_bias, &mut rng);
        let rels = Matrix::new(3, 2, (0..6).map(|i| (i as f64 * 0.9).cos()).collect()).unwrap();
        (store, p, rels)
    }

    #[test]
    fn isolated_node_has_zero_relation_sum() {
        let (store, p, rels) = update_setup(3, true);
        let g = graph(3, 2, &[(0, 1, 2)]);
        let idx = GraphIndex::new(&g).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(g.feature_matrix().unwrap());
        let r = tape.constant(rels);
        let rel = aggregate_relations(&mut tape, &store, &p, &idx, f, r, 2).unwrap();
        assert_eq!(tape.value(rel).data(), &[0.0; 4]);
        assert!(aggregate_relations(&mut tape, &store, &p, &idx, f, r, 9).is_err());
    }

    #[test]
    fn identity_selector_passes_concatenation() {
        let (mut store, p, rels) = update_setup(4, false);
        store.set_value(p.relation.weight, Matrix::identity(4)).unwrap();
        let g = graph(2, 2, &[(0, 1, 1)]);
        let idx = GraphIndex::new(&g).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(g.feature_matrix().unwrap());
        let r = tape.constant(rels.clone());
        let rel = aggregate_relations(&mut tape, &store, &p, &idx, f, r, 1).unwrap();
        let mut expected = g.nodes[0].features.clone();
        expected.extend_from_slice(rels.row(1));
        assert_eq!(tape.value(rel).data(), &expected[..]);
    }

    #[test]
    fn relation_sum_is_additive() {
        let (store, p, rels) = update_setup(5, true);
        let edges = [(0, 3, 0), (1, 3, 2), (2, 3, 1)];
        let g = graph(4, 2, &edges);
        let idx = GraphIndex::new(&g).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(g.feature_matrix().unwrap());
        let r = tape.constant(rels.clone());
        let all = aggregate_relations(&mut tape, &store, &p, &idx, f, r, 3).unwrap();
        let mut sum = vec![0.0; 4];
        for e in edges {
            let gi = graph(4, 2, &[e]);
            let ii = GraphIndex::new(&gi).unwrap();
            let one = aggregate_relations(&mut tape, &store, &p, &ii, f, r, 3).unwrap();
            for (s, v) in sum.iter_mut().zip(tape.value(one).data()) {
                *s += v;
            }
        }
        for (a, b) in tape.value(all).data().iter().zip(&sum) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_update_map_clears_features() {
        let (mut store, p, rels) = update_setup(6, true);
        zero(&mut store, &p.node);
        let g = graph(3, 2, &[(0, 1, 0), (1, 2, 1)]);
        let idx = GraphIndex::new(&g).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(g.feature_matrix().unwrap());
        let h = tape.constant(Matrix::row_vector(&[1.0, 2.0, 3.0]).unwrap());
        let r = tape.constant(rels);
        let out = update(&mut tape, &store, &p, &idx, f, h, r, false).unwrap();
        assert_eq!(tape.value(out), &Matrix::zeros(3, 2));
    }

    #[test]
    fn synchronous_update_matches_hand_computation() {
        // 2 nodes, edge 0 -> 1; every output uses the OLD feature of node 0.
        let (store, p, rels) = update_setup(7, true);
        let g = graph(2, 2, &[(0, 1, 2)]);
        let idx = GraphIndex::new(&g).unwrap();
        let h = [0.2, -0.4, 0.6];
        let mut tape = Tape::new();
        let f = tape.constant(g.feature_matrix().unwrap());
        let hv = tape.constant(Matrix::row_vector(&h).unwrap());
        let r = tape.constant(rels.clone());
        let out = update(&mut tape, &store, &p, &idx, f, hv, r, false).unwrap();

        let affine = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.value(l.weight);
            (0..w.cols())
                .map(|j| l.bias.map_or(0.0, |b| store.value(b).get(0, j)) + x.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>())
                .collect()
        };
        let v0 = g.nodes[0].features.clone();
        let v1 = g.nodes[1].features.clone();
        let msg = affine(&p.relation, &[v0.clone(), rels.row(2).to_vec()].concat());
        let new0 = affine(&p.node, &[v0.clone(), vec![0.0; 4], h.to_vec()].concat());
        let new1 = affine(&p.node, &[v1, msg, h.to_vec()].concat());
        let got = tape.value(out);
        for (a, b) in got.row(0).iter().zip(&new0).chain(got.row(1).iter().zip(&new1)) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn relabeling_nodes_permutes_outputs() {
        let (store, p, rels) = update_setup(8, true);
        let g = graph(4, 2, &[(0, 2, 1), (1, 2, 0), (3, 0, 2)]);
        // reverse ids: id i -> 3 - i
        let mut g2 = g.clone();
        for n in &mut g2.nodes {
            n.id = 3 - n.id;
        }
        for e in &mut g2.edges {
            e.src = 3 - e.src;
            e.dst = 3 - e.dst;
        }
        g2.canonicalize();
        let run = |g: &MemoryGraph| {
            let idx = GraphIndex::new(g).unwrap();
            let mut tape = Tape::new();
            let f = tape.constant(g.feature_matrix().unwrap());
            let h = tape.constant(Matrix::row_vector(&[0.1, 0.2, 0.3]).unwrap());
            let r = tape.constant(rels.clone());
            let out = update(&mut tape, &store, &p, &idx, f, h, r, false).unwrap();
            tape.value(out).clone()
        };
        let a = run(&g);
        let b = run(&g2);
        for i in 0..4 {
            assert_eq!(a.row(i), b.row(3 - i));
        }
    }

    #[test]
    fn reduce_then_update_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let rp = ReductionParams::new(&mut store, 3, 2, 4, true, &mut rng);
        let up = UpdateParams::new(&mut store, 3, 2, 3, 2, true, &mut rng);
        let rel_table = store.add_glorot("relations", 2, 2, &mut rng);
        let hp = store.add_glorot("h", 1, 2, &mut rng);
        let g = graph(4, 3, &[(0, 1, 0), (2, 1, 1), (3, 0, 1)]);
        let idx = GraphIndex::new(&g).unwrap();
        let feats = g.feature_matrix().unwrap();
        let report = grad_check(
            |s, t| {
                let f = t.constant(feats.clone());
                let h = t.param(s, hp);
                let r = t.param(s, rel_table);
                let f = reduce(t, s, &rp, f, h)?;
                let f = update(t, s, &up, &idx, f, h, r, true)?;
                let sq = t.mul(f, f)?;
                t.sum_all(sq)
            },
            &store,
            1e-5,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report}");
    }
}
