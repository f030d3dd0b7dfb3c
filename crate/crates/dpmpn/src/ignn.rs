//! Input-agnostic full-graph message passing.
//!
//! Produces one shared node-state matrix per batch, independent of the
//! queries. Each step samples an edge subset, computes per-edge messages
//! with a two-layer MLP over [source state, relation embedding,
//! destination state], aggregates by a variance-preserving `1/sqrt(n)`
//! scaled sum, and applies a residual update to every node.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::KnowledgeGraph;
use crate::model::BoundParams;
use crate::tensor::{Tape, Tensor};

/// Shared node states for the whole graph.
pub struct FullNodeStates {
    /// `[n_entities, state]`
    pub states: Tensor,
    pub steps_run: usize,
}

/// Uniform edge sample without replacement, `min(cap, n_edges)` ids in
/// ascending order. Deterministic for a fixed seed.
pub fn sample_edge_set(g: &KnowledgeGraph, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(cap > 0, "edge cap must be positive");
    let n = g.n_edges();
    if cap >= n {
        return (0..n).collect();
    }
    let mut ids: Vec<usize> = rand::seq::index::sample(rng, n, cap).into_vec();
    ids.sort_unstable();
    ids
}

/// Per-edge messages: `mlp([state(src), rel_emb(rel), state(dst)])`.
pub fn compute_messages(
    tape: &Tape,
    states: &Tensor,
    edges: &[(usize, usize, usize)],
    params: &BoundParams,
    slope: f32,
) -> Result<Tensor> {
    let srcs: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let rels: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let dsts: Vec<usize> = edges.iter().map(|e| e.2).collect();
    let src_states = tape.gather_rows(states, &srcs)?;
    let rel_embs = tape.gather_rows(&params.rel_emb, &rels)?;
    let dst_states = tape.gather_rows(states, &dsts)?;
    let x = tape.concat_cols(&[&src_states, &rel_embs, &dst_states])?;
    params.ignn_msg.forward(tape, &x, slope)
}

/// Sum messages per destination and divide by the square root of how many
/// arrived; nodes that received nothing stay at zero.
pub fn aggregate_scaled(
    tape: &Tape,
    messages: &Tensor,
    dst_ids: &[usize],
    n_nodes: usize,
) -> Result<Tensor> {
    let sums = tape.segment_sum(messages, dst_ids, n_nodes)?;
    let mut counts = vec![0u32; n_nodes];
    for &d in dst_ids {
        counts[d] += 1;
    }
    let inv_sqrt: Vec<f32> = counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / (c as f32).sqrt() } else { 0.0 })
        .collect();
    tape.scale_rows(&sums, &Tensor::constant(inv_sqrt, &[n_nodes]))
}

/// Residual update over every node:
/// `state + mlp([state, pooled, entity_emb])`.
pub fn update_states(
    tape: &Tape,
    states: &Tensor,
    pooled: &Tensor,
    params: &BoundParams,
    slope: f32,
) -> Result<Tensor> {
    let x = tape.concat_cols(&[states, pooled, &params.entity_emb])?;
    let delta = params.ignn_upd.forward(tape, &x, slope)?;
    tape.add(states, &delta)
}

/// Run `steps` message-passing iterations from the entity embeddings,
/// sampling a fresh edge subset each step. Zero steps returns the
/// embedding matrix itself (the GNN-off ablation).
pub fn run_ignn(
    tape: &Tape,
    g: &KnowledgeGraph,
    params: &BoundParams,
    steps: usize,
    edge_cap: usize,
    slope: f32,
    rng: &mut ChaCha8Rng,
) -> Result<FullNodeStates> {
    let mut states = params.entity_emb.clone();
    for _ in 0..steps {
        let edge_ids = sample_edge_set(g, edge_cap, rng);
        let edges: Vec<(usize, usize, usize)> = edge_ids
            .iter()
            .map(|&id| {
                let e = g.edge(id);
                (e.src, e.rel, e.dst)
            })
            .collect();
        let messages = compute_messages(tape, &states, &edges, params, slope)?;
        let dsts: Vec<usize> = edges.iter().map(|e| e.2).collect();
        let pooled = aggregate_scaled(tape, &messages, &dsts, g.n_entities())?;
        states = update_states(tape, &states, &pooled, params, slope)?;
    }
    Ok(FullNodeStates {
        states,
        steps_run: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{KnowledgeGraph, Triple, TripleSet};
    use crate::model::{Dims, ModelParams};
    use rand::{Rng, SeedableRng};

    fn toy_graph() -> KnowledgeGraph {
        let ts = TripleSet {
            triples: vec![
                Triple::new(0, 0, 1),
                Triple::new(1, 1, 2),
                Triple::new(2, 0, 3),
            ],
            n_duplicates: 0,
        };
        KnowledgeGraph::build(&ts, 4, 2, true, true).unwrap()
    }

    fn toy_params(seed: u64) -> ModelParams {
        let g = toy_graph();
        let dims = Dims {
            n_entities: g.n_entities(),
            n_relations: g.n_relations(),
            state: 4,
            attention: 2,
            hidden: 4,
        };
        ModelParams::init(dims, 0.1, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn edge_sample_saturates() {
        let g = toy_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = sample_edge_set(&g, 1000, &mut rng);
        assert_eq!(ids.len(), g.n_edges());
        assert_eq!(ids, (0..g.n_edges()).collect::<Vec<_>>());
    }

    #[test]
    fn edge_sample_reproducible() {
        let g = toy_graph();
        let a = sample_edge_set(&g, 1, &mut ChaCha8Rng::seed_from_u64(4));
        let b = sample_edge_set(&g, 1, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn edge_sample_uniform_frequencies() {
        let g = toy_graph();
        let n = g.n_edges();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trials = 10_000;
        let mut counts = vec![0u32; n];
        for _ in 0..trials {
            for id in sample_edge_set(&g, 1, &mut rng) {
                counts[id] += 1;
            }
        }
        let p = 1.0 / n as f64;
        let expect = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "{c} vs {expect:.1}"
            );
        }
    }

    #[test]
    fn zero_weights_give_zero_messages() {
        let g = toy_graph();
        let mut m = toy_params(1);
        for e in 0..m.entries().len() {
            let name = m.entries()[e].name;
            if name.starts_with("ignn_msg") {
                let n = m.entries()[e].data.len();
                m.param_slices_mut()[e].copy_from_slice(&vec![0.0; n]);
            }
        }
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let edges: Vec<(usize, usize, usize)> = (0..g.n_edges())
            .map(|i| {
                let e = g.edge(i);
                (e.src, e.rel, e.dst)
            })
            .collect();
        let msgs = compute_messages(&tape, &bound.entity_emb, &edges, &bound, 0.2).unwrap();
        assert!(msgs.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn messages_match_direct_mlp_evaluation() {
        let g = toy_graph();
        let m = toy_params(2);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let e = g.edge(0);
        let msgs = compute_messages(
            &tape,
            &bound.entity_emb,
            &[(e.src, e.rel, e.dst)],
            &bound,
            0.2,
        )
        .unwrap();

        // Direct dense evaluation of the same MLP.
        let d = m.dims.state;
        let ent = &m.entries()[0].data;
        let rel = &m.entries()[1].data;
        let mut x = Vec::new();
        x.extend_from_slice(&ent[e.src * d..(e.src + 1) * d]);
        x.extend_from_slice(&rel[e.rel * d..(e.rel + 1) * d]);
        x.extend_from_slice(&ent[e.dst * d..(e.dst + 1) * d]);
        let w1 = &m.entries()[2].data;
        let b1 = &m.entries()[3].data;
        let w2 = &m.entries()[4].data;
        let b2 = &m.entries()[5].data;
        let h = m.dims.hidden;
        let mut hid = vec![0.0f32; h];
        for j in 0..h {
            let mut acc = b1[j];
            for (i, xv) in x.iter().enumerate() {
                acc += xv * w1[i * h + j];
            }
            hid[j] = if acc > 0.0 { acc } else { 0.2 * acc };
        }
        for j in 0..d {
            let mut acc = b2[j];
            for (i, hv) in hid.iter().enumerate() {
                acc += hv * w2[i * d + j];
            }
            let expect = acc.tanh();
            assert!((msgs.data()[j] - expect).abs() < 1e-6);
        }
        // All message entries are tanh outputs, inside (-1, 1).
        assert!(msgs.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn aggregation_scales_by_sqrt_count() {
        let tape = Tape::new();
        let msgs = Tensor::constant(vec![2.0, 4.0], &[2, 1]);
        let pooled = aggregate_scaled(&tape, &msgs, &[1, 1], 3).unwrap();
        assert!((pooled.data()[1] - 6.0 / 2f32.sqrt()).abs() < 1e-6);
        assert_eq!(pooled.data()[0], 0.0);
        assert_eq!(pooled.data()[2], 0.0);

        let msgs = Tensor::constant(vec![3.5], &[1, 1]);
        let pooled = aggregate_scaled(&tape, &msgs, &[0], 1).unwrap();
        assert_eq!(pooled.data()[0], 3.5);
    }

    #[test]
    fn zero_update_mlp_means_states_unchanged() {
        let g = toy_graph();
        let mut m = toy_params(3);
        for e in 0..m.entries().len() {
            let name = m.entries()[e].name;
            if name.starts_with("ignn_upd") {
                let n = m.entries()[e].data.len();
                m.param_slices_mut()[e].copy_from_slice(&vec![0.0; n]);
            }
        }
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_ignn(&tape, &g, &bound, 3, 100, 0.2, &mut rng).unwrap();
        assert_eq!(out.states.data(), bound.entity_emb.data());
    }

    #[test]
    fn single_step_matches_composit_oracle() {
        // One full-edge step recomputed with an independent composition of
        // the already-verified pieces.
        let g = toy_graph();
        let m = toy_params(4);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_ignn(&tape, &g, &bound, 1, g.n_edges(), 0.2, &mut rng).unwrap();

        let edges: Vec<(usize, usize, usize)> = (0..g.n_edges())
            .map(|i| {
                let e = g.edge(i);
                (e.src, e.rel, e.dst)
            })
            .collect();
        let msgs = compute_messages(&tape, &bound.entity_emb, &edges, &bound, 0.2).unwrap();
        let dsts: Vec<usize> = edges.iter().map(|e| e.2).collect();
        let pooled = aggregate_scaled(&tape, &msgs, &dsts, g.n_entities()).unwrap();
        let expect = update_states(&tape, &bound.entity_emb, &pooled, &bound, 0.2).unwrap();
        for (a, b) in out.states.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn update_touches_nodes_without_messages() {
        // Node 3 has no incoming sampled message when we restrict to one
        // edge, but its state still moves through the update MLP.
        let g = toy_graph();
        let m = toy_params(5);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let msgs = compute_messages(&tape, &bound.entity_emb, &[(0, 0, 1)], &bound, 0.2).unwrap();
        let pooled = aggregate_scaled(&tape, &msgs, &[1], g.n_entities()).unwrap();
        let updated = update_states(&tape, &bound.entity_emb, &pooled, &bound, 0.2).unwrap();
        let d = m.dims.state;
        let before = &bound.entity_emb.data()[3 * d..4 * d];
        let after = &updated.data()[3 * d..4 * d];
        assert!(before.iter().zip(after).any(|(x, y)| x != y));
    }

    #[test]
    fn zero_steps_returns_embeddings() {
        let g = toy_graph();
        let m = toy_params(6);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_ignn(&tape, &g, &bound, 0, 100, 0.2, &mut rng).unwrap();
        assert_eq!(out.states.data(), bound.entity_emb.data());
        assert_eq!(out.steps_run, 0);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let g = toy_graph();
        let m = toy_params(7);
        let run = |seed: u64| {
            let tape = Tape::new();
            let bound = m.bind(&tape, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_ignn(&tape, &g, &bound, 2, 4, 0.2, &mut rng)
                .unwrap()
                .states
                .data()
                .to_vec()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn states_stay_finite_over_eight_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let n = rng.random_range(4..10usize);
            let mut triples = Vec::new();
            for _ in 0..rng.random_range(3..20usize) {
                triples.push(Triple::new(
                    rng.random_range(0..n),
                    rng.random_range(0..2usize),
                    rng.random_range(0..n),
                ));
            }
            triples.sort();
            triples.dedup();
            let ts = TripleSet {
                triples,
                n_duplicates: 0,
            };
            let g = KnowledgeGraph::build(&ts, n, 2, true, true).unwrap();
            let dims = Dims {
                n_entities: n,
                n_relations: g.n_relations(),
                state: 6,
                attention: 3,
                hidden: 6,
            };
            let m = ModelParams::init(dims, 0.1, &mut rng);
            let tape = Tape::new();
            let bound = m.bind(&tape, false);
            let out = run_ignn(&tape, &g, &bound, 8, 50, 0.2, &mut rng).unwrap();
            assert!(out.states.data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn edge_order_within_step_does_not_change_states() {
        let g = toy_graph();
        let m = toy_params(9);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let edges: Vec<(usize, usize, usize)> = (0..g.n_edges())
            .map(|i| {
                let e = g.edge(i);
                (e.src, e.rel, e.dst)
            })
            .collect();
        let mut shuffled = edges.clone();
        shuffled.reverse();

        let step = |edges: &[(usize, usize, usize)]| {
            let msgs = compute_messages(&tape, &bound.entity_emb, edges, &bound, 0.2).unwrap();
            let dsts: Vec<usize> = edges.iter().map(|e| e.2).collect();
            let pooled = aggregate_scaled(&tape, &msgs, &dsts, g.n_entities()).unwrap();
            update_states(&tape, &bound.entity_emb, &pooled, &bound, 0.2).unwrap()
        };
        let a = step(&edges);
        let b = step(&shuffled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
