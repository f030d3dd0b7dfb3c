//! Input-dependent pruned message passing over a growing per-query
//! subgraph.
//!
//! Each step: pick the top attending-from nodes by attention, sample their
//! out-edges, score and propagate attention over the sampled horizon, keep
//! the top attending-to destinations, pass messages only on edges between
//! the two horizons, and apply a residual state update on the frontier.
//! State storage stays proportional to the visited set, never the graph.

use std::collections::{HashMap, HashSet};

use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionVector, CandidateEdge};
use crate::error::{Error, Result};
use crate::expand::{sample_neighbors, ExpansionFrontier, Horizons};
use crate::graph::{EdgeMask, KnowledgeGraph};
use crate::ignn::FullNodeStates;
use crate::model::BoundParams;
use crate::tensor::{Tape, Tensor};

/// A tail-prediction query `(head, rel, ?)`.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext {
    pub head: usize,
    pub rel: usize,
}

/// Plain-data record of one query's expansion, for export and analysis.
#[derive(Clone)]
pub struct Trace {
    pub head: usize,
    pub rel: usize,
    /// Attention snapshots per step, index 0 is the initial one-hot.
    pub attention_steps: Vec<Vec<(usize, f32)>>,
    pub frontiers: Vec<ExpansionFrontier>,
    /// Messages actually computed per step.
    pub message_counts: Vec<usize>,
}

/// Visited set, sparse node states, current attention and the trace.
pub struct SubgraphState {
    visited: Vec<usize>,
    visited_pos: HashMap<usize, usize>,
    states: Tensor,
    attention: AttentionVector,
    pub trace: Trace,
}

impl SubgraphState {
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }

    pub fn n_visited(&self) -> usize {
        self.visited.len()
    }

    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn attention(&self) -> &AttentionVector {
        &self.attention
    }
}

/// Start a subgraph at the query head: the head's state is its full-graph
/// state, attention is one-hot on the head.
pub fn init_subgraph(
    tape: &Tape,
    query: QueryContext,
    full: &FullNodeStates,
) -> Result<SubgraphState> {
    let states = tape.gather_rows(&full.states, &[query.head])?;
    let attention = AttentionVector::one_hot(query.head);
    Ok(SubgraphState {
        visited: vec![query.head],
        visited_pos: HashMap::from([(query.head, 0)]),
        states,
        attention: attention.clone(),
        trace: Trace {
            head: query.head,
            rel: query.rel,
            attention_steps: vec![attention.entries()],
            frontiers: Vec::new(),
            message_counts: Vec::new(),
        },
    })
}

/// One attending-sampling-attending step; grows the visited set by at most
/// `min(N1*N2, N3)` nodes.
#[allow(clippy::too_many_arguments)]
pub fn agnn_step(
    tape: &Tape,
    state: &mut SubgraphState,
    g: &KnowledgeGraph,
    full: &FullNodeStates,
    params: &BoundParams,
    ctx: QueryContext,
    horizons: &Horizons,
    mask: Option<&EdgeMask>,
    slope: f32,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if state.attention.is_empty() {
        return Err(Error::Numeric("attention support vanished".into()));
    }
    // (1) Attending-from horizon: top-N1 visited nodes by attention.
    let mut attending_from = attention::topk_select(&state.attention, horizons.max_attending_from);
    attending_from.sort_unstable();

    // (2) Sampling horizon: up to N2 out-edges per attending-from node.
    let sampled = sample_neighbors(
        g,
        &attending_from,
        horizons.max_sampling_per_node,
        mask,
        rng,
    )?;

    // (3) Score candidates and propagate attention over the horizon.
    let n_visited = state.visited.len();
    let candidates: Vec<CandidateEdge> = sampled
        .iter()
        .map(|e| CandidateEdge {
            src: e.src,
            rel: e.rel,
            dst: e.dst,
            src_row: state.visited_pos[&e.src],
            dst_row: state.visited_pos.get(&e.dst).copied().unwrap_or(n_visited),
        })
        .collect();

    // Extended state matrix: one trailing zero row stands in for every
    // not-yet-visited destination.
    let identity: Vec<usize> = (0..n_visited).collect();
    let ext_states = tape.scatter_rows(&state.states, &identity, n_visited + 1)?;

    let src_rows: Vec<usize> = candidates.iter().map(|c| c.src_row).collect();
    let dst_rows: Vec<usize> = candidates.iter().map(|c| c.dst_row).collect();
    let dst_ids: Vec<usize> = candidates.iter().map(|c| c.dst).collect();
    let rel_ids: Vec<usize> = candidates.iter().map(|c| c.rel).collect();

    let src_h = tape.gather_rows(&state.states, &src_rows)?;
    let dst_h = tape.gather_rows(&ext_states, &dst_rows)?;
    let dst_full = tape.gather_rows(&full.states, &dst_ids)?;
    let edge_ctx = query_context_rows(tape, params, ctx, &rel_ids)?;

    let (score_state, score_full) =
        attention::attention_scores(tape, &src_h, &dst_h, &dst_full, &edge_ctx, params, slope)?;
    let logits = tape.add(&score_state, &score_full)?;
    let transition = attention::build_transition(tape, &attending_from, &candidates, &logits)?;
    let propagated = attention::propagate_attention(tape, &state.attention, &transition)?;

    // (4) Attending-to horizon: top-N3 of the newly scored destinations.
    let attending_to = attention::topk_select(&propagated, horizons.max_attending_to);
    let attending_to_set: HashSet<usize> = attending_to.iter().copied().collect();

    // Mass may only rest on visited or attending-to nodes; prune the rest
    // and renormalize.
    let keep: Vec<usize> = propagated
        .nodes()
        .iter()
        .copied()
        .filter(|n| attending_to_set.contains(n) || state.visited_pos.contains_key(n))
        .collect();
    let next_attention = attention::restrict_attention(tape, &propagated, &keep)?;

    // (5, 6) Messages on (attending-from x attending-to) edges only,
    // aggregated per destination with 1/sqrt(count).
    let message_edges: Vec<&CandidateEdge> = candidates
        .iter()
        .filter(|c| attending_to_set.contains(&c.dst))
        .collect();

    // (8) applies updates to the attending-to and attending-from nodes.
    let mut targets: Vec<usize> = attending_from
        .iter()
        .chain(attending_to.iter())
        .copied()
        .collect::<HashSet<usize>>()
        .into_iter()
        .collect();
    targets.sort_unstable();
    let target_index: HashMap<usize, usize> =
        targets.iter().enumerate().map(|(i, &n)| (n, i)).collect();

    let aggregated = if message_edges.is_empty() {
        Tensor::zeros(&[targets.len(), full.states.shape()[1]])
    } else {
        let m_src_rows: Vec<usize> = message_edges.iter().map(|c| c.src_row).collect();
        let m_dst_rows: Vec<usize> = message_edges.iter().map(|c| c.dst_row).collect();
        let m_rel_ids: Vec<usize> = message_edges.iter().map(|c| c.rel).collect();
        let m_src_h = tape.gather_rows(&state.states, &m_src_rows)?;
        let m_dst_h = tape.gather_rows(&ext_states, &m_dst_rows)?;
        let m_ctx = query_context_rows(tape, params, ctx, &m_rel_ids)?;
        let m_in = tape.concat_cols(&[&m_src_h, &m_ctx, &m_dst_h])?;
        let messages = params.agnn_msg.forward(tape, &m_in, slope)?;
        let seg: Vec<usize> = message_edges.iter().map(|c| target_index[&c.dst]).collect();
        let sums = tape.segment_sum(&messages, &seg, targets.len())?;
        let mut counts = vec![0u32; targets.len()];
        for &s in &seg {
            counts[s] += 1;
        }
        let inv_sqrt: Vec<f32> = counts
            .iter()
            .map(|&c| if c > 0 { 1.0 / (c as f32).sqrt() } else { 0.0 })
            .collect();
        tape.scale_rows(&sums, &Tensor::constant(inv_sqrt, &[targets.len()]))?
    };

    // (7) Attending context: attention-weighted projection of the
    // full-graph state, zero weight for nodes outside the new support.
    let wh = tape.matmul(
        &tape.gather_rows(&full.states, &targets)?,
        &params.attend_proj,
    )?;
    let n_support = next_attention.len();
    let support_identity: Vec<usize> = (0..n_support).collect();
    let ext_att = tape.scatter_rows(&next_attention.values, &support_identity, n_support + 1)?;
    let att_rows: Vec<usize> = targets
        .iter()
        .map(|n| next_attention.position(*n).unwrap_or(n_support))
        .collect();
    let target_att = tape.gather_rows(&ext_att, &att_rows)?;
    let attended = tape.scale_rows(&wh, &target_att)?;

    // (8) Residual update over the target nodes.
    let q_rows = query_rows(tape, params, ctx, targets.len())?;
    let upd_ctx = tape.concat_cols(&[&attended, &q_rows.0, &q_rows.1])?;
    let old_rows: Vec<usize> = targets
        .iter()
        .map(|n| state.visited_pos.get(n).copied().unwrap_or(n_visited))
        .collect();
    let target_old = tape.gather_rows(&ext_states, &old_rows)?;
    let upd_in = tape.concat_cols(&[&target_old, &aggregated, &upd_ctx])?;
    let delta = params.agnn_upd.forward(tape, &upd_in, slope)?;

    // (9) Grow the visited set by the new attending-to nodes, then write
    // old + delta states into the enlarged matrix.
    let mut new_nodes: Vec<usize> = attending_to
        .iter()
        .copied()
        .filter(|n| !state.visited_pos.contains_key(n))
        .collect();
    new_nodes.sort_unstable();
    let mut visited = state.visited.clone();
    let mut visited_pos = state.visited_pos.clone();
    for &n in &new_nodes {
        visited_pos.insert(n, visited.len());
        visited.push(n);
    }
    let expanded = tape.scatter_rows(&state.states, &identity, visited.len())?;
    let target_new_rows: Vec<usize> = targets.iter().map(|n| visited_pos[n]).collect();
    let scattered = tape.scatter_rows(&delta, &target_new_rows, visited.len())?;
    let new_states = tape.add(&expanded, &scattered)?;

    state.trace.frontiers.push(ExpansionFrontier {
        attending_from,
        sampled_edges: sampled,
        attending_to,
    });
    state.trace.message_counts.push(message_edges.len());
    state.trace.attention_steps.push(next_attention.entries());
    state.visited = visited;
    state.visited_pos = visited_pos;
    state.states = new_states;
    state.attention = next_attention;
    Ok(())
}

/// Full pruned pass: `n_steps` expansion steps; the final attention is the
/// tail-prediction distribution.
#[allow(clippy::too_many_arguments)]
pub fn run_agnn(
    tape: &Tape,
    query: QueryContext,
    g: &KnowledgeGraph,
    full: &FullNodeStates,
    params: &BoundParams,
    horizons: &Horizons,
    mask: Option<&EdgeMask>,
    slope: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(AttentionVector, SubgraphState)> {
    let mut state = init_subgraph(tape, query, full)?;
    for _ in 0..horizons.n_steps {
        agnn_step(
            tape, &mut state, g, full, params, query, horizons, mask, slope, rng,
        )?;
    }
    Ok((state.attention.clone(), state))
}

/// Per-edge context rows `[e_rel_edge, e_head, e_rel_query]`.
fn query_context_rows(
    tape: &Tape,
    params: &BoundParams,
    ctx: QueryContext,
    edge_rels: &[usize],
) -> Result<Tensor> {
    let rel_embs = tape.gather_rows(&params.rel_emb, edge_rels)?;
    let (head_rows, qrel_rows) = query_rows(tape, params, ctx, edge_rels.len())?;
    tape.concat_cols(&[&rel_embs, &head_rows, &qrel_rows])
}

/// Query head/relation embeddings replicated `n` times.
fn query_rows(
    tape: &Tape,
    params: &BoundParams,
    ctx: QueryContext,
    n: usize,
) -> Result<(Tensor, Tensor)> {
    let head = tape.gather_rows(&params.entity_emb, &vec![ctx.head; n])?;
    let rel = tape.gather_rows(&params.rel_emb, &vec![ctx.rel; n])?;
    Ok((head, rel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expand::expansion_bound;
    use crate::graph::{KnowledgeGraph, Triple, TripleSet};
    use crate::ignn;
    use crate::model::{Dims, ModelParams};
    use rand::{Rng, SeedableRng};

    fn build(triples: &[(usize, usize, usize)], n: usize, n_rel: usize) -> KnowledgeGraph {
        let ts = TripleSet {
            triples: triples
                .iter()
                .map(|&(h, r, t)| Triple::new(h, r, t))
                .collect(),
            n_duplicates: 0,
        };
        KnowledgeGraph::build(&ts, n, n_rel, true, true).unwrap()
    }

    fn params_for(g: &KnowledgeGraph, seed: u64) -> ModelParams {
        let dims = Dims {
            n_entities: g.n_entities(),
            n_relations: g.n_relations(),
            state: 6,
            attention: 3,
            hidden: 6,
        };
        ModelParams::init(dims, 0.2, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn run(
        g: &KnowledgeGraph,
        m: &ModelParams,
        query: QueryContext,
        horizons: &Horizons,
        seed: u64,
    ) -> (AttentionVector, SubgraphState) {
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = ignn::run_ignn(&tape, g, &bound, 1, g.n_edges(), 0.2, &mut rng).unwrap();
        run_agnn(
            &tape, query, g, &full, &bound, horizons, None, 0.2, &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn init_starts_at_head_with_full_state() {
        let g = build(&[(0, 0, 1)], 2, 1);
        let m = params_for(&g, 1);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = ignn::run_ignn(&tape, &g, &bound, 1, 10, 0.2, &mut rng).unwrap();
        let s = init_subgraph(&tape, QueryContext { head: 1, rel: 0 }, &full).unwrap();
        assert_eq!(s.visited(), &[1]);
        let d = m.dims.state;
        assert_eq!(s.states().data(), &full.states.data()[d..2 * d]);
        assert_eq!(s.attention().entries(), vec![(1, 1.0)]);
        assert!(s.trace.frontiers.is_empty());
    }

    #[test]
    fn tight_horizons_on_chain_visit_one_new_node() {
        // head -> x -> y with inverse edges; N1=N2=N3=1 and one step can
        // only ever add a single node.
        let g = build(&[(0, 0, 1), (1, 0, 2)], 3, 1);
        let m = params_for(&g, 2);
        let h = Horizons::new(1, 1, 1, 1);
        let (_, s) = run(&g, &m, QueryContext { head: 0, rel: 0 }, &h, 3);
        assert!(s.n_visited() <= 2);
        assert_eq!(s.visited()[0], 0);
    }

    #[test]
    fn growth_per_step_is_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..10 {
            let n = rng.random_range(6..20usize);
            let mut triples = Vec::new();
            for _ in 0..rng.random_range(8..40usize) {
                triples.push((
                    rng.random_range(0..n),
                    rng.random_range(0..2usize),
                    rng.random_range(0..n),
                ));
            }
            triples.sort_unstable();
            triples.dedup();
            let g = build(&triples, n, 2);
            let m = params_for(&g, trial);
            let h = Horizons::new(
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
                3,
            );
            let cap = (h.max_attending_from * h.max_sampling_per_node).min(h.max_attending_to);
            let (_, s) = run(&g, &m, QueryContext { head: 0, rel: 0 }, &h, trial + 100);
            let mut allowed = 1usize;
            for f in &s.trace.frontiers {
                assert!(f.attending_to.len() <= h.max_attending_to);
                assert!(f.attending_from.len() <= h.max_attending_from);
                assert!(f.sampled_edges.len() <= h.max_attending_from * h.max_sampling_per_node);
                allowed += cap;
            }
            assert!(s.n_visited() <= allowed);
            assert!(s.n_visited() <= expansion_bound(&h));
        }
    }

    #[test]
    fn zero_mlps_keep_visited_states_fixed() {
        let g = build(&[(0, 0, 1), (1, 1, 2), (0, 1, 2)], 3, 2);
        let mut m = params_for(&g, 5);
        for e in 0..m.entries().len() {
            let name = m.entries()[e].name;
            if name.starts_with("agnn_msg") || name.starts_with("agnn_upd") {
                let n = m.entries()[e].data.len();
                m.param_slices_mut()[e].copy_from_slice(&vec![0.0; n]);
            }
        }
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = ignn::run_ignn(&tape, &g, &bound, 0, 10, 0.2, &mut rng).unwrap();
        let q = QueryContext { head: 0, rel: 0 };
        let mut s = init_subgraph(&tape, q, &full).unwrap();
        let before = s.states().data().to_vec();
        let h = Horizons::new(2, 3, 3, 1);
        agnn_step(&tape, &mut s, &g, &full, &bound, q, &h, None, 0.2, &mut rng).unwrap();
        let d = m.dims.state;
        // Row 0 (the head, previously visited) is unchanged.
        assert_eq!(&s.states().data()[0..d], &before[0..d]);
    }

    #[test]
    fn state_storage_tracks_visited_not_graph() {
        let g = build(&[(0, 0, 1), (1, 0, 2), (2, 0, 3), (3, 0, 4)], 50, 1);
        let m = params_for(&g, 6);
        let h = Horizons::new(2, 2, 2, 3);
        let (_, s) = run(&g, &m, QueryContext { head: 0, rel: 0 }, &h, 7);
        assert_eq!(s.states().shape()[0], s.n_visited());
        assert!(s.n_visited() < g.n_entities());
    }

    #[test]
    fn visited_grows_monotonically_and_support_stays_inside() {
        let g = build(&[(0, 0, 1), (1, 0, 2), (2, 1, 0), (1, 1, 3)], 4, 2);
        let m = params_for(&g, 8);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = ignn::run_ignn(&tape, &g, &bound, 1, g.n_edges(), 0.2, &mut rng).unwrap();
        let q = QueryContext { head: 0, rel: 0 };
        let mut s = init_subgraph(&tape, q, &full).unwrap();
        let h = Horizons::new(2, 2, 2, 1);
        let mut prev: HashSet<usize> = s.visited().iter().copied().collect();
        for _ in 0..4 {
            agnn_step(&tape, &mut s, &g, &full, &bound, q, &h, None, 0.2, &mut rng).unwrap();
            let now: HashSet<usize> = s.visited().iter().copied().collect();
            assert!(prev.is_subset(&now));
            for (node, _) in s.attention().entries() {
                assert!(now.contains(&node), "support node {node} not visited");
            }
            prev = now;
        }
    }

    #[test]
    fn message_count_bounded_by_horizon_product() {
        let g = build(
            &[(0, 0, 1), (0, 1, 2), (1, 0, 3), (2, 0, 3), (3, 1, 0)],
            4,
            2,
        );
        let m = params_for(&g, 9);
        let h = Horizons::new(2, 3, 4, 3);
        let (_, s) = run(&g, &m, QueryContext { head: 0, rel: 0 }, &h, 11);
        for &c in &s.trace.message_counts {
            assert!(c <= h.max_attending_from * h.max_sampling_per_node);
        }
    }

    #[test]
    fn query_relation_conditions_the_prediction() {
        let g = build(&[(0, 0, 1), (0, 1, 2), (1, 0, 2), (2, 1, 1)], 3, 2);
        let m = params_for(&g, 10);
        let h = Horizons::new(2, 4, 4, 2);
        let (a0, _) = run(&g, &m, QueryContext { head: 0, rel: 0 }, &h, 13);
        let (a1, _) = run(&g, &m, QueryContext { head: 0, rel: 1 }, &h, 13);
        let keys: HashSet<usize> = a0.nodes().iter().chain(a1.nodes()).copied().collect();
        let differs = keys
            .iter()
            .any(|&k| (a0.score(k) - a1.score(k)).abs() > 1e-6);
        assert!(
            differs,
            "changing the query relation left the prediction unchanged"
        );
    }

    #[test]
    fn fixed_seed_gives_identical_distribution() {
        let g = build(&[(0, 0, 1), (1, 0, 2), (2, 0, 0), (1, 1, 0)], 3, 2);
        let m = params_for(&g, 12);
        let h = Horizons::new(2, 2, 2, 3);
        let (a, _) = run(&g, &m, QueryContext { head: 0, rel: 1 }, &h, 21);
        let (b, _) = run(&g, &m, QueryContext { head: 0, rel: 1 }, &h, 21);
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn attention_sums_to_one_every_step() {
        let g = build(&[(0, 0, 1), (1, 0, 2), (2, 1, 3), (3, 0, 0)], 4, 2);
        let m = params_for(&g, 14);
        let h = Horizons::new(2, 3, 3, 4);
        let (_, s) = run(&g, &m, QueryContext { head: 0, rel: 0 }, &h, 15);
        for step in &s.trace.attention_steps {
            let sum: f32 = step.iter().map(|(_, v)| v).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(step.iter().all(|&(_, v)| v >= 0.0));
        }
    }
}
