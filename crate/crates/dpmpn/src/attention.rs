//! Flow-style attention over the sampled neighborhood.
//!
//! Each step scores candidate edges with two bilinear forms: one over the
//! pruned-GNN states on both sides (favors visited nodes) and one pairing
//! the source state with the full-graph state of the destination (reaches
//! unseen nodes). It merges parallel edges by summing their scores across
//! relations, softmaxes per source, pushes probability mass along the
//! resulting transition, and renormalizes to repair the mass lost to
//! pruning.

use crate::error::{Error, Result};
use crate::model::BoundParams;
use crate::tensor::{Tape, Tensor};

/// Sparse probability distribution over nodes. `nodes` is sorted;
/// `values` aligns with it and sums to one.
#[derive(Clone)]
pub struct AttentionVector {
    nodes: Vec<usize>,
    pub values: Tensor,
}

impl AttentionVector {
    pub fn new(nodes: Vec<usize>, values: Tensor) -> AttentionVector {
        debug_assert_eq!(nodes.len(), values.len());
        debug_assert!(
            nodes.windows(2).all(|w| w[0] < w[1]),
            "support must be sorted"
        );
        AttentionVector { nodes, values }
    }

    /// One-hot distribution on the query head.
    pub fn one_hot(head: usize) -> AttentionVector {
        AttentionVector {
            nodes: vec![head],
            values: Tensor::constant(vec![1.0], &[1]),
        }
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, node: usize) -> Option<usize> {
        self.nodes.binary_search(&node).ok()
    }

    pub fn score(&self, node: usize) -> f32 {
        self.position(node).map_or(0.0, |i| self.values.data()[i])
    }

    /// Snapshot as plain pairs, for traces and reports.
    pub fn entries(&self) -> Vec<(usize, f32)> {
        self.nodes
            .iter()
            .copied()
            .zip(self.values.data().iter().copied())
            .collect()
    }
}

/// Candidate edge for one attention step. Sources must be visited nodes;
/// positions index the state matrix and attention support.
#[derive(Debug, Clone, Copy)]
pub struct CandidateEdge {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
    /// Row of the source in the visited-state matrix.
    pub src_row: usize,
    /// Row of the destination in the extended state matrix (a trailing
    /// zero row stands in for unvisited destinations).
    pub dst_row: usize,
}

/// Per-source transition probabilities over merged `(source, destination)`
/// pairs; each source's probabilities sum to one.
pub struct TransitionBlock {
    /// Source node ids, in the order their segments appear.
    pub sources: Vec<usize>,
    /// Per merged pair: (index into `sources`, destination node id).
    pub pairs: Vec<(usize, usize)>,
    /// Sorted unique destination node ids.
    pub dsts: Vec<usize>,
    /// Per merged pair: index into `dsts`.
    pub pair_dst: Vec<usize>,
    /// `[n_pairs]` softmax probabilities.
    pub probs: Tensor,
}

/// Both interaction scores for every candidate edge:
/// `state~state` (bilinear over pruned-GNN states) and `state~full`
/// (source state against the full-graph state of the destination).
/// All row tensors are per-edge: `src_h`/`dst_h` are pruned-GNN states,
/// `dst_full` the full-graph states, `ctx` the per-edge context rows.
pub fn attention_scores(
    tape: &Tape,
    src_h: &Tensor,
    dst_h: &Tensor,
    dst_full: &Tensor,
    ctx: &Tensor,
    params: &BoundParams,
    slope: f32,
) -> Result<(Tensor, Tensor)> {
    let src_in = tape.concat_cols(&[src_h, ctx])?;
    let dst_in = tape.concat_cols(&[dst_h, ctx])?;
    let full_in = tape.concat_cols(&[dst_full, ctx])?;

    let bilinear = |left: &Tensor, w: &Tensor, right: &Tensor| -> Result<Tensor> {
        tape.row_sum(&tape.mul(&tape.matmul(left, w)?, right)?)
    };

    let u1 = params.att_state_src.forward(tape, &src_in, slope)?;
    let v1 = params.att_state_dst.forward(tape, &dst_in, slope)?;
    let score_state = bilinear(&u1, &params.att_bilinear_state, &v1)?;

    let u2 = params.att_full_src.forward(tape, &src_in, slope)?;
    let v2 = params.att_full_dst.forward(tape, &full_in, slope)?;
    let score_full = bilinear(&u2, &params.att_bilinear_full, &v2)?;

    Ok((score_state, score_full))
}

/// Merge parallel edges (same source and destination, different relation)
/// by summing their scores, then softmax per source. `edges` must be
/// grouped by source; every listed source needs at least one edge.
pub fn build_transition(
    tape: &Tape,
    sources: &[usize],
    edges: &[CandidateEdge],
    scores: &Tensor,
) -> Result<TransitionBlock> {
    if scores.len() != edges.len() {
        return Err(Error::Shape(format!(
            "transition: {} scores for {} edges",
            scores.len(),
            edges.len()
        )));
    }
    let src_index: std::collections::HashMap<usize, usize> =
        sources.iter().enumerate().map(|(i, &s)| (s, i)).collect();

    // Canonical edge order: by (source position, destination, relation).
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&i| {
        let e = &edges[i];
        (src_index[&e.src], e.dst, e.rel)
    });

    // Runs of equal (source, destination) collapse into one pair.
    let mut pair_of_edge = vec![0usize; edges.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &i in &order {
        let e = &edges[i];
        let key = (src_index[&e.src], e.dst);
        if pairs.last() != Some(&key) {
            pairs.push(key);
        }
        pair_of_edge[i] = pairs.len() - 1;
    }

    let mut seen_src = vec![false; sources.len()];
    for &(s, _) in &pairs {
        seen_src[s] = true;
    }
    if let Some(missing) = seen_src.iter().position(|&s| !s) {
        return Err(Error::Graph(format!(
            "transition: source node {} has no candidate edges",
            sources[missing]
        )));
    }

    let merged = tape.segment_sum(scores, &pair_of_edge, pairs.len())?;
    let seg_ids: Vec<usize> = pairs.iter().map(|&(s, _)| s).collect();
    let probs = tape.segment_softmax(&merged, &seg_ids, sources.len())?;

    let mut dsts: Vec<usize> = pairs.iter().map(|&(_, d)| d).collect();
    dsts.sort_unstable();
    dsts.dedup();
    let pair_dst: Vec<usize> = pairs
        .iter()
        .map(|&(_, d)| dsts.binary_search(&d).unwrap())
        .collect();

    Ok(TransitionBlock {
        sources: sources.to_vec(),
        pairs,
        dsts,
        pair_dst,
        probs,
    })
}

/// Push mass through the transition and renormalize. Mass held by support
/// nodes outside the transition's sources is dropped; the 1-norm division
/// repairs the total. Fails when no mass flows at all.
pub fn propagate_attention(
    tape: &Tape,
    a: &AttentionVector,
    t: &TransitionBlock,
) -> Result<AttentionVector> {
    let mut src_pos = Vec::with_capacity(t.sources.len());
    for &s in &t.sources {
        src_pos.push(a.position(s).ok_or_else(|| {
            Error::Graph(format!(
                "transition source {s} is not in the attention support"
            ))
        })?);
    }
    let src_vals = tape.gather_rows(&a.values, &src_pos)?;
    let pair_src: Vec<usize> = t.pairs.iter().map(|&(s, _)| s).collect();
    let flow = tape.mul(&t.probs, &tape.gather_rows(&src_vals, &pair_src)?)?;
    let sums = tape.segment_sum(&flow, &t.pair_dst, t.dsts.len())?;
    let total = tape.sum_all(&sums);
    if total.scalar() <= 0.0 {
        return Err(Error::Numeric(
            "attention mass vanished during propagation".into(),
        ));
    }
    let values = tape.div_scalar(&sums, &total)?;
    Ok(AttentionVector::new(t.dsts.clone(), values))
}

/// Keep only the given nodes of a distribution and renormalize.
pub fn restrict_attention(
    tape: &Tape,
    a: &AttentionVector,
    keep: &[usize],
) -> Result<AttentionVector> {
    let mut nodes: Vec<usize> = keep
        .iter()
        .copied()
        .filter(|&n| a.position(n).is_some())
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    if nodes.len() == a.len() {
        return Ok(a.clone());
    }
    let pos: Vec<usize> = nodes.iter().map(|&n| a.position(n).unwrap()).collect();
    let kept = tape.gather_rows(&a.values, &pos)?;
    let total = tape.sum_all(&kept);
    if total.scalar() <= 0.0 {
        return Err(Error::Numeric(
            "attention mass vanished during pruning".into(),
        ));
    }
    let values = tape.div_scalar(&kept, &total)?;
    Ok(AttentionVector::new(nodes, values))
}

/// Node ids of the `k` largest scores, ties broken toward lower ids.
/// Returned in descending-score order; fewer when the support is smaller.
pub fn topk_select(a: &AttentionVector, k: usize) -> Vec<usize> {
    assert!(k >= 1, "k must be at least 1");
    let mut order: Vec<usize> = (0..a.len()).collect();
    let vals = a.values.data();
    order.sort_by(|&i, &j| {
        vals[j]
            .partial_cmp(&vals[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.nodes[i].cmp(&a.nodes[j]))
    });
    order.truncate(k);
    order.into_iter().map(|i| a.nodes[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, zero_attention: bool) -> ModelParams {
        let dims = Dims {
            n_entities: 6,
            n_relations: 4,
            state: 4,
            attention: 3,
            hidden: 4,
        };
        let mut m = ModelParams::init(dims, 0.2, &mut ChaCha8Rng::seed_from_u64(seed));
        if zero_attention {
            for e in 0..m.entries().len() {
                if m.entries()[e].name.starts_with("att_") {
                    let n = m.entries()[e].data.len();
                    m.param_slices_mut()[e].copy_from_slice(&vec![0.0; n]);
                }
            }
        }
        m
    }

    fn edge(src: usize, rel: usize, dst: usize, src_row: usize, dst_row: usize) -> CandidateEdge {
        CandidateEdge {
            src,
            rel,
            dst,
            src_row,
            dst_row,
        }
    }

    #[test]
    fn one_hot_attention() {
        let a = AttentionVector::one_hot(7);
        assert_eq!(a.nodes(), &[7]);
        assert_eq!(a.values.data(), &[1.0]);
        assert_eq!(a.score(7), 1.0);
        assert_eq!(a.score(3), 0.0);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn zero_attention_weights_give_zero_scores_then_uniform() {
        let m = params(1, true);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let n_edges = 3;
        let d = m.dims.state;
        let rows = |n: usize| Tensor::constant(vec![0.3; n * d], &[n, d]);
        let ctx = Tensor::constant(vec![0.1; n_edges * 3 * d], &[n_edges, 3 * d]);
        let (s1, s2) = attention_scores(
            &tape,
            &rows(n_edges),
            &rows(n_edges),
            &rows(n_edges),
            &ctx,
            &bound,
            0.2,
        )
        .unwrap();
        assert!(s1.data().iter().all(|&x| x == 0.0));
        assert!(s2.data().iter().all(|&x| x == 0.0));

        let scores = tape.add(&s1, &s2).unwrap();
        let edges = vec![
            edge(0, 0, 1, 0, 1),
            edge(0, 1, 2, 0, 2),
            edge(0, 2, 3, 0, 3),
        ];
        let t = build_transition(&tape, &[0], &edges, &scores).unwrap();
        for p in t.probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_candidate_scores_match_direct_bilinear() {
        let m = params(2, false);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let d = m.dims.state;
        let a_dim = m.dims.attention;
        let src = Tensor::constant((0..d).map(|i| 0.1 * i as f32).collect(), &[1, d]);
        let dst = Tensor::constant((0..d).map(|i| 0.2 - 0.05 * i as f32).collect(), &[1, d]);
        let full = Tensor::constant((0..d).map(|i| 0.3 + 0.01 * i as f32).collect(), &[1, d]);
        let ctx = Tensor::constant((0..3 * d).map(|i| 0.02 * i as f32).collect(), &[1, 3 * d]);
        let (s1, s2) = attention_scores(&tape, &src, &dst, &full, &ctx, &bound, 0.2).unwrap();

        // Independent dense evaluation.
        let project = |w: &[f32], b: &[f32], x: &[f32]| -> Vec<f32> {
            let n_in = x.len();
            (0..a_dim)
                .map(|j| {
                    let mut acc = b[j];
                    for i in 0..n_in {
                        acc += x[i] * w[i * a_dim + j];
                    }
                    if acc > 0.0 {
                        acc
                    } else {
                        0.2 * acc
                    }
                })
                .collect()
        };
        let find = |name: &str| {
            m.entries()
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.data.clone())
                .unwrap()
        };
        let mut src_in = src.data().to_vec();
        src_in.extend_from_slice(ctx.data());
        let mut dst_in = dst.data().to_vec();
        dst_in.extend_from_slice(ctx.data());
        let mut full_in = full.data().to_vec();
        full_in.extend_from_slice(ctx.data());

        let u1 = project(&find("att_state_src_w"), &find("att_state_src_b"), &src_in);
        let v1 = project(&find("att_state_dst_w"), &find("att_state_dst_b"), &dst_in);
        let w1 = find("att_bilinear_state");
        let mut expect1 = 0.0f32;
        for i in 0..a_dim {
            for j in 0..a_dim {
                expect1 += u1[i] * w1[i * a_dim + j] * v1[j];
            }
        }
        assert!((s1.data()[0] - expect1).abs() < 1e-6);

        let u2 = project(&find("att_full_src_w"), &find("att_full_src_b"), &src_in);
        let v2 = project(&find("att_full_dst_w"), &find("att_full_dst_b"), &full_in);
        let w2 = find("att_bilinear_full");
        let mut expect2 = 0.0f32;
        for i in 0..a_dim {
            for j in 0..a_dim {
                expect2 += u2[i] * w2[i * a_dim + j] * v2[j];
            }
        }
        assert!((s2.data()[0] - expect2).abs() < 1e-6);
    }

    #[test]
    fn full_interaction_sees_unseen_destination_with_zero_state() {
        // A destination with zero pruned state still gets a non-trivial
        // score through the full-graph side; the state side degenerates.
        let m = params(3, false);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let d = m.dims.state;
        let src = Tensor::constant(vec![0.4; d], &[1, d]);
        let dst_zero = Tensor::zeros(&[1, d]);
        let full = Tensor::constant(vec![0.25; d], &[1, d]);
        let ctx = Tensor::zeros(&[1, 3 * d]);
        let (_, s2) = attention_scores(&tape, &src, &dst_zero, &full, &ctx, &bound, 0.2).unwrap();
        let (_, s2_zero_full) = attention_scores(
            &tape,
            &src,
            &dst_zero,
            &Tensor::zeros(&[1, d]),
            &ctx,
            &bound,
            0.2,
        )
        .unwrap();
        // Zeroing the full-graph state changes the score; the destination
        // identity is carried by the full-graph representation alone.
        assert!((s2.data()[0] - s2_zero_full.data()[0]).abs() > 1e-7);
    }

    #[test]
    fn transition_singleton_probability_one() {
        let tape = Tape::new();
        let scores = Tensor::constant(vec![0.7], &[1]);
        let t = build_transition(&tape, &[4], &[edge(4, 0, 5, 0, 1)], &scores).unwrap();
        assert_eq!(t.probs.data(), &[1.0]);
        assert_eq!(t.dsts, vec![5]);
    }

    #[test]
    fn parallel_relations_merge_before_softmax() {
        let tape = Tape::new();
        // Two relations linking (0 -> 1) with scores 1.0 and 2.0, plus a
        // competitor (0 -> 2) with score 3.0: merged logits [3.0, 3.0].
        let edges = vec![
            edge(0, 0, 1, 0, 1),
            edge(0, 1, 1, 0, 1),
            edge(0, 2, 2, 0, 2),
        ];
        let scores = Tensor::constant(vec![1.0, 2.0, 3.0], &[3]);
        let t = build_transition(&tape, &[0], &edges, &scores).unwrap();
        assert_eq!(t.pairs.len(), 2);
        assert!((t.probs.data()[0] - 0.5).abs() < 1e-6);
        assert!((t.probs.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn transition_rows_sum_to_one_per_source() {
        let tape = Tape::new();
        let edges = vec![
            edge(0, 0, 1, 0, 1),
            edge(0, 0, 2, 0, 2),
            edge(3, 1, 1, 1, 1),
            edge(3, 0, 4, 1, 3),
            edge(3, 2, 4, 1, 3),
        ];
        let scores = Tensor::constant(vec![0.3, -0.4, 1.2, 0.1, -0.9], &[5]);
        let t = build_transition(&tape, &[0, 3], &edges, &scores).unwrap();
        let mut per_src = vec![0.0f32; 2];
        for (i, &(s, _)) in t.pairs.iter().enumerate() {
            per_src[s] += t.probs.data()[i];
        }
        for s in per_src {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transition_rejects_source_without_candidates() {
        let tape = Tape::new();
        let scores = Tensor::constant(vec![0.5], &[1]);
        let err = build_transition(&tape, &[0, 9], &[edge(0, 0, 1, 0, 1)], &scores);
        assert!(err.is_err());
    }

    #[test]
    fn one_hot_propagation_returns_source_row() {
        let tape = Tape::new();
        let a = AttentionVector::one_hot(0);
        let edges = vec![edge(0, 0, 1, 0, 1), edge(0, 1, 2, 0, 2)];
        let scores = Tensor::constant(vec![1.0, 2.0], &[2]);
        let t = build_transition(&tape, &[0], &edges, &scores).unwrap();
        let next = propagate_attention(&tape, &a, &t).unwrap();
        assert_eq!(next.nodes(), &[1, 2]);
        for (got, want) in next.values.data().iter().zip(t.probs.data()) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn pruned_mass_is_redistributed_to_sum_one() {
        let tape = Tape::new();
        // Support {0: 0.7, 5: 0.3} but only node 0 is a source: the 0.3
        // is dropped and the outflow renormalizes to 1.
        let a = AttentionVector::new(vec![0, 5], Tensor::constant(vec![0.7, 0.3], &[2]));
        let edges = vec![edge(0, 0, 1, 0, 1), edge(0, 1, 2, 0, 2)];
        let scores = Tensor::constant(vec![0.2, -0.2], &[2]);
        let t = build_transition(&tape, &[0], &edges, &scores).unwrap();
        let next = propagate_attention(&tape, &a, &t).unwrap();
        let sum: f32 = next.values.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn self_loop_only_transition_is_fixed_point() {
        let tape = Tape::new();
        let a = AttentionVector::one_hot(3);
        let edges = vec![edge(3, 0, 3, 0, 0)];
        let scores = Tensor::constant(vec![0.9], &[1]);
        let t = build_transition(&tape, &[3], &edges, &scores).unwrap();
        let next = propagate_attention(&tape, &a, &t).unwrap();
        assert_eq!(next.nodes(), &[3]);
        assert!((next.values.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn topk_saturates_orders_and_breaks_ties_by_id() {
        let a = AttentionVector::new(vec![1, 2, 3], Tensor::constant(vec![0.2, 0.5, 0.3], &[3]));
        assert_eq!(topk_select(&a, 5), vec![2, 3, 1]);
        assert_eq!(topk_select(&a, 2), vec![2, 3]);

        let ties = AttentionVector::new(vec![4, 7, 9], Tensor::constant(vec![0.25; 3], &[3]));
        assert_eq!(topk_select(&ties, 1), vec![4]);
    }

    #[test]
    fn restrict_drops_and_renormalizes() {
        let tape = Tape::new();
        let a = AttentionVector::new(vec![1, 2, 3], Tensor::constant(vec![0.2, 0.5, 0.3], &[3]));
        let r = restrict_attention(&tape, &a, &[2, 3]).unwrap();
        assert_eq!(r.nodes(), &[2, 3]);
        assert!((r.values.data()[0] - 0.625).abs() < 1e-6);
        assert!((r.values.data()[1] - 0.375).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance_keeps_argmax() {
        // Adding a shared constant per source to all logits leaves the
        // propagated distribution unchanged.
        let tape = Tape::new();
        let a = AttentionVector::one_hot(0);
        let edges = vec![
            edge(0, 0, 1, 0, 1),
            edge(0, 1, 2, 0, 2),
            edge(0, 2, 3, 0, 3),
        ];
        let base = vec![0.4f32, -1.0, 0.9];
        let shifted: Vec<f32> = base.iter().map(|x| x + 5.0).collect();
        let run = |scores: Vec<f32>| {
            let t = build_transition(&tape, &[0], &edges, &Tensor::constant(scores, &[3])).unwrap();
            propagate_attention(&tape, &a, &t).unwrap()
        };
        let p = run(base);
        let q = run(shifted);
        for (x, y) in p.values.data().iter().zip(q.values.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
