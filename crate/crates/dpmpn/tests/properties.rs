//! Property tests for the invariants that hold over all inputs.

use std::collections::HashSet;

use proptest::prelude::*;

use dpmpn::attention::{topk_select, AttentionVector};
use dpmpn::graph::{KnowledgeGraph, MaskMode, Triple, TripleSet};
use dpmpn::tensor::optim::clip_grad_norm;
use dpmpn::tensor::{Tape, Tensor};

fn arb_triples(
    max_nodes: usize,
    max_rels: usize,
) -> impl Strategy<Value = (usize, usize, Vec<Triple>)> {
    (2..max_nodes, 1..max_rels).prop_flat_map(|(n, r)| {
        let triple = (0..n, 0..r, 0..n).prop_map(|(h, rel, t)| Triple::new(h, rel, t));
        (
            Just(n),
            Just(r),
            proptest::collection::vec(triple, 1..40).prop_map(|mut v| {
                v.sort();
                v.dedup();
                v
            }),
        )
    })
}

proptest! {
    #[test]
    fn segment_softmax_sums_to_one_per_segment(
        scores in proptest::collection::vec(-30.0f32..30.0, 1..40),
        n_segments in 1usize..6,
    ) {
        // Assign every score a segment and force each segment non-empty by
        // construction: segment i gets score i first.
        let n = scores.len().max(n_segments);
        let mut padded = scores.clone();
        padded.resize(n, 0.5);
        let ids: Vec<usize> = (0..n).map(|i| i % n_segments).collect();
        let tape = Tape::new();
        let t = Tensor::constant(padded, &[n]);
        let out = tape.segment_softmax(&t, &ids, n_segments).unwrap();
        let mut sums = vec![0.0f64; n_segments];
        for (e, &s) in ids.iter().enumerate() {
            let v = out.data()[e];
            prop_assert!(v >= 0.0);
            sums[s] += v as f64;
        }
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-6, "segment sum {s}");
        }
    }

    #[test]
    fn masked_neighbors_are_a_subset((n, r, triples) in arb_triples(12, 4)) {
        let ts = TripleSet { triples: triples.clone(), n_duplicates: 0 };
        let g = KnowledgeGraph::build(&ts, n, r, true, true).unwrap();
        let mask = g.mask_for_batch(&triples[..triples.len().min(3)], MaskMode::CutoffPairs);
        for v in 0..n {
            let all: HashSet<_> = g.neighbors(v, None).unwrap().into_iter().collect();
            let masked = g.neighbors(v, Some(&mask)).unwrap();
            for item in &masked {
                prop_assert!(all.contains(item));
            }
            // Self-loops survive every mask.
            prop_assert!(masked.iter().any(|&(rel, dst, _)| rel == g.self_loop_rel() && dst == v));
        }
    }

    #[test]
    fn graph_round_trips_base_triples((n, r, triples) in arb_triples(12, 4)) {
        let ts = TripleSet { triples: triples.clone(), n_duplicates: 0 };
        let g = KnowledgeGraph::build(&ts, n, r, true, true).unwrap();
        let mut rebuilt: Vec<Triple> = Vec::new();
        for v in 0..n {
            for (rel, dst, id) in g.neighbors(v, None).unwrap() {
                if g.edge(id).kind == dpmpn::graph::EdgeKind::Base {
                    rebuilt.push(Triple::new(v, rel, dst));
                }
            }
        }
        rebuilt.sort();
        prop_assert_eq!(rebuilt, triples);
    }

    #[test]
    fn topk_is_sorted_and_bounded(
        values in proptest::collection::vec(0.0f32..1.0, 1..20),
        k in 1usize..8,
    ) {
        let total: f32 = values.iter().sum::<f32>().max(1e-6);
        let normalized: Vec<f32> = values.iter().map(|v| v / total).collect();
        let nodes: Vec<usize> = (0..normalized.len()).collect();
        let a = AttentionVector::new(nodes, Tensor::constant(normalized, &[values.len()]));
        let picked = topk_select(&a, k);
        prop_assert!(picked.len() <= k);
        prop_assert!(picked.len() <= a.len());
        for w in picked.windows(2) {
            let (s0, s1) = (a.score(w[0]), a.score(w[1]));
            prop_assert!(s0 > s1 || (s0 == s1 && w[0] < w[1]));
        }
    }

    #[test]
    fn clipped_norm_never_exceeds_limit(
        grads in proptest::collection::vec(proptest::collection::vec(-10.0f32..10.0, 1..10), 1..5),
        max_norm in 0.1f32..5.0,
    ) {
        let mut grads = grads;
        let before = clip_grad_norm(&mut grads, max_norm);
        let after: f32 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f32>()
            .sqrt();
        prop_assert!(after <= max_norm.max(before) + 1e-4);
        prop_assert!(after <= max_norm + 1e-4 || before <= max_norm);
    }

    #[test]
    fn checkpoint_round_trip_any_dims(
        n_entities in 1usize..8,
        n_relations in 1usize..6,
        state in 1usize..6,
        attention in 1usize..4,
        seed in 0u64..1000,
    ) {
        use rand::SeedableRng;
        let dims = dpmpn::model::Dims { n_entities, n_relations, state, attention, hidden: state };
        let m = dpmpn::model::ModelParams::init(
            dims,
            0.1,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        );
        let bytes = dpmpn::checkpoint::to_bytes(&m);
        let loaded = dpmpn::checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(dpmpn::checkpoint::to_bytes(&loaded), bytes);
    }
}
