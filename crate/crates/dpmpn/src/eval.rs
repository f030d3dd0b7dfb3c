//! Filtered ranking metrics, mean average precision over labeled candidate
//! lists, and attention-flow analysis.
//!
//! Scores are the final attention probabilities; entities never visited
//! score zero. Ranking is filtered: other known-true tails are ignored,
//! and score ties break toward the lower entity id so results are
//! deterministic.

use std::collections::{HashMap, HashSet};

use crate::agnn::{run_agnn, QueryContext, Trace};
use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triple, TripleSet};
use crate::ignn::run_ignn;
use crate::model::ModelParams;
use crate::tensor::Tape;
use crate::train::{derive_rng, TrainConfig};

/// Rank of the target among unfiltered candidates.
#[derive(Debug, Clone, Copy)]
pub struct RankResult {
    pub rank: usize,
    pub n_candidates: usize,
}

/// Filtered rank of `target`: one plus the number of entities outside
/// `known_true` that score strictly higher, or score equal with a lower id.
/// Entities missing from `scores` count as zero.
pub fn rank_filtered(
    scores: &HashMap<usize, f32>,
    n_entities: usize,
    target: usize,
    known_true: &HashSet<usize>,
) -> Result<RankResult> {
    if target >= n_entities {
        return Err(Error::Graph(format!(
            "rank target {target} outside the entity universe {n_entities}"
        )));
    }
    let target_score = scores.get(&target).copied().unwrap_or(0.0);
    let mut ahead = 0usize;
    // Entities with an explicit score.
    for (&e, &s) in scores {
        if e == target || known_true.contains(&e) || e >= n_entities {
            continue;
        }
        if s > target_score || (s == target_score && e < target) {
            ahead += 1;
        }
    }
    // Unscored entities all sit at zero; they only matter when the target
    // is at zero too, in which case the lower ids among them outrank it.
    if target_score == 0.0 {
        ahead += (0..target)
            .filter(|e| !known_true.contains(e) && !scores.contains_key(e))
            .count();
    }
    let n_filtered = known_true
        .iter()
        .filter(|&&e| e != target && e < n_entities)
        .count();
    Ok(RankResult {
        rank: 1 + ahead,
        n_candidates: n_entities - n_filtered,
    })
}

/// HITS@K and mean reciprocal rank over a batch of rank results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mrr: f64,
}

pub fn compute_metrics(ranks: &[RankResult]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Numeric("no ranks to aggregate".into()));
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|r| r.rank <= k).count() as f64 / n;
    Ok(Metrics {
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
        mrr: ranks.iter().map(|r| 1.0 / r.rank as f64).sum::<f64>() / n,
    })
}

/// Mean average precision over per-query (positive, negative) score lists.
/// Candidates are ranked by descending score; on ties negatives rank ahead
/// of positives, so reported numbers are conservative.
pub fn map_score(queries: &[(Vec<f32>, Vec<f32>)]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let mut total = 0.0f64;
    for (pos, neg) in queries {
        if pos.is_empty() {
            continue;
        }
        let mut ranked: Vec<(f32, bool)> = pos
            .iter()
            .map(|&s| (s, true))
            .chain(neg.iter().map(|&s| (s, false)))
            .collect();
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1)) // negatives first on ties
        });
        let mut hits = 0usize;
        let mut ap = 0.0f64;
        for (i, &(_, is_pos)) in ranked.iter().enumerate() {
            if is_pos {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        total += ap / pos.len() as f64;
    }
    total / queries.len() as f64
}

/// Entropy and top-k concentration of the attention distribution per step.
#[derive(Debug, Clone)]
pub struct AttentionAnalysis {
    pub entropy: Vec<f64>,
    pub top1: Vec<f64>,
    pub top3: Vec<f64>,
    pub top5: Vec<f64>,
}

pub fn attention_analysis(trace: &Trace) -> AttentionAnalysis {
    let mut out = AttentionAnalysis {
        entropy: Vec::new(),
        top1: Vec::new(),
        top3: Vec::new(),
        top5: Vec::new(),
    };
    for step in &trace.attention_steps {
        let entropy: f64 = step
            .iter()
            .map(|&(_, v)| {
                let v = v as f64;
                if v > 0.0 {
                    -v * v.ln()
                } else {
                    0.0
                }
            })
            .sum();
        let mut vals: Vec<f64> = step.iter().map(|&(_, v)| v as f64).collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let mass = |k: usize| vals.iter().take(k).sum::<f64>();
        out.entropy.push(entropy);
        out.top1.push(mass(1));
        out.top3.push(mass(3));
        out.top5.push(mass(5));
    }
    out
}

/// All known-true tails per `(head, rel)` across every split, used for
/// filtered ranking.
#[derive(Default)]
pub struct KnownTrue {
    map: HashMap<(usize, usize), HashSet<usize>>,
}

impl KnownTrue {
    /// Collect from the given splits; when the graph carries inverse
    /// edges, inverse-direction facts are included as well.
    pub fn build(splits: &[&TripleSet], g: &KnowledgeGraph) -> KnownTrue {
        let mut map: HashMap<(usize, usize), HashSet<usize>> = HashMap::new();
        for split in splits {
            for t in &split.triples {
                map.entry((t.head, t.rel)).or_default().insert(t.tail);
                if let Some(inv) = g.inverse_rel(t.rel) {
                    map.entry((t.tail, inv)).or_default().insert(t.head);
                }
            }
        }
        KnownTrue { map }
    }

    pub fn tails(&self, head: usize, rel: usize) -> Option<&HashSet<usize>> {
        self.map.get(&(head, rel))
    }
}

/// Rank line for one evaluated query.
#[derive(Debug, Clone, Copy)]
pub struct QueryRecord {
    pub query: Triple,
    pub rank: usize,
}

/// Aggregated evaluation output.
pub struct EvalReport {
    pub metrics: Metrics,
    pub records: Vec<QueryRecord>,
    /// Mean attention entropy / concentration per step over all queries.
    pub mean_entropy: Vec<f64>,
    pub mean_top1: Vec<f64>,
    pub mean_top3: Vec<f64>,
    pub mean_top5: Vec<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "metric=hits1 value={:.4}\nmetric=hits3 value={:.4}\nmetric=hits10 value={:.4}\nmetric=mrr value={:.4}\n",
            self.metrics.hits1, self.metrics.hits3, self.metrics.hits10, self.metrics.mrr
        )
    }
}

/// Evaluation queries: the split's triples, plus inverse-direction queries
/// when the graph is inverse-augmented.
pub fn eval_queries(split: &TripleSet, g: &KnowledgeGraph) -> Vec<Triple> {
    let mut queries = split.triples.clone();
    if g.has_inverse() {
        queries.extend(
            split
                .triples
                .iter()
                .map(|t| Triple::new(t.tail, g.inverse_rel(t.rel).expect("base relation"), t.head)),
        );
    }
    queries
}

/// Score one query with a frozen model: final attention as probabilities.
#[allow(clippy::too_many_arguments)]
pub fn score_query(
    model: &ModelParams,
    g: &KnowledgeGraph,
    query: QueryContext,
    cfg: &TrainConfig,
    seed_salt: &[u64],
) -> Result<(HashMap<usize, f32>, Trace)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let mut ignn_rng = derive_rng(cfg.seed, &[u64::MAX - 1]);
    let full = run_ignn(
        &tape,
        g,
        &bound,
        cfg.n_steps_in_ignn,
        cfg.max_sampling_per_step,
        cfg.leaky_relu_slope,
        &mut ignn_rng,
    )?;
    let mut rng = derive_rng(cfg.seed, seed_salt);
    let (pred, state) = run_agnn(
        &tape,
        query,
        g,
        &full,
        &bound,
        &cfg.horizons,
        None,
        cfg.leaky_relu_slope,
        &mut rng,
    )?;
    Ok((pred.entries().into_iter().collect(), state.trace))
}

/// Filtered evaluation of a whole split. Side-effect free on model and
/// graph; no leakage mask is applied at evaluation time.
pub fn evaluate(
    model: &ModelParams,
    g: &KnowledgeGraph,
    queries: &[Triple],
    known: &KnownTrue,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Numeric("no evaluation queries".into()));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let mut ignn_rng = derive_rng(cfg.seed, &[u64::MAX - 1]);
    let full = run_ignn(
        &tape,
        g,
        &bound,
        cfg.n_steps_in_ignn,
        cfg.max_sampling_per_step,
        cfg.leaky_relu_slope,
        &mut ignn_rng,
    )?;

    let mut ranks = Vec::with_capacity(queries.len());
    let mut records = Vec::with_capacity(queries.len());
    let mut entropy_sums: Vec<f64> = Vec::new();
    let mut top_sums: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut step_counts: Vec<usize> = Vec::new();

    for (idx, q) in queries.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, &[0xe7a1, idx as u64]);
        let (pred, state) = run_agnn(
            &tape,
            QueryContext {
                head: q.head,
                rel: q.rel,
            },
            g,
            &full,
            &bound,
            &cfg.horizons,
            None,
            cfg.leaky_relu_slope,
            &mut rng,
        )?;
        let scores: HashMap<usize, f32> = pred.entries().into_iter().collect();
        let empty = HashSet::new();
        let known_tails = known.tails(q.head, q.rel).unwrap_or(&empty);
        let rr = rank_filtered(&scores, g.n_entities(), q.tail, known_tails)?;
        ranks.push(rr);
        records.push(QueryRecord {
            query: *q,
            rank: rr.rank,
        });

        let analysis = attention_analysis(&state.trace);
        for (t, &e) in analysis.entropy.iter().enumerate() {
            if t >= entropy_sums.len() {
                entropy_sums.push(0.0);
                for s in top_sums.iter_mut() {
                    s.push(0.0);
                }
                step_counts.push(0);
            }
            entropy_sums[t] += e;
            top_sums[0][t] += analysis.top1[t];
            top_sums[1][t] += analysis.top3[t];
            top_sums[2][t] += analysis.top5[t];
            step_counts[t] += 1;
        }
    }

    let mean = |sums: &[f64]| -> Vec<f64> {
        sums.iter()
            .zip(&step_counts)
            .map(|(s, &c)| s / c.max(1) as f64)
            .collect()
    };
    Ok(EvalReport {
        metrics: compute_metrics(&ranks)?,
        records,
        mean_entropy: mean(&entropy_sums),
        mean_top1: mean(&top_sums[0]),
        mean_top3: mean(&top_sums[1]),
        mean_top5: mean(&top_sums[2]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(usize, f32)]) -> HashMap<usize, f32> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn top_score_ranks_first() {
        let s = scores(&[(0, 0.1), (1, 0.7), (2, 0.2)]);
        let r = rank_filtered(&s, 3, 1, &HashSet::new()).unwrap();
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn filtered_entity_does_not_count() {
        // Five entities; target 2 scores 0.2; entity 0 scores higher but is
        // filtered; entity 1 scores higher and is not.
        let s = scores(&[(0, 0.9), (1, 0.5), (2, 0.2)]);
        let known: HashSet<usize> = [0].into();
        let r = rank_filtered(&s, 5, 2, &known).unwrap();
        assert_eq!(r.rank, 2);
        assert_eq!(r.n_candidates, 4);
    }

    #[test]
    fn all_equal_scores_rank_by_id() {
        let s = scores(&[(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)]);
        for target in 0..4usize {
            let r = rank_filtered(&s, 4, target, &HashSet::new()).unwrap();
            assert_eq!(r.rank, target + 1);
        }
    }

    #[test]
    fn unscored_target_ties_against_unscored_lower_ids() {
        let s = scores(&[(1, 0.6)]);
        // Entities 0,2,3,4 unscored; target 3: entity 1 above, 0 and 2 tie
        // at zero with lower ids.
        let r = rank_filtered(&s, 5, 3, &HashSet::new()).unwrap();
        assert_eq!(r.rank, 4);
    }

    #[test]
    fn rank_rejects_unknown_target() {
        let s = scores(&[(0, 1.0)]);
        assert!(rank_filtered(&s, 3, 7, &HashSet::new()).is_err());
    }

    #[test]
    fn metrics_closed_forms() {
        let one = |rank: usize| RankResult {
            rank,
            n_candidates: 10,
        };
        let m = compute_metrics(&[one(2)]).unwrap();
        assert_eq!(m.mrr, 0.5);
        assert_eq!(m.hits1, 0.0);
        assert_eq!(m.hits3, 1.0);
        assert_eq!(m.hits10, 1.0);

        let m = compute_metrics(&[one(1), one(1), one(1)]).unwrap();
        assert_eq!((m.hits1, m.hits3, m.hits10, m.mrr), (1.0, 1.0, 1.0, 1.0));

        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn metrics_match_independent_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(1..40usize);
            let ranks: Vec<RankResult> = (0..n)
                .map(|_| RankResult {
                    rank: rng.random_range(1..30),
                    n_candidates: 30,
                })
                .collect();
            let m = compute_metrics(&ranks).unwrap();
            // Second implementation: accumulate in a different order.
            let mut h = [0usize; 3];
            let mut rr = 0.0f64;
            for r in ranks.iter().rev() {
                if r.rank <= 1 {
                    h[0] += 1;
                }
                if r.rank <= 3 {
                    h[1] += 1;
                }
                if r.rank <= 10 {
                    h[2] += 1;
                }
                rr += (r.rank as f64).recip();
            }
            assert_eq!(m.hits1, h[0] as f64 / n as f64);
            assert_eq!(m.hits3, h[1] as f64 / n as f64);
            assert_eq!(m.hits10, h[2] as f64 / n as f64);
            assert!((m.mrr - rr / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn average_precision_closed_forms() {
        // One positive above every negative.
        assert_eq!(map_score(&[(vec![0.9], vec![0.1, 0.2])]), 1.0);
        // One positive below one negative.
        assert_eq!(map_score(&[(vec![0.1], vec![0.9])]), 0.5);
        // Positives at ranks 1 and 3 of 4: AP = (1 + 2/3) / 2.
        let ap = map_score(&[(vec![0.9, 0.5], vec![0.7, 0.1])]);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn analysis_entropy_and_masses() {
        let trace = Trace {
            head: 0,
            rel: 0,
            attention_steps: vec![
                vec![(0, 1.0)],
                vec![(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)],
            ],
            frontiers: Vec::new(),
            message_counts: Vec::new(),
        };
        let a = attention_analysis(&trace);
        assert_eq!(a.entropy[0], 0.0);
        assert_eq!(a.top1[0], 1.0);
        assert!((a.entropy[1] - 4.0f64.ln()).abs() < 1e-9);
        assert!((a.top1[1] - 0.25).abs() < 1e-9);
        for t in 0..2 {
            assert!(a.top5[t] >= a.top3[t] && a.top3[t] >= a.top1[t]);
        }
    }
}
