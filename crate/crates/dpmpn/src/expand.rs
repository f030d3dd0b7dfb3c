//! Subgraph expansion: boundaries, capped neighbor sampling, and the
//! growth bounds that keep per-query subgraphs from exploding.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{EdgeMask, KnowledgeGraph, Triple, TripleSet};

/// Per-step expansion caps: at most `max_attending_from` source nodes, at
/// most `max_sampling_per_node` sampled out-edges each, at most
/// `max_attending_to` newly attended nodes, over `n_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizons {
    pub max_attending_from: usize,
    pub max_sampling_per_node: usize,
    pub max_attending_to: usize,
    pub n_steps: usize,
}

impl Horizons {
    pub fn new(n1: usize, n2: usize, n3: usize, t: usize) -> Horizons {
        Horizons {
            max_attending_from: n1,
            max_sampling_per_node: n2,
            max_attending_to: n3,
            n_steps: t,
        }
    }
}

/// One sampled out-edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledEdge {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
    pub edge_id: usize,
}

/// What one expansion step did: where it attended from, which edges it
/// sampled, and which destinations it attended to.
#[derive(Debug, Clone)]
pub struct ExpansionFrontier {
    pub attending_from: Vec<usize>,
    pub sampled_edges: Vec<SampledEdge>,
    pub attending_to: Vec<usize>,
}

/// Boundary of a node set under a mask: out-neighbors not already in it.
pub fn boundary(
    g: &KnowledgeGraph,
    nodes: &BTreeSet<usize>,
    mask: Option<&EdgeMask>,
) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for &v in nodes {
        for (_, dst, _) in g.neighbors(v, mask)? {
            if !nodes.contains(&dst) {
                out.insert(dst);
            }
        }
    }
    Ok(out)
}

/// For each source node, up to `per_node_cap` out-edges sampled uniformly
/// without replacement. Within each node the kept edges stay in edge-id
/// order, so a fixed seed gives a fixed result.
pub fn sample_neighbors(
    g: &KnowledgeGraph,
    from_nodes: &[usize],
    per_node_cap: usize,
    mask: Option<&EdgeMask>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampledEdge>> {
    assert!(per_node_cap >= 1, "per_node_cap must be at least 1");
    let mut out = Vec::new();
    for &v in from_nodes {
        let candidates: Vec<usize> = g
            .out_edge_ids(v)
            .filter(|&id| mask.is_none_or(|m| m.is_enabled(id)))
            .collect();
        let chosen: Vec<usize> = if candidates.len() <= per_node_cap {
            candidates
        } else {
            let mut picked: Vec<usize> =
                rand::seq::index::sample(rng, candidates.len(), per_node_cap)
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect();
            picked.sort_unstable();
            picked
        };
        for id in chosen {
            let e = g.edge(id);
            out.push(SampledEdge {
                src: v,
                rel: e.rel,
                dst: e.dst,
                edge_id: id,
            });
        }
    }
    Ok(out)
}

/// Hard cap on visited-subgraph size after `n_steps` of capped expansion:
/// `1 + T * min(N1*N2, N3)`.
pub fn expansion_bound(h: &Horizons) -> usize {
    1 + h.n_steps * (h.max_attending_from * h.max_sampling_per_node).min(h.max_attending_to)
}

/// Size bound and probability exponent for `t` steps of greedy consecutive
/// expansion on a graph whose node degrees are at most `d` with probability
/// more than `p`: the visited set stays within the returned size bound with
/// probability more than `p` to the returned exponent.
///
/// Both values equal the geometric series `1 + d + d(d-1) + ...` truncated
/// at `t` resp. `t-1` terms, i.e. `(d(d-1)^t - 2)/(d-2)`. Requires `d >= 3`;
/// the `d = 2` chain case degenerates to `1 + 2t` and is handled by
/// [`path_bound`].
pub fn proposition_bound(d: u64, t: u32) -> Result<(u64, u64)> {
    if d < 3 {
        return Err(Error::Numeric(format!(
            "proposition bound needs degree >= 3, got {d} (use path_bound for d = 2)"
        )));
    }
    if t < 1 {
        return Err(Error::Numeric("proposition bound needs t >= 1".into()));
    }
    let series = |steps: u32| -> Result<u64> {
        let mut total: u64 = 1;
        let mut term: u64 = d;
        for _ in 0..steps {
            total = total
                .checked_add(term)
                .ok_or_else(|| Error::Numeric("proposition bound overflow".into()))?;
            term = term
                .checked_mul(d - 1)
                .ok_or_else(|| Error::Numeric("proposition bound overflow".into()))?;
        }
        Ok(total)
    };
    let size_bound = series(t)?;
    let prob_exponent = series(t - 1)?;
    debug_assert_eq!(size_bound, (d * (d - 1).pow(t) - 2) / (d - 2));
    Ok((size_bound, prob_exponent))
}

/// Degree-2 special case: a chain grows by at most two nodes per step.
pub fn path_bound(t: u32) -> u64 {
    1 + 2 * t as u64
}

/// Result of a Monte-Carlo run against the growth bound.
#[derive(Debug, Clone)]
pub struct PropositionReport {
    pub degree: u64,
    pub steps: u32,
    pub trials: u32,
    pub size_bound: u64,
    pub prob_exponent: u64,
    pub violations: u32,
    pub max_observed: u64,
}

impl PropositionReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn summary(&self) -> String {
        format!(
            "d={} t={} trials={} bound={} exponent={} max_observed={} violations={} -> {}",
            self.degree,
            self.steps,
            self.trials,
            self.size_bound,
            self.prob_exponent,
            self.max_observed,
            self.violations,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Random undirected graph with every degree at most `d`, expressed as a
/// directed-in-both-directions KG without self-loops.
pub fn random_bounded_degree_graph(
    n_nodes: usize,
    max_degree: usize,
    rng: &mut ChaCha8Rng,
) -> KnowledgeGraph {
    let mut degree = vec![0usize; n_nodes];
    let mut present = std::collections::HashSet::new();
    let mut triples = Vec::new();
    let attempts = n_nodes * max_degree * 4;
    for _ in 0..attempts {
        let a = rng.random_range(0..n_nodes);
        let b = rng.random_range(0..n_nodes);
        if a == b || degree[a] >= max_degree || degree[b] >= max_degree {
            continue;
        }
        let key = if a < b { (a, b) } else { (b, a) };
        if !present.insert(key) {
            continue;
        }
        triples.push(Triple::new(key.0, 0, key.1));
        degree[a] += 1;
        degree[b] += 1;
    }
    if triples.is_empty() {
        triples.push(Triple::new(0, 0, 1.min(n_nodes - 1)));
    }
    let ts = TripleSet {
        triples,
        n_duplicates: 0,
    };
    KnowledgeGraph::build(&ts, n_nodes, 1, true, false).expect("non-empty synthetic graph")
}

/// Greedy consecutive expansion (`G^t = G^{t-1} union its boundary`) for
/// `steps` steps from `root`; returns the visited-set size.
pub fn greedy_expansion_size(g: &KnowledgeGraph, root: usize, steps: u32) -> Result<u64> {
    let mut visited: BTreeSet<usize> = BTreeSet::new();
    visited.insert(root);
    for _ in 0..steps {
        let frontier = boundary(g, &visited, None)?;
        if frontier.is_empty() {
            break;
        }
        visited.extend(frontier);
    }
    Ok(visited.len() as u64)
}

/// Monte-Carlo validation of the growth bound in the `p = 1` regime:
/// random max-degree-`d` graphs, greedy expansion from random roots,
/// counting trials whose visited set exceeds the bound. Must report zero.
pub fn validate_proposition(
    d: u64,
    t: u32,
    trials: u32,
    rng: &mut ChaCha8Rng,
) -> Result<PropositionReport> {
    assert!(trials >= 1, "at least one trial required");
    let (size_bound, prob_exponent) = if d == 2 {
        (path_bound(t), 1)
    } else {
        proposition_bound(d, t)?
    };
    let mut violations = 0;
    let mut max_observed = 0;
    for _ in 0..trials {
        let n_nodes = rng.random_range(8..64usize);
        let g = random_bounded_degree_graph(n_nodes, d as usize, rng);
        let root = rng.random_range(0..n_nodes);
        let size = greedy_expansion_size(&g, root, t)?;
        max_observed = max_observed.max(size);
        if size > size_bound {
            violations += 1;
        }
    }
    Ok(PropositionReport {
        degree: d,
        steps: t,
        trials,
        size_bound,
        prob_exponent,
        violations,
        max_observed,
    })
}
