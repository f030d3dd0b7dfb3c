//! Triple loading and the augmented knowledge graph.
//!
//! Entity and relation ids are dense integers assigned in first-seen file
//! order, so identical files always produce identical graphs. The built
//! graph is immutable; inverse edges get relation id `r + n_base_relations`
//! and one shared self-loop relation takes the last id.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// One directed labeled edge `(head, rel, tail)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, rel: usize, tail: usize) -> Triple {
        Triple { head, rel, tail }
    }
}

/// Shared string<->id registry. Entities from every split register here so
/// evaluation targets always have an id, even when absent from train.
#[derive(Debug, Default, Clone)]
pub struct Vocab {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Vocab {
        Vocab::default()
    }

    pub fn entity_id(&mut self, name: &str) -> usize {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entities.len();
        self.entities.push(name.to_string());
        self.entity_ids.insert(name.to_string(), id);
        id
    }

    pub fn relation_id(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relations.len();
        self.relations.push(name.to_string());
        self.relation_ids.insert(name.to_string(), id);
        id
    }

    pub fn lookup_entity(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn lookup_relation(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entities[id]
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }
}

/// Triples from one split, deduplicated.
#[derive(Debug, Clone)]
pub struct TripleSet {
    pub triples: Vec<Triple>,
    /// Duplicate lines dropped during load.
    pub n_duplicates: usize,
}

/// Read a tab-separated triple file, registering names in `vocab`.
/// Ids are assigned in first-seen order; duplicate triples are dropped.
pub fn load_triples(path: &Path, vocab: &mut Vocab) -> Result<TripleSet> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    let mut n_duplicates = 0;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (h, r, t) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(h), Some(r), Some(t), None)
                if !h.is_empty() && !r.is_empty() && !t.is_empty() =>
            {
                (h, r, t)
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    msg: "expected head<TAB>relation<TAB>tail".into(),
                })
            }
        };
        let triple = Triple::new(vocab.entity_id(h), vocab.relation_id(r), vocab.entity_id(t));
        if seen.insert(triple) {
            triples.push(triple);
        } else {
            n_duplicates += 1;
        }
    }
    if triples.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no triples in file".into(),
        });
    }
    Ok(TripleSet {
        triples,
        n_duplicates,
    })
}

/// Which augmentation produced an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Base,
    Inverse,
    SelfLoop,
}

#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

/// Bitset over edge ids; a set bit means the edge is usable this batch.
#[derive(Debug, Clone)]
pub struct EdgeMask {
    words: Vec<u64>,
    len: usize,
}

impl EdgeMask {
    pub fn all_enabled(len: usize) -> EdgeMask {
        let mut words = vec![u64::MAX; len.div_ceil(64)];
        if !len.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (len % 64)) - 1;
            }
        }
        EdgeMask { words, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn disable(&mut self, edge: usize) {
        debug_assert!(edge < self.len);
        self.words[edge / 64] &= !(1u64 << (edge % 64));
    }

    pub fn is_enabled(&self, edge: usize) -> bool {
        debug_assert!(edge < self.len);
        self.words[edge / 64] & (1u64 << (edge % 64)) != 0
    }

    pub fn n_disabled(&self) -> usize {
        self.len
            - self
                .words
                .iter()
                .map(|w| w.count_ones() as usize)
                .sum::<usize>()
    }
}

/// Leakage-masking rule applied per training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Remove every edge between each batch head-tail pair, ignoring
    /// relation and direction.
    CutoffPairs,
    /// Remove exactly the batch edges and their inverses.
    RemoveBatch,
}

/// Immutable directed KG over dense ids, with optional inverse edges and
/// one self-loop per node. Edges are sorted by `(src, rel, dst)` and
/// indexed per source node. Safe for concurrent reads.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    n_entities: usize,
    n_base_relations: usize,
    n_relations: usize,
    add_inverse: bool,
    edges: Vec<Edge>,
    offsets: Vec<usize>,
}

impl KnowledgeGraph {
    /// Build from train triples. `n_entities`/`n_base_relations` come from
    /// the vocabulary so entities seen only in valid/test still get a slot.
    pub fn build(
        train: &TripleSet,
        n_entities: usize,
        n_base_relations: usize,
        add_inverse: bool,
        add_self_loops: bool,
    ) -> Result<KnowledgeGraph> {
        if train.triples.is_empty() {
            return Err(Error::Graph(
                "cannot build a graph from zero triples".into(),
            ));
        }
        // The self-loop relation id is always reserved as the last id.
        let n_relations = n_base_relations * (1 + add_inverse as usize) + 1;
        let self_loop_rel = n_relations - 1;

        let mut edges = Vec::with_capacity(
            train.triples.len() * (1 + add_inverse as usize)
                + if add_self_loops { n_entities } else { 0 },
        );
        for t in &train.triples {
            if t.rel >= n_base_relations || t.head >= n_entities || t.tail >= n_entities {
                return Err(Error::Graph(format!(
                    "triple ({}, {}, {}) outside id space",
                    t.head, t.rel, t.tail
                )));
            }
            edges.push(Edge {
                src: t.head,
                rel: t.rel,
                dst: t.tail,
                kind: EdgeKind::Base,
            });
            if add_inverse {
                edges.push(Edge {
                    src: t.tail,
                    rel: t.rel + n_base_relations,
                    dst: t.head,
                    kind: EdgeKind::Inverse,
                });
            }
        }
        if add_self_loops {
            for v in 0..n_entities {
                edges.push(Edge {
                    src: v,
                    rel: self_loop_rel,
                    dst: v,
                    kind: EdgeKind::SelfLoop,
                });
            }
        }
        edges.sort_by_key(|e| (e.src, e.rel, e.dst));

        let mut offsets = vec![0usize; n_entities + 1];
        for e in &edges {
            offsets[e.src + 1] += 1;
        }
        for i in 0..n_entities {
            offsets[i + 1] += offsets[i];
        }
        Ok(KnowledgeGraph {
            n_entities,
            n_base_relations,
            n_relations,
            add_inverse,
            edges,
            offsets,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    /// Relation count after augmentation, including the self-loop relation.
    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn n_base_relations(&self) -> usize {
        self.n_base_relations
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_inverse(&self) -> bool {
        self.add_inverse
    }

    pub fn self_loop_rel(&self) -> usize {
        self.n_relations - 1
    }

    /// The inverse relation id, defined only when inverses were added.
    pub fn inverse_rel(&self, rel: usize) -> Option<usize> {
        if !self.add_inverse || rel >= 2 * self.n_base_relations {
            return None;
        }
        Some(if rel < self.n_base_relations {
            rel + self.n_base_relations
        } else {
            rel - self.n_base_relations
        })
    }

    pub fn edge(&self, id: usize) -> &Edge {
        &self.edges[id]
    }

    /// Out-edge id range of `node`.
    pub fn out_edge_ids(&self, node: usize) -> std::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// Sorted `(rel, dst, edge_id)` out-neighborhood, honoring the mask.
    pub fn neighbors(
        &self,
        node: usize,
        mask: Option<&EdgeMask>,
    ) -> Result<Vec<(usize, usize, usize)>> {
        if node >= self.n_entities {
            return Err(Error::Graph(format!(
                "node {node} out of range (n_entities = {})",
                self.n_entities
            )));
        }
        Ok(self
            .out_edge_ids(node)
            .filter(|&id| mask.is_none_or(|m| m.is_enabled(id)))
            .map(|id| {
                let e = &self.edges[id];
                (e.rel, e.dst, id)
            })
            .collect())
    }

    /// Edge id of an exact `(src, rel, dst)` edge, if present.
    pub fn find_edge(&self, src: usize, rel: usize, dst: usize) -> Option<usize> {
        if src >= self.n_entities {
            return None;
        }
        let range = self.out_edge_ids(src);
        let slice = &self.edges[range.clone()];
        slice
            .binary_search_by_key(&(rel, dst), |e| (e.rel, e.dst))
            .ok()
            .map(|i| range.start + i)
    }

    /// Mask out training-leakage edges for one batch of query triples.
    /// Self-loops are never removed.
    pub fn mask_for_batch(&self, batch: &[Triple], mode: MaskMode) -> EdgeMask {
        let mut mask = EdgeMask::all_enabled(self.edges.len());
        match mode {
            MaskMode::RemoveBatch => {
                for q in batch {
                    if let Some(id) = self.find_edge(q.head, q.rel, q.tail) {
                        mask.disable(id);
                    }
                    if let Some(inv) = self.inverse_rel(q.rel) {
                        if let Some(id) = self.find_edge(q.tail, inv, q.head) {
                            mask.disable(id);
                        }
                    }
                }
            }
            MaskMode::CutoffPairs => {
                for q in batch {
                    for (a, b) in [(q.head, q.tail), (q.tail, q.head)] {
                        for id in self.out_edge_ids(a) {
                            let e = &self.edges[id];
                            if e.dst == b && e.kind != EdgeKind::SelfLoop {
                                mask.disable(id);
                            }
                        }
                    }
                }
            }
        }
        mask
    }
}

/// Split-level statistics: multi-edge proportions and mean shortest path.
#[derive(Debug, Clone)]
pub struct DatasetStats {
    pub n_entities: usize,
    pub n_base_relations: usize,
    pub n_train: usize,
    pub n_valid: usize,
    /// Fraction of train triples whose endpoints are connected by at least
    /// one other triple, ignoring direction.
    pub pme_train: f64,
    /// Fraction of valid triples whose endpoints are linked by any train
    /// triple, ignoring direction.
    pub pme_valid: f64,
    /// Mean undirected shortest-path length between valid head-tail pairs,
    /// over connected pairs only.
    pub al_valid: f64,
    pub n_valid_connected: usize,
    pub n_valid_disconnected: usize,
}

impl DatasetStats {
    /// One `key=value` line per field.
    pub fn report(&self) -> String {
        format!(
            "n_entities={}\nn_relations={}\nn_train={}\nn_valid={}\n\
             pme_train={:.4}\npme_valid={:.4}\nal_valid={:.4}\n\
             n_valid_connected={}\nn_valid_disconnected={}\n",
            self.n_entities,
            self.n_base_relations,
            self.n_train,
            self.n_valid,
            self.pme_train,
            self.pme_valid,
            self.al_valid,
            self.n_valid_connected,
            self.n_valid_disconnected,
        )
    }
}

fn unordered(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Multi-edge proportions and mean valid-pair path length over the plain
/// (unaugmented) train graph, direction ignored.
pub fn dataset_stats(
    train: &TripleSet,
    valid: &TripleSet,
    n_entities: usize,
    n_base_relations: usize,
) -> DatasetStats {
    let mut pair_count: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &train.triples {
        *pair_count.entry(unordered(t.head, t.tail)).or_insert(0) += 1;
    }
    let multi_train = train
        .triples
        .iter()
        .filter(|t| pair_count[&unordered(t.head, t.tail)] >= 2)
        .count();
    let multi_valid = valid
        .triples
        .iter()
        .filter(|t| {
            pair_count
                .get(&unordered(t.head, t.tail))
                .copied()
                .unwrap_or(0)
                >= 1
        })
        .count();

    // Undirected adjacency over train for BFS path lengths.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_entities];
    for t in &train.triples {
        adj[t.head].push(t.tail);
        if t.head != t.tail {
            adj[t.tail].push(t.head);
        }
    }
    for nbrs in &mut adj {
        nbrs.sort_unstable();
        nbrs.dedup();
    }

    let mut total_len = 0u64;
    let mut connected = 0usize;
    let mut disconnected = 0usize;
    let mut dist = vec![u32::MAX; n_entities];
    let mut touched: Vec<usize> = Vec::new();
    for q in &valid.triples {
        let d = bfs_distance(&adj, q.head, q.tail, &mut dist, &mut touched);
        match d {
            Some(d) => {
                total_len += d as u64;
                connected += 1;
            }
            None => disconnected += 1,
        }
    }

    DatasetStats {
        n_entities,
        n_base_relations,
        n_train: train.triples.len(),
        n_valid: valid.triples.len(),
        pme_train: multi_train as f64 / train.triples.len().max(1) as f64,
        pme_valid: multi_valid as f64 / valid.triples.len().max(1) as f64,
        al_valid: if connected > 0 {
            total_len as f64 / connected as f64
        } else {
            f64::NAN
        },
        n_valid_connected: connected,
        n_valid_disconnected: disconnected,
    }
}

fn bfs_distance(
    adj: &[Vec<usize>],
    from: usize,
    to: usize,
    dist: &mut [u32],
    touched: &mut Vec<usize>,
) -> Option<u32> {
    for &v in touched.iter() {
        dist[v] = u32::MAX;
    }
    touched.clear();
    if from == to {
        return Some(0);
    }
    let mut queue = VecDeque::new();
    dist[from] = 0;
    touched.push(from);
    queue.push_back(from);
    while let Some(v) = queue.pop_front() {
        let d = dist[v];
        for &w in &adj[v] {
            if dist[w] == u32::MAX {
                dist[w] = d + 1;
                touched.push(w);
                if w == to {
                    return Some(d + 1);
                }
                queue.push_back(w);
            }
        }
    }
    None
}

/// Everything loaded for one run: vocabulary, splits and the built graph.
pub struct Dataset {
    pub vocab: Vocab,
    pub train: TripleSet,
    pub valid: Option<TripleSet>,
    pub test: Option<TripleSet>,
    pub graph: KnowledgeGraph,
}

impl Dataset {
    /// Load train (required) plus optional valid/test splits, then build
    /// the augmented graph covering entities from every split.
    pub fn load(
        train_path: &Path,
        valid_path: Option<&Path>,
        test_path: Option<&Path>,
        add_inverse: bool,
    ) -> Result<Dataset> {
        let mut vocab = Vocab::new();
        let train = load_triples(train_path, &mut vocab)?;
        let n_base_relations = vocab.n_relations();
        let valid = valid_path
            .map(|p| load_triples(p, &mut vocab))
            .transpose()?;
        let test = test_path.map(|p| load_triples(p, &mut vocab)).transpose()?;
        if vocab.n_relations() != n_base_relations {
            // Unseen relations have no trainable embedding slot; register
            // them anyway so queries parse, but the graph stays train-only.
            for t in valid.iter().chain(test.iter()) {
                for tr in &t.triples {
                    if tr.rel >= n_base_relations {
                        return Err(Error::Graph(format!(
                            "relation '{}' appears outside train",
                            vocab.relation_name(tr.rel)
                        )));
                    }
                }
            }
        }
        let graph = KnowledgeGraph::build(
            &train,
            vocab.n_entities(),
            n_base_relations,
            add_inverse,
            true,
        )?;
        Ok(Dataset {
            vocab,
            train,
            valid,
            test,
            graph,
        })
    }
}
