//! Graphviz export of an attention-annotated subgraph trace.
//!
//! Retained nodes are those whose peak attention reaches the threshold,
//! plus the head and the predicted tail. The head is drawn large and
//! yellow, the predicted tail large and red; other nodes ramp from yellow
//! to red by the step at which their attention peaked. Edges are the
//! message-passing edges of the trace between retained nodes, labeled
//! with relation names. Output is deterministic byte-for-byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::agnn::Trace;

/// Peak attention value and the earliest step achieving it, per node.
fn peaks(trace: &Trace) -> BTreeMap<usize, (f32, usize)> {
    let mut peaks: BTreeMap<usize, (f32, usize)> = BTreeMap::new();
    for (step, snapshot) in trace.attention_steps.iter().enumerate() {
        for &(node, value) in snapshot {
            let entry = peaks.entry(node).or_insert((value, step));
            if value > entry.0 {
                *entry = (value, step);
            }
        }
    }
    peaks
}

/// Node with the highest final attention, ties toward the lower id.
pub fn predicted_tail(trace: &Trace) -> Option<usize> {
    let last = trace.attention_steps.last()?;
    last.iter()
        .copied()
        .max_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.0.cmp(&a.0))
        })
        .map(|(node, _)| node)
}

fn ramp_color(peak_step: usize, n_steps: usize) -> String {
    // Yellow (255,255,0) fading to red (255,0,0) with step.
    let t = if n_steps == 0 {
        1.0
    } else {
        peak_step as f32 / n_steps as f32
    };
    let green = (255.0 * (1.0 - t)).round() as u8;
    format!("#ff{green:02x}00")
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Render the trace as DOT text. `entity_name` and `relation_name` label
/// nodes and edges; relation ids here are post-augmentation (inverse and
/// self-loop ids included).
pub fn export_dot(
    trace: &Trace,
    entity_name: &dyn Fn(usize) -> String,
    relation_name: &dyn Fn(usize) -> String,
    prune_threshold: f32,
) -> String {
    let peaks = peaks(trace);
    let n_steps = trace.attention_steps.len().saturating_sub(1);
    let predicted = predicted_tail(trace);

    let mut retained: BTreeSet<usize> = peaks
        .iter()
        .filter(|(_, &(peak, _))| peak >= prune_threshold)
        .map(|(&node, _)| node)
        .collect();
    retained.insert(trace.head);
    if let Some(p) = predicted {
        retained.insert(p);
    }

    let mut out = String::from("digraph attention_subgraph {\n");
    out.push_str("  rankdir=LR;\n");
    out.push_str("  node [style=filled, fontname=\"Helvetica\"];\n");

    for &node in &retained {
        let label = escape(&entity_name(node));
        let (peak, peak_step) = peaks.get(&node).copied().unwrap_or((0.0, 0));
        let attrs = if node == trace.head {
            "fillcolor=\"#ffd700\", width=1.4, height=1.0, penwidth=2".to_string()
        } else if Some(node) == predicted {
            "fillcolor=\"#e03020\", width=1.4, height=1.0, penwidth=2".to_string()
        } else if peak < prune_threshold {
            "fillcolor=\"#cccccc\"".to_string()
        } else {
            format!("fillcolor=\"{}\"", ramp_color(peak_step, n_steps))
        };
        let _ = writeln!(
            out,
            "  n{node} [label=\"{label}\", tooltip=\"peak={peak:.4} step={peak_step}\", {attrs}];"
        );
    }

    // Message-passing edges between retained nodes, deduplicated.
    let mut edges: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    for frontier in &trace.frontiers {
        let to: BTreeSet<usize> = frontier.attending_to.iter().copied().collect();
        for e in &frontier.sampled_edges {
            if to.contains(&e.dst) && retained.contains(&e.src) && retained.contains(&e.dst) {
                edges.insert((e.src, e.rel, e.dst));
            }
        }
    }
    for (src, rel, dst) in edges {
        let label = escape(&relation_name(rel));
        let _ = writeln!(out, "  n{src} -> n{dst} [label=\"{label}\"];");
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expand::{ExpansionFrontier, SampledEdge};

    fn namers(
        entities: &'static [&'static str],
        relations: &'static [&'static str],
    ) -> (impl Fn(usize) -> String, impl Fn(usize) -> String) {
        (
            move |id: usize| entities[id].to_string(),
            move |id: usize| relations[id].to_string(),
        )
    }

    fn single_step_trace() -> Trace {
        Trace {
            head: 0,
            rel: 0,
            attention_steps: vec![vec![(0, 1.0)], vec![(1, 0.8), (0, 0.2)]],
            frontiers: vec![ExpansionFrontier {
                attending_from: vec![0],
                sampled_edges: vec![
                    SampledEdge {
                        src: 0,
                        rel: 0,
                        dst: 1,
                        edge_id: 0,
                    },
                    SampledEdge {
                        src: 0,
                        rel: 1,
                        dst: 0,
                        edge_id: 1,
                    },
                ],
                attending_to: vec![1, 0],
            }],
            message_counts: vec![2],
        }
    }

    fn balanced(text: &str) -> bool {
        let mut depth = 0i32;
        let mut in_quote = false;
        let mut prev = ' ';
        for c in text.chars() {
            match c {
                '"' if prev != '\\' => in_quote = !in_quote,
                '{' if !in_quote => depth += 1,
                '}' if !in_quote => depth -= 1,
                _ => {}
            }
            if depth < 0 {
                return false;
            }
            prev = c;
        }
        depth == 0 && !in_quote
    }

    #[test]
    fn minimal_trace_renders_nodes_and_edge() {
        let (en, rn) = namers(&["head", "x"], &["r", "loop"]);
        let dot = export_dot(&single_step_trace(), &en, &rn, 0.0);
        assert!(dot.starts_with("digraph"));
        assert!(balanced(&dot));
        assert!(dot.contains("n0 [label=\"head\""));
        assert!(dot.contains("n1 [label=\"x\""));
        assert!(dot.contains("n0 -> n1 [label=\"r\"]"));
        // Head styled yellow, predicted tail red.
        assert!(dot.contains("#ffd700"));
        assert!(dot.contains("#e03020"));
    }

    #[test]
    fn threshold_one_keeps_only_head_and_prediction() {
        let (en, rn) = namers(&["head", "x"], &["r", "loop"]);
        let dot = export_dot(&single_step_trace(), &en, &rn, 1.0);
        let node_lines = dot
            .lines()
            .filter(|l| l.contains("[label=") && !l.contains("->"))
            .count();
        // Node 1 never reached peak 1.0; it survives only as the
        // prediction, and nothing else is drawn.
        assert_eq!(node_lines, 2);
        assert!(dot.contains("n0 ["));
        assert!(dot.contains("n1 ["));
    }

    #[test]
    fn output_is_deterministic() {
        let (en, rn) = namers(&["head", "x"], &["r", "loop"]);
        let a = export_dot(&single_step_trace(), &en, &rn, 0.1);
        let b = export_dot(&single_step_trace(), &en, &rn, 0.1);
        assert_eq!(a, b);
    }

    #[test]
    fn names_with_quotes_are_escaped() {
        let (en, rn) = namers(&["he\"ad", "x"], &["r\"el", "loop"]);
        let dot = export_dot(&single_step_trace(), &en, &rn, 0.0);
        assert!(dot.contains("he\\\"ad"));
        assert!(balanced(&dot));
    }

    #[test]
    fn predicted_tail_breaks_ties_low() {
        let trace = Trace {
            head: 0,
            rel: 0,
            attention_steps: vec![vec![(0, 1.0)], vec![(2, 0.5), (4, 0.5)]],
            frontiers: Vec::new(),
            message_counts: Vec::new(),
        };
        assert_eq!(predicted_tail(&trace), Some(2));
    }
}
