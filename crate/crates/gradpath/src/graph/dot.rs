//! Graphviz DOT export.
//!
//! One line per node `n<id> [label="<kind> <out_channels>"]`, one line per
//! edge `n<src> -> n<dst> [style=<solid|dashed>]` where dashed marks
//! identity and cross-stage edges. Nodes ordered by id, edges by
//! (src, dst, insertion order), so output is stable.

use super::CompGraph;

pub fn to_dot(g: &CompGraph) -> String {
    let mut out = String::from("digraph g {\n");
    for node in g.nodes() {
        out.push_str(&format!(
            "  n{} [label=\"{} {}\"]\n",
            node.id,
            node.kind.label(),
            node.out_channels
        ));
    }
    let mut edges: Vec<(usize, usize, bool, usize)> = g
        .edges()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.src, e.dst, e.tag.is_skip(), i))
        .collect();
    edges.sort();
    for (src, dst, skip, _) in edges {
        let style = if skip { "dashed" } else { "solid" };
        out.push_str(&format!("  n{src} -> n{dst} [style={style}]\n"));
    }
    out.push_str("}\n");
    out
}
