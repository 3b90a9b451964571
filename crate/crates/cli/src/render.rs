//! Render a solved library as Graphviz DOT or a small standalone SVG.
//!
//! Both renderers draw only the positive support: edges whose weight exceeds
//! the support threshold. Line widths scale with `w^alpha`, which is the
//! per-unit-length contribution of the edge to the transport energy, so
//! thicker strokes literally mean more expensive trunk.

use std::fmt::Write as _;

use brmap_core::graph_core::{EmbeddedGraph, SUPPORT_EPS};

use crate::format::fmt_f64;

/// Pen widths are mapped onto this range (DOT points / SVG user units).
const MIN_STROKE: f64 = 0.6;
const MAX_STROKE: f64 = 6.0;

fn stroke_widths(graph: &EmbeddedGraph, flow: &[f64], alpha: f64) -> Vec<(usize, f64)> {
    let support = graph.support(flow);
    let scaled: Vec<(usize, f64)> =
        support.iter().map(|&e| (e, flow[e].powf(alpha))).collect();
    let max = scaled.iter().map(|&(_, s)| s).fold(0.0_f64, f64::max).max(SUPPORT_EPS);
    scaled
        .into_iter()
        .map(|(e, s)| (e, MIN_STROKE + (MAX_STROKE - MIN_STROKE) * s / max))
        .collect()
}

/// Graphviz rendering of the support. Vertices keep their index as the node
/// name and carry their embedded coordinates in `pos` (inches, `!`-pinned),
/// so `neato -n2` reproduces the embedding.
pub fn support_dot(graph: &EmbeddedGraph, flow: &[f64], alpha: f64) -> String {
    let mut out = String::from("digraph support {\n");
    let _ = writeln!(out, "  // positive support: {} of {} edges", graph.support(flow).len(), graph.n_edges());
    out.push_str("  node [shape=circle fontsize=10];\n");
    for (i, p) in graph.positions().iter().enumerate() {
        let b = graph.divergence()[i];
        let role = if b > 0.0 {
            " style=filled fillcolor=\"#cfe8ff\""
        } else if b < 0.0 {
            " style=filled fillcolor=\"#ffd9cc\""
        } else {
            ""
        };
        let _ = writeln!(
            out,
            "  v{i} [label=\"{i}\" pos=\"{},{}!\"{role}];",
            fmt_f64(p[0]),
            fmt_f64(p[1])
        );
    }
    for (e, width) in stroke_widths(graph, flow, alpha) {
        let edge = &graph.edges()[e];
        let _ = writeln!(
            out,
            "  v{} -> v{} [label=\"{}\" penwidth={:.3}];",
            edge.tail,
            edge.head,
            fmt_f64(flow[e]),
            width
        );
    }
    out.push_str("}\n");
    out
}

/// Self-contained SVG of the support, projected onto the first two axes.
pub fn support_svg(graph: &EmbeddedGraph, flow: &[f64], alpha: f64) -> String {
    const CANVAS: f64 = 480.0;
    const MARGIN: f64 = 40.0;

    let positions = graph.positions();
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in positions {
        lo_x = lo_x.min(p[0]);
        hi_x = hi_x.max(p[0]);
        lo_y = lo_y.min(p[1]);
        hi_y = hi_y.max(p[1]);
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    let scale = (CANVAS - 2.0 * MARGIN) / span;
    // SVG y grows downward; flip so the plot matches the embedding.
    let tx = |x: f64| MARGIN + (x - lo_x) * scale;
    let ty = |y: f64| CANVAS - MARGIN - (y - lo_y) * scale;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS}\" height=\"{CANVAS}\" viewBox=\"0 0 {CANVAS} {CANVAS}\">"
    );
    out.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (e, width) in stroke_widths(graph, flow, alpha) {
        let pts: String = graph.edges()[e]
            .path
            .points()
            .iter()
            .map(|p| format!("{:.2},{:.2}", tx(p[0]), ty(p[1])))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            "  <polyline points=\"{pts}\" fill=\"none\" stroke=\"#2266aa\" stroke-width=\"{width:.2}\" stroke-linecap=\"round\"><title>edge {e}: w={}</title></polyline>",
            fmt_f64(flow[e])
        );
    }
    for (i, p) in positions.iter().enumerate() {
        let b = graph.divergence()[i];
        let fill = if b > 0.0 {
            "#cfe8ff"
        } else if b < 0.0 {
            "#ffd9cc"
        } else {
            "#eeeeee"
        };
        let _ = writeln!(
            out,
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"7\" fill=\"{fill}\" stroke=\"black\"/>",
            tx(p[0]),
            ty(p[1])
        );
        let _ = writeln!(
            out,
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"9\" text-anchor=\"middle\" dominant-baseline=\"central\">{i}</text>",
            tx(p[0]),
            ty(p[1])
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Tab-separated listing of every candidate edge with its solved weight.
pub fn edges_tsv(graph: &EmbeddedGraph, flow: &[f64], alpha: f64) -> String {
    let mut out = String::from("edge\ttail\thead\tbeta\tweight\tcontribution\n");
    for (e, edge) in graph.edges().iter().enumerate() {
        let w = flow[e];
        let contribution = if w > 0.0 { edge.beta * w.powf(alpha) } else { 0.0 };
        let _ = writeln!(
            out,
            "{e}\t{}\t{}\t{}\t{}\t{}",
            edge.tail,
            edge.head,
            fmt_f64(edge.beta),
            fmt_f64(w),
            fmt_f64(contribution)
        );
    }
    out
}
