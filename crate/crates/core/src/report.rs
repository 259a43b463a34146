//! Report rendering. JSON is the primary artifact; the aligned text table
//! (Previously / Current / Both columns), CSV, and the PR-curve SVG are
//! derived views of the same data.

use std::fmt::Write as _;

use crate::metrics::MetricsReport;
use crate::protocol::{ClassRegistry, TaskState};

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.4}", x),
        None => "-".to_string(),
    }
}

/// Human-readable summary table for one episode.
pub fn render_text(report: &MetricsReport, registry: &ClassRegistry, state: &TaskState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Episode {}", state.episode);
    let _ = writeln!(out, "{:<24} {:>12} {:>12} {:>12}", "mAP", "Previously", "Current", "Both");
    let _ = writeln!(
        out,
        "{:<24} {:>12} {:>12} {:>12}",
        "",
        fmt_opt(report.map_previously),
        fmt_opt(report.map_current),
        fmt_opt(report.map_both)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<24} {:>8} {:>6} {:>6} {:>6}", "class", "AP", "TP", "FP", "miss");
    for c in &report.per_class {
        let name = registry.name(c.class_id).unwrap_or("?");
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>6} {:>6} {:>6}",
            name,
            fmt_opt(c.ap),
            c.true_positives,
            c.false_positives,
            c.missed
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "U-Recall: {}", fmt_opt(report.u_recall));
    for (cat, (m, t)) in &report.unknown_by_category {
        let name = registry.name(*cat).unwrap_or("?");
        let _ = writeln!(out, "  unknown {:<16} {m}/{t}", name);
    }
    match &report.wilderness {
        Some(wi) => {
            let _ = writeln!(
                out,
                "WI: {:.4} (P_K {:.4}, P_K∪U {:.4}, recall {:.2}{})",
                wi.wilderness_impact,
                wi.precision_known,
                wi.precision_mixed,
                wi.achieved_recall,
                if wi.reached_level { "" } else { ", level unreachable" }
            );
        }
        None => {
            let _ = writeln!(out, "WI: -");
        }
    }
    let _ = writeln!(out, "A-OSE: {}", report.a_ose);
    out
}

/// One row per known class, plus summary rows.
pub fn render_csv(report: &MetricsReport, registry: &ClassRegistry) -> String {
    let mut out = String::from("kind,name,ap,true_positives,false_positives,missed\n");
    for c in &report.per_class {
        let name = registry.name(c.class_id).unwrap_or("?");
        let _ = writeln!(
            out,
            "class,{name},{},{},{},{}",
            fmt_opt(c.ap),
            c.true_positives,
            c.false_positives,
            c.missed
        );
    }
    let _ = writeln!(out, "summary,map_both,{},,,", fmt_opt(report.map_both));
    let _ = writeln!(out, "summary,u_recall,{},,,", fmt_opt(report.u_recall));
    let _ = writeln!(
        out,
        "summary,wilderness_impact,{},,,",
        fmt_opt(report.wilderness.map(|w| w.wilderness_impact))
    );
    let _ = writeln!(out, "summary,a_ose,{},,,", report.a_ose);
    out
}

const SVG_PALETTE: [&str; 8] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Precision-recall curves for every class with defined AP.
pub fn render_pr_svg(report: &MetricsReport, registry: &ClassRegistry) -> String {
    let (w, h, margin) = (480.0, 360.0, 40.0);
    let plot_w = w - 2.0 * margin;
    let plot_h = h - 2.0 * margin;
    let x = |recall: f64| margin + recall * plot_w;
    let y = |precision: f64| h - margin - precision * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = margin,
        b = h - margin,
        r = w - margin,
        t = margin
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">recall</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {})">precision</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, c) in report.per_class.iter().filter(|c| c.ap.is_some()).enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        let mut points = String::new();
        let _ = write!(points, "{:.2},{:.2}", x(0.0), y(1.0));
        for &(recall, precision) in &c.pr_curve {
            let _ = write!(points, " {:.2},{:.2}", x(recall), y(precision));
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>"#
        );
        let name = registry.name(c.class_id).unwrap_or("?");
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{name} (AP {:.3})</text>"#,
            w - margin - 130.0,
            margin + 14.0 * (i as f64 + 1.0),
            c.ap.unwrap()
        );
    }
    let _ = writeln!(out, "</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;
    use crate::geometry::BBox;
    use crate::metrics::{evaluate, EvalGt, EvalImage, EvalSet, MetricsConfig};
    use crate::teacher::LabelClass;
    use std::collections::BTreeSet;

    fn sample() -> (MetricsReport, ClassRegistry, TaskState) {
        let registry = ClassRegistry::from_names(["cat", "dog", "bus"]).unwrap();
        let state = TaskState::new(2, BTreeSet::from([0]), BTreeSet::from([1]));
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![
                    EvalGt { category: 0, known: true, bbox: BBox::new(0.3, 0.3, 0.1, 0.1) },
                    EvalGt { category: 2, known: false, bbox: BBox::new(0.7, 0.7, 0.1, 0.1) },
                ],
                dets: vec![Detection {
                    class: LabelClass::Known(0),
                    score: 0.9,
                    bbox: BBox::new(0.3, 0.3, 0.1, 0.1),
                }],
            }],
        };
        (evaluate(&eval, &state, &MetricsConfig::default()), registry, state)
    }

    #[test]
    fn text_table_carries_episode_layout() {
        let (report, registry, state) = sample();
        let text = render_text(&report, &registry, &state);
        for needle in ["Previously", "Current", "Both", "U-Recall", "A-OSE"] {
            assert!(text.contains(needle), "missing {needle} in:\n{text}");
        }
    }

    #[test]
    fn csv_has_class_and_summary_rows() {
        let (report, registry, _) = sample();
        let csv = render_csv(&report, &registry);
        assert!(csv.contains("class,cat,"));
        assert!(csv.contains("summary,u_recall,"));
    }

    #[test]
    fn pr_svg_is_wellformed_enough() {
        let (report, registry, _) = sample();
        let svg = render_pr_svg(&report, &registry);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("polyline"));
    }
}
