//! SVG box overlays for evaluation scenes: known ground truth in blue,
//! unknown ground truth in gold, detections dashed in red with their label.

use std::fmt::Write as _;

use owf_core::geometry::BBox;
use owf_core::metrics::EvalImage;
use owf_core::protocol::ClassRegistry;
use owf_core::teacher::LabelClass;

const SIZE: f64 = 400.0;

fn rect(out: &mut String, b: &BBox, style: &str) {
    let (x1, y1, x2, y2) = b.corners();
    let _ = writeln!(
        out,
        r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" {style}/>"#,
        x1 * SIZE,
        y1 * SIZE,
        (x2 - x1) * SIZE,
        (y2 - y1) * SIZE
    );
}

pub fn render_overlay(image: &EvalImage, registry: &ClassRegistry) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r##"<rect width="{SIZE}" height="{SIZE}" fill="#f8f8f8"/>"##);
    for gt in &image.gts {
        let style = if gt.known {
            r##"fill="none" stroke="#1ac8e6" stroke-width="2""##
        } else {
            r##"fill="none" stroke="#ffd700" stroke-width="2""##
        };
        rect(&mut out, &gt.bbox, style);
    }
    for det in &image.dets {
        rect(
            &mut out,
            &det.bbox,
            r##"fill="none" stroke="#d62728" stroke-width="1" stroke-dasharray="4 2""##,
        );
        let (x1, y1, _, _) = det.bbox.corners();
        let label = match det.class {
            LabelClass::Known(id) => registry.name(id).unwrap_or("?").to_string(),
            LabelClass::Unknown => "unknown".to_string(),
        };
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{:.1}" font-size="9" fill="#d62728">{label} {:.2}</text>"##,
            x1 * SIZE,
            (y1 * SIZE - 2.0).max(8.0),
            det.score
        );
    }
    let _ = writeln!(out, "</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use owf_core::detector::Detection;
    use owf_core::metrics::EvalGt;

    #[test]
    fn overlay_draws_all_boxes() {
        let registry = ClassRegistry::from_names(["cat"]).unwrap();
        let image = EvalImage {
            gts: vec![
                EvalGt { category: 0, known: true, bbox: BBox::new(0.3, 0.3, 0.2, 0.2) },
                EvalGt { category: 1, known: false, bbox: BBox::new(0.7, 0.7, 0.2, 0.2) },
            ],
            dets: vec![Detection {
                class: LabelClass::Unknown,
                score: 0.8,
                bbox: BBox::new(0.7, 0.7, 0.2, 0.2),
            }],
        };
        let svg = render_overlay(&image, &registry);
        assert_eq!(svg.matches("<rect").count(), 4); // background + 3 boxes
        assert!(svg.contains("unknown 0.80"));
    }
}
