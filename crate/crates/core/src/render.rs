//! SVG overlays of box sets on a grayscale image.
//!
//! The image becomes a raster layer of one-pixel-high rectangles (runs of
//! equal intensity merged along each row). Every box set gets its own stroke
//! colour and a legend entry below the image; each box is labelled with its
//! class name and confidence.

use std::fmt::Write as _;

use crate::annotations::{GrayImage, LabeledBox};

const PALETTE: [&str; 8] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45",
];
const LEGEND_ROW: f64 = 5.0;

/// A named collection of boxes drawn in one colour.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub name: String,
    pub boxes: Vec<LabeledBox>,
}

/// Stroke colour of the `i`-th set; cycles after the palette runs out.
pub fn set_colour(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Label drawn next to a box.
pub fn box_label(class: &str, confidence: f64) -> String {
    format!("{class} c={confidence:.2}")
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders `img` with `sets` on top. `scale` is the display size of one pixel.
pub fn render_svg(img: &GrayImage, sets: &[BoxSet], classes: &[String], scale: f64) -> String {
    let (w, h) = (img.width as f64, img.height as f64);
    let total_h = h + LEGEND_ROW * sets.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {total_h}" shape-rendering="crispEdges">"#,
        w * scale,
        total_h * scale
    );
    out.push_str("<g id=\"image\">\n");
    for y in 0..img.height {
        let mut x = 0;
        while x < img.width {
            let v = img.get(x, y);
            let start = x;
            while x < img.width && img.get(x, y) == v {
                x += 1;
            }
            let _ = writeln!(
                out,
                r#"<rect x="{start}" y="{y}" width="{}" height="1" fill="rgb({v},{v},{v})"/>"#,
                x - start
            );
        }
    }
    out.push_str("</g>\n");

    for (i, set) in sets.iter().enumerate() {
        let colour = set_colour(i);
        let _ = writeln!(
            out,
            r#"<g class="boxes" data-set="{}" stroke="{colour}" fill="none" stroke-width="0.4">"#,
            escape(&set.name)
        );
        for b in &set.boxes {
            let class = classes
                .get(b.class_id)
                .cloned()
                .unwrap_or_else(|| b.class_id.to_string());
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}"/>"#,
                b.bbox.x_min,
                b.bbox.y_min,
                b.bbox.width(),
                b.bbox.height()
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="2.5" font-family="monospace" fill="{colour}" stroke="none">{}</text>"#,
                b.bbox.x_min,
                (b.bbox.y_min - 0.5).max(2.5),
                escape(&box_label(&class, b.score))
            );
        }
        out.push_str("</g>\n");
    }

    out.push_str("<g id=\"legend\" font-size=\"3\" font-family=\"monospace\">\n");
    for (i, set) in sets.iter().enumerate() {
        let y = h + LEGEND_ROW * i as f64;
        let colour = set_colour(i);
        let _ = writeln!(
            out,
            r#"<g class="legend-entry"><rect x="1" y="{}" width="3" height="3" fill="{colour}"/><text x="6" y="{}" fill="black">{}</text></g>"#,
            y + 1.0,
            y + 3.6,
            escape(&set.name)
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn img() -> GrayImage {
        GrayImage::new(4, 2, vec![10, 10, 10, 200, 0, 0, 0, 0])
    }

    #[test]
    fn rows_merge_equal_runs() {
        let svg = render_svg(&img(), &[], &[], 4.0);
        assert_eq!(svg.matches("height=\"1\"").count(), 3);
        assert!(svg.contains(r#"<rect x="0" y="0" width="3" height="1" fill="rgb(10,10,10)"/>"#));
        assert!(!svg.contains("class=\"boxes\""));
        assert!(!svg.contains("legend-entry"));
    }

    #[test]
    fn label_has_two_decimals() {
        assert_eq!(box_label("mass", 2.0 / 3.0), "mass c=0.67");
        let set = BoxSet {
            name: "fused".into(),
            boxes: vec![LabeledBox::new(BBox::from_coords([0.0, 0.0, 2.0, 2.0]), 0).with_score(0.667)],
        };
        let svg = render_svg(&img(), &[set], &["mass".into()], 4.0);
        assert!(svg.contains(">mass c=0.67</text>"));
    }

    #[test]
    fn one_legend_entry_per_set() {
        let sets: Vec<BoxSet> = (1..=3)
            .map(|i| BoxSet {
                name: format!("annotator_{i}"),
                boxes: vec![],
            })
            .collect();
        let svg = render_svg(&img(), &sets, &[], 4.0);
        assert_eq!(svg.matches("class=\"legend-entry\"").count(), 3);
        assert!(svg.contains(set_colour(2)));
    }
}
