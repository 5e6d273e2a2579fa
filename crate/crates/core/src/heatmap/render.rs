use std::fmt::Write;

use super::{Heatmap, HeatmapKind};
use crate::concept::Mask;
use crate::error::{Error, Result};

const CELL: usize = 22;
const CHAR_W: usize = 7;
const RELEVANT_STROKE: &str = "#d62728";
const ROBUST_STROKE: &str = "#000000";

#[derive(Debug, Clone, Default)]
pub struct RenderOptions<'a> {
    /// Cells drawn with a red outline (relevant predicates).
    pub highlight: Option<&'a Mask>,
    /// Cells drawn with a black outline (robust predicates).
    pub robust_outline: Option<&'a Mask>,
    /// Values below this are drawn as empty cells.
    pub display_floor: Option<f64>,
    pub title: Option<&'a str>,
}

fn ramp(kind: HeatmapKind) -> (u8, u8, u8) {
    match kind {
        HeatmapKind::GroundTruthSummary => (8, 48, 107),
        HeatmapKind::OutputLabelSummary => (127, 39, 4),
        HeatmapKind::Differential => (0, 68, 27),
        HeatmapKind::Single | HeatmapKind::Binarized => (37, 37, 37),
    }
}

fn color(kind: HeatmapKind, v: f64) -> String {
    let (r, g, b) = ramp(kind);
    let mix = |c: u8| -> u8 { (255.0 - v * (255.0 - c as f64)).round().clamp(0.0, 255.0) as u8 };
    format!("#{:02x}{:02x}{:02x}", mix(r), mix(g), mix(b))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn check_mask(h: &Heatmap, m: Option<&Mask>, what: &str) -> Result<()> {
    match m {
        Some(m) if m.k != h.k => Err(Error::DimensionMismatch(format!(
            "{what} mask is {0}x{0}, heatmap is {1}x{1}",
            m.k, h.k
        ))),
        _ => Ok(()),
    }
}

/// SVG 1.1 rendering. Output is a pure function of the inputs.
pub fn render_svg(h: &Heatmap, opts: &RenderOptions<'_>) -> Result<String> {
    h.validate()?;
    check_mask(h, opts.highlight, "highlight")?;
    check_mask(h, opts.robust_outline, "robust")?;
    let k = h.k;
    let label_w = h.concept_names.iter().map(|n| n.chars().count()).max().unwrap_or(0) * CHAR_W + 8;
    let title_h = if opts.title.is_some() { 20 } else { 0 };
    let left = label_w;
    let top = label_w + title_h;
    let width = left + k * CELL + 4;
    let height = top + k * CELL + 4;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    if let Some(t) = opts.title {
        let _ = writeln!(s, r#"<text x="{left}" y="14" font-size="13">{}</text>"#, escape(t));
    }
    let _ = writeln!(s, r#"<g class="cells">"#);
    for i in 0..k {
        for j in 0..k {
            let v = h.get(i, j);
            let shown = match opts.display_floor {
                Some(f) if v < f => 0.0,
                _ => v,
            };
            let (x, y) = (left + j * CELL, top + i * CELL);
            let _ = writeln!(
                s,
                r##"<rect class="cell" data-i="{i}" data-j="{j}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#dddddd" stroke-width="0.5"><title>{} &gt; {}: {v:.3}</title></rect>"##,
                color(h.kind, shown),
                escape(&h.concept_names[i]),
                escape(&h.concept_names[j]),
            );
        }
    }
    let _ = writeln!(s, "</g>");
    if let Some(m) = opts.highlight {
        let _ = writeln!(s, r#"<g class="relevance">"#);
        for i in 0..k {
            for j in 0..k {
                if m.get(i, j) {
                    let (x, y) = (left + j * CELL + 1, top + i * CELL + 1);
                    let _ = writeln!(
                        s,
                        r#"<rect class="relevant" data-i="{i}" data-j="{j}" x="{x}" y="{y}" width="{}" height="{}" fill="none" stroke="{RELEVANT_STROKE}" stroke-width="2"/>"#,
                        CELL - 2,
                        CELL - 2
                    );
                }
            }
        }
        let _ = writeln!(s, "</g>");
    }
    if let Some(m) = opts.robust_outline {
        let _ = writeln!(s, r#"<g class="robustness">"#);
        for i in 0..k {
            for j in 0..k {
                if m.get(i, j) {
                    let (x, y) = (left + j * CELL + 4, top + i * CELL + 4);
                    let _ = writeln!(
                        s,
                        r#"<rect class="robust" data-i="{i}" data-j="{j}" x="{x}" y="{y}" width="{}" height="{}" fill="none" stroke="{ROBUST_STROKE}" stroke-width="1.5"/>"#,
                        CELL - 8,
                        CELL - 8
                    );
                }
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, r#"<g class="labels">"#);
    for (i, name) in h.concept_names.iter().enumerate() {
        let y = top + i * CELL + CELL / 2 + 4;
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, left - 4, escape(name));
        let x = left + i * CELL + CELL / 2 + 4;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="start" transform="rotate(-90 {x} {})">{}</text>"#,
            top - 4,
            top - 4,
            escape(name)
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "</svg>");
    Ok(s)
}

/// Fixed-width table with 2-decimal cells. Relevant cells carry a `*`,
/// robust ones a `#`.
pub fn render_text(h: &Heatmap, opts: &RenderOptions<'_>) -> Result<String> {
    h.validate()?;
    check_mask(h, opts.highlight, "highlight")?;
    check_mask(h, opts.robust_outline, "robust")?;
    let label_w = h.concept_names.iter().map(|n| n.chars().count()).max().unwrap_or(0).max(4) + 4;
    let mut s = String::new();
    if let Some(t) = opts.title {
        let _ = writeln!(s, "{t}");
    }
    let _ = writeln!(
        s,
        "{} (n={}, {})",
        h.kind,
        h.provenance.sample_count,
        if h.provenance.filter.is_empty() { "-" } else { &h.provenance.filter }
    );
    let _ = write!(s, "{:label_w$} ", "");
    for j in 0..h.k {
        let _ = write!(s, "{:>7}", format!("[{j}]"));
    }
    let _ = writeln!(s);
    for i in 0..h.k {
        let _ = write!(s, "{:>label_w$} ", format!("{} [{i}]", h.concept_names[i]));
        for j in 0..h.k {
            let v = h.get(i, j);
            let mark = match (opts.highlight.is_some_and(|m| m.get(i, j)), opts.robust_outline.is_some_and(|m| m.get(i, j))) {
                (_, true) => '#',
                (true, false) => '*',
                _ => ' ',
            };
            match opts.display_floor {
                Some(f) if v < f => {
                    let _ = write!(s, "{:>6}{mark}", ".");
                }
                _ => {
                    let _ = write!(s, "{v:>6.2}{mark}");
                }
            }
        }
        let _ = writeln!(s);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Provenance;

    fn map(kind: HeatmapKind, k: usize, grid: Vec<f64>) -> Heatmap {
        Heatmap {
            schema: super::super::HEATMAP_SCHEMA.into(),
            kind,
            k,
            concept_names: (0..k).map(|i| format!("c<{i}>")).collect(),
            provenance: Provenance { class: None, filter: "t".into(), sample_count: 3 },
            grid,
            counts: None,
        }
    }

    #[test]
    fn zero_differential_svg() {
        let h = map(HeatmapKind::Differential, 2, vec![0.0; 4]);
        let svg = render_svg(&h, &RenderOptions::default()).unwrap();
        assert!(svg.starts_with("<?xml"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches(r#"class="cell""#).count(), 4);
        assert_eq!(svg.matches(r##"fill="#ffffff""##).count(), 5);
        assert!(svg.contains("c&lt;0&gt;"));
        assert!(!svg.contains("c<0>"));
    }

    #[test]
    fn colors_follow_kind() {
        assert_eq!(color(HeatmapKind::GroundTruthSummary, 1.0), "#08306b");
        assert_eq!(color(HeatmapKind::OutputLabelSummary, 0.0), "#ffffff");
        assert_ne!(color(HeatmapKind::Differential, 0.5), color(HeatmapKind::GroundTruthSummary, 0.5));
    }

    #[test]
    fn masks_must_match() {
        let h = map(HeatmapKind::Binarized, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let m = Mask::empty(3);
        let opts = RenderOptions { highlight: Some(&m), ..Default::default() };
        assert!(render_svg(&h, &opts).is_err());
        assert!(render_text(&h, &opts).is_err());
    }

    #[test]
    fn text_table_layout() {
        let h = map(HeatmapKind::GroundTruthSummary, 2, vec![0.0, 0.75, 0.125, 0.0]);
        let hl = Mask::from_fn(2, |i, j| i == 0 && j == 1);
        let t = render_text(&h, &RenderOptions { highlight: Some(&hl), ..Default::default() }).unwrap();
        assert!(t.contains("  0.75*"));
        assert!(t.contains("  0.12 "));
        let floored = render_text(&h, &RenderOptions { display_floor: Some(0.5), ..Default::default() }).unwrap();
        assert!(!floored.contains("0.12"));
    }

    #[test]
    fn deterministic_bytes() {
        let h = map(HeatmapKind::OutputLabelSummary, 3, (0..9).map(|v| v as f64 / 8.0).collect());
        let a = render_svg(&h, &RenderOptions::default()).unwrap();
        let b = render_svg(&h, &RenderOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
