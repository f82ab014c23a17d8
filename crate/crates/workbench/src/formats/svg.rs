// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-by-category heatmaps as plain SVG.

use std::fmt::Write;

use crosstrace_core::model::{Category, Component};
use crosstrace_core::trace::RRGrid;

const CELL_W: usize = 72;
const CELL_H: usize = 28;
const LEFT: usize = 64;
const TOP: usize = 48;

/// White at RR <= 0 to saturated red at RR >= 1.
fn color(rr: f64) -> String {
    let t = rr.clamp(0.0, 1.0);
    let gb = (255.0 * (1.0 - t)).round() as u8;
    format!("#ff{gb:02x}{gb:02x}")
}

/// Rows are layers (layer 0 at the top), columns the seven traced
/// categories. Empty cells are grey.
pub fn heatmap(grid: &RRGrid, component: Component) -> String {
    let cats = Category::TRACED;
    let w = LEFT + CELL_W * cats.len() + 16;
    let h = TOP + CELL_H * grid.n_layers + 16;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="18" font-size="13">recovery rate, component {}</text>"#,
        component.label()
    );
    for (j, c) in cats.iter().enumerate() {
        let x = LEFT + j * CELL_W + CELL_W / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, TOP - 8, c.label());
    }
    for l in 0..grid.n_layers {
        let y = TOP + l * CELL_H;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">L{l}</text>"#, LEFT - 6, y + CELL_H / 2 + 4);
        for (j, c) in cats.iter().enumerate() {
            let x = LEFT + j * CELL_W;
            let rr = grid.get(component, l, *c).and_then(|cell| cell.mean_rr);
            let (fill, label) = match rr {
                Some(v) => (color(v), format!("{v:.2}")),
                None => ("#cccccc".to_string(), "-".to_string()),
            };
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="#888"/><text x="{}" y="{}" text-anchor="middle">{label}</text>"##,
                x + CELL_W / 2,
                y + CELL_H / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Number of heatmap cells drawn.
pub fn rect_count(svg: &str) -> usize {
    svg.matches("<rect ").count()
}
