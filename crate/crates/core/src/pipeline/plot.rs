//! Annotated heatmap rendering as standalone SVG.

use std::fmt::Write;

use crate::rollout::HeatmapMatrix;

const CELL: f64 = 56.0;
const MARGIN: f64 = 64.0;

/// White at 0 %, deep red at `vmax`.
fn color(p: f64, vmax: f64) -> String {
    let s = if vmax > 0.0 { (p / vmax).clamp(0.0, 1.0) } else { 0.0 };
    let g = (255.0 * (1.0 - 0.8 * s)).round() as u8;
    let b = (255.0 * (1.0 - 0.85 * s)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", 255, g, b)
}

/// One heatmap per model side by side, θ1 down, θ2 across, each cell
/// annotated with its Col.% and seen cells outlined. Colour scale is
/// shared across models.
pub fn render_svg(mats: &[HeatmapMatrix]) -> String {
    let vmax = mats
        .iter()
        .flat_map(|m| m.percent.iter().flatten().flatten())
        .fold(0.0f64, |a, b| a.max(*b));
    let panel_w = |m: &HeatmapMatrix| m.thetas2.len() as f64 * CELL + MARGIN;
    let width: f64 = MARGIN + mats.iter().map(panel_w).sum::<f64>();
    let rows = mats.iter().map(|m| m.thetas1.len()).max().unwrap_or(0) as f64;
    let height = 2.0 * MARGIN + rows * CELL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let mut x0 = MARGIN;
    for m in mats {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{} Col.%</text>"#,
            x0 + 0.5 * m.thetas2.len() as f64 * CELL,
            MARGIN - 28.0,
            m.model
        );
        for (j, t2) in m.thetas2.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{t2}</text>"#,
                x0 + (j as f64 + 0.5) * CELL,
                MARGIN - 8.0
            );
        }
        for (i, t1) in m.thetas1.iter().enumerate() {
            let y = MARGIN + i as f64 * CELL;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{t1}</text>"#,
                x0 - 6.0,
                y + 0.5 * CELL + 4.0
            );
            for (j, t2) in m.thetas2.iter().enumerate() {
                let x = x0 + j as f64 * CELL;
                let seen = m.seen.iter().any(|p| p[0] == *t1 && p[1] == *t2);
                let (fill, label) = match m.percent[i][j] {
                    Some(p) => (color(p, vmax), format!("{p:.1}")),
                    None => ("#dddddd".to_string(), "n/a".to_string()),
                };
                let (stroke, sw) = if seen { ("black", 3.0) } else { ("#999999", 1.0) };
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="{stroke}" stroke-width="{sw}"/>"#
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                    x + 0.5 * CELL,
                    y + 0.5 * CELL + 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">θ2 (columns), θ1 (rows); outlined: trained pairs</text>"#,
            x0 + 0.5 * m.thetas2.len() as f64 * CELL,
            height - MARGIN * 0.4
        );
        x0 += panel_w(m);
    }
    s.push_str("</svg>\n");
    s
}
