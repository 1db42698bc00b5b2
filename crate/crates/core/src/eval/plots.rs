//! SVG charts and PNG heatmaps for evaluation output.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::DisplacementField;
use crate::io::write_rgb_png;

use super::EvalReport;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Grouped bars of per-case TRE (pixels): before, network, B-spline.
pub fn tre_bar_chart_svg(report: &EvalReport) -> String {
    let n = report.cases.len().max(1);
    let pick = |s: &super::TreStats| if report.headline == "rms" { s.rms } else { s.mean };
    let rows: Vec<[f64; 3]> = report
        .cases
        .iter()
        .map(|c| [pick(&c.before_pixels), pick(&c.r2n2.tre_pixels), pick(&c.bspline.tre_pixels)])
        .collect();
    let top = rows.iter().flatten().copied().fold(1e-9, f64::max) * 1.1;
    let (w, h, margin) = (60.0 + 36.0 * n as f64, 260.0, 40.0);
    let plot_h = h - 2.0 * margin;
    let colors = ["#999999", "#d95f02", "#1b9e77"];
    let labels = ["before", "sequence", "b-spline"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{margin}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - margin,
        w - 10.0,
        h - margin
    );
    let _ = writeln!(s, r#"<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{}" stroke="black"/>"#, h - margin);
    let _ = writeln!(s, r#"<text x="4" y="{}">{top:.2} px</text>"#, margin - 4.0);
    for (i, row) in rows.iter().enumerate() {
        let x0 = margin + 6.0 + 36.0 * i as f64;
        for (k, &val) in row.iter().enumerate() {
            let bh = plot_h * val / top;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="9" height="{:.1}" fill="{}"/>"#,
                x0 + 10.0 * k as f64,
                h - margin - bh,
                bh,
                colors[k]
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}">{}</text>"#, x0 + 6.0, h - margin + 12.0, i);
    }
    for (k, l) in labels.iter().enumerate() {
        let y = 12.0 + 12.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="8" height="8" fill="{}"/>"#, w - 80.0, y - 8.0, colors[k]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{l}</text>"#, w - 68.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Arrow plot of a field on a `stride`-subsampled lattice. Arrows are drawn
/// at true length in pixel units, scaled by `gain`.
pub fn quiver_svg(field: &DisplacementField, stride: usize, gain: f64, title: &str) -> String {
    let g = field.grid();
    let (hgt, wid) = (g.height(), g.width());
    let cell = (512.0 / wid.max(hgt) as f64).max(1.0);
    let (w, h) = (wid as f64 * cell, hgt as f64 * cell + 16.0);
    let (u, v) = (field.u(), field.v());
    let stride = stride.max(1);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="4" y="12">{title}</text>"#);
    for r in (stride / 2..hgt).step_by(stride) {
        for c in (stride / 2..wid).step_by(stride) {
            let x0 = (c as f64 + 0.5) * cell;
            let y0 = (r as f64 + 0.5) * cell + 16.0;
            let dx = u[[r, c]] / g.spacing_x() * cell * gain;
            let dy = v[[r, c]] / g.spacing_y() * cell * gain;
            let _ = writeln!(
                s,
                r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="1"/>"#,
                x0 + dx,
                y0 + dy
            );
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="1.2" fill="red"/>"#, x0 + dx, y0 + dy);
        }
    }
    s.push_str("</svg>\n");
    s
}

fn heat(t: f64) -> [u8; 3] {
    // black to red to yellow to white
    let t = t.clamp(0.0, 1.0) * 3.0;
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(t), ch(t - 1.0), ch(t - 2.0)]
}

/// Displacement magnitude as an RGB heatmap; `max` fixes the colour scale
/// (defaults to the field's own maximum).
pub fn magnitude_heatmap_rgb(field: &DisplacementField, max: Option<f64>) -> Vec<[u8; 3]> {
    let mag = field.magnitude();
    let top = max.unwrap_or_else(|| field.max_magnitude());
    let top = if top > 0.0 { top } else { 1.0 };
    mag.iter().map(|&m| heat(m / top)).collect()
}

pub fn write_tre_bar_chart(path: &Path, report: &EvalReport) -> Result<()> {
    write_text(path, &tre_bar_chart_svg(report))
}

pub fn write_quiver(path: &Path, field: &DisplacementField, stride: usize, title: &str) -> Result<()> {
    write_text(path, &quiver_svg(field, stride, 1.0, title))
}

pub fn write_magnitude_heatmap(path: &Path, field: &DisplacementField, max: Option<f64>) -> Result<()> {
    let g = field.grid();
    write_rgb_png(path, g.width(), g.height(), &magnitude_heatmap_rgb(field, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_grid;

    #[test]
    fn quiver_has_one_arrow_per_lattice_point() {
        let g = make_grid(16, 16).unwrap();
        let f = DisplacementField::constant(&g, 0.1, 0.0);
        let svg = quiver_svg(&f, 4, 1.0, "t");
        assert_eq!(svg.matches("<line").count(), 16);
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn heatmap_scale() {
        let g = make_grid(4, 4).unwrap();
        let zero = DisplacementField::zeros(&g);
        assert!(magnitude_heatmap_rgb(&zero, None).iter().all(|p| *p == [0, 0, 0]));
        let f = DisplacementField::constant(&g, 0.3, 0.4);
        assert!(magnitude_heatmap_rgb(&f, None).iter().all(|p| *p == [255, 255, 255]));
        let dir = tempfile::tempdir().unwrap();
        write_magnitude_heatmap(&dir.path().join("m.png"), &f, Some(1.0)).unwrap();
        assert!(dir.path().join("m.png").exists());
    }
}
