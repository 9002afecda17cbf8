//! Static figures: loss curves as SVG and side-by-side image grids.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of one or more named series against their index.
pub fn loss_curve_svg(series: &[(String, Vec<f64>)], title: &str) -> Result<String> {
    let points: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::InvalidArgument("no values to plot".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss curve value".into()));
    }
    let (w, h, m) = (640.0, 400.0, 50.0);
    let lo = points.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = points.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2) - 1;
    let sx = |i: usize| m + (w - 2.0 * m) * i as f64 / n as f64;
    let sy = |v: f64| h - m - (h - 2.0 * m) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<polyline points="{m},{m} {m},{} {},{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{hi:.4}</text>"#, m - 4.0, m + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{lo:.4}</text>"#, m - 4.0, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">epoch</text>"#, w / 2.0, h - 12.0);
    for (k, (name, values)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{}</text>"#,
            w - m - 120.0,
            m + 16.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Grid with one row per entry of `rows`, each image scaled to `cell`×`cell`,
/// separated by a 2-pixel white gutter.
pub fn image_grid(rows: &[Vec<ImageTensor>], cell: usize) -> Result<ImageTensor> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 || cell == 0 {
        return Err(Error::InvalidArgument("image grid needs at least one image".into()));
    }
    let gap = 2;
    let (gh, gw) = (rows.len() * (cell + gap) - gap, cols * (cell + gap) - gap);
    let mut grid = ImageTensor::filled(gh, gw, [1.0; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let scaled = img.resize_bilinear(cell, cell);
            for y in 0..cell {
                for x in 0..cell {
                    for ch in 0..3 {
                        grid.set(r * (cell + gap) + y, c * (cell + gap) + x, ch, scaled.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(grid)
}
