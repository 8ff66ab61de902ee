use std::fmt::Write as _;
use std::io;
use std::path::Path;

use super::metrics::{CorrelationReport, HorizonMse};

const CELL: f64 = 24.0;
const GAP: f64 = 16.0;

/// Monotone ramp from white (0) to dark blue (1); values outside are clamped.
pub fn ramp(v: f64) -> (u8, u8, u8) {
    let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

/// SVG with one heatmap per `(title, matrix)` panel, laid out left to right.
pub fn heatmap_svg(panels: &[(&str, &[f64])], n: usize) -> String {
    let side = CELL * n as f64;
    let width = panels.len() as f64 * (side + GAP) + GAP;
    let height = side + 2.0 * GAP + 12.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    for (p, (title, m)) in panels.iter().enumerate() {
        let x0 = GAP + p as f64 * (side + GAP);
        let y0 = 2.0 * GAP;
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            GAP + 4.0,
            escape(title)
        );
        let _ = writeln!(s, r#"<g class="panel" data-n="{n}">"#);
        for i in 0..n {
            for j in 0..n {
                let v = m[i * n + j];
                let (r, g, b) = ramp(v);
                let _ = writeln!(
                    s,
                    r##"<rect class="cell" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}"><title>{i},{j}: {v:.4}</title></rect>"##,
                    x0 + j as f64 * CELL,
                    y0 + i as f64 * CELL,
                );
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `n x n` matrix as CSV rows.
pub fn matrix_csv(m: &[f64], n: usize) -> String {
    let mut s = String::new();
    for i in 0..n {
        let row: Vec<String> = m[i * n..(i + 1) * n].iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// `metric,horizon,value` rows for a set of labelled results.
pub fn metrics_csv(mse: &[(&str, &HorizonMse)], corr: &[(&str, &CorrelationReport)]) -> String {
    let mut s = String::from("metric,horizon,value\n");
    for (label, m) in mse {
        for (h, v) in m.horizons.iter().zip(&m.mse) {
            let _ = writeln!(s, "{label}_mse,{h},{v}");
        }
    }
    for (label, c) in corr {
        let _ = writeln!(s, "{label}_rho_tot,,{}", c.rho_tot);
        let _ = writeln!(s, "{label}_rho_sample,,{}", c.rho_sample_mean);
        let _ = writeln!(s, "{label}_undefined_samples,,{}", c.n_undefined);
    }
    s
}

pub fn histogram_csv(c: &CorrelationReport) -> String {
    let mut s = String::from("lo,hi,count\n");
    for ((lo, hi), n) in c
        .rho_sample_histogram
        .edges()
        .into_iter()
        .zip(&c.rho_sample_histogram.counts)
    {
        let _ = writeln!(s, "{lo},{hi},{n}");
    }
    s
}

pub fn write(path: &Path, text: &str) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)
}
