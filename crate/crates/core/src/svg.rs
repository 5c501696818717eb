//! Small static SVG renders for heatmaps and line plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 50.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Viridis-like ramp from dark blue to yellow.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (68.0 + t * (253.0 - 68.0)) as u8;
    let g = (1.0 + t * (231.0 - 1.0)) as u8;
    let b = (84.0 + t * (37.0 - 84.0)) as u8;
    format!("rgb({r},{g},{b})")
}

/// Heatmap of `values[i][j]` (column `i` = x, row `j` = y); `None` cells
/// are drawn grey. Colours use `log10` of the value when `log` is set.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, xs: &[f64], ys: &[f64], values: &[Vec<Option<f64>>], log: bool) -> String {
    let tf = |v: f64| if log { v.max(1e-300).log10() } else { v };
    let (lo, hi) = range(values.iter().flatten().flatten().map(|v| tf(*v)));
    let mut s = header(title);
    let (nx, ny) = (xs.len().max(1) as f64, ys.len().max(1) as f64);
    let cw = (W - 2.0 * PAD) / nx;
    let ch = (H - 2.0 * PAD) / ny;
    for (i, col) in values.iter().enumerate() {
        for (j, v) in col.iter().enumerate() {
            let fill = match v {
                Some(v) if v.is_finite() => color((tf(*v) - lo) / (hi - lo)),
                _ => "rgb(200,200,200)".to_string(),
            };
            let x = PAD + i as f64 * cw;
            let y = H - PAD - (j + 1) as f64 * ch;
            let _ = writeln!(s, r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#, cw + 0.2, ch + 0.2);
        }
    }
    axis_labels(&mut s, x_label, y_label);
    for (i, x) in xs.iter().enumerate().step_by((xs.len() / 6).max(1)) {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{x:.3}</text>"#, PAD + (i as f64 + 0.5) * cw, H - PAD + 14.0);
    }
    for (j, y) in ys.iter().enumerate().step_by((ys.len() / 6).max(1)) {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y:.3}</text>"#, PAD - 4.0, H - PAD - (j as f64 + 0.5) * ch);
    }
    s.push_str("</svg>\n");
    s
}

fn axis_labels(s: &mut String, x_label: &str, y_label: &str) {
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

/// Overlaid polylines, one per `(name, points)`.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let (x0, x1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = header(title);
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * PAD, H - 2.0 * PAD);
    for (k, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" fill="{c}">{}</text>"#, W - PAD - 110.0, PAD + 16.0 + 14.0 * k as f64, escape(name));
    }
    axis_labels(&mut s, x_label, y_label);
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" font-size="10" text-anchor="middle">{x0:.3}</text>"#, H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{x1:.3}</text>"#, W - PAD, H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3}</text>"#, PAD - 4.0, H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{PAD}" font-size="10" text-anchor="end">{y1:.3}</text>"#, PAD - 4.0);
    s.push_str("</svg>\n");
    s
}
