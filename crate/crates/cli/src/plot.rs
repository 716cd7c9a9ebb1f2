//! Standalone SVG charts, written without external services.

use omcrl_core::Result;
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_header(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="24" font-family="monospace" font-size="15" text-anchor="middle">{title}</text>
"#,
        W / 2.0
    );
    s
}

fn axes(s: &mut String, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) {
    let _ = write!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>
<text x="{m}" y="{bl}" font-family="monospace" font-size="11">{x_lo:.5}</text>
<text x="{r}" y="{bl}" font-family="monospace" font-size="11" text-anchor="end">{x_hi:.5}</text>
<text x="{ml}" y="{b}" font-family="monospace" font-size="11" text-anchor="end">{y_lo:.5}</text>
<text x="{ml}" y="{tt}" font-family="monospace" font-size="11" text-anchor="end">{y_hi:.5}</text>
"#,
        m = MARGIN,
        r = W - MARGIN / 2.0,
        t = MARGIN,
        b = H - MARGIN,
        bl = H - MARGIN + 16.0,
        ml = MARGIN - 6.0,
        tt = MARGIN + 4.0,
    );
}

/// Multi-series line chart; each series is `(label, points)`.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let all = series.iter().flat_map(|(_, pts)| pts.iter());
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x_hi - x_lo).abs() < 1e-12 {
        x_hi = x_lo + 1.0;
    }
    if (y_hi - y_lo).abs() < 1e-12 {
        y_hi = y_lo + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (W - 1.5 * MARGIN);
    let sy = |y: f64| (H - MARGIN) - (y - y_lo) / (y_hi - y_lo) * (H - 2.0 * MARGIN);

    let mut s = svg_header(title);
    axes(&mut s, x_lo, x_hi, y_lo, y_hi);
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2}", if j == 0 { "M" } else { " L" }, sx(x), sy(y));
        }
        let _ = write!(
            s,
            r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>
<text x="{}" y="{}" font-family="monospace" font-size="12" fill="{color}">{label}</text>
"#,
            W - MARGIN * 2.2,
            MARGIN + 16.0 * (i as f64 + 1.0),
        );
    }
    s.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Labeled vertical bars.
pub fn bar_chart(title: &str, bars: &[(String, f64)], path: &Path) -> Result<()> {
    let y_hi = bars.iter().map(|(_, v)| *v).fold(1e-9_f64, f64::max);
    let mut s = svg_header(title);
    axes(&mut s, 0.0, bars.len() as f64, 0.0, y_hi);
    let span = W - 1.5 * MARGIN;
    let slot = span / bars.len() as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN + slot * (i as f64 + 0.15);
        let h = (v / y_hi) * (H - 2.0 * MARGIN);
        let y = (H - MARGIN) - h;
        let color = COLORS[i % COLORS.len()];
        let _ = write!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{color}"/>
<text x="{cx:.2}" y="{ly:.2}" font-family="monospace" font-size="11" text-anchor="middle">{label}</text>
<text x="{cx:.2}" y="{vy:.2}" font-family="monospace" font-size="11" text-anchor="middle">{v:.4}</text>
"#,
            w = slot * 0.7,
            cx = x + slot * 0.35,
            ly = H - MARGIN + 16.0,
            vy = y - 4.0,
        );
    }
    s.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_render_well_formed_svg() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("l.svg");
        line_chart(
            "test",
            &[("a".into(), vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)])],
            &line,
        )
        .unwrap();
        let text = std::fs::read_to_string(&line).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(text.contains("<path"));

        let bar = dir.path().join("b.svg");
        bar_chart("test", &[("sr".into(), 85.0), ("os".into(), 90.0)], &bar).unwrap();
        let text = std::fs::read_to_string(&bar).unwrap();
        assert!(text.contains("<rect"));
        assert_eq!(text.matches("<rect").count(), 3); // background + 2 bars
    }

    #[test]
    fn empty_and_degenerate_series_do_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        line_chart("empty", &[("a".into(), vec![])], &dir.path().join("e.svg")).unwrap();
        line_chart(
            "flat",
            &[("a".into(), vec![(1.0, 5.0), (2.0, 5.0)])],
            &dir.path().join("f.svg"),
        )
        .unwrap();
    }
}
