use std::fmt::Write;

use crate::training::Distribution;

const BOX_SPACING: f64 = 64.0;
const LEFT: f64 = 64.0;
const TOP: f64 = 40.0;
const PLOT_HEIGHT: f64 = 280.0;
const BOTTOM: f64 = 110.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Box-and-whisker chart: quartile box, median line, whiskers to the most
/// extreme values within 1.5 IQR, outliers as open circles. Values are
/// drawn as given (callers pass percentages).
pub fn box_plot_svg(title: &str, y_label: &str, boxes: &[(String, Distribution)]) -> String {
    let width = LEFT + BOX_SPACING * boxes.len().max(1) as f64 + 24.0;
    let height = TOP + PLOT_HEIGHT + BOTTOM;
    let (mut lo, mut hi) = boxes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, d)| (lo.min(d.min), hi.max(d.max)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(0.5);
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| TOP + PLOT_HEIGHT * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + PLOT_HEIGHT / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="#333"/>"##,
        TOP + PLOT_HEIGHT
    );
    for i in 0..=5 {
        let v = lo + (hi - lo) * i as f64 / 5.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            LEFT,
            width - 16.0,
            LEFT - 4.0,
            yy + 4.0
        );
    }
    for (i, (label, d)) in boxes.iter().enumerate() {
        let cx = LEFT + BOX_SPACING * (i as f64 + 0.5);
        let half = BOX_SPACING * 0.3;
        let _ = writeln!(s, r#"<g class="box">"#);
        let _ = writeln!(
            s,
            r##"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#333"/>"##,
            y(d.whisker_high),
            y(d.q3)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#333"/>"##,
            y(d.q1),
            y(d.whisker_low)
        );
        for w in [d.whisker_low, d.whisker_high] {
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333"/>"##,
                cx - half / 2.0,
                y(w),
                cx + half / 2.0,
                y(w)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="#333"/>"##,
            cx - half,
            y(d.q3),
            2.0 * half,
            (y(d.q1) - y(d.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r##"<line class="median" x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#d62728" stroke-width="2"/>"##,
            cx - half,
            y(d.median),
            cx + half,
            y(d.median)
        );
        for o in &d.outliers {
            let _ = writeln!(
                s,
                r##"<circle class="outlier" cx="{cx:.1}" cy="{:.1}" r="3" fill="none" stroke="#333"/>"##,
                y(*o)
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1} {:.1}) rotate(-45)" text-anchor="end">{}</text>"#,
            cx + 4.0,
            TOP + PLOT_HEIGHT + 14.0,
            escape(label)
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
