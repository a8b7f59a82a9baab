//! Static SVG line chart of MMD trajectories: one line per example with its
//! minimum marked.

use std::fmt::Write as _;

use mmd_flagger::dataio::TrajectoryRow;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 24.0;
const MARGIN_BOTTOM: f64 = 48.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

struct Series<'a> {
    id: &'a str,
    raw: Vec<(f64, f64)>,
    smoothed: Vec<(f64, f64)>,
}

fn group(rows: &[TrajectoryRow]) -> Vec<Series<'_>> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        if out.last().is_none_or(|s| s.id != r.id) {
            out.push(Series {
                id: &r.id,
                raw: Vec::new(),
                smoothed: Vec::new(),
            });
        }
        let s = out.last_mut().expect("pushed above");
        s.raw.push((r.temperature, r.mmd2));
        if let Some(v) = r.smoothed {
            s.smoothed.push((r.temperature, v));
        }
    }
    out
}

fn first_min(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    points.iter().copied().fold(None, |best, p| match best {
        Some(b) if b.1 <= p.1 => Some(b),
        _ => Some(p),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn render_svg(rows: &[TrajectoryRow]) -> String {
    let series = group(rows);
    let (x0, x1) = range(rows.iter().map(|r| r.temperature));
    let (y0, y1) = range(rows.iter().flat_map(|r| std::iter::once(r.mmd2).chain(r.smoothed)));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, bottom) = (MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM);
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {MARGIN_TOP} V{bottom} H{:.2}" fill="none" stroke="black"/>"#,
        WIDTH - MARGIN_RIGHT
    );
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xv:.2}</text>"#,
            sx(xv),
            bottom + 16.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#,
            left - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">temperature</text>"#,
        left + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">MMD²</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );
    if series.is_empty() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">no trajectories</text>"#,
            left + plot_w / 2.0,
            MARGIN_TOP + plot_h / 2.0
        );
    }

    let polyline = |pts: &[(f64, f64)]| {
        pts.iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<g><title>{}</title>"#, escape(s.id));
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            polyline(&s.raw)
        );
        if !s.smoothed.is_empty() {
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-dasharray="4 3"/>"#,
                polyline(&s.smoothed)
            );
        }
        let marked = if s.smoothed.is_empty() { &s.raw } else { &s.smoothed };
        if let Some((x, y)) = first_min(marked) {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}" stroke="black"/>"#,
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}
