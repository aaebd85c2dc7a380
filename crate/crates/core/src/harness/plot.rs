use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::SweepSummary;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const REFERENCE_POINTS: usize = 64;
const Y_TICKS: usize = 5;

/// Renders per-agent worst-case regret against `N` with a dashed `c/sqrt(N)`
/// reference, where `c` is the mean of `value * sqrt(N)`.
pub fn render_svg(summary: &SweepSummary) -> Result<String> {
    let pts: Vec<(f64, f64)> = summary
        .rows
        .iter()
        .map(|r| (r.n_agents as f64, r.worst_case_per_agent))
        .collect();
    if pts.is_empty() {
        return Err(Error::invalid("cannot plot an empty summary"));
    }
    let c = pts.iter().map(|&(n, v)| v * n.sqrt()).sum::<f64>() / pts.len() as f64;
    let x_lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let reference: Vec<(f64, f64)> = (0..REFERENCE_POINTS)
        .map(|i| {
            let n = if x_hi > x_lo {
                x_lo + (x_hi - x_lo) * i as f64 / (REFERENCE_POINTS - 1) as f64
            } else {
                x_lo
            };
            (n, c / n.sqrt())
        })
        .collect();
    let y_max = pts
        .iter()
        .chain(&reference)
        .map(|p| p.1)
        .fold(0.0, f64::max);
    let y_hi = if y_max > 0.0 { 1.1 * y_max } else { 1.0 };
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };

    let px = |x: f64| LEFT + (x - x_lo) / x_span * (WIDTH - LEFT - RIGHT);
    let py = |y: f64| HEIGHT - BOTTOM - y / y_hi * (HEIGHT - TOP - BOTTOM);
    let polyline = |ps: &[(f64, f64)]| {
        ps.iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, y0) = (LEFT, HEIGHT - BOTTOM);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{:.2}" y2="{y0}" stroke="black"/>"#,
        WIDTH - RIGHT
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{TOP}" stroke="black"/>"#
    );
    for &(n, _) in &pts {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{n}</text>"#,
            px(n),
            y0 + 16.0
        );
    }
    for i in 0..=Y_TICKS {
        let y = y_hi * i as f64 / Y_TICKS as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.3}</text>"#,
            x0 - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Number of agents N</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Per-agent worst-case regret</text>"#,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        (TOP + HEIGHT - BOTTOM) / 2.0
    );
    let _ = writeln!(
        s,
        r#"<polyline class="measured" fill="none" stroke="black" stroke-width="2" points="{}"/>"#,
        polyline(&pts)
    );
    let _ = writeln!(
        s,
        r#"<polyline class="reference" fill="none" stroke="gray" stroke-width="1.5" stroke-dasharray="6 4" points="{}"/>"#,
        polyline(&reference)
    );
    let lx = WIDTH - RIGHT - 190.0;
    let _ = writeln!(
        s,
        r#"<line x1="{lx}" y1="{TOP}" x2="{}" y2="{TOP}" stroke="black" stroke-width="2"/>"#,
        lx + 24.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">{} measured</text>"#,
        lx + 30.0,
        TOP + 4.0,
        summary.mode
    );
    let _ = writeln!(
        s,
        r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
        TOP + 18.0,
        lx + 24.0,
        TOP + 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">c/sqrt(N), c = {c:.4}</text>"#,
        lx + 30.0,
        TOP + 22.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes [`render_svg`] output to `path`.
pub fn emit_plot(summary: &SweepSummary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = render_svg(summary)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
