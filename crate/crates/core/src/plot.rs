//! Standalone SVG line chart of p50 latency against thread count.

use std::fmt::Write;

use crate::bench::{argmin_p50, LatencyStats};
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const Y_TICKS: usize = 5;

pub fn latency_svg(stats: &[LatencyStats], title: &str) -> Result<String> {
    if stats.is_empty() {
        return Err(Error::invalid("no rows to plot"));
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let t_min = stats.iter().map(|s| s.threads).min().unwrap() as f64;
    let t_max = stats.iter().map(|s| s.threads).max().unwrap() as f64;
    let y_max = stats.iter().map(|s| s.p50_ms).fold(0.0, f64::max).max(1e-3) * 1.1;
    let x = |t: usize| {
        if t_max == t_min {
            LEFT + plot_w / 2.0
        } else {
            LEFT + (t as f64 - t_min) / (t_max - t_min) * plot_w
        }
    };
    let y = |ms: f64| TOP + plot_h - ms / y_max * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, y0, x1) = (LEFT, TOP + plot_h, LEFT + plot_w);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
    for s in stats {
        let px = x(s.threads);
        let _ = writeln!(svg, r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(svg, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#, y0 + 20.0, s.threads);
    }
    for i in 0..=Y_TICKS {
        let v = y_max * i as f64 / Y_TICKS as f64;
        let py = y(v);
        let _ = writeln!(svg, r##"<line x1="{}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#dddddd"/>"##, x0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, py + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">CPU threads</text>"#, LEFT + plot_w / 2.0, HEIGHT - 15.0);
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">p50 latency (ms)</text>"#,
        TOP + plot_h / 2.0
    );
    let points: Vec<String> = stats.iter().map(|s| format!("{:.2},{:.2}", x(s.threads), y(s.p50_ms))).collect();
    let _ = writeln!(svg, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##, points.join(" "));
    let best = argmin_p50(stats);
    let b = stats.iter().find(|s| s.threads == best).unwrap();
    let (bx, by) = (x(b.threads), y(b.p50_ms));
    let _ = writeln!(svg, r##"<circle class="min" cx="{bx:.2}" cy="{by:.2}" r="5" fill="#d62728"/>"##);
    let _ = writeln!(
        svg,
        r#"<text x="{bx:.2}" y="{:.2}" text-anchor="middle">min {:.3} ms @ {} threads</text>"#,
        by - 10.0,
        b.p50_ms,
        b.threads
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
