//! Interval plot: one horizontal bar `[0, ratio]` per (test, variant) and
//! coordinate, with a reference line at 1.

use std::fmt::Write;

use neural_screen::pipeline::CoordinateReport;
use neural_screen::stats::TestReport;

const WIDTH: f64 = 640.0;
const LEFT: f64 = 190.0;
const RIGHT: f64 = 30.0;
const ROW: f64 = 18.0;
const PANEL_GAP: f64 = 28.0;
const TOP: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn rows(report: &CoordinateReport) -> Vec<(String, Option<f64>)> {
    let mut out = Vec::with_capacity(6);
    let variants: [(&str, &TestReport); 2] = [("centered", &report.centered), ("non-centered", &report.noncentered)];
    for (test, idx) in [("fixed-t", 0), ("sup", 1), ("square", 2)] {
        for (variant, tests) in variants {
            out.push((format!("{test} / {variant}"), tests.intervals()[idx]));
        }
    }
    out
}

/// Renders the reports as SVG. Output depends only on the report values.
pub fn interval_svg(reports: &[CoordinateReport]) -> String {
    let per_panel: Vec<Vec<(String, Option<f64>)>> = reports.iter().map(rows).collect();
    let x_max = per_panel
        .iter()
        .flatten()
        .filter_map(|(_, r)| *r)
        .filter(|r| r.is_finite())
        .fold(2.0f64, f64::max)
        * 1.05;
    let plot_w = WIDTH - LEFT - RIGHT;
    let sx = |v: f64| LEFT + plot_w * v.clamp(0.0, x_max) / x_max;
    let panel_h = 6.0 * ROW + PANEL_GAP;
    let height = TOP + panel_h * reports.len().max(1) as f64 + 20.0;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{LEFT:.1}" y="18" font-size="13">Significance intervals (covering 1 means significant)</text>"#).unwrap();

    for (p, (report, bars)) in reports.iter().zip(&per_panel).enumerate() {
        let y0 = TOP + p as f64 * panel_h;
        writeln!(
            svg,
            r#"<text x="8" y="{:.1}" font-weight="bold">{} (h = {})</text>"#,
            y0 + 2.0,
            escape(&report.column_name),
            report.bandwidth
        )
        .unwrap();
        for (k, (label, ratio)) in bars.iter().enumerate() {
            let y = y0 + 8.0 + k as f64 * ROW;
            writeln!(svg, r#"<text x="14" y="{:.1}">{}</text>"#, y + 11.0, escape(label)).unwrap();
            match ratio {
                Some(r) if r.is_finite() => {
                    let fill = if *r > 1.0 { "#c0392b" } else { "#7f8c8d" };
                    writeln!(
                        svg,
                        r#"<rect x="{LEFT:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{fill}"/>"#,
                        y + 2.0,
                        sx(*r) - LEFT,
                        ROW - 6.0
                    )
                    .unwrap();
                    writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{r:.3}</text>"#, sx(*r) + 4.0, y + 11.0).unwrap();
                }
                _ => {
                    writeln!(svg, r##"<text x="{:.1}" y="{:.1}" fill="#999">no decision</text>"##, LEFT + 4.0, y + 11.0).unwrap();
                }
            }
        }
        let one = sx(1.0);
        writeln!(
            svg,
            r#"<line x1="{one:.1}" y1="{:.1}" x2="{one:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            y0 + 6.0,
            y0 + 8.0 + 6.0 * ROW
        )
        .unwrap();
    }

    let axis_y = height - 14.0;
    writeln!(svg, r#"<line x1="{LEFT:.1}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}" stroke="black"/>"#, LEFT + plot_w).unwrap();
    let ticks = (x_max.floor() as usize).max(1);
    let step = ticks.div_ceil(10);
    for t in (0..=ticks).step_by(step) {
        let x = sx(t as f64);
        writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, axis_y + 12.0).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
