//! Minimal SVG line charts for sweep results.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use dmac_core::metrics::{ideal_utilization, RunReport};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot x on a base-2 log scale.
    pub log_x: bool,
    pub y_range: (f64, f64),
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

impl LineChart {
    fn x_domain(&self) -> (f64, f64) {
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| self.tx(p.0)));
        let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
            (l.min(x), h.max(x))
        });
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    }

    fn tx(&self, x: f64) -> f64 {
        if self.log_x {
            x.max(f64::MIN_POSITIVE).log2()
        } else {
            x
        }
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1) = self.x_domain();
        let (y0, y1) = self.y_range;
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let px = |x: f64| LEFT + (self.tx(x) - x0) / (x1 - x0) * pw;
        let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        // y grid and ticks
        for i in 0..=5 {
            let v = y0 + (y1 - y0) * i as f64 / 5.0;
            let y = py(v);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0
            );
        }
        // x ticks at the distinct sample points
        let ticks: BTreeSet<u64> = self
            .series
            .iter()
            .flat_map(|se| se.points.iter().map(|p| p.0.to_bits()))
            .collect();
        let mut tick_vals: Vec<f64> = ticks.into_iter().map(f64::from_bits).collect();
        tick_vals.sort_by(f64::total_cmp);
        for v in tick_vals {
            let x = px(v);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#999"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + ph,
                TOP + ph + 4.0,
                TOP + ph + 18.0,
                v
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 14.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, se) in self.series.iter().enumerate() {
            let color = if se.dashed {
                "black"
            } else {
                COLORS[i % COLORS.len()]
            };
            let dash = if se.dashed {
                r#" stroke-dasharray="6 4""#
            } else {
                ""
            };
            let pts: Vec<String> = se
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (x, y) = p.split_once(',').unwrap();
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
            }
            let ly = TOP + 14.0 + i as f64 * 18.0;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
                lx + 22.0,
                lx + 28.0,
                ly + 4.0,
                escape(&se.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Utilization against transfer size at one latency: one curve per
/// configuration plus the ideal bound.
pub fn utilization_chart(rows: &[RunReport], latency: u64) -> LineChart {
    let at: Vec<&RunReport> = rows.iter().filter(|r| r.latency == latency).collect();
    let mut names: Vec<&str> = at.iter().map(|r| r.config.as_str()).collect();
    names.sort();
    names.dedup();
    let mut series: Vec<Series> = names
        .iter()
        .map(|n| {
            let mut points: Vec<(f64, f64)> = at
                .iter()
                .filter(|r| r.config == *n)
                .map(|r| (r.size as f64, r.utilization))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: n.to_string(),
                points,
                dashed: false,
            }
        })
        .collect();
    let sizes: BTreeSet<u32> = at.iter().map(|r| r.size).collect();
    series.push(Series {
        name: "ideal".into(),
        points: sizes
            .iter()
            .map(|&n| (n as f64, ideal_utilization(n as u64)))
            .collect(),
        dashed: true,
    });
    LineChart {
        title: format!("Read utilization, L = {latency}"),
        x_label: "transfer size [B]".into(),
        y_label: "utilization".into(),
        log_x: true,
        y_range: (0.0, 1.0),
        series,
    }
}

/// Utilization against miss rate, one curve per size.
pub fn miss_chart(rows: &[RunReport]) -> LineChart {
    let sizes: BTreeSet<u32> = rows.iter().map(|r| r.size).collect();
    let series = sizes
        .iter()
        .map(|&n| {
            let mut points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.size == n)
                .map(|r| (1.0 - r.hit_rate, r.utilization))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: format!("{n} B"),
                points,
                dashed: false,
            }
        })
        .collect();
    let title = rows.first().map_or_else(String::new, |r| {
        format!("{} at L = {} with mispredictions", r.config, r.latency)
    });
    LineChart {
        title,
        x_label: "miss rate".into(),
        y_label: "utilization".into(),
        log_x: false,
        y_range: (0.0, 1.0),
        series,
    }
}
