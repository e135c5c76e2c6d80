//! Minimal SVG scatter of a Pareto front (cost on x, accuracy on y).

use crate::artifacts::Provenance;
use crate::commands::Pareto;
use nas_core::evolve::Objective;
use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo {
        0.05 * (hi - lo)
    } else {
        0.5 * lo.abs().max(1e-3)
    };
    (lo - pad, hi + pad)
}

pub fn pareto(p: &Pareto, prov: &Provenance) -> String {
    let (x_label, scale) = match p.objective {
        Objective::Latency => (format!("predicted latency on {} (ms)", p.device), 1.0),
        Objective::Flops => ("MFLOPs".to_string(), 1e-6),
    };
    let cost = |e: &nas_core::evolve::FrontEntry| match p.objective {
        Objective::Latency => e.predicted_latency_ms.unwrap_or(f64::NAN),
        Objective::Flops => e.flops * scale,
    };
    let verified: Vec<(f64, f64)> = match p.objective {
        Objective::Latency => p
            .front
            .iter()
            .filter_map(|e| Some((e.verified_latency_ms?, e.accuracy)))
            .collect(),
        Objective::Flops => vec![],
    };
    let pts: Vec<(f64, f64)> = p.front.iter().map(|e| (cost(e), e.accuracy)).collect();
    let (x0, x1) = span(pts.iter().chain(&verified).map(|q| q.0));
    let (y0, y1) = span(pts.iter().chain(&verified).map(|q| q.1));
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        "<!-- space_hash={} seed={} version={} -->",
        prov.space_hash, prov.seed, prov.version
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">Pareto front ({} architectures)</text>"#,
        W / 2.0,
        p.front.len()
    );
    let (bx, by) = (LEFT, H - BOTTOM);
    let _ = writeln!(
        s,
        r#"<line x1="{bx}" y1="{by}" x2="{}" y2="{by}" stroke="black"/>"#,
        W - RIGHT
    );
    let _ = writeln!(
        s,
        r#"<line x1="{bx}" y1="{by}" x2="{bx}" y2="{TOP}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            sx(xv),
            by + 18.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            bx - 6.0,
            sy(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">validation accuracy</text>"#,
        (TOP + by) / 2.0,
        (TOP + by) / 2.0
    );
    let mut path = String::new();
    for (i, (x, y)) in pts.iter().enumerate() {
        let _ = write!(
            path,
            "{}{:.1},{:.1} ",
            if i == 0 { "M" } else { "L" },
            sx(*x),
            sy(*y)
        );
    }
    if !pts.is_empty() {
        let _ = writeln!(
            s,
            r##"<path d="{}" fill="none" stroke="#1f77b4" stroke-width="1"/>"##,
            path.trim_end()
        );
    }
    for (x, y) in &pts {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="#1f77b4"/>"##,
            sx(*x),
            sy(*y)
        );
    }
    for (x, y) in &verified {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.1}" cy="{:.1}" r="4.5" fill="none" stroke="#d62728"/>"##,
            sx(*x),
            sy(*y)
        );
    }
    if !verified.is_empty() {
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end" fill="#d62728">open: simulated latency</text>"##,
            W - RIGHT,
            TOP + 12.0
        );
    }
    s.push_str("</svg>\n");
    s
}
