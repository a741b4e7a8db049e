//! SVG figures: observations colored by assignment, then one column per
//! instance step with the sampling weights (top) and the resulting state
//! (bottom).

use std::fmt::Write;

use consac::sampler::SearchStep;
use consac::{ModelInstance, ModelKind, Observation};

const PANEL: f64 = 220.0;
const PAD: f64 = 10.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
];

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit(observations: &[Observation], kind: ModelKind) -> Frame {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for y in observations {
            for p in anchor_points(y, kind) {
                for k in 0..2 {
                    min[k] = min[k].min(p[k]);
                    max[k] = max[k].max(p[k]);
                }
            }
        }
        if !min[0].is_finite() {
            return Frame { min: [0.0, 0.0], scale: 1.0 };
        }
        let extent = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
        Frame {
            min,
            scale: (PANEL - 2.0 * PAD) / extent,
        }
    }

    fn map(&self, p: [f64; 2], origin: (f64, f64)) -> (f64, f64) {
        (
            origin.0 + PAD + (p[0] - self.min[0]) * self.scale,
            origin.1 + PANEL - PAD - (p[1] - self.min[1]) * self.scale,
        )
    }
}

fn anchor_points(y: &Observation, kind: ModelKind) -> Vec<[f64; 2]> {
    let c = y.coords();
    match kind {
        ModelKind::Line | ModelKind::Homography => vec![[c[0], c[1]]],
        ModelKind::VanishingPoint => vec![[c[0], c[1]], [c[2], c[3]]],
    }
}

/// Dark blue for 0 through to pale yellow for 1.
fn heat(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(8.0, 255.0), lerp(48.0, 237.0), lerp(107.0, 160.0))
}

fn draw_observations(
    out: &mut String,
    frame: &Frame,
    observations: &[Observation],
    kind: ModelKind,
    origin: (f64, f64),
    color: impl Fn(usize) -> String,
) {
    for (i, y) in observations.iter().enumerate() {
        let c = color(i);
        let pts = anchor_points(y, kind);
        if pts.len() == 2 {
            let (x1, y1) = frame.map(pts[0], origin);
            let (x2, y2) = frame.map(pts[1], origin);
            let _ = writeln!(
                out,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{c}" stroke-width="1.2"/>"#
            );
        } else {
            let (x, y) = frame.map(pts[0], origin);
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.8" fill="{c}"/>"#);
        }
    }
}

fn draw_line_model(out: &mut String, frame: &Frame, (a, b, c): (f64, f64, f64), origin: (f64, f64), color: &str) {
    // clip a x + b y + c = 0 to the panel's data window
    let lo = frame.min;
    let hi = [
        frame.min[0] + (PANEL - 2.0 * PAD) / frame.scale,
        frame.min[1] + (PANEL - 2.0 * PAD) / frame.scale,
    ];
    let mut pts = Vec::new();
    if b.abs() > 1e-12 {
        for x in [lo[0], hi[0]] {
            let y = -(a * x + c) / b;
            if (lo[1]..=hi[1]).contains(&y) {
                pts.push([x, y]);
            }
        }
    }
    if a.abs() > 1e-12 {
        for y in [lo[1], hi[1]] {
            let x = -(b * y + c) / a;
            if (lo[0]..=hi[0]).contains(&x) {
                pts.push([x, y]);
            }
        }
    }
    if pts.len() >= 2 {
        let (x1, y1) = frame.map(pts[0], origin);
        let (x2, y2) = frame.map(pts[pts.len() - 1], origin);
        let _ = writeln!(
            out,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}" stroke-width="1" stroke-dasharray="4 2"/>"#
        );
    }
}

/// Renders a fitted scene. `steps` may be empty for methods without
/// conditional sampling loops.
pub fn render(
    observations: &[Observation],
    kind: ModelKind,
    models: &[ModelInstance],
    assignments: &[i64],
    steps: &[SearchStep],
) -> String {
    let frame = Frame::fit(observations, kind);
    let cols = steps.len().max(1);
    let rows = if steps.is_empty() { 1 } else { 3 };
    let width = PANEL * cols as f64;
    let height = PANEL * rows as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);

    draw_observations(&mut out, &frame, observations, kind, (0.0, 0.0), |i| match assignments.get(i) {
        Some(&a) if a >= 0 => PALETTE[a as usize % PALETTE.len()].to_string(),
        _ => "#c8c8c8".to_string(),
    });
    for (j, m) in models.iter().enumerate() {
        if let Some(l) = m.as_line() {
            draw_line_model(&mut out, &frame, (l.x, l.y, l.z), (0.0, 0.0), PALETTE[j % PALETTE.len()]);
        }
    }

    for (m, step) in steps.iter().enumerate() {
        let max = step.weights.iter().copied().fold(0.0, f64::max);
        let x0 = PANEL * m as f64;
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.0}" y="{PANEL:.0}" width="{PANEL:.0}" height="{:.0}" fill="#202020"/>"##,
            2.0 * PANEL
        );
        draw_observations(&mut out, &frame, observations, kind, (x0, PANEL), |i| {
            heat(if max > 0.0 { step.weights[i] / max } else { 0.0 })
        });
        let entries = step.state.entries();
        draw_observations(&mut out, &frame, observations, kind, (x0, 2.0 * PANEL), |i| heat(entries[i]));
    }
    out.push_str("</svg>\n");
    out
}
