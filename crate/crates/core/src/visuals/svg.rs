//! Standalone SVG rendering, one panel per arm with shared axes.
//!
//! Output is byte-deterministic: every number goes through
//! [`format_number`] (6 significant digits) and element order is fixed.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{MapStyle, PlotKind, ReviewArtifacts, Result, VisualsError};

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 320.0;
const PAD_LEFT: f64 = 52.0;
const PAD_RIGHT: f64 = 14.0;
const PAD_TOP: f64 = 30.0;
const PAD_BOTTOM: f64 = 42.0;
const HEADER_H: f64 = 36.0;
const LEGEND_W: f64 = 240.0;
const MAX_COLUMNS: usize = 4;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#17becf", "#e377c2", "#7f7f7f",
    "#bcbd22", "#393b79", "#637939", "#ad494a",
];
const NOISE_COLOR: &str = "#8b4513";

/// Fixed-precision number text: 6 significant digits, trailing zeros removed.
pub fn format_number(v: f64) -> String {
    if !v.is_finite() {
        return "0".to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = 5 - magnitude;
    let mut s = if decimals >= 0 {
        format!("{:.*}", decimals as usize, v)
    } else {
        let scale = 10f64.powi(-decimals);
        format!("{:.0}", (v / scale).round() * scale)
    };
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn color(cluster_id: Option<usize>) -> &'static str {
    match cluster_id {
        Some(id) => PALETTE[id % PALETTE.len()],
        None => NOISE_COLOR,
    }
}

/// Linear map from a data interval onto a pixel interval.
#[derive(Clone, Copy)]
struct Scale {
    d0: f64,
    d1: f64,
    p0: f64,
    p1: f64,
}

impl Scale {
    fn at(&self, v: f64) -> f64 {
        self.p0 + (v - self.d0) / (self.d1 - self.d0) * (self.p1 - self.p0)
    }
}

fn nice_step(span: f64, target_ticks: f64) -> f64 {
    let raw = span / target_ticks;
    let base = 10f64.powf(raw.log10().floor());
    let frac = raw / base;
    let m = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * base
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = nice_step(hi - lo, 6.0);
    let mut ticks = Vec::new();
    let mut k = (lo / step).ceil() as i64;
    loop {
        let v = k as f64 * step;
        if v > hi + 1e-12 * step {
            break;
        }
        // snap tiny rounding residue to zero
        ticks.push(if v.abs() < 1e-9 * step { 0.0 } else { v });
        k += 1;
    }
    ticks
}

fn log_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let mut ticks = Vec::new();
    let first = lo.floor() as i32 - 1;
    let last = hi.ceil() as i32 + 1;
    for e in first..=last {
        for m in [1.0, 2.0, 5.0] {
            let v = m * 10f64.powi(e);
            let l = v.log10();
            if l >= lo - 1e-12 && l <= hi + 1e-12 {
                ticks.push(v);
            }
        }
    }
    ticks
}

struct Panel<'a> {
    arm_id: &'a str,
    title: String,
    left: f64,
    top: f64,
}

struct Layout<'a> {
    panels: Vec<Panel<'a>>,
    width: f64,
    height: f64,
}

fn layout<'a>(artifacts: &'a ReviewArtifacts, arm_ids: &[&'a str], legend_rows: usize) -> Layout<'a> {
    let cols = arm_ids.len().clamp(1, MAX_COLUMNS);
    let rows = arm_ids.len().div_ceil(cols).max(1);
    let panels = arm_ids
        .iter()
        .enumerate()
        .map(|(i, &arm_id)| Panel {
            arm_id,
            title: artifacts
                .arms
                .iter()
                .find(|a| a.id == arm_id)
                .map_or_else(|| arm_id.to_string(), |a| a.title.clone()),
            left: (i % cols) as f64 * PANEL_W,
            top: HEADER_H + (i / cols) as f64 * PANEL_H,
        })
        .collect();
    let legend_h = 40.0 + 18.0 * legend_rows as f64;
    Layout {
        panels,
        width: cols as f64 * PANEL_W + LEGEND_W,
        height: (HEADER_H + rows as f64 * PANEL_H).max(HEADER_H + legend_h),
    }
}

/// Arm ids in artifact arm order, restricted to those with points.
fn arms_with_points<'a>(artifacts: &'a ReviewArtifacts, present: &[&'a str]) -> Vec<&'a str> {
    let mut ids: Vec<&str> = artifacts
        .arms
        .iter()
        .map(|a| a.id.as_str())
        .filter(|id| present.contains(id))
        .collect();
    for id in present {
        if !ids.contains(id) {
            ids.push(id);
        }
    }
    ids
}

fn legend_entries(artifacts: &ReviewArtifacts) -> Vec<(Option<usize>, String)> {
    let mut entries: BTreeMap<usize, String> = BTreeMap::new();
    for c in &artifacts.clusters.clusters {
        entries.insert(c.cluster_id, c.label.clone());
    }
    for p in &artifacts.map_points {
        if let Some(id) = p.cluster_id {
            entries.entry(id).or_insert_with(|| p.cluster_label.clone());
        }
    }
    let mut out: Vec<(Option<usize>, String)> =
        entries.into_iter().map(|(id, label)| (Some(id), label)).collect();
    out.push((None, "Ungrouped (noise)".to_string()));
    out
}

fn open_document(svg: &mut String, lay: &Layout, title: &str) {
    let (w, h) = (format_number(lay.width), format_number(lay.height));
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r#"<text x="12" y="22" font-size="15" font-weight="bold">{}</text>"#,
        escape(title)
    );
}

fn write_legend(svg: &mut String, lay: &Layout, entries: &[(Option<usize>, String)]) {
    let x0 = lay.width - LEGEND_W + 12.0;
    let _ = writeln!(svg, r#"<g class="legend">"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-weight="bold">Clusters</text>"#,
        format_number(x0),
        format_number(HEADER_H + 20.0)
    );
    for (i, (id, label)) in entries.iter().enumerate() {
        let y = HEADER_H + 38.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<circle cx="{}" cy="{}" r="5" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            format_number(x0 + 5.0),
            format_number(y - 4.0),
            color(*id),
            format_number(x0 + 16.0),
            format_number(y),
            escape(label)
        );
    }
    let _ = writeln!(svg, "</g>");
}

fn panel_frame(svg: &mut String, panel: &Panel, xs: Scale, ys: Scale) {
    let _ = writeln!(svg, r#"<g class="panel" data-arm="{}">"#, escape(panel.arm_id));
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-weight="bold">{}</text>"#,
        format_number(panel.left + PANEL_W / 2.0),
        format_number(panel.top + 18.0),
        escape(&panel.title)
    );
    let _ = writeln!(
        svg,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444444\"/>",
        format_number(xs.p0),
        format_number(ys.p1),
        format_number(xs.p1 - xs.p0),
        format_number(ys.p0 - ys.p1)
    );
}

fn plot_scales(panel: &Panel, x: (f64, f64), y: (f64, f64)) -> (Scale, Scale) {
    let xs = Scale {
        d0: x.0,
        d1: x.1,
        p0: panel.left + PAD_LEFT,
        p1: panel.left + PANEL_W - PAD_RIGHT,
    };
    let ys = Scale {
        d0: y.0,
        d1: y.1,
        p0: panel.top + PANEL_H - PAD_BOTTOM,
        p1: panel.top + PAD_TOP,
    };
    (xs, ys)
}

fn x_tick(svg: &mut String, xs: Scale, ys: Scale, value: f64, label: &str) {
    let px = format_number(xs.at(value));
    let _ = writeln!(
        svg,
        "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"#444444\"/><text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        format_number(ys.p0),
        format_number(ys.p0 + 4.0),
        format_number(ys.p0 + 15.0),
        escape(label)
    );
}

fn y_tick(svg: &mut String, xs: Scale, ys: Scale, value: f64, label: &str) {
    let py = format_number(ys.at(value));
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{py}\" x2=\"{}\" y2=\"{py}\" stroke=\"#444444\"/><text x=\"{}\" y=\"{py}\" text-anchor=\"end\" dominant-baseline=\"middle\">{}</text>",
        format_number(xs.p0 - 4.0),
        format_number(xs.p0),
        format_number(xs.p0 - 6.0),
        escape(label)
    );
}

fn axis_labels(svg: &mut String, panel: &Panel, xs: Scale, ys: Scale, x_label: &str, y_label: &str) {
    let cx = format_number((xs.p0 + xs.p1) / 2.0);
    let cy = format_number((ys.p0 + ys.p1) / 2.0);
    let lx = format_number(panel.left + 14.0);
    let _ = writeln!(
        svg,
        r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text><text x="{lx}" y="{cy}" text-anchor="middle" transform="rotate(-90 {lx} {cy})">{}</text>"#,
        format_number(ys.p0 + 32.0),
        escape(x_label),
        escape(y_label)
    );
}

#[allow(clippy::too_many_arguments)]
fn point(svg: &mut String, cx: f64, cy: f64, r: f64, cluster_id: Option<usize>, tooltip: &str) {
    let _ = writeln!(
        svg,
        r#"<circle cx="{}" cy="{}" r="{}" fill="{}" fill-opacity="0.7" stroke="{}"><title>{}</title></circle>"#,
        format_number(cx),
        format_number(cy),
        format_number(r),
        color(cluster_id),
        color(cluster_id),
        escape(tooltip)
    );
}

fn render_map(artifacts: &ReviewArtifacts) -> Result<String> {
    if artifacts.map_points.is_empty() {
        return Err(VisualsError::EmptyDataset("map"));
    }
    let present: Vec<&str> = artifacts.map_points.iter().map(|p| p.arm_id.as_str()).collect();
    let arm_ids = arms_with_points(artifacts, &present);
    let legend = legend_entries(artifacts);
    let lay = layout(artifacts, &arm_ids, legend.len());

    let mut svg = String::new();
    open_document(&mut svg, &lay, &format!("{} semantic map: incidence by PT, arm and cluster", artifacts.study_id));
    let domain = (-1.1, 1.1);
    for panel in &lay.panels {
        let (xs, ys) = plot_scales(panel, domain, domain);
        panel_frame(&mut svg, panel, xs, ys);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"#dddddd\"/><line x1=\"{x0}\" y1=\"{}\" x2=\"{x0}\" y2=\"{}\" stroke=\"#dddddd\"/>",
            format_number(xs.p0),
            format_number(xs.p1),
            format_number(ys.p0),
            format_number(ys.p1),
            x0 = format_number(xs.at(0.0)),
            y0 = format_number(ys.at(0.0)),
        );
        for t in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            x_tick(&mut svg, xs, ys, t, &format_number(t));
            y_tick(&mut svg, xs, ys, t, &format_number(t));
        }
        axis_labels(&mut svg, panel, xs, ys, "Semantic axis 1", "Semantic axis 2");

        let mut pts: Vec<_> = artifacts.map_points.iter().filter(|p| p.arm_id == panel.arm_id).collect();
        // large discs first so small ones stay visible
        pts.sort_by(|a, b| b.radius.total_cmp(&a.radius).then_with(|| a.pt_name.cmp(&b.pt_name)));
        for p in pts {
            let tip = format!("{} ({}): {}%", p.pt_name, cluster_name(p.cluster_id, &p.cluster_label), format_number(p.incidence * 100.0));
            point(&mut svg, xs.at(p.x), ys.at(p.y), p.radius, p.cluster_id, &tip);
        }
        let _ = writeln!(svg, "</g>");
    }
    write_legend(&mut svg, &lay, &legend);
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn cluster_name(id: Option<usize>, label: &str) -> String {
    match id {
        Some(_) => label.to_string(),
        None => "ungrouped".to_string(),
    }
}

fn snapshot_style(artifacts: &ReviewArtifacts) -> MapStyle {
    let mut style = MapStyle::default();
    let get = |k: &str| artifacts.config_snapshot.get(k).and_then(serde_json::Value::as_f64);
    if let (Some(lo), Some(hi)) = (get("visuals.r_min"), get("visuals.r_max")) {
        if lo > 0.0 && lo < hi {
            style.r_min = lo;
            style.r_max = hi;
        }
    }
    style
}

fn render_evd(artifacts: &ReviewArtifacts) -> Result<String> {
    let points = &artifacts.evd_points;
    if points.is_empty() {
        return Err(VisualsError::EmptyDataset("evd"));
    }
    let present: Vec<&str> = points.iter().map(|p| p.arm_id.as_str()).collect();
    let arm_ids = arms_with_points(artifacts, &present);
    let legend = legend_entries(artifacts);
    let lay = layout(artifacts, &arm_ids, legend.len());
    let style = snapshot_style(artifacts);

    let (mut xmin, mut xmax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.expectedness), hi.max(p.expectedness)));
    if xmax - xmin < 1e-9 {
        xmin -= 0.1;
        xmax += 0.1;
    }
    let xpad = 0.05 * (xmax - xmin);
    let xdom = (xmin - xpad, xmax + xpad);

    let logs = points.iter().map(|p| p.ebgm.max(1e-6).log10());
    let (ylo, yhi) = logs.fold((0.0f64, 0.0f64), |(lo, hi), l| (lo.min(l), hi.max(l)));
    let ydom = (ylo - 0.1, yhi + 0.1);

    let mut svg = String::new();
    open_document(&mut svg, &lay, &format!("{} expectedness vs disproportionality", artifacts.study_id));
    for panel in &lay.panels {
        let (xs, ys) = plot_scales(panel, xdom, ydom);
        panel_frame(&mut svg, panel, xs, ys);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#888888\" stroke-dasharray=\"4 3\"/>",
            format_number(xs.p0),
            format_number(xs.p1),
            y = format_number(ys.at(0.0)),
        );
        for t in linear_ticks(xdom.0, xdom.1) {
            x_tick(&mut svg, xs, ys, t, &format_number((t * 1e6).round() / 1e6));
        }
        for t in log_ticks(ydom.0, ydom.1) {
            y_tick(&mut svg, xs, ys, t.log10(), &format_number(t));
        }
        axis_labels(&mut svg, panel, xs, ys, "Expectedness (cosine similarity)", "EBGM (log scale)");

        let mut pts: Vec<_> = points.iter().filter(|p| p.arm_id == panel.arm_id).collect();
        pts.sort_by(|a, b| b.incidence.total_cmp(&a.incidence).then_with(|| a.pt_name.cmp(&b.pt_name)));
        for p in pts {
            let tip = format!(
                "{} ({}): EBGM {}, expectedness {}",
                p.pt_name,
                cluster_name(p.cluster_id, &p.cluster_label),
                format_number(p.ebgm),
                format_number(p.expectedness)
            );
            point(&mut svg, xs.at(p.expectedness), ys.at(p.ebgm.max(1e-6).log10()), style.radius(p.incidence), p.cluster_id, &tip);
        }
        let _ = writeln!(svg, "</g>");
    }
    write_legend(&mut svg, &lay, &legend);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders one view as an SVG document.
pub fn render_svg_string(artifacts: &ReviewArtifacts, kind: PlotKind) -> Result<String> {
    match kind {
        PlotKind::Map => render_map(artifacts),
        PlotKind::Evd => render_evd(artifacts),
    }
}
