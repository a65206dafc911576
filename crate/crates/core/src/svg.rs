//! Self-contained SVG figures: embedding scatter, MI heatmaps, TC bars.

use std::fmt::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::corex::FactorReport;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvgKind {
    Scatter,
    MiHeatmap,
    TcBar,
}

impl std::str::FromStr for SvgKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scatter" => Ok(SvgKind::Scatter),
            "mi_heatmap" => Ok(SvgKind::MiHeatmap),
            "tc_bar" => Ok(SvgKind::TcBar),
            other => Err(Error::Config(format!("unknown figure kind {other:?}"))),
        }
    }
}

/// Point colouring for [`scatter`].
#[derive(Debug, Clone, Copy)]
pub enum ColorBy<'a> {
    Cluster(&'a [usize]),
    Feature { values: &'a [f64], name: &'a str },
}

/// Parse `HxW`, e.g. `28x28`.
pub fn parse_shape(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("shape must look like 28x28, got {text:?}"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Evenly spaced hues; distinct for any `k`.
pub fn categorical_color(i: usize, k: usize) -> String {
    let hue = 360.0 * i as f64 / k.max(1) as f64;
    let light = if i % 2 == 0 { 45 } else { 60 };
    format!("hsl({hue:.1},70%,{light}%)")
}

const RAMP: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

/// Sequential ramp for `v` in `[0, 1]`.
pub fn ramp_color(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let x = v * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Scatter of a 2-D embedding with a legend.
pub fn scatter(coords: ArrayView2<'_, f64>, color: ColorBy<'_>) -> Result<String> {
    if coords.ncols() != 2 {
        return Err(Error::invalid(format!(
            "scatter needs a 2-D embedding, got {} dimensions",
            coords.ncols()
        )));
    }
    let n = coords.nrows();
    let len = match color {
        ColorBy::Cluster(l) => l.len(),
        ColorBy::Feature { values, .. } => values.len(),
    };
    if len != n {
        return Err(Error::invalid(format!("{n} points but {len} colour values")));
    }
    let (plot, margin, legend_w) = (480.0, 30.0, 140.0);
    let (x0, x1) = min_max(coords.column(0).iter().copied());
    let (y0, y1) = min_max(coords.column(1).iter().copied());
    let sx = if x1 > x0 { plot / (x1 - x0) } else { 0.0 };
    let sy = if y1 > y0 { plot / (y1 - y0) } else { 0.0 };
    let mut out = String::new();
    header(&mut out, plot + 2.0 * margin + legend_w, plot + 2.0 * margin);
    let (colors, legend): (Vec<String>, Vec<(String, String)>) = match color {
        ColorBy::Cluster(labels) => {
            let k = labels.iter().copied().max().map_or(0, |m| m + 1);
            let colors = labels.iter().map(|&l| categorical_color(l, k)).collect();
            let legend = (0..k).map(|c| (categorical_color(c, k), format!("cluster {c}"))).collect();
            (colors, legend)
        }
        ColorBy::Feature { values, name } => {
            let (lo, hi) = min_max(values.iter().copied());
            let span = if hi > lo { hi - lo } else { 1.0 };
            let colors = values.iter().map(|v| ramp_color((v - lo) / span)).collect();
            let legend = vec![
                (ramp_color(1.0), format!("{} = {hi:.3}", escape(name))),
                (ramp_color(0.0), format!("{} = {lo:.3}", escape(name))),
            ];
            (colors, legend)
        }
    };
    for (i, c) in colors.iter().enumerate() {
        let x = margin + (coords[[i, 0]] - x0) * sx;
        let y = margin + plot - (coords[[i, 1]] - y0) * sy;
        let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{c}" fill-opacity="0.8"/>"#);
    }
    let lx = plot + 2.0 * margin;
    for (row, (c, label)) in legend.iter().enumerate() {
        let y = margin + 16.0 * row as f64;
        let _ = writeln!(out, r#"<rect x="{lx}" y="{y}" width="10" height="10" fill="{c}"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{label}</text>"#, lx + 14.0, y + 9.0);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Square-rooted MI of the first `max_factors` factors (importance order),
/// each reshaped to a `height x width` grid.
pub fn mi_heatmap(report: &FactorReport, height: usize, width: usize, max_factors: usize) -> Result<String> {
    let p = report.mi.ncols();
    if height * width != p {
        return Err(Error::invalid(format!(
            "shape mismatch: {height}x{width} = {} cells for {p} features",
            height * width
        )));
    }
    let factors: Vec<usize> = report.order.iter().copied().take(max_factors.max(1)).collect();
    let cell = (160.0 / height.max(width) as f64).max(1.0);
    let (panel_w, panel_h) = (cell * width as f64, cell * height as f64);
    let gap = 12.0;
    let cols = factors.len().min(6);
    let rows = factors.len().div_ceil(cols.max(1));
    let mut out = String::new();
    header(
        &mut out,
        gap + cols as f64 * (panel_w + gap),
        gap + rows as f64 * (panel_h + gap + 14.0),
    );
    for (slot, &j) in factors.iter().enumerate() {
        let ox = gap + (slot % cols) as f64 * (panel_w + gap);
        let oy = gap + 14.0 + (slot / cols) as f64 * (panel_h + gap + 14.0);
        let row = report.mi.row(j);
        let max = row.iter().fold(0.0f64, |m, &v| m.max(v.max(0.0).sqrt()));
        let _ = writeln!(out, r#"<text x="{ox}" y="{}">factor {j} (TC {:.3})</text>"#, oy - 3.0, report.tc[j]);
        for (i, &v) in row.iter().enumerate() {
            let s = v.max(0.0).sqrt();
            let c = ramp_color(if max > 0.0 { s / max } else { 0.0 });
            let (r, col) = (i / width, i % width);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{c}"/>"#,
                ox + col as f64 * cell,
                oy + r as f64 * cell
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// TC explained per factor, in importance order.
pub fn tc_bar(report: &FactorReport) -> Result<String> {
    if report.tc.is_empty() {
        return Err(Error::invalid("report has no factors"));
    }
    let (bar, gap, plot_h, margin) = (18.0, 6.0, 240.0, 40.0);
    let width = 2.0 * margin + report.tc.len() as f64 * (bar + gap);
    let max = report.tc.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut out = String::new();
    header(&mut out, width, plot_h + 2.0 * margin);
    let _ = writeln!(
        out,
        r#"<text x="{margin}" y="20">cluster {} TC explained (nats)</text>"#,
        report.cluster
    );
    let base = margin + plot_h;
    let _ = writeln!(out, r#"<line x1="{margin}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, width - margin);
    for (slot, &j) in report.order.iter().enumerate() {
        let v = report.tc[j].max(0.0);
        let h = if max > 0.0 { plot_h * v / max } else { 0.0 };
        let x = margin + slot as f64 * (bar + gap);
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{bar}" height="{h:.2}" fill="{}"><title>factor {j}: {:.4}</title></rect>"#,
            base - h,
            ramp_color(0.35),
            report.tc[j]
        );
        let _ = writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">{j}</text>"#, x + bar / 2.0, base + 14.0);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, array};

    fn report(p: usize) -> FactorReport {
        FactorReport::new(
            0,
            Array2::from_shape_fn((2, p), |(j, i)| (i + j) as f64 / p as f64),
            vec![0.2, 1.0],
            (0..p).map(|i| format!("x{i}")).collect(),
        )
    }

    #[test]
    fn shapes() {
        assert_eq!(parse_shape("28x28").unwrap(), (28, 28));
        assert!(parse_shape("28").is_err());
        assert!(parse_shape("0x3").is_err());
    }

    #[test]
    fn heatmap_checks_shape() {
        let r = report(784);
        let svg = mi_heatmap(&r, 28, 28, 2).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 1 + 2 * 784);
        let err = mi_heatmap(&r, 27, 28, 2).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn scatter_colours_every_cluster() {
        let n = 40;
        let coords = Array2::from_shape_fn((n, 2), |(i, j)| (i * (j + 1)) as f64);
        let labels: Vec<usize> = (0..n).map(|i| i % 20).collect();
        let svg = scatter(coords.view(), ColorBy::Cluster(&labels)).unwrap();
        assert_eq!(svg.matches("<circle").count(), n);
        let distinct: std::collections::HashSet<String> = (0..20).map(|c| categorical_color(c, 20)).collect();
        assert_eq!(distinct.len(), 20);
        assert_eq!(svg.matches("cluster ").count(), 20);
        let three = Array2::<f64>::zeros((4, 3));
        assert!(scatter(three.view(), ColorBy::Cluster(&[0, 0, 0, 0])).is_err());
        let values = [1.0, 2.0];
        let svg = scatter(array![[0.0, 0.0], [1.0, 1.0]].view(), ColorBy::Feature { values: &values, name: "a<b" }).unwrap();
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn bars_follow_order() {
        let svg = tc_bar(&report(4)).unwrap();
        let first = svg.find("factor 1:").unwrap();
        let second = svg.find("factor 0:").unwrap();
        assert!(first < second);
        assert_eq!(ramp_color(0.0), "#440154");
        assert_eq!(ramp_color(1.0), "#fde725");
    }
}
