//! Deterministic SVG figures: input-function overlays, measured-vs-estimated
//! scatter with the identity line, and grayscale map slices.

use std::fmt::Write;

use petkin::{Error, Result, SampledCurve};

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 40.0;
const MARGIN_T: f64 = 50.0;
const MARGIN_B: f64 = 70.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone)]
pub enum PlotSpec {
    /// Curves against time in seconds.
    AifOverlay { curves: Vec<(String, SampledCurve)> },
    /// Reference on x, estimate resampled at the reference times on y.
    IdentityScatter { reference: SampledCurve, estimate: SampledCurve },
    /// One axial slice, row-major `ny × nx`.
    MapSlice { label: String, values: Vec<f64>, ny: usize, nx: usize },
}

/// Linear map from data to pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub px_lo: f64,
    pub px_hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self { lo, hi, px_lo, px_hi }
    }

    pub fn px(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    #[cfg(test)]
    pub fn value(&self, px: f64) -> f64 {
        self.lo + (px - self.px_lo) / (self.px_hi - self.px_lo) * (self.hi - self.lo)
    }

    /// Roughly five round tick values inside the range.
    fn ticks(&self) -> Vec<f64> {
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|k| k as f64 * step).collect()
    }
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

fn header(out: &mut String, title: &str) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="14">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="30" text-anchor="middle" font-size="18">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(out: &mut String, x: &Axis, y: &Axis, x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (x.px_lo, x.px_hi, y.px_lo, y.px_hi);
    writeln!(out, r#"<g stroke="black" stroke-width="1" fill="none">"#).unwrap();
    writeln!(out, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}"/>"#).unwrap();
    writeln!(out, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}"/>"#).unwrap();
    for t in x.ticks() {
        let p = x.px(t);
        writeln!(out, r#"<line x1="{p:.2}" y1="{y0:.2}" x2="{p:.2}" y2="{:.2}"/>"#, y0 + 5.0).unwrap();
    }
    for t in y.ticks() {
        let p = y.px(t);
        writeln!(out, r#"<line x1="{:.2}" y1="{p:.2}" x2="{x0:.2}" y2="{p:.2}"/>"#, x0 - 5.0).unwrap();
    }
    writeln!(out, "</g>").unwrap();
    for t in x.ticks() {
        writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x.px(t), y0 + 22.0, fmt_tick(t)).unwrap();
    }
    for t in y.ticks() {
        writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 8.0, y.px(t) + 5.0, fmt_tick(t)).unwrap();
    }
    writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 20.0, escape(x_label)).unwrap();
    writeln!(
        out,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn legend(out: &mut String, entries: &[(String, &str, bool)]) {
    let x = WIDTH - MARGIN_R - 200.0;
    for (i, (label, colour, dashed)) in entries.iter().enumerate() {
        let y = MARGIN_T + 20.0 + 22.0 * i as f64;
        let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
        writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{colour}" stroke-width="2"{dash}/>"#,
            x + 30.0
        )
        .unwrap();
        writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 38.0, y + 5.0, escape(label)).unwrap();
    }
}

fn plot_axes(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> (Axis, Axis) {
    (
        Axis::new(x_lo, x_hi, MARGIN_L, WIDTH - MARGIN_R),
        Axis::new(y_lo, y_hi, HEIGHT - MARGIN_B, MARGIN_T),
    )
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Axes used by [`render_plot`] for an AIF overlay, exposed for inspection.
pub fn overlay_axes(curves: &[(String, SampledCurve)]) -> (Axis, Axis) {
    let (t_lo, t_hi) = range(curves.iter().flat_map(|(_, c)| c.times().iter().copied()));
    let (_, v_hi) = range(curves.iter().flat_map(|(_, c)| c.values().iter().copied()));
    plot_axes(t_lo.min(0.0), t_hi, 0.0, v_hi * 1.05)
}

pub fn render_plot(spec: &PlotSpec) -> Result<String> {
    let mut out = String::new();
    match spec {
        PlotSpec::AifOverlay { curves } => {
            if curves.is_empty() || curves.iter().any(|(_, c)| c.is_empty()) {
                return Err(Error::invalid("plot", "no data to draw"));
            }
            header(&mut out, "Arterial input function");
            let (x, y) = overlay_axes(curves);
            axes(&mut out, &x, &y, "time (s)", "activity (kBq/mL)");
            let mut entries = Vec::new();
            for (i, (label, c)) in curves.iter().enumerate() {
                let colour = PALETTE[i % PALETTE.len()];
                let dashed = i > 0;
                let pts: Vec<String> = c
                    .times()
                    .iter()
                    .zip(c.values())
                    .map(|(&t, &v)| format!("{:.2},{:.2}", x.px(t), y.px(v)))
                    .collect();
                let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
                writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{colour}" stroke-width="2"{dash} points="{}"/>"#,
                    pts.join(" ")
                )
                .unwrap();
                entries.push((label.clone(), colour, dashed));
            }
            legend(&mut out, &entries);
        }
        PlotSpec::IdentityScatter { reference, estimate } => {
            if reference.is_empty() || estimate.is_empty() {
                return Err(Error::invalid("plot", "no data to draw"));
            }
            header(&mut out, "Estimated vs measured AIF");
            let est = estimate.resample(reference.times()).values;
            let (lo, hi) = range(reference.values().iter().chain(&est).copied());
            let (lo, hi) = (lo.min(0.0), hi * 1.05);
            let (x, y) = plot_axes(lo, hi, lo, hi);
            axes(&mut out, &x, &y, "measured (kBq/mL)", "estimated (kBq/mL)");
            writeln!(
                out,
                r#"<line class="identity" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
                x.px(lo),
                y.px(lo),
                x.px(hi),
                y.px(hi)
            )
            .unwrap();
            for (&r, &e) in reference.values().iter().zip(&est) {
                writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#, x.px(r), y.px(e), PALETTE[0]).unwrap();
            }
            legend(
                &mut out,
                &[("frames".to_string(), PALETTE[0], false), ("identity".to_string(), "gray", true)],
            );
        }
        PlotSpec::MapSlice { label, values, ny, nx } => {
            if values.is_empty() || values.len() != ny * nx {
                return Err(Error::invalid("plot", "slice size does not match its dimensions"));
            }
            header(&mut out, label);
            let (lo, hi) = range(values.iter().copied());
            let span = if hi > lo { hi - lo } else { 1.0 };
            let area_w = WIDTH - MARGIN_L - MARGIN_R - 120.0;
            let area_h = HEIGHT - MARGIN_T - MARGIN_B;
            let px = (area_w / *nx as f64).min(area_h / *ny as f64);
            let grey = |v: f64| -> u8 { (255.0 * ((v - lo) / span).clamp(0.0, 1.0)).round() as u8 };
            writeln!(out, r#"<g shape-rendering="crispEdges">"#).unwrap();
            for r in 0..*ny {
                for c in 0..*nx {
                    let g = grey(values[r * nx + c]);
                    writeln!(
                        out,
                        r##"<rect x="{:.2}" y="{:.2}" width="{px:.2}" height="{px:.2}" fill="#{g:02x}{g:02x}{g:02x}"/>"##,
                        MARGIN_L + c as f64 * px,
                        MARGIN_T + r as f64 * px,
                    )
                    .unwrap();
                }
            }
            // Colour bar, bottom = minimum.
            let bar_x = MARGIN_L + *nx as f64 * px + 40.0;
            let steps = 64;
            let step_h = area_h / steps as f64;
            for k in 0..steps {
                let v = lo + span * (k as f64 + 0.5) / steps as f64;
                let g = if hi > lo { grey(v) } else { grey(lo) };
                writeln!(
                    out,
                    r##"<rect x="{bar_x:.2}" y="{:.2}" width="24" height="{:.2}" fill="#{g:02x}{g:02x}{g:02x}"/>"##,
                    MARGIN_T + area_h - (k + 1) as f64 * step_h,
                    step_h + 0.01
                )
                .unwrap();
            }
            writeln!(out, "</g>").unwrap();
            writeln!(out, r#"<rect x="{bar_x:.2}" y="{MARGIN_T:.2}" width="24" height="{area_h:.2}" fill="none" stroke="black"/>"#).unwrap();
            writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, bar_x + 30.0, MARGIN_T + 5.0, fmt_tick(hi)).unwrap();
            writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, bar_x + 30.0, MARGIN_T + area_h + 5.0, fmt_tick(lo)).unwrap();
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use petkin::{FengAif, FrameSchedule};

    fn feng() -> SampledCurve {
        let times: Vec<f64> = (0..=3600).map(|i| i as f64).collect();
        FengAif::default().sample(&times).unwrap()
    }

    fn attr(tag: &str, name: &str) -> f64 {
        let key = format!(" {name}=\"");
        let start = tag.find(&key).unwrap() + key.len();
        let end = start + tag[start..].find('"').unwrap();
        tag[start..end].parse().unwrap()
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = PlotSpec::AifOverlay { curves: vec![("truth".into(), feng())] };
        assert_eq!(render_plot(&spec).unwrap(), render_plot(&spec).unwrap());
    }

    #[test]
    fn overlay_peak_is_early() {
        let curves = vec![("truth".to_string(), feng())];
        let svg = render_plot(&PlotSpec::AifOverlay { curves: curves.clone() }).unwrap();
        let (x, _) = overlay_axes(&curves);
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = &line[line.find("points=\"").unwrap() + 8..line.rfind('"').unwrap()];
        let (px, _) = pts
            .split(' ')
            .map(|p| {
                let (a, b) = p.split_once(',').unwrap();
                (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap())
            })
            .fold((0.0, f64::INFINITY), |best, p| if p.1 < best.1 { p } else { best });
        let t = x.value(px);
        assert!(t > 30.0 && t < 120.0, "{t}");
        assert!(svg.contains(r#"width="800""#) && svg.contains(r#"height="600""#));
    }

    #[test]
    fn identical_scatter_sits_on_identity_line() {
        let s = FrameSchedule::standard();
        let c = FengAif::default().sample(&s.mid_times()).unwrap();
        let svg = render_plot(&PlotSpec::IdentityScatter { reference: c.clone(), estimate: c }).unwrap();
        let line = svg.lines().find(|l| l.contains(r#"class="identity""#)).unwrap();
        assert!(line.contains("stroke-dasharray"));
        let (x1, y1, x2, y2) = (attr(line, "x1"), attr(line, "y1"), attr(line, "x2"), attr(line, "y2"));
        let circles: Vec<&str> = svg.lines().filter(|l| l.starts_with("<circle")).collect();
        assert_eq!(circles.len(), s.len());
        for c in circles {
            let (cx, cy) = (attr(c, "cx"), attr(c, "cy"));
            // Distance from the dashed line, in pixels.
            let d = ((y2 - y1) * cx - (x2 - x1) * cy + x2 * y1 - y2 * x1).abs() / ((y2 - y1).hypot(x2 - x1));
            assert!(d < 0.02, "{d}");
        }
    }

    #[test]
    fn zero_map_is_uniform() {
        let svg = render_plot(&PlotSpec::MapSlice { label: "K1".into(), values: vec![0.0; 64], ny: 8, nx: 8 }).unwrap();
        let fills: std::collections::BTreeSet<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<rect") && l.contains("fill=\"#"))
            .map(|l| &l[l.find("fill=\"#").unwrap()..])
            .collect();
        assert_eq!(fills.len(), 1, "{fills:?}");
    }

    #[test]
    fn empty_data_rejected() {
        assert!(render_plot(&PlotSpec::AifOverlay { curves: vec![] }).is_err());
        assert!(render_plot(&PlotSpec::MapSlice { label: "x".into(), values: vec![], ny: 0, nx: 0 }).is_err());
    }
}
