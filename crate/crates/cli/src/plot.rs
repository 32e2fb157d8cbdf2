//! Self-contained SVG plots of experiment results.
//!
//! Coordinates are printed with fixed precision so that a result always
//! renders to the same bytes.

use std::fmt::Write;

use middev_core::harness::{ExperimentKind, ExperimentResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Linear map from a data box onto the drawing area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

/// Finite range padded by 5%, never empty.
fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.5;
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(body, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        Self { body }
    }

    fn axes(&mut self, f: &Frame, x_label: &str, y_label: &str) {
        let (l, r) = (MARGIN, WIDTH - MARGIN);
        let (t, b) = (MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            self.body,
            r#"<g class="axes" stroke="black"><line x1="{l:.2}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}"/><line x1="{l:.2}" y1="{t:.2}" x2="{l:.2}" y2="{b:.2}"/></g>"#
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 12.0,
            escape(x_label)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
        for (v, anchor_y) in [(f.y0, b), (f.y1, t)] {
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{anchor_y:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
                l - 4.0,
                tick(v)
            );
        }
        for (v, anchor_x) in [(f.x0, l), (f.x1, r)] {
            let _ = writeln!(
                self.body,
                r#"<text x="{anchor_x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
                b + 14.0,
                tick(v)
            );
        }
    }

    fn marker(&mut self, x: f64, y: f64, class: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="4" fill="steelblue"/>"#
        );
    }

    fn target_line(&mut self, x1: f64, x2: f64, y: f64) {
        let _ = writeln!(
            self.body,
            r#"<line class="target" x1="{x1:.2}" y1="{y:.2}" x2="{x2:.2}" y2="{y:.2}" stroke="firebrick" stroke-dasharray="4 2"/>"#
        );
    }

    fn bar(&mut self, x: f64, w: f64, y_top: f64, y_base: f64) {
        let (top, h) = if y_top <= y_base {
            (y_top, y_base - y_top)
        } else {
            (y_base, y_top - y_base)
        };
        let _ = writeln!(
            self.body,
            r#"<rect class="bar" x="{x:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="lightsteelblue"/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], class: &str) {
        let mut p = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            if i > 0 {
                p.push(' ');
            }
            let _ = write!(p, "{x:.2},{y:.2}");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline class="{class}" points="{p}" fill="none" stroke="firebrick"/>"#
        );
    }

    fn label(&mut self, x: f64, y: f64, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            escape(text)
        );
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn tick(v: f64) -> String {
    format!("{v:.3e}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `result` as an SVG document.
pub fn emit_plot(result: &ExperimentResult) -> String {
    match result.experiment {
        ExperimentKind::Concentration | ExperimentKind::VarianceMatch
            if !result.stats.is_empty() =>
        {
            stats_plot(result)
        }
        ExperimentKind::TailSlope if !result.thresholds.is_empty() => tail_plot(result),
        ExperimentKind::BercuTouati if !result.bercu_touati.is_empty() => bercu_touati_plot(result),
        ExperimentKind::Truncation if !result.truncation.is_empty() => truncation_plot(result),
        kind => {
            let mut svg = Svg::new(kind.file_stem());
            svg.axes(&Frame::new([0.0].into_iter(), [0.0].into_iter()), "", "");
            svg.finish()
        }
    }
}

/// One column per statistic: estimate marker (or bar for variances) and a
/// horizontal target line.
fn stats_plot(r: &ExperimentResult) -> String {
    let bars = r.experiment == ExperimentKind::VarianceMatch;
    let ys = r
        .stats
        .iter()
        .flat_map(|s| [s.estimate, s.target])
        .chain(bars.then_some(0.0));
    let k = r.stats.len() as f64;
    let f = Frame::new([0.0, k].into_iter(), ys.clone());
    let f = Frame {
        x0: 0.0,
        x1: k,
        ..f
    };
    let mut svg = Svg::new(r.experiment.file_stem());
    svg.axes(&f, "statistic", "value");
    for (i, s) in r.stats.iter().enumerate() {
        let (l, rgt) = (f.px(i as f64 + 0.15), f.px(i as f64 + 0.85));
        let mid = f.px(i as f64 + 0.5);
        if bars {
            svg.bar(l, rgt - l, f.py(s.estimate), f.py(0.0));
        } else {
            svg.marker(mid, f.py(s.estimate), "estimate");
        }
        svg.target_line(l, rgt, f.py(s.target));
        svg.label(mid, HEIGHT - MARGIN + 28.0, &s.name);
    }
    svg.finish()
}

/// Empirical slopes (or censoring bounds) over the rate function.
fn tail_plot(r: &ExperimentResult) -> String {
    let slope = |t: &middev_core::harness::ThresholdRecord| t.slope.or(t.slope_lower_bound).unwrap_or(0.0);
    let x_hi = r.thresholds.iter().map(|t| t.x).fold(0.0, f64::max);
    // Every rate is quadratic, so one nonzero threshold fixes the curve.
    let curvature = r
        .thresholds
        .iter()
        .find(|t| t.x > 0.0)
        .map_or(0.0, |t| t.rate_prediction / (t.x * t.x));
    let curve: Vec<(f64, f64)> = (0..=50)
        .map(|i| {
            let x = x_hi * i as f64 / 50.0;
            (x, curvature * x * x)
        })
        .collect();
    let f = Frame::new(
        curve.iter().map(|p| p.0),
        curve.iter().map(|p| p.1).chain(r.thresholds.iter().map(slope)),
    );
    let mut svg = Svg::new(r.experiment.file_stem());
    svg.axes(&f, "x", "-log p / a_n^2");
    let pts: Vec<(f64, f64)> = curve.iter().map(|&(x, y)| (f.px(x), f.py(y))).collect();
    svg.polyline(&pts, "rate");
    for t in &r.thresholds {
        let class = if t.lower_bound_flag { "censored" } else { "slope" };
        svg.marker(f.px(t.x), f.py(slope(t)), class);
    }
    svg.finish()
}

/// Frequencies against their bounds, one column per grid cell.
fn bercu_touati_plot(r: &ExperimentResult) -> String {
    let k = r.bercu_touati.len() as f64;
    let ys = r
        .bercu_touati
        .iter()
        .flat_map(|b| [b.frequency, b.bound.min(1.0)])
        .chain([0.0]);
    let f = Frame {
        x0: 0.0,
        x1: k,
        ..Frame::new([0.0].into_iter(), ys)
    };
    let mut svg = Svg::new(r.experiment.file_stem());
    svg.axes(&f, "grid cell", "frequency");
    for (i, b) in r.bercu_touati.iter().enumerate() {
        let (l, rgt) = (f.px(i as f64 + 0.15), f.px(i as f64 + 0.85));
        svg.bar(l, rgt - l, f.py(b.frequency), f.py(0.0));
        svg.target_line(l, rgt, f.py(b.bound.min(1.0)));
    }
    svg.finish()
}

/// 99th percentile of the truncation gap against `log10 n`.
fn truncation_plot(r: &ExperimentResult) -> String {
    let pts: Vec<(f64, f64)> = r
        .truncation
        .iter()
        .map(|t| ((t.n as f64).log10(), t.gap_p99))
        .collect();
    let f = Frame::new(pts.iter().map(|p| p.0), pts.iter().map(|p| p.1).chain([0.0]));
    let mut svg = Svg::new(r.experiment.file_stem());
    svg.axes(&f, "log10 n", "gap p99");
    let mapped: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (f.px(x), f.py(y))).collect();
    svg.polyline(&mapped, "gap");
    for &(x, y) in &mapped {
        svg.marker(x, y, "gap");
    }
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use middev_core::harness::{run, ExperimentConfig};
    use middev_core::noise::{NoiseConfig, NoiseFamily};
    use middev_core::params::{Case, DeviationScale, ModelConfig};

    fn model() -> ModelConfig {
        ModelConfig {
            case: Case::CaseI,
            gamma1: -1.0,
            gamma2: -1.0,
            delta: 0.3,
            scale: DeviationScale::SqrtLog,
            sigma: 1.0,
            n: 300,
            noise: NoiseConfig {
                family: NoiseFamily::Gaussian,
                sigma: 1.0,
            },
        }
    }

    fn result(kind: ExperimentKind) -> ExperimentResult {
        let mut cfg = ExperimentConfig::new(model(), kind, 200, 3);
        cfg.thresholds = vec![0.25, 0.5, 0.75];
        run(&cfg, 1).unwrap()
    }

    #[test]
    fn empty_result_draws_axes_only() {
        let mut r = result(ExperimentKind::Concentration);
        r.stats.clear();
        let svg = emit_plot(&r);
        assert!(svg.contains(r#"class="axes""#));
        assert!(!svg.contains("<circle"));
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn tail_plot_has_markers_and_curve() {
        let svg = emit_plot(&result(ExperimentKind::TailSlope));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches(r#"<polyline class="rate""#).count(), 1);
    }

    #[test]
    fn concentration_has_one_target_per_stat() {
        let r = result(ExperimentKind::Concentration);
        let svg = emit_plot(&r);
        assert_eq!(svg.matches(r#"class="target""#).count(), r.stats.len());
    }

    #[test]
    fn plots_are_deterministic() {
        for kind in [ExperimentKind::VarianceMatch, ExperimentKind::BercuTouati, ExperimentKind::Truncation] {
            let r = result(kind);
            assert_eq!(emit_plot(&r), emit_plot(&r));
            assert!(emit_plot(&r).ends_with("</svg>\n"));
        }
    }
}
