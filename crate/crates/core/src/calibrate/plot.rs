//! Minimal SVG rendering of report data.

use std::fmt::Write;

use super::{CalibrationReport, ReliabilityBin};

const W: f64 = 360.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;

fn frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    let (iw, ih) = (W - 2.0 * PAD, H - 2.0 * PAD);
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">
<rect x="{PAD}" y="{PAD}" width="{iw}" height="{ih}" fill="none" stroke="black"/>
<text x="{cx}" y="20" text-anchor="middle" font-size="13">{title}</text>
<text x="{cx}" y="{by}" text-anchor="middle">{x_label}</text>
<text x="12" y="{cy}" text-anchor="middle" transform="rotate(-90 12 {cy})">{y_label}</text>
{body}</svg>
"#,
        cx = W / 2.0,
        cy = H / 2.0,
        by = H - 8.0,
    );
    s
}

fn px(x: f64) -> f64 {
    PAD + x * (W - 2.0 * PAD)
}

fn py(y: f64) -> f64 {
    H - PAD - y * (H - 2.0 * PAD)
}

pub fn reliability_svg(bins: &[ReliabilityBin]) -> String {
    let mut body = String::new();
    let _ = writeln!(body, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##, px(0.0), py(0.0), px(1.0), py(1.0));
    for b in bins.iter().filter(|b| b.count > 0) {
        let (x0, x1) = (px(b.lo), px(b.hi));
        let _ = writeln!(
            body,
            r##"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4878a8" stroke="white"/>"##,
            py(b.accuracy),
            x1 - x0,
            py(0.0) - py(b.accuracy)
        );
        let _ = writeln!(body, r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#c44"/>"##, (x0 + x1) / 2.0, py(b.confidence));
    }
    frame("Reliability", "confidence", "accuracy", &body)
}

pub fn risk_coverage_svg(points: &[(f64, f64)]) -> String {
    let ymax = points.iter().map(|p| p.1).fold(1e-9, f64::max);
    let pts: Vec<String> = points.iter().map(|&(c, r)| format!("{:.2},{:.2}", px(c), py(r / ymax))).collect();
    let body = format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#4878a8\" stroke-width=\"1.5\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{ymax:.3}</text>\n",
        pts.join(" "),
        PAD + 2.0,
        PAD + 12.0
    );
    frame("Risk-coverage", "coverage", "risk", &body)
}

pub fn report_svgs(r: &CalibrationReport) -> (String, String) {
    (reliability_svg(&r.reliability), risk_coverage_svg(&r.risk_coverage))
}
