//! ROC overlay plots as standalone SVG.
//!
//! The wavelet run is drawn solid, the raw run dotted.

use std::fmt::Write as _;

use crate::metrics::RocCurve;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 40.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;

fn px(fpr: f64) -> f64 {
    LEFT + fpr * (WIDTH - LEFT - RIGHT)
}

fn py(tpr: f64) -> f64 {
    HEIGHT - BOTTOM - tpr * (HEIGHT - TOP - BOTTOM)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, curve: &RocCurve, color: &str, dash: Option<&str>) {
    let points: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", px(p.fpr), py(p.tpr)))
        .collect();
    let dash = dash.map_or(String::new(), |d| format!(" stroke-dasharray=\"{d}\""));
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>",
        points.join(" ")
    );
}

fn legend_label(name: &str, curve: Option<&RocCurve>) -> String {
    match curve {
        Some(c) => format!("{name} (AUC {:.3})", c.auc),
        None => format!("{name} (undefined)"),
    }
}

/// One class's overlay. Either curve may be missing (undefined class).
pub fn roc_overlay_svg(class: &str, raw: Option<&RocCurve>, wavelet: Option<&RocCurve>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"18\">ROC: {}</text>",
        WIDTH / 2.0,
        escape(class)
    );

    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#e0e0e0\"/>",
            px(v),
            py(0.0),
            px(v),
            py(1.0)
        );
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#e0e0e0\"/>",
            px(0.0),
            py(v),
            px(1.0),
            py(v)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{v:.1}</text>",
            px(v),
            py(0.0) + 20.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">{v:.1}</text>",
            px(0.0) - 8.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>",
        px(0.0),
        py(1.0),
        px(1.0) - px(0.0),
        py(0.0) - py(1.0)
    );
    let _ = writeln!(
        out,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#999999\" stroke-dasharray=\"6,6\"/>",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">False positive rate</text>",
        (px(0.0) + px(1.0)) / 2.0,
        HEIGHT - 25.0
    );
    let _ = writeln!(
        out,
        "<text x=\"25\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" transform=\"rotate(-90 25 {:.2})\">True positive rate</text>",
        (py(0.0) + py(1.0)) / 2.0,
        (py(0.0) + py(1.0)) / 2.0
    );

    if let Some(c) = raw {
        polyline(&mut out, c, "#d62728", Some("2,4"));
    }
    if let Some(c) = wavelet {
        polyline(&mut out, c, "#1f77b4", None);
    }

    let (lx, ly) = (px(0.55), py(0.18));
    let entries = [
        ("#1f77b4", None, legend_label("wavelet", wavelet)),
        ("#d62728", Some("2,4"), legend_label("raw", raw)),
    ];
    for (i, (color, dash, label)) in entries.iter().enumerate() {
        let y = ly + 22.0 * i as f64;
        let dash = dash.map_or(String::new(), |d| format!(" stroke-dasharray=\"{d}\""));
        let _ = writeln!(
            out,
            "<line x1=\"{lx:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
            lx + 40.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\">{}</text>",
            lx + 48.0,
            y + 4.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// File name for a class's overlay, e.g. `roc_pleural_thickening.svg`.
pub fn overlay_file_name(class: &str) -> String {
    format!("roc_{}.svg", class.to_ascii_lowercase().replace(' ', "_"))
}
