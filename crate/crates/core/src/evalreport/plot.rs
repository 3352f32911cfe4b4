//! Static SVG 1.1 charts built by string formatting.

use std::fmt::Write;

use super::{LengthAnalysis, SessionSummary};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Canvas {
    body: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut body = String::new();
        let _ = write!(
            body,
            r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>
<text x="15" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {})">{}</text>
<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>
"#,
            W / 2.0,
            escape(title),
            W / 2.0,
            H - 10.0,
            escape(x_label),
            H / 2.0,
            H / 2.0,
            escape(y_label),
            H - BOTTOM,
            W - RIGHT,
            H - BOTTOM,
            H - BOTTOM,
        );
        let mut c = Canvas { body, x_range, y_range };
        c.y_ticks();
        c
    }

    fn sx(&self, x: f64) -> f64 {
        let (a, b) = self.x_range;
        let span = if b > a { b - a } else { 1.0 };
        LEFT + (x - a) / span * (W - LEFT - RIGHT)
    }

    fn sy(&self, y: f64) -> f64 {
        let (a, b) = self.y_range;
        let span = if b > a { b - a } else { 1.0 };
        H - BOTTOM - (y - a) / span * (H - TOP - BOTTOM)
    }

    fn y_ticks(&mut self) {
        let (a, b) = self.y_range;
        for k in 0..=4 {
            let v = a + (b - a) * k as f64 / 4.0;
            let y = self.sy(v);
            let _ = writeln!(
                self.body,
                r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{:.2}</text>"#,
                LEFT - 5.0,
                y + 3.0,
                v
            );
        }
    }

    fn x_label_at(&mut self, x: f64, label: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            x,
            H - BOTTOM + 15.0,
            escape(label)
        );
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n{}</svg>\n",
            self.body
        )
    }
}

fn top_of(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.fold(0.0f64, f64::max);
    if m > 0.0 {
        m * 1.1
    } else {
        1.0
    }
}

pub fn session_svg(sessions: &[SessionSummary]) -> String {
    let n = sessions.len().max(1) as f64;
    let ymax = top_of(sessions.iter().map(|s| s.mean_cer));
    let mut c = Canvas::new("Mean CER per session", "session", "mean CER", (0.0, n), (0.0, ymax));
    for (i, s) in sessions.iter().enumerate() {
        let x0 = c.sx(i as f64 + 0.1);
        let x1 = c.sx(i as f64 + 0.9);
        let y = c.sy(s.mean_cer);
        let _ = writeln!(
            c.body,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="steelblue"/>"#,
            x0,
            y,
            x1 - x0,
            c.sy(0.0) - y
        );
        let mid = (x0 + x1) / 2.0;
        c.x_label_at(mid, &s.name);
    }
    c.finish()
}

pub fn cer_histogram_svg(cers: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let hi = cers.iter().cloned().fold(1.0f64, f64::max);
    let mut counts = vec![0usize; bins];
    for &v in cers {
        let k = ((v / hi) * bins as f64).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    let ymax = top_of(counts.iter().map(|&c| c as f64));
    let mut c = Canvas::new("CER distribution", "CER", "utterances", (0.0, hi), (0.0, ymax));
    for (k, &n) in counts.iter().enumerate() {
        let x0 = c.sx(hi * k as f64 / bins as f64);
        let x1 = c.sx(hi * (k + 1) as f64 / bins as f64);
        let y = c.sy(n as f64);
        let _ = writeln!(
            c.body,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="steelblue" stroke="white"/>"#,
            x0,
            y,
            x1 - x0,
            c.sy(0.0) - y
        );
    }
    for k in 0..=4 {
        let v = hi * k as f64 / 4.0;
        let x = c.sx(v);
        c.x_label_at(x, &format!("{v:.2}"));
    }
    c.finish()
}

/// Bin means with a ±1 std band and the fitted line.
pub fn length_svg(length: &LengthAnalysis) -> String {
    let xmax = length.bins.last().map(|b| (b.hi + 1) as f64).unwrap_or(1.0);
    let ymax = top_of(length.bins.iter().map(|b| b.mean_cer + b.std_cer));
    let mut c = Canvas::new("CER by reference length", "reference length (chars)", "CER", (0.0, xmax), (0.0, ymax));
    let mid = |b: &super::LengthBin| (b.lo + b.hi) as f64 / 2.0;
    if !length.bins.is_empty() {
        let upper: Vec<String> = length
            .bins
            .iter()
            .map(|b| format!("{:.1},{:.1}", c.sx(mid(b)), c.sy(b.mean_cer + b.std_cer)))
            .collect();
        let lower: Vec<String> = length
            .bins
            .iter()
            .rev()
            .map(|b| format!("{:.1},{:.1}", c.sx(mid(b)), c.sy((b.mean_cer - b.std_cer).max(0.0))))
            .collect();
        let _ = writeln!(
            c.body,
            r#"<polygon points="{} {}" fill="steelblue" fill-opacity="0.2"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = length
            .bins
            .iter()
            .map(|b| format!("{:.1},{:.1}", c.sx(mid(b)), c.sy(b.mean_cer)))
            .collect();
        let _ = writeln!(
            c.body,
            r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#,
            line.join(" ")
        );
        for b in &length.bins {
            let _ = writeln!(
                c.body,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#,
                c.sx(mid(b)),
                c.sy(b.mean_cer)
            );
        }
    }
    if let Some(fit) = length.fit {
        let y0 = (fit.intercept).clamp(0.0, ymax);
        let y1 = (fit.intercept + fit.slope * xmax).clamp(0.0, ymax);
        let _ = writeln!(
            c.body,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="firebrick" stroke-dasharray="4 3"/>"#,
            c.sx(0.0),
            c.sy(y0),
            c.sx(xmax),
            c.sy(y1)
        );
        let _ = writeln!(
            c.body,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11">R² = {:.2}</text>"#,
            W - RIGHT - 5.0,
            TOP + 15.0,
            fit.r_squared
        );
    }
    for k in 0..=4 {
        let v = xmax * k as f64 / 4.0;
        let x = c.sx(v);
        c.x_label_at(x, &format!("{v:.0}"));
    }
    c.finish()
}
