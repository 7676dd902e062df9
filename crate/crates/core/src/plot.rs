//! SVG line charts of metric traces, written by hand.

use std::fmt::Write;

use crate::error::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 28.0;
const BOTTOM: f64 = 52.0;

const DASHES: [&str; 6] = ["none", "8 4", "2 3", "12 4 2 4", "4 4", "16 6"];
const COLORS: [&str; 6] = ["#1f5fa8", "#c0392b", "#2e8b57", "#8e44ad", "#d68910", "#34495e"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Pulls `(epoch, column)` pairs out of a metrics CSV by header name.
/// Empty cells are skipped; a missing column is an error naming it.
pub fn read_columns(csv: &str, columns: &[&str]) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Config("metrics CSV is empty, expected a header row".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Config(format!("metrics CSV is missing column `{name}`")))
    };
    let epoch = find("epoch")?;
    let idx = columns.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(Error::Config(format!(
                "metrics CSV row {} has {} fields, header has {}",
                n + 2,
                cells.len(),
                header.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| Error::Config(format!("metrics CSV row {}: `{}` is not a number", n + 2, cells[i])))
        };
        let e = num(epoch)?;
        for (o, &i) in out.iter_mut().zip(&idx) {
            if !cells[i].is_empty() {
                o.push((e, num(i)?));
            }
        }
    }
    Ok(out)
}

/// Short legend text from a run's manifest (`key = value` lines).
pub fn manifest_label(manifest: &str) -> Option<String> {
    let mut critic = None;
    let mut lambda = None;
    let mut seed = None;
    for line in manifest.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let v = v.trim().to_string();
        match k.trim() {
            "critic" => critic = Some(v),
            "lambda" => lambda = Some(v),
            "seed" => seed = Some(v),
            _ => {}
        }
    }
    let critic = critic?;
    let mut s = if critic == "none" || lambda.as_deref().and_then(|l| l.parse::<f64>().ok()) == Some(0.0) {
        "baseline".to_string()
    } else {
        format!("{critic} λ={}", lambda.unwrap_or_else(|| "?".into()))
    };
    if let Some(seed) = seed {
        let _ = write!(s, " seed={seed}");
    }
    Some(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Rounds an axis span to a 1/2/5 step.
fn nice_step(span: f64, target: f64) -> f64 {
    let raw = (span / target).max(1e-12);
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let m = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    let digits = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor()) as usize
    };
    format!("{v:.digits$}")
}

/// Renders the series as one chart. Output depends only on the input.
pub fn render_svg(series: &[Series], title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect class="frame" x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text class="xlabel" x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text class="ylabel" x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">nats</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|t| t.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if all.is_empty() {
        let _ = writeln!(
            s,
            r#"<text class="empty" x="{}" y="{}" text-anchor="middle" fill="gray">no data</text>"#,
            LEFT + pw / 2.0,
            TOP + ph / 2.0
        );
        s.push_str("</svg>\n");
        return s;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    y0 = y0.min(0.0);
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let ystep = nice_step(y1 - y0, 5.0);
    y0 = (y0 / ystep).floor() * ystep;
    y1 = (y1 / ystep).ceil() * ystep;
    let xstep = nice_step(x1 - x0, 6.0).max(1.0);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut t = (x0 / xstep).ceil() * xstep;
    while t <= x1 + 1e-9 {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black"/><text x="{0:.2}" y="{3:.2}" text-anchor="middle">{4}</text>"#,
            px(t),
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            fmt_tick(t, xstep)
        );
        t += xstep;
    }
    let mut t = y0;
    while t <= y1 + ystep * 1e-9 {
        let _ = writeln!(
            s,
            r##"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}" stroke="#ddd"/><text x="{3:.2}" y="{4:.2}" text-anchor="end">{5}</text>"##,
            LEFT,
            py(t),
            LEFT + pw,
            LEFT - 6.0,
            py(t) + 4.0,
            fmt_tick(t, ystep)
        );
        t += ystep;
    }

    for (i, tr) in series.iter().enumerate() {
        let dash = DASHES[i % DASHES.len()];
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = tr
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.6" stroke-dasharray="{dash}" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 12.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.6" stroke-dasharray="{dash}"/><text class="legend" x="{}" y="{}">{}</text>"#,
            lx + 28.0,
            lx + 34.0,
            ly + 4.0,
            escape(&tr.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_column_is_named() {
        let e = read_columns("epoch,kl\n1,0.5\n", &["mi_q"]).unwrap_err();
        assert!(e.to_string().contains("`mi_q`"));
    }

    #[test]
    fn empty_cells_are_skipped() {
        let c = read_columns("epoch,a,b\n1,0.5,\n2,0.7,1\n", &["a", "b"]).unwrap();
        assert_eq!(c[0], vec![(1.0, 0.5), (2.0, 0.7)]);
        assert_eq!(c[1], vec![(2.0, 1.0)]);
    }

    #[test]
    fn labels_from_manifest() {
        assert_eq!(
            manifest_label("critic = nn\nlambda = 1\nseed = 3\n").unwrap(),
            "nn λ=1 seed=3"
        );
        assert_eq!(manifest_label("critic = hybrid\nlambda = 0\n").unwrap(), "baseline");
        assert_eq!(manifest_label("seed = 1\n"), None);
    }

    #[test]
    fn no_data_annotation() {
        let s = render_svg(
            &[Series {
                label: "a".into(),
                points: vec![],
            }],
            "t",
        );
        assert!(s.contains(">no data<") && !s.contains("<polyline"));
    }

    #[test]
    fn dash_patterns_differ() {
        let a = Series {
            label: "a".into(),
            points: vec![(1.0, 0.1), (2.0, 0.3)],
        };
        let b = Series {
            label: "b".into(),
            points: vec![(1.0, 0.2), (2.0, 0.1)],
        };
        let s = render_svg(&[a.clone(), b.clone()], "t");
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains(r#"stroke-dasharray="none""#) && s.contains(r#"stroke-dasharray="8 4""#));
        assert_eq!(s, render_svg(&[a, b], "t"));
    }
}
