//! Plain SVG charts: training curves, false-positive pies, perceptual
//! scatter and bar charts with error bars.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::RunRecord;
use crate::diagnose::FpCategory;
use crate::error::{invalid, Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

/// Axis range padded so that flat data still spans some height.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, s: &mut String, x_label: &str, y_label: &str, x_ticks: bool) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
        );
        for i in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0,
                fmt_tick(v)
            );
            if x_ticks {
                let u = self.x.0 + (self.x.1 - self.x.0) * i as f64 / 4.0;
                let x = self.px(u);
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{y1}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
                    y1 + 4.0,
                    y1 + 18.0,
                    fmt_tick(u)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 15.0,
            escape(x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        format!("{:.3}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn legend(s: &mut String, labels: &[String]) {
    for (i, l) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            y,
            escape(l)
        );
    }
}

/// One polyline per labelled series.
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let frame = Frame {
        x: range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0))),
        y: range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1))),
    };
    let mut s = header(title);
    frame.axes(&mut s, x_label, y_label, true);
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
    }
    legend(
        &mut s,
        &series.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>(),
    );
    s.push_str("</svg>\n");
    s
}

/// Points grouped by label, each group in its own color.
pub fn scatter_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    groups: &[(String, Vec<(f64, f64)>)],
) -> String {
    let frame = Frame {
        x: range(groups.iter().flat_map(|(_, p)| p.iter().map(|q| q.0))),
        y: range(
            groups
                .iter()
                .flat_map(|(_, p)| p.iter().map(|q| q.1))
                .chain([0.0]),
        ),
    };
    let mut s = header(title);
    frame.axes(&mut s, x_label, y_label, true);
    for (i, (_, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}" fill-opacity="0.8"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
    }
    legend(
        &mut s,
        &groups.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>(),
    );
    s.push_str("</svg>\n");
    s
}

/// Bars of `(label, value, error half-width)`.
pub fn bar_chart_svg(title: &str, y_label: &str, bars: &[(String, f64, f64)]) -> String {
    let frame = Frame {
        x: (0.0, bars.len().max(1) as f64),
        y: range(
            bars.iter()
                .flat_map(|&(_, v, e)| [v - e, v + e])
                .chain([0.0]),
        ),
    };
    let mut s = header(title);
    frame.axes(&mut s, "", y_label, false);
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (label, v, e)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = LEFT + slot * (i as f64 + 0.2);
        let (top, base) = (frame.py(v.max(0.0)), frame.py(v.min(0.0)));
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
            slot * 0.6,
            (base - top).max(0.5)
        );
        let cx = x + slot * 0.3;
        if *e > 0.0 {
            let (a, b) = (frame.py(v - e), frame.py(v + e));
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{a:.1}" x2="{cx:.1}" y2="{b:.1}" stroke="black"/><line x1="{:.1}" y1="{a:.1}" x2="{:.1}" y2="{a:.1}" stroke="black"/><line x1="{:.1}" y1="{b:.1}" x2="{:.1}" y2="{b:.1}" stroke="black"/>"#,
                cx - 5.0,
                cx + 5.0,
                cx - 5.0,
                cx + 5.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Pie of labelled fractions; zero slices are skipped.
pub fn pie_svg(title: &str, slices: &[(String, f64)]) -> String {
    let mut s = header(title);
    let (cx, cy, r) = (
        (W - RIGHT + LEFT) / 2.0,
        (H + TOP - BOTTOM) / 2.0 + 10.0,
        130.0,
    );
    let total: f64 = slices.iter().map(|x| x.1.max(0.0)).sum();
    let mut angle = -std::f64::consts::FRAC_PI_2;
    for (i, (_, v)) in slices.iter().enumerate() {
        let frac = if total > 0.0 { v.max(0.0) / total } else { 0.0 };
        if frac <= 0.0 {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        if frac >= 1.0 - 1e-12 {
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="{r}" fill="{color}"/>"#);
            continue;
        }
        let end = angle + frac * std::f64::consts::TAU;
        let (x0, y0) = (cx + r * angle.cos(), cy + r * angle.sin());
        let (x1, y1) = (cx + r * end.cos(), cy + r * end.sin());
        let large = (frac > 0.5) as u8;
        let _ = writeln!(
            s,
            r#"<path d="M{cx},{cy} L{x0:.2},{y0:.2} A{r},{r} 0 {large} 1 {x1:.2},{y1:.2} Z" fill="{color}" stroke="white"/>"#
        );
        angle = end;
    }
    let labels: Vec<String> = slices
        .iter()
        .map(|(l, v)| format!("{l} {:.0}%", 100.0 * v))
        .collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

fn write(dir: &Path, name: &str, svg: String, out: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    out.push(p);
    Ok(())
}

fn label(r: &RunRecord, many: bool) -> String {
    if many {
        format!("{} seed {}", r.name, r.seed)
    } else {
        r.name.clone()
    }
}

/// Writes every chart the records support into `dir` and returns the paths.
pub fn emit_plots(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(invalid("no run records to plot"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let many = records.len() > 1;
    let mut out = Vec::new();

    let mut curves = Vec::new();
    for r in records {
        for metric in ["train_loss", "landmark_loss"] {
            let pts: Vec<(f64, f64)> = r
                .series(metric)
                .into_iter()
                .map(|(e, v)| (e as f64, v))
                .collect();
            if !pts.is_empty() {
                curves.push((format!("{} {metric}", label(r, many)), pts));
            }
        }
    }
    if !curves.is_empty() {
        write(
            dir,
            "training_curves.svg",
            line_chart_svg("Training curves", "epoch", "loss", &curves),
            &mut out,
        )?;
    }

    for r in records {
        let Some(dist) = &r.fp_distributions else {
            continue;
        };
        for d in dist.values().filter(|d| !d.is_empty()) {
            let slices: Vec<(String, f64)> = FpCategory::ALL
                .iter()
                .zip(d.fractions())
                .map(|(c, v)| (c.name().to_string(), v))
                .collect();
            let name = if many {
                format!("fp_pie_{}_seed{}_{}.svg", r.name, r.seed, d.category)
            } else {
                format!("fp_pie_{}.svg", d.category)
            };
            let title = format!(
                "False positives, category {} ({} in top {})",
                d.category, d.n_fp, d.n_gt
            );
            write(dir, &name, pie_svg(&title, &slices), &mut out)?;
        }
    }

    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let Some(rows) = &r.perceptual else { continue };
        let mut images: Vec<&str> = Vec::new();
        for row in rows {
            let idx = match images.iter().position(|i| *i == row.image) {
                Some(i) => i,
                None => {
                    images.push(&row.image);
                    images.len() - 1
                }
            };
            groups
                .entry(row.encoder.clone())
                .or_default()
                .push((idx as f64, row.distance));
        }
    }
    if !groups.is_empty() {
        let groups: Vec<_> = groups.into_iter().collect();
        write(
            dir,
            "perceptual_scatter.svg",
            scatter_svg(
                "Reconstruction distance by encoder",
                "image",
                "perceptual distance",
                &groups,
            ),
            &mut out,
        )?;
    }

    let mut bars = Vec::new();
    for r in records {
        for m in &r.metrics {
            if let Some((_, setting)) = m.metric.split_once('@') {
                if m.metric.starts_with("probe_accuracy@") {
                    let l = if many {
                        format!("{setting} s{}", r.seed)
                    } else {
                        setting.to_string()
                    };
                    bars.push((l, m.value, 0.0));
                }
            }
        }
    }
    if !bars.is_empty() {
        write(
            dir,
            "ablation.svg",
            bar_chart_svg("Ablation", "probe accuracy", &bars),
            &mut out,
        )?;
    }
    Ok(out)
}
