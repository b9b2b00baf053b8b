//! Static run report: a markdown table per epoch plus SVG line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use reid_core::trainer::{LogRecord, METRICS_LOG};

#[derive(Default)]
struct EpochRow {
    lr: f64,
    steps: usize,
    total: f64,
    id: f64,
    rll: f64,
    center: f64,
    erase: f64,
    rank1: Option<f64>,
    map: Option<f64>,
}

pub fn render(run: &Path) -> Result<Vec<PathBuf>> {
    let log = run.join(METRICS_LOG);
    let text = std::fs::read_to_string(&log).with_context(|| format!("cannot read {}", log.display()))?;
    let mut rows: BTreeMap<usize, EpochRow> = BTreeMap::new();
    let mut losses = Vec::new();
    let mut rank1 = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: LogRecord =
            serde_json::from_str(line).with_context(|| format!("{} line {}", log.display(), i + 1))?;
        match rec {
            LogRecord::Step {
                epoch,
                step,
                lr,
                total,
                id,
                rll,
                center,
                erase_attn,
                ..
            } => {
                let r = rows.entry(epoch).or_default();
                r.lr = lr;
                r.steps += 1;
                r.total += total;
                r.id += id;
                r.rll += rll;
                r.center += center;
                r.erase += erase_attn;
                losses.push((step as f64, total));
            }
            LogRecord::Validation { epoch, rank1: r1, map, .. } => {
                let r = rows.entry(epoch).or_default();
                r.rank1 = Some(r1);
                r.map = Some(map);
                rank1.push((epoch as f64, r1 * 100.0));
            }
        }
    }

    let mut md = String::from("# Training report\n\n");
    md.push_str("| epoch | lr | steps | total | id | rll | center | erase-attn | rank-1 | mAP |\n");
    md.push_str("|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    let pct = |v: Option<f64>| v.map_or("".to_string(), |x| format!("{:.2}%", x * 100.0));
    for (epoch, r) in &rows {
        let n = r.steps.max(1) as f64;
        let _ = writeln!(
            md,
            "| {epoch} | {:.3e} | {} | {:.4} | {:.4} | {:.4} | {:.3} | {:.4} | {} | {} |",
            r.lr,
            r.steps,
            r.total / n,
            r.id / n,
            r.rll / n,
            r.center / n,
            r.erase / n,
            pct(r.rank1),
            pct(r.map)
        );
    }
    md.push_str("\n![loss](loss.svg)\n");
    if !rank1.is_empty() {
        md.push_str("\n![rank-1](rank1.svg)\n");
    }

    let mut written = Vec::new();
    let md_path = run.join("report.md");
    std::fs::write(&md_path, md).with_context(|| format!("cannot write {}", md_path.display()))?;
    written.push(md_path);
    let loss_path = run.join("loss.svg");
    std::fs::write(&loss_path, line_plot("total loss per step", "step", &losses))
        .with_context(|| format!("cannot write {}", loss_path.display()))?;
    written.push(loss_path);
    if !rank1.is_empty() {
        let p = run.join("rank1.svg");
        std::fs::write(&p, line_plot("validation rank-1 (%)", "epoch", &rank1))
            .with_context(|| format!("cannot write {}", p.display()))?;
        written.push(p);
    }
    Ok(written)
}

fn line_plot(title: &str, xlabel: &str, points: &[(f64, f64)]) -> String {
    let (w, h, m) = (640.0, 360.0, 48.0);
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&mut points.iter().map(|p| p.0));
    let (y0, y1) = span(&mut points.iter().map(|p| p.1));
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{m},{m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for (v, y) in [(y0, h - m), (y1, m)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, m - 4.0, y + 4.0);
    }
    for (v, x) in [(x0, m), (x1, w - m)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.0}</text>"#, h - m + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        path.join(" ")
    );
    s.push_str("</svg>\n");
    s
}
