//! Report aggregation and simple SVG line charts.
//!
//! `cmd_report` distills a run directory into `report_summary.txt`: the
//! results and comparison tables, a mean ± std block when a sweep covered
//! several seeds, and — with `charts = true` over a steps sweep —
//! accuracy-vs-steps and ECE-vs-steps charts as standalone SVG files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct SweepRow {
    seed: u64,
    k: usize,
    steps: usize,
    lr: String,
    objective: String,
    top1: Option<f64>,
    top5: Option<f64>,
    ece: Option<f64>,
    recall_at_1: Option<f64>,
    caption_f1: Option<f64>,
}

fn parse_opt(s: &str) -> Option<f64> {
    if s == "-" {
        None
    } else {
        s.parse().ok()
    }
}

fn parse_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 12 {
            continue;
        }
        let bad = || Error::invalid(format!("bad sweep row: {line}"));
        rows.push(SweepRow {
            seed: f[0].parse().map_err(|_| bad())?,
            k: f[1].parse().map_err(|_| bad())?,
            steps: f[2].parse().map_err(|_| bad())?,
            lr: f[3].to_string(),
            objective: f[4].to_string(),
            top1: parse_opt(f[5]),
            top5: parse_opt(f[6]),
            ece: parse_opt(f[7]),
            recall_at_1: parse_opt(f[8]),
            caption_f1: parse_opt(f[10]),
        });
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean ± std over seeds for every (k, steps, lr, objective) group that has
/// more than one seed. Empty string when nothing aggregates.
fn multi_seed_block(rows: &[SweepRow]) -> String {
    type GroupKey = (usize, usize, String, String);
    let mut groups: Vec<(GroupKey, Vec<&SweepRow>)> = Vec::new();
    for row in rows {
        let key = (row.k, row.steps, row.lr.clone(), row.objective.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    let mut out = String::new();
    for ((k, steps, lr, objective), members) in &groups {
        if members.len() < 2 {
            continue;
        }
        let mut parts = Vec::new();
        for (name, get) in [
            ("top1", (|r: &SweepRow| r.top1) as fn(&SweepRow) -> Option<f64>),
            ("top5", |r| r.top5),
            ("ece", |r| r.ece),
            ("r@1", |r| r.recall_at_1),
            ("f1", |r| r.caption_f1),
        ] {
            let vals: Vec<f64> = members.iter().filter_map(|r| get(r)).collect();
            if vals.len() == members.len() {
                let (m, s) = mean_std(&vals);
                parts.push(format!("{name} {m:.4} ± {s:.4}"));
            }
        }
        if !parts.is_empty() {
            let seeds: Vec<String> = members.iter().map(|r| r.seed.to_string()).collect();
            out.push_str(&format!(
                "k={k} steps={steps} lr={lr} {objective:<14} {}   (seeds {})\n",
                parts.join("  "),
                seeds.join(",")
            ));
        }
    }
    out
}

/// Aggregate the run directory into a summary; optionally draw charts.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut summary = String::new();

    let results = cfg.out_dir.join("results.txt");
    if results.is_file() {
        summary.push_str("== results ==\n");
        summary.push_str(&fs::read_to_string(&results)?);
        summary.push('\n');
    }
    let run_summary = cfg.out_dir.join("summary.txt");
    if run_summary.is_file() {
        summary.push_str("== comparison ==\n");
        summary.push_str(&fs::read_to_string(&run_summary)?);
        summary.push('\n');
    }

    let sweep_path = cfg.out_dir.join("sweep_results.txt");
    if sweep_path.is_file() {
        summary.push_str("== sweep ==\n");
        summary.push_str(&fs::read_to_string(&sweep_path)?);
        summary.push('\n');

        let rows = parse_sweep(&sweep_path)?;
        let aggregate = multi_seed_block(&rows);
        if !aggregate.is_empty() {
            summary.push_str("== multi-seed mean ± std ==\n");
            summary.push_str(&aggregate);
            summary.push('\n');
        }

        if cfg.charts {
            for (metric, fname, label) in [
                (MetricSel::Top1, "accuracy_vs_steps.svg", "top-1 accuracy"),
                (MetricSel::Ece, "ece_vs_steps.svg", "expected calibration error"),
            ] {
                if let Some(svg) = steps_chart(&rows, metric, label) {
                    let p = cfg.out_dir.join(fname);
                    fs::write(&p, svg)?;
                    written.push(p);
                }
            }
        }
    }

    if summary.is_empty() {
        return Err(Error::config(format!(
            "nothing to report under {}",
            cfg.out_dir.display()
        )));
    }
    let out = cfg.out_dir.join("report_summary.txt");
    fs::write(&out, summary)?;
    written.insert(0, out);
    Ok(written)
}

#[derive(Clone, Copy)]
enum MetricSel {
    Top1,
    Ece,
}

/// Metric-vs-steps polylines, one series per (objective, k), values averaged
/// over seeds. Returns `None` when the sweep has no usable points.
fn steps_chart(rows: &[SweepRow], metric: MetricSel, y_label: &str) -> Option<String> {
    // (series name, steps) → values over seeds
    let mut buckets: Vec<((String, usize), Vec<f64>)> = Vec::new();
    for row in rows {
        let y = match metric {
            MetricSel::Top1 => row.top1,
            MetricSel::Ece => row.ece,
        };
        let Some(y) = y else { continue };
        let key = (format!("{} k={}", row.objective, row.k), row.steps);
        match buckets.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vals)) => vals.push(y),
            None => buckets.push((key, vec![y])),
        }
    }
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for ((name, steps), vals) in buckets {
        let (mean, _) = mean_std(&vals);
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((steps as f64, mean)),
            None => series.push((name, vec![(steps as f64, mean)])),
        }
    }
    series.retain(|(_, pts)| pts.len() >= 2);
    if series.is_empty() {
        return None;
    }
    for (_, pts) in &mut series {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite steps"));
    }
    Some(line_chart(&series, "adaptation steps", y_label))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal SVG line chart: axes, ticks, legend, one polyline per series.
pub fn line_chart(series: &[(String, Vec<(f64, f64)>)], x_label: &str, y_label: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 20.0, 50.0);
    let pw = w - ml - mr;
    let ph = h - mt - mb;

    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let xmin = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymin = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let xspan = (xmax - xmin).max(1e-9);
    let yspan = (ymax - ymin).max(1e-9);
    let sx = |x: f64| ml + (x - xmin) / xspan * pw;
    let sy = |y: f64| mt + ph - (y - ymin) / yspan * ph;

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    svg.push_str(&format!(
        r#"<rect width="{w}" height="{h}" fill="white"/>"#
    ));
    // axes
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        mt + ph
    ));
    // ticks
    for i in 0..=4 {
        let xv = xmin + xspan * i as f64 / 4.0;
        let yv = ymin + yspan * i as f64 / 4.0;
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{:.2}</text>"#,
            sx(xv),
            mt + ph + 16.0,
            xv
        ));
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.3}</text>"#,
            ml - 6.0,
            sy(yv) + 4.0,
            yv
        ));
    }
    svg.push_str(&format!(
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{x_label}</text>"#,
        ml + pw / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    ));

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        ));
        for (x, y) in pts {
            svg.push_str(&format!(
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(*x),
                sy(*y)
            ));
        }
        let ly = mt + 14.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            ml + pw - 150.0,
            ml + pw - 126.0
        ));
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="11">{name}</text>"#,
            ml + pw - 120.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_series_and_axes() {
        let series = vec![
            ("rlcf k=3".to_string(), vec![(1.0, 0.5), (3.0, 0.6), (5.0, 0.62)]),
            ("entropy_min k=3".to_string(), vec![(1.0, 0.48), (3.0, 0.5), (5.0, 0.47)]),
        ];
        let svg = line_chart(&series, "steps", "top-1");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("rlcf k=3"));
        assert!(svg.contains("top-1"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn multi_seed_aggregation_groups_and_averages() {
        let row = |seed: u64, top1: f64| SweepRow {
            seed,
            k: 3,
            steps: 3,
            lr: "7.0e-3".into(),
            objective: "rlcf".into(),
            top1: Some(top1),
            top5: None,
            ece: Some(0.1),
            recall_at_1: None,
            caption_f1: None,
        };
        let rows = vec![row(0, 0.8), row(1, 0.9), row(2, 0.85)];
        let block = multi_seed_block(&rows);
        assert!(block.contains("top1 0.8500 ± 0.0500"), "{block}");
        assert!(block.contains("ece 0.1000 ± 0.0000"), "{block}");
        assert!(block.contains("seeds 0,1,2"), "{block}");
        // single-seed groups do not aggregate
        assert!(multi_seed_block(&rows[..1]).is_empty());
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[2.0, 4.0]);
        assert_eq!(m, 3.0);
        assert!((s - std::f64::consts::SQRT_2).abs() < 1e-12);
        let (m, s) = mean_std(&[5.0]);
        assert_eq!((m, s), (5.0, 0.0));
    }
}
