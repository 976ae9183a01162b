//! Static SVG line charts over exported metric CSVs.
//!
//! Everything is rendered with fixed-precision decimal formatting and no
//! timestamps, so identical inputs produce byte-identical files.

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 170.0; // room for the legend
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// One run's parsed metric files.
struct RunData {
    name: String,
    /// (task, avg_accuracy, avg_forgetting-if-present)
    summary: Vec<(usize, f64, Option<f64>)>,
    /// (task, probe, group, erank, erank_pct)
    erank: Vec<(usize, String, String, f64, f64)>,
}

struct Series {
    label: String,
    points: Vec<(usize, f64)>,
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Input(format!("line {line}: bad {what} value {s:?}")))
}

fn read_summary(path: &Path) -> Result<Vec<(usize, f64, Option<f64>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "task,avg_accuracy,avg_forgetting")) => {}
        other => {
            return Err(Error::Input(format!(
                "{}: unexpected summary header {:?}",
                path.display(),
                other.map(|(_, l)| l)
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Input(format!(
                "{}: line {i}: expected 3 fields, got {}",
                path.display(),
                parts.len()
            )));
        }
        let task = parse_field(parts[0], i, "task")?;
        let acc = parse_field(parts[1], i, "avg_accuracy")?;
        let forg = if parts[2].is_empty() {
            None
        } else {
            Some(parse_field(parts[2], i, "avg_forgetting")?)
        };
        rows.push((task, acc, forg));
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn read_erank(path: &Path) -> Result<Vec<(usize, String, String, f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "task,probe,group,erank,erank_pct")) => {}
        other => {
            return Err(Error::Input(format!(
                "{}: unexpected erank header {:?}",
                path.display(),
                other.map(|(_, l)| l)
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Input(format!(
                "{}: line {i}: expected 5 fields, got {}",
                path.display(),
                parts.len()
            )));
        }
        rows.push((
            parse_field(parts[0], i, "task")?,
            parts[1].to_string(),
            parts[2].to_string(),
            parse_field(parts[3], i, "erank")?,
            parse_field(parts[4], i, "erank_pct")?,
        ));
    }
    Ok(rows)
}

fn run_label(dir: &Path) -> String {
    // "runs/split_mnist_mlp_er/seed0" -> "split_mnist_mlp_er/seed0"
    let leaf = |p: &Path| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string())
    };
    match dir.parent() {
        Some(parent) if parent.file_name().is_some() => format!("{}/{}", leaf(parent), leaf(dir)),
        _ => leaf(dir),
    }
}

fn load_run(dir: &Path) -> Result<RunData> {
    Ok(RunData {
        name: run_label(dir),
        summary: read_summary(&dir.join("summary.csv"))?,
        erank: read_erank(&dir.join("erank.csv"))?,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn render_chart(title: &str, y_label: &str, k: usize, series: &[Series]) -> String {
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(_, y) in &s.points {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    y_min = y_min.min(0.0);
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    y_max += (y_max - y_min) * 0.05;

    let x_of = |t: usize| {
        if k <= 1 {
            MARGIN_L + plot_w / 2.0
        } else {
            MARGIN_L + plot_w * (t - 1) as f64 / (k - 1) as f64
        }
    };
    let y_of = |v: f64| MARGIN_T + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" font-size=\"14\">{title}</text>\n",
        fmt(MARGIN_L)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B),
        fmt(WIDTH - MARGIN_R),
        fmt(HEIGHT - MARGIN_B)
    ));
    // x ticks at every task index
    for t in 1..=k {
        let x = x_of(t);
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n",
            fmt(x),
            fmt(HEIGHT - MARGIN_B),
            fmt(HEIGHT - MARGIN_B + 5.0)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{t}</text>\n",
            fmt(x),
            fmt(HEIGHT - MARGIN_B + 20.0)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">task</text>\n",
        fmt(MARGIN_L + plot_w / 2.0),
        fmt(HEIGHT - 10.0)
    ));
    // y ticks: 5 evenly spaced values
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"black\"/>\n",
            fmt(MARGIN_L - 5.0),
            fmt(MARGIN_L),
            fmt(y)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L - 9.0),
            fmt(y + 4.0),
            fmt(v)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{y_label}</text>\n",
        fmt(MARGIN_T + plot_h / 2.0),
        fmt(MARGIN_T + plot_h / 2.0)
    ));
    // curves + legend
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(t, v)| format!("{},{}", fmt(x_of(t)), fmt(y_of(v))))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        for &(t, v) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                fmt(x_of(t)),
                fmt(y_of(v))
            ));
        }
        let ly = MARGIN_T + 14.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            fmt(WIDTH - MARGIN_R + 10.0),
            fmt(WIDTH - MARGIN_R + 28.0),
            fmt(ly)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\">{}</text>\n",
            fmt(WIDTH - MARGIN_R + 33.0),
            fmt(ly + 3.5),
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn erank_series(
    runs: &[RunData],
    probe: &str,
    group: &str,
    normalized: bool,
) -> Vec<Series> {
    runs.iter()
        .filter_map(|r| {
            let points: Vec<(usize, f64)> = r
                .erank
                .iter()
                .filter(|(_, p, g, _, _)| p == probe && g == group)
                .map(|&(t, _, _, e, pct)| (t, if normalized { pct } else { e }))
                .collect();
            if points.is_empty() {
                None
            } else {
                Some(Series {
                    label: r.name.clone(),
                    points,
                })
            }
        })
        .collect()
}

/// Renders the chart family over the given run directories into `out`,
/// returning the written file paths. One curve per run; identical inputs
/// yield byte-identical SVGs.
pub fn emit_plots(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::Input("no run directories given".into()));
    }
    let runs: Vec<RunData> = run_dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<_>>()?;
    let k = runs.iter().map(|r| r.summary.len()).max().unwrap_or(0);
    for r in &runs {
        if r.summary.len() != k {
            return Err(Error::Input(format!(
                "run {} covers {} tasks but another run covers {k}",
                r.name,
                r.summary.len()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, title: &str, y_label: &str, series: Vec<Series>| -> Result<()> {
        if series.is_empty() {
            return Ok(());
        }
        let path = out.join(name);
        std::fs::write(&path, render_chart(title, y_label, k, series.as_slice()))?;
        written.push(path);
        Ok(())
    };

    emit(
        "accuracy.svg",
        "Average accuracy over seen tasks",
        "accuracy",
        runs.iter()
            .map(|r| Series {
                label: r.name.clone(),
                points: r.summary.iter().map(|&(t, a, _)| (t, a)).collect(),
            })
            .collect(),
    )?;
    emit(
        "forgetting.svg",
        "Average forgetting",
        "forgetting",
        runs.iter()
            .filter_map(|r| {
                let points: Vec<(usize, f64)> = r
                    .summary
                    .iter()
                    .filter_map(|&(t, _, f)| f.map(|v| (t, v)))
                    .collect();
                if points.is_empty() {
                    None
                } else {
                    Some(Series {
                        label: r.name.clone(),
                        points,
                    })
                }
            })
            .collect(),
    )?;
    emit(
        "erank_activation.svg",
        "Penultimate activation eRank",
        "eRank",
        erank_series(&runs, "activation", "penultimate", false),
    )?;
    emit(
        "erank_activation_norm.svg",
        "Penultimate activation eRank (peak-normalized)",
        "eRank / peak",
        erank_series(&runs, "activation", "penultimate", true),
    )?;
    let groups: BTreeSet<String> = runs
        .iter()
        .flat_map(|r| r.erank.iter())
        .filter(|(_, p, _, _, _)| p == "weight")
        .map(|(_, _, g, _, _)| g.clone())
        .collect();
    for g in groups {
        emit(
            &format!("erank_weight_{g}.svg"),
            &format!("Weight eRank: {g} group"),
            "eRank",
            erank_series(&runs, "weight", &g, false),
        )?;
        emit(
            &format!("erank_weight_{g}_norm.svg"),
            &format!("Weight eRank: {g} group (peak-normalized)"),
            "eRank / peak",
            erank_series(&runs, "weight", &g, true),
        )?;
    }
    Ok(written)
}
