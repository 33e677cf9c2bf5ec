//! Comparison tables and static plots built from finished run directories.
//! Nothing here recomputes metrics; everything is read back from CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{join, ExperimentConfig, SweepCell, SweepTable, Variant};
use crate::seg::MetricsReport;

/// One run directory's headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub variant: Option<Variant>,
    pub blocks: Option<Vec<usize>>,
    pub steps: Option<Vec<usize>>,
    pub dice_pct: f64,
    pub iou_pct: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Sorted by Dice, best first.
    pub runs: Vec<RunSummary>,
    pub sweeps: Vec<(String, Vec<SweepCell>)>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Reads `metrics.csv` (and `sweep.csv` when present) from every directory.
pub fn collect(run_dirs: &[PathBuf]) -> Result<Report> {
    let mut runs = Vec::new();
    let mut sweeps = Vec::new();
    for dir in run_dirs {
        let metrics = dir.join("metrics.csv");
        let sweep = dir.join("sweep.csv");
        if !metrics.exists() && !sweep.exists() {
            return Err(Error::MissingMetrics(dir.clone()));
        }
        if sweep.exists() {
            sweeps.push((run_name(dir), SweepTable::read_csv(&sweep)?));
        }
        if metrics.exists() {
            let m = MetricsReport::read_csv(&metrics)?;
            let cfg = ExperimentConfig::load(&dir.join("config.snapshot")).ok();
            runs.push(RunSummary {
                run: run_name(dir),
                variant: cfg.as_ref().map(|c| c.train.variant),
                blocks: cfg.as_ref().map(|c| c.selection.blocks.clone()),
                steps: cfg.as_ref().map(|c| c.selection.steps.clone()),
                dice_pct: m.mean_dice,
                iou_pct: m.mean_iou,
                images: m.rows.len(),
            });
        }
    }
    runs.sort_by(|a, b| b.dice_pct.total_cmp(&a.dice_pct).then_with(|| a.run.cmp(&b.run)));
    Ok(Report { runs, sweeps })
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Ablation table: Variant, Text, M_cro, Dice %, IoU %.
pub fn ablation_markdown(rows: &[(Variant, f64, f64)]) -> String {
    let mut s = String::from("| Variant | Text | M_cro | Dice % | IoU % |\n|---|---|---|---|---|\n");
    for (v, d, i) in rows {
        let _ = writeln!(
            s,
            "| {v} | {} | {} | {d:.2} | {i:.2} |",
            mark(v.uses_text()),
            mark(v.uses_attention())
        );
    }
    s
}

impl Report {
    pub fn markdown(&self) -> String {
        let mut s = String::from("# Results\n\n");
        if !self.runs.is_empty() {
            s.push_str("| Run | Variant | Text | M_cro | Blocks | Steps | Dice % | IoU % | Images |\n");
            s.push_str("|---|---|---|---|---|---|---|---|---|\n");
            for r in &self.runs {
                let opt = |v: &Option<Vec<usize>>| v.as_deref().map(join).unwrap_or_default();
                let (text, attn, name) = match r.variant {
                    Some(v) => (mark(v.uses_text()), mark(v.uses_attention()), v.to_string()),
                    None => ("", "", String::new()),
                };
                let _ = writeln!(
                    s,
                    "| {} | {name} | {text} | {attn} | {} | {} | {:.2} | {:.2} | {} |",
                    r.run,
                    opt(&r.blocks),
                    opt(&r.steps),
                    r.dice_pct,
                    r.iou_pct,
                    r.images
                );
            }
        }
        for (name, cells) in &self.sweeps {
            let _ = write!(s, "\n## Sweep `{name}`\n\n| Blocks | Steps | Dice % | IoU % |\n|---|---|---|---|\n");
            for c in cells {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.2} | {:.2} |",
                    join(&c.blocks),
                    join(&c.steps),
                    c.dice_pct,
                    c.iou_pct
                );
            }
            let _ = writeln!(s, "\n![Dice vs step]({name}_dice_vs_step.svg)");
        }
        s
    }

    /// Writes `report.md`, per-sweep line plots with their data files and a
    /// bar chart of run Dice scores.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out)?;
        let mut written = vec![out.join("report.md")];
        std::fs::write(&written[0], self.markdown())?;
        for (name, cells) in &self.sweeps {
            let series = dice_vs_step_series(cells);
            let data = out.join(format!("{name}_dice_vs_step.csv"));
            write_series(&data, &series)?;
            let svg = out.join(format!("{name}_dice_vs_step.svg"));
            plot_dice_vs_step(&svg, &format!("Dice vs step ({name})"), &series)?;
            written.extend([data, svg]);
        }
        if !self.runs.is_empty() {
            let svg = out.join("dice_by_run.svg");
            plot_runs(&svg, &self.runs)?;
            written.push(svg);
        }
        Ok(written)
    }
}

/// One series per block set: `(step, dice)` points ordered by step. Cells
/// with several steps are placed at their largest step.
pub fn dice_vs_step_series(cells: &[SweepCell]) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for c in cells {
        let step = c.steps.iter().copied().max().unwrap_or(0);
        out.entry(join(&c.blocks)).or_default().push((step, c.dice_pct));
    }
    for pts in out.values_mut() {
        pts.sort_by_key(|p| p.0);
    }
    out
}

/// Plot data as `series,step,dice_pct`.
pub fn write_series(path: &Path, series: &BTreeMap<String, Vec<(usize, f64)>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series", "step", "dice_pct"])?;
    for (name, pts) in series {
        for (t, d) in pts {
            w.write_record([name.clone(), t.to_string(), format!("{d:.2}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_series(path: &Path) -> Result<BTreeMap<String, Vec<(usize, f64)>>> {
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(path)?;
    for rec in rdr.deserialize() {
        let (name, step, dice): (String, usize, f64) = rec?;
        out.entry(name).or_default().push((step, dice));
    }
    Ok(out)
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn plot_dice_vs_step(
    path: &Path,
    title: &str,
    series: &BTreeMap<String, Vec<(usize, f64)>>,
) -> Result<()> {
    let max_t = series
        .values()
        .flatten()
        .map(|p| p.0)
        .max()
        .unwrap_or(1)
        .max(1);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0usize..max_t + max_t / 20 + 1, 0f64..100f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step t")
        .y_desc("Dice %")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("B={{{name}}}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|&(t, d)| Circle::new((t, d), 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn plot_runs(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = runs.len();
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean test Dice by run", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..n as f64, 0f64..100f64)
        .map_err(plot_err)?;
    let labels: Vec<String> = runs.iter().map(|r| r.run.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|x| {
            labels
                .get(x.floor() as usize)
                .filter(|_| (x - x.floor() - 0.5).abs() < 0.26)
                .cloned()
                .unwrap_or_default()
        })
        .y_desc("Dice %")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(runs.iter().enumerate().map(|(i, r)| {
            Rectangle::new(
                [(i as f64 + 0.15, 0.0), (i as f64 + 0.85, r.dice_pct)],
                Palette99::pick(i).filled(),
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_table_shape() {
        let md = ablation_markdown(&[(Variant::Full, 90.0, 80.0), (Variant::Zeta1, 60.0, 45.5)]);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| Variant | Text | M_cro | Dice % | IoU % |");
        assert_eq!(lines[2], "| full | yes | yes | 90.00 | 80.00 |");
        assert_eq!(lines[3], "| zeta1 | no | no | 60.00 | 45.50 |");
    }

    #[test]
    fn series_group_by_block_set() {
        let cell = |b: &[usize], t: usize, d: f64| SweepCell {
            blocks: b.to_vec(),
            steps: vec![t],
            dice_pct: d,
            iou_pct: d,
        };
        let s = dice_vs_step_series(&[
            cell(&[2, 4], 900, 10.0),
            cell(&[2, 4], 50, 80.0),
            cell(&[4, 6], 50, 70.0),
        ]);
        assert_eq!(s.len(), 2);
        assert_eq!(s["2,4"], vec![(50, 80.0), (900, 10.0)]);
    }
}
