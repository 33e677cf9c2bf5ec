use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{run_variant, Components};
use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::probe::BlockSelection;

/// One trained-and-evaluated `(blocks, steps)` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub blocks: Vec<usize>,
    pub steps: Vec<usize>,
    pub dice_pct: f64,
    pub iou_pct: f64,
}

/// Mean metrics of all cells sharing one option along an axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub option: Vec<usize>,
    pub dice_pct: f64,
    pub iou_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Row-major over block options, then step options.
    pub cells: Vec<SweepCell>,
    pub by_steps: Vec<Marginal>,
    pub by_blocks: Vec<Marginal>,
}

pub fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn marginals(cells: &[SweepCell], options: &[Vec<usize>], key: fn(&SweepCell) -> &Vec<usize>) -> Vec<Marginal> {
    options
        .iter()
        .map(|opt| {
            let hits: Vec<&SweepCell> = cells.iter().filter(|c| key(c) == opt).collect();
            let n = hits.len() as f64;
            Marginal {
                option: opt.clone(),
                dice_pct: hits.iter().map(|c| c.dice_pct).sum::<f64>() / n,
                iou_pct: hits.iter().map(|c| c.iou_pct).sum::<f64>() / n,
            }
        })
        .collect()
}

impl SweepTable {
    pub fn from_cells(cells: Vec<SweepCell>, block_options: &[Vec<usize>], step_options: &[Vec<usize>]) -> Self {
        let by_steps = marginals(&cells, step_options, |c| &c.steps);
        let by_blocks = marginals(&cells, block_options, |c| &c.blocks);
        Self {
            cells,
            by_steps,
            by_blocks,
        }
    }

    /// `blocks,steps,dice_pct,iou_pct`, one row per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["blocks", "steps", "dice_pct", "iou_pct"])?;
        for c in &self.cells {
            w.write_record([
                join(&c.blocks),
                join(&c.steps),
                format!("{:.2}", c.dice_pct),
                format!("{:.2}", c.iou_pct),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<SweepCell>> {
        let mut rdr = csv::Reader::from_path(path)?;
        let parse = |s: &str| -> Result<Vec<usize>> {
            s.split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad sweep entry {s:?}")))
                })
                .collect()
        };
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::InvalidConfig(format!("bad sweep row {rec:?}")))
            };
            out.push(SweepCell {
                blocks: parse(rec.get(0).unwrap_or_default())?,
                steps: parse(rec.get(1).unwrap_or_default())?,
                dice_pct: num(2)?,
                iou_pct: num(3)?,
            });
        }
        Ok(out)
    }

    /// `marginal_steps.csv` and `marginal_blocks.csv` under `dir`.
    pub fn write_marginals(&self, dir: &Path) -> Result<()> {
        for (name, axis, rows) in [
            ("marginal_steps.csv", "steps", &self.by_steps),
            ("marginal_blocks.csv", "blocks", &self.by_blocks),
        ] {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record([axis, "dice_pct", "iou_pct"])?;
            for m in rows {
                w.write_record([
                    join(&m.option),
                    format!("{:.2}", m.dice_pct),
                    format!("{:.2}", m.iou_pct),
                ])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Trains and evaluates one configuration per `(blocks, steps)` pair, on up
/// to `jobs` threads. Every cell uses the same seed, so results do not depend
/// on scheduling.
pub fn sweep(
    block_options: &[Vec<usize>],
    step_options: &[Vec<usize>],
    train: &[SegmentationSample],
    test: &[SegmentationSample],
    base: &TrainConfig,
    comps: &Components,
    jobs: usize,
) -> Result<SweepTable> {
    if block_options.is_empty() || step_options.is_empty() {
        return Err(Error::InvalidConfig("sweep needs block and step options".into()));
    }
    let mut grid = Vec::new();
    for b in block_options {
        for s in step_options {
            let sel = BlockSelection::new(b.clone(), s.clone())?;
            sel.validate(comps.backbone.registry(), comps.sched.len())?;
            grid.push(sel);
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepCell>>>> =
        Mutex::new(std::iter::repeat_with(|| None).take(grid.len()).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(sel) = grid.get(i) else { break };
        let cfg = TrainConfig {
            selection: sel.clone(),
            ..base.clone()
        };
        let cell = run_variant(base.variant, train, test, &cfg, comps).map(|(_, rec)| {
            log::info!("sweep {sel}: Dice {:.2}", rec.mean_dice);
            SweepCell {
                blocks: sel.blocks().to_vec(),
                steps: sel.steps().to_vec(),
                dice_pct: rec.mean_dice,
                iou_pct: rec.mean_iou,
            }
        });
        results.lock().expect("worker panicked")[i] = Some(cell);
    };
    let jobs = jobs.clamp(1, grid.len());
    std::thread::scope(|s| {
        for _ in 1..jobs {
            s.spawn(worker);
        }
        worker();
    });
    let cells = results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|c| c.expect("every cell visited"))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable::from_cells(cells, block_options, step_options))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(b: &[usize], s: &[usize], d: f64) -> SweepCell {
        SweepCell {
            blocks: b.to_vec(),
            steps: s.to_vec(),
            dice_pct: d,
            iou_pct: d / 2.0,
        }
    }

    #[test]
    fn marginals_average_the_other_axis() {
        let blocks = vec![vec![4, 6], vec![6, 8]];
        let steps = vec![vec![50], vec![900]];
        let t = SweepTable::from_cells(
            vec![
                cell(&[4, 6], &[50], 80.0),
                cell(&[4, 6], &[900], 40.0),
                cell(&[6, 8], &[50], 90.0),
                cell(&[6, 8], &[900], 50.0),
            ],
            &blocks,
            &steps,
        );
        assert_eq!(t.by_steps[0].dice_pct, 85.0);
        assert_eq!(t.by_steps[1].dice_pct, 45.0);
        assert_eq!(t.by_blocks[1].dice_pct, 70.0);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let t = SweepTable::from_cells(
            vec![cell(&[6, 8, 12], &[50, 150], 77.125)],
            &[vec![6, 8, 12]],
            &[vec![50, 150]],
        );
        t.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "blocks,steps,dice_pct,iou_pct\n\"6,8,12\",\"50,150\",77.12,38.56\n");
        let back = SweepTable::read_csv(&path).unwrap();
        assert_eq!(back[0].blocks, vec![6, 8, 12]);
        t.write_marginals(dir.path()).unwrap();
        assert!(dir.path().join("marginal_steps.csv").exists());
    }
}
