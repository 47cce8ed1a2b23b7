//! Mode × bit-width × seed grids and their summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{ExperimentConfig, RunMode};
use crate::data::{prepare, Dataset};
use crate::error::{QkdError, Result};
use crate::pipeline::{evaluate, pretrain, run_experiment, Pretrained, RunRecord};

/// Data and pre-trained networks of one seed.
pub struct SeedContext {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub pretrained: Pretrained,
    pub teacher_fp_top1: f64,
    pub student_fp_top1: f64,
}

/// Prepares the data of `seed` and pre-trains (or adopts) its networks.
pub fn seed_context(cfg: &ExperimentConfig, seed: u64, pretrained: Option<Pretrained>) -> Result<SeedContext> {
    let mut cfg = cfg.clone();
    cfg.run.seed = seed;
    let (train, test, _) = prepare(&cfg.data, seed, cfg.normalization)?;
    let pretrained = match pretrained {
        Some(p) => p,
        None => pretrain(&cfg, &train, &test)?,
    };
    let teacher_fp_top1 = evaluate(&pretrained.teacher, &test)?.top1;
    let student_fp_top1 = evaluate(&pretrained.student, &test)?.top1;
    Ok(SeedContext {
        seed,
        train,
        test,
        pretrained,
        teacher_fp_top1,
        student_fp_top1,
    })
}

/// One finished run of the grid.
#[derive(Debug, Clone)]
pub struct Cell {
    pub mode: RunMode,
    pub bits: u32,
    pub seed: u64,
    pub record: RunRecord,
}

impl Cell {
    pub fn file_stem(&self) -> String {
        cell_stem(self.mode, self.bits, self.seed)
    }
}

pub fn cell_stem(mode: RunMode, bits: u32, seed: u64) -> String {
    format!("{}-k{}-seed{}", mode.slug(), bits, seed)
}

/// Runs every (mode, bits, seed) cell. Cells run in parallel; each owns its
/// networks and only reads the shared seed contexts.
pub fn run_grid(cfg: &ExperimentConfig, modes: &[RunMode], bits: &[u32], contexts: &[SeedContext]) -> Result<Vec<Cell>> {
    let jobs: Vec<(RunMode, u32, &SeedContext)> = contexts
        .iter()
        .flat_map(|c| bits.iter().flat_map(move |&b| modes.iter().map(move |&m| (m, b, c))))
        .collect();
    jobs.par_iter()
        .map(|&(mode, b, ctx)| {
            let mut c = cfg.clone();
            c.run.mode = mode;
            c.run.bits = b;
            c.run.seed = ctx.seed;
            log::info!("running {} k={} seed={}", mode, b, ctx.seed);
            let out = run_experiment(&c, &ctx.pretrained, &ctx.train, &ctx.test)?;
            Ok(Cell {
                mode,
                bits: b,
                seed: ctx.seed,
                record: out.record,
            })
        })
        .collect()
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Median over seeds of `metric` for one (mode, bits).
pub fn cell_median(cells: &[Cell], mode: RunMode, bits: u32, metric: impl Fn(&RunRecord) -> f64) -> Option<f64> {
    let v: Vec<f64> = cells
        .iter()
        .filter(|c| c.mode == mode && c.bits == bits)
        .map(|c| metric(&c.record))
        .collect();
    (!v.is_empty()).then(|| median(&v))
}

fn bits_label(bits: u32) -> String {
    if bits > crate::config::MAX_QUANT_BITS {
        "FP".into()
    } else {
        format!("W{}A{}", bits, bits)
    }
}

/// Writes one record CSV per cell under `dir/cells`, `summary.csv` (one
/// row per mode per bit-width) and `table.txt` (methods down, bit-widths
/// across).
pub fn write_outputs(dir: &Path, cells: &[Cell], contexts: &[SeedContext], modes: &[RunMode], bits: &[u32]) -> Result<()> {
    let cells_dir = dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| QkdError::io(&cells_dir, e))?;
    for c in cells {
        c.record.write_csv(cells_dir.join(format!("{}.csv", c.file_stem())))?;
    }

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["mode", "bits", "seeds", "median_test_top1", "median_test_top5", "per_seed_test_top1"])?;
    for &b in bits {
        for &m in modes {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.mode == m && c.bits == b).collect();
            if mine.is_empty() {
                continue;
            }
            let top1: Vec<f64> = mine.iter().map(|c| c.record.final_student_test_top1()).collect();
            let top5: Vec<f64> = mine
                .iter()
                .map(|c| c.record.rows.last().map_or(f64::NAN, |r| r.student_test_top5))
                .collect();
            let per_seed = mine
                .iter()
                .zip(&top1)
                .map(|(c, v)| format!("{}:{}", c.seed, v))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                m.label().to_string(),
                b.to_string(),
                mine.len().to_string(),
                median(&top1).to_string(),
                median(&top5).to_string(),
                per_seed,
            ])?;
        }
    }
    w.flush().map_err(|e| QkdError::io(&path, e))?;

    let table = format_table(cells, contexts, modes, bits);
    let path = dir.join("table.txt");
    fs::write(&path, table).map_err(|e| QkdError::io(&path, e))
}

/// Median top-1 table: full-precision reference rows, then one row per method.
pub fn format_table(cells: &[Cell], contexts: &[SeedContext], modes: &[RunMode], bits: &[u32]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<18}", "Method");
    for &b in bits {
        let _ = write!(s, "{:>10}", bits_label(b));
    }
    s.push('\n');
    let fp = |f: fn(&SeedContext) -> f64| median(&contexts.iter().map(f).collect::<Vec<_>>());
    for (name, v) in [
        ("Teacher (FP)", fp(|c| c.teacher_fp_top1)),
        ("Student (FP)", fp(|c| c.student_fp_top1)),
    ] {
        let _ = write!(s, "{:<18}", name);
        for _ in bits {
            let _ = write!(s, "{:>10.2}", v);
        }
        s.push('\n');
    }
    for &m in modes {
        let _ = write!(s, "{:<18}", m.label());
        for &b in bits {
            match cell_median(cells, m, b, RunRecord::final_student_test_top1) {
                Some(v) => {
                    let _ = write!(s, "{:>10.2}", v);
                }
                None => {
                    let _ = write!(s, "{:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}
