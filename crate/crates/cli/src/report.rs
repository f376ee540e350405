//! Grid rendering: one markdown table and one CSV per adapter depth, rows =
//! sample counts x strategies, columns = categories plus their average, with
//! the better strategy bold-marked per cell pair. Both outputs are formatted
//! from the same numbers.

use transplant_core::experiments::{CellKey, CellOutcome, ResultGrid, TaskKind};
use transplant_core::train::Strategy;

fn fmt_metric(v: f64) -> String {
    format!("{:.2}", v)
}

fn cell_text(grid: &ResultGrid, key: &CellKey) -> (Option<f64>, String) {
    match grid.get(key) {
        Some(CellOutcome::Metric { mean, .. }) => (Some(*mean), fmt_metric(*mean)),
        Some(CellOutcome::Skipped { reason }) => (None, reason.clone()),
        Some(CellOutcome::Failed { .. }) => (None, "failed".into()),
        None => (None, "—".into()),
    }
}

/// True when `a` is strictly better than `b` under the grid's metric.
fn better(grid: &ResultGrid, a: f64, b: f64) -> bool {
    match grid.experiment.task_kind() {
        TaskKind::Cls => a < b,
        TaskKind::Seg => a > b,
    }
}

fn depths(grid: &ResultGrid) -> Vec<usize> {
    let mut ds: Vec<usize> = grid.cells.iter().map(|(k, _)| k.depth).collect();
    ds.sort_unstable();
    ds.dedup();
    ds
}

fn samples(grid: &ResultGrid) -> Vec<usize> {
    let mut ns: Vec<usize> = grid.cells.iter().map(|(k, _)| k.samples).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.reverse();
    ns
}

fn strategies(grid: &ResultGrid) -> Vec<Strategy> {
    let mut ss: Vec<Strategy> = grid.cells.iter().map(|(k, _)| k.strategy).collect();
    ss.sort();
    ss.dedup();
    ss
}

struct Row {
    samples: usize,
    strategy: Strategy,
    cells: Vec<(Option<f64>, String)>,
    avg: (Option<f64>, String),
    /// Per-column flag: this row holds the best metric of its sample group.
    best: Vec<bool>,
}

fn build_rows(grid: &ResultGrid, depth: usize) -> Vec<Row> {
    let mut rows = Vec::new();
    for &n in &samples(grid) {
        let group_start = rows.len();
        for &strategy in &strategies(grid) {
            let mut cells = Vec::new();
            let mut present = Vec::new();
            for cat in &grid.categories {
                let key = CellKey {
                    category: cat.clone(),
                    strategy,
                    samples: n,
                    depth,
                };
                let cell = cell_text(grid, &key);
                if let Some(v) = cell.0 {
                    present.push(v);
                }
                cells.push(cell);
            }
            let avg = if present.len() == grid.categories.len() {
                let m = present.iter().sum::<f64>() / present.len() as f64;
                (Some(m), fmt_metric(m))
            } else {
                (None, "—".into())
            };
            let n_cols = cells.len() + 1;
            rows.push(Row {
                samples: n,
                strategy,
                cells,
                avg,
                best: vec![false; n_cols],
            });
        }
        // Bold-mark the better strategy per column within this sample group.
        let group = group_start..rows.len();
        let n_cols = grid.categories.len() + 1;
        for col in 0..n_cols {
            let mut best_idx: Option<usize> = None;
            let mut best_val = f64::NAN;
            for i in group.clone() {
                let v = if col < grid.categories.len() {
                    rows[i].cells[col].0
                } else {
                    rows[i].avg.0
                };
                if let Some(v) = v {
                    if best_idx.is_none() || better(grid, v, best_val) {
                        best_idx = Some(i);
                        best_val = v;
                    }
                }
            }
            if let Some(i) = best_idx {
                rows[i].best[col] = true;
            }
        }
    }
    rows
}

/// Markdown report over all depths in the grid.
pub fn render_markdown(grid: &ResultGrid) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# {} — {}\n",
        grid.experiment, grid.metric_name
    ));
    for depth in depths(grid) {
        out.push_str(&format!("\n## adapter depth {depth}\n\n"));
        out.push_str("| # samples | strategy |");
        for cat in &grid.categories {
            out.push_str(&format!(" {cat} |"));
        }
        out.push_str(" Avg. |\n");
        out.push_str(&"|---".repeat(grid.categories.len() + 3));
        out.push_str("|\n");
        let rows = build_rows(grid, depth);
        let mut last_n = usize::MAX;
        for row in rows {
            let n_text = if row.samples == last_n {
                String::new()
            } else {
                last_n = row.samples;
                row.samples.to_string()
            };
            out.push_str(&format!("| {} | {} |", n_text, row.strategy));
            for (col, (_, text)) in row.cells.iter().enumerate() {
                if row.best[col] {
                    out.push_str(&format!(" **{text}** |"));
                } else {
                    out.push_str(&format!(" {text} |"));
                }
            }
            let col = row.cells.len();
            if row.best[col] {
                out.push_str(&format!(" **{}** |\n", row.avg.1));
            } else {
                out.push_str(&format!(" {} |\n", row.avg.1));
            }
        }
    }
    out
}

/// CSV report with the same numbers as the markdown rendering.
pub fn render_csv(grid: &ResultGrid) -> String {
    let mut out = String::new();
    out.push_str("depth,samples,strategy");
    for cat in &grid.categories {
        out.push_str(&format!(",{cat}"));
    }
    out.push_str(",avg\n");
    for depth in depths(grid) {
        for row in build_rows(grid, depth) {
            out.push_str(&format!("{},{},{}", depth, row.samples, row.strategy));
            for (_, text) in &row.cells {
                out.push_str(&format!(",{text}"));
            }
            out.push_str(&format!(",{}\n", row.avg.1));
        }
    }
    out
}
