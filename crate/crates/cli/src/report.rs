//! `report`: Markdown tables from the outputs of earlier runs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};

use crate::fit::{BenchRow, FitSummary};
use crate::verify::CheckLine;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Reads whichever of `summary.json`, `checks.jsonl` and `bench.csv` exist
/// in `dir` and writes `report.md` there.
pub fn run_report(dir: &Path) -> Result<String> {
    let mut md = String::from("# Run report\n");
    let mut found = false;

    let summary = dir.join("summary.json");
    if summary.exists() {
        found = true;
        let s: FitSummary = serde_json::from_str(&std::fs::read_to_string(&summary)?)?;
        writeln!(md, "\n## Fit: {}\n", s.algorithm.name())?;
        writeln!(
            md,
            "{}/{} seeds succeeded; median final distance {:.4}, worst {:.4}.\n",
            s.success_count,
            s.seeds.len(),
            s.median_final_distance,
            s.max_final_distance
        )?;
        if let Some(c) = &s.contraction {
            writeln!(md, "Contraction: {:?} ({})\n", c.outcome, c.details)?;
        }
        md.push_str(
            "| seed | distance | tan | median contraction | success |\n|---|---|---|---|---|\n",
        );
        for r in &s.seeds {
            writeln!(
                md,
                "| {} | {:.4} | {} | {} | {} |",
                r.seed,
                r.final_distance,
                opt(r.final_tan),
                opt(r.median_contraction),
                r.success
            )?;
        }
    }

    let checks = dir.join("checks.jsonl");
    if checks.exists() {
        found = true;
        md.push_str("\n## Checks\n\n| check | case | outcome | observed | threshold | ok |\n|---|---|---|---|---|---|\n");
        for line in std::fs::read_to_string(&checks)?
            .lines()
            .filter(|l| !l.trim().is_empty())
        {
            let c: CheckLine = serde_json::from_str(line)?;
            writeln!(
                md,
                "| {} | {} | {:?} | {} | {} | {} |",
                c.check,
                c.case,
                c.report.outcome,
                c.report.observed.map_or("-".into(), |v| format!("{v:.3e}")),
                c.report
                    .threshold
                    .map_or("-".into(), |v| format!("{v:.3e}")),
                c.ok
            )?;
        }
    }

    let bench = dir.join("bench.csv");
    if bench.exists() {
        found = true;
        md.push_str("\n## Bench\n\n| cell | d | norm | n | seeds | success | median distance |\n|---|---|---|---|---|---|---|\n");
        let rows: Vec<BenchRow> = csv::Reader::from_path(&bench)?
            .deserialize()
            .collect::<Result<_, _>>()?;
        let cells = rows.iter().map(|r| r.cell).max().map_or(0, |m| m + 1);
        for c in 0..cells {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.cell == c).collect();
            if sel.is_empty() {
                continue;
            }
            let mut d: Vec<f64> = sel.iter().map(|r| r.final_distance).collect();
            d.sort_by(f64::total_cmp);
            writeln!(
                md,
                "| {c} | {} | {} | {} | {} | {} | {:.4} |",
                sel[0].d,
                sel[0].norm,
                sel[0].n,
                sel.len(),
                sel.iter().filter(|r| r.success).count(),
                d[d.len() / 2]
            )?;
        }
    }

    if !found {
        bail!(
            "no summary.json, checks.jsonl or bench.csv in {}",
            dir.display()
        );
    }
    std::fs::write(dir.join("report.md"), &md)?;
    Ok(md)
}
