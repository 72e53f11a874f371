//! Side-by-side comparison of two runs' diagnostics series.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;
use crate::output::{Csv, OutputDir, RunManifest, MANIFEST_NAME};

/// Final-time error of the two runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalError {
    pub quantity: String,
    pub run_a: f64,
    pub run_b: f64,
    /// `run_a / run_b`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: usize,
    /// Largest `|a - b|` per compared column.
    pub max_differences: Vec<(String, f64)>,
    pub final_errors: Vec<FinalError>,
}

struct Series {
    columns: HashMap<String, Vec<f64>>,
}

impl Series {
    fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(|v| v.as_slice())
    }
}

/// Accepts a run directory or the path of its manifest.
fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

fn load(path: &Path) -> Result<(RunManifest, Series), CliError> {
    let mpath = manifest_path(path);
    let manifest = RunManifest::read(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    if !manifest.files.iter().any(|f| f.path == "diagnostics.csv") {
        return Err(CliError::Incompatible(format!(
            "{} lists no diagnostics series",
            mpath.display()
        )));
    }
    manifest
        .verify(dir)
        .map_err(|e| CliError::Incompatible(format!("{}: {e}", mpath.display())))?;
    let csv_path = dir.join("diagnostics.csv");
    let text = std::fs::read_to_string(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or_default()
        .split(',')
        .map(str::to_string)
        .collect();
    let mut columns: HashMap<String, Vec<f64>> = header.iter().map(|h| (h.clone(), Vec::new())).collect();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(CliError::Incompatible(format!("{}: row {} is ragged", csv_path.display(), i + 1)));
        }
        for (h, c) in header.iter().zip(cells) {
            let v = c
                .parse::<f64>()
                .map_err(|_| CliError::Incompatible(format!("{}: bad number `{c}`", csv_path.display())))?;
            columns.get_mut(h).expect("header column").push(v);
        }
    }
    if !columns.contains_key("time") || !columns.contains_key("sup_error_on_compact") {
        return Err(CliError::Incompatible(format!("{} lacks time/sup_error columns", csv_path.display())));
    }
    Ok((manifest, Series { columns }))
}

/// Compares the diagnostics of two runs of the same preset on the same probe
/// box: per-time differences go to `comparison.csv` and the final-time
/// errors with their ratio to `final_errors.csv` under `out`.
pub fn compare_runs(a: &Path, b: &Path, out: &Path) -> Result<Comparison, CliError> {
    let (ma, sa) = load(a)?;
    let (mb, sb) = load(b)?;
    if ma.config.preset != mb.config.preset {
        return Err(CliError::Incompatible(format!(
            "different presets `{}` and `{}`",
            ma.config.preset, mb.config.preset
        )));
    }
    if ma.config.probe_radius != mb.config.probe_radius {
        return Err(CliError::Incompatible(format!(
            "different probe boxes (radius {} and {})",
            ma.config.probe_radius, mb.config.probe_radius
        )));
    }

    let mut names = vec!["sup_error_on_compact"];
    if sa.column("closed_form_error").is_some() && sb.column("closed_form_error").is_some() {
        names.push("closed_form_error");
    }
    let ta = sa.column("time").expect("checked");
    let tb = sb.column("time").expect("checked");
    // Snapshot times are whole numbers of steps, so they drift from the
    // nominal cadence by up to a step per sample; pair nearest times.
    let tol = 0.5 * ma.config.snapshot_every.min(mb.config.snapshot_every);

    let mut header = vec!["time_a".to_string(), "time_b".to_string()];
    for n in &names {
        header.extend([format!("{n}_a"), format!("{n}_b"), format!("{n}_diff")]);
    }
    let mut csv = Csv::new(&header);
    let mut max_diff = vec![0.0f64; names.len()];
    let mut rows = 0;
    for (i, &t) in ta.iter().enumerate() {
        let Some(j) = (0..tb.len()).min_by(|&p, &q| (tb[p] - t).abs().total_cmp(&(tb[q] - t).abs())) else {
            break;
        };
        if (tb[j] - t).abs() > tol {
            continue;
        }
        let mut row = vec![t, tb[j]];
        for (k, n) in names.iter().enumerate() {
            let (x, y) = (sa.column(n).expect("column")[i], sb.column(n).expect("column")[j]);
            max_diff[k] = max_diff[k].max((x - y).abs());
            row.extend([x, y, x - y]);
        }
        csv.row(&row);
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Incompatible("the runs share no sampled times".into()));
    }

    let mut table = Csv::new(&["quantity", "run_a", "run_b", "ratio"]);
    let mut final_errors = Vec::new();
    for n in &names {
        let x = *sa.column(n).expect("column").last().expect("rows");
        let y = *sb.column(n).expect("column").last().expect("rows");
        let ratio = if x == y { 1.0 } else { x / y };
        table.labeled_row(n, &[x, y, ratio]);
        final_errors.push(FinalError {
            quantity: n.to_string(),
            run_a: x,
            run_b: y,
            ratio,
        });
    }

    let mut dir = OutputDir::create(out)?;
    dir.write_csv("comparison.csv", csv)?;
    dir.write_csv("final_errors.csv", table)?;
    Ok(Comparison {
        rows,
        max_differences: names.iter().map(|n| n.to_string()).zip(max_diff).collect(),
        final_errors,
    })
}
