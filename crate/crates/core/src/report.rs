//! Artifact emission: CSV matrices, P2 PGM heatmaps, and bound-report
//! tables. Floats are fixed to 17 significant digits so outputs are
//! byte-deterministic for a given configuration.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::eval::TerminalDistribution;
use crate::hypergrid::GridSpec;
use crate::theory::BoundReport;

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Lays a terminal distribution out as an N x N matrix with row index `a`
/// and column index `b`. Missing states (never the case on grids) map to 0.
pub fn matrix_from_distribution(dist: &TerminalDistribution, spec: &GridSpec) -> Vec<Vec<f64>> {
    let n = spec.n();
    let mut mat = vec![vec![0.0; n]; n];
    for (a, row) in mat.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            *cell = dist.prob_of(spec.idx(a, b)).unwrap_or(0.0);
        }
    }
    mat
}

pub fn write_matrix_csv(path: &Path, mat: &[Vec<f64>]) -> std::io::Result<()> {
    let mut out = String::new();
    for row in mat {
        let cells: Vec<String> = row.iter().map(|&v| fmt_g17(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())
}

/// ASCII PGM (P2), max-normalized to gray levels 0..=255.
pub fn write_pgm(path: &Path, mat: &[Vec<f64>]) -> std::io::Result<()> {
    let rows = mat.len();
    let cols = mat.first().map(Vec::len).unwrap_or(0);
    let max = mat
        .iter()
        .flat_map(|r| r.iter())
        .cloned()
        .fold(0.0f64, f64::max);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for row in mat {
        let cells: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if max > 0.0 {
                    (v / max * 255.0).round() as i64
                } else {
                    0
                };
                level.clamp(0, 255).to_string()
            })
            .collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())
}

/// Human-readable table of bound reports.
pub fn render_bound_table(reports: &[&BoundReport]) -> String {
    let name_width = reports
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(4)
        .max(5);
    let mut out = format!(
        "{:<name_width$}  {:>13}  {:>13}  {:>13}  {:>6}\n",
        "check", "lhs", "rhs", "slack", "status"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<name_width$}  {:>13.6e}  {:>13.6e}  {:>13.6e}  {:>6}\n",
            r.name,
            r.lhs,
            r.rhs,
            r.slack(),
            if r.pass { "PASS" } else { "FAIL" }
        ));
        if !r.pass {
            if let Some(w) = &r.witness {
                out.push_str(&format!("    witness: {w}\n"));
            }
        }
    }
    out
}

/// Machine-readable CSV of bound reports.
pub fn bound_reports_csv(reports: &[&BoundReport]) -> String {
    let mut out = String::from("check,lhs,rhs,slack,witness,pass\n");
    for r in reports {
        let witness = r
            .witness
            .as_deref()
            .unwrap_or("")
            .replace(',', ";")
            .replace('\n', " ");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name.replace(',', ";"),
            fmt_g17(r.lhs),
            fmt_g17(r.rhs),
            fmt_g17(r.slack()),
            witness,
            r.pass
        ));
    }
    out
}
