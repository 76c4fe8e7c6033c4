//! Report serialization: CSV rows with exact "p/q" cells plus decimal
//! rendering columns, a JSON mirror, and a human-readable summary listing
//! every certified inequality with its interval witnesses.

use serde::Serialize;

use crate::rational::{Interval, Rational};
use crate::search::{SearchReport, StageResult};

pub const DECIMAL_DIGITS: u32 = 12;

/// One certified inequality: statement, witnesses, verdict.
#[derive(Clone, Debug, Serialize)]
pub struct Certification {
    pub name: String,
    pub statement: String,
    pub witness: String,
    pub passed: bool,
}

impl Certification {
    pub fn new(name: &str, statement: String, witness: String, passed: bool) -> Self {
        Certification {
            name: name.into(),
            statement,
            witness,
            passed,
        }
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn rational_cells(v: &Rational) -> (String, String) {
    (v.to_string(), v.to_decimal(DECIMAL_DIGITS))
}

/// CSV for a search report: one row per stage with exact and decimal cells;
/// offsets get one column per axis.
pub fn search_csv(report: &SearchReport, dim: usize) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = vec!["j".into()];
    for ax in 1..=dim {
        header.push(format!("k{ax}"));
    }
    header.extend(
        [
            "d_lo",
            "d_lo_dec",
            "d_hi",
            "d_hi_dec",
            "approx_d_hi",
            "column_share",
            "column_share_dec",
            "displacement",
            "displacement_dec",
        ]
        .map(String::from),
    );
    out.push_str(&header.join(","));
    out.push('\n');
    for st in &report.stages {
        out.push_str(&stage_row(st, dim));
        out.push('\n');
    }
    out
}

fn stage_row(st: &StageResult, dim: usize) -> String {
    let mut cells: Vec<String> = vec![st.stage.to_string()];
    for ax in 0..dim {
        cells.push(st.offset.get(ax).map_or_else(String::new, |k| k.to_string()));
    }
    let (d_lo, d_lo_dec) = rational_cells(&st.d_lo);
    let (d_hi, d_hi_dec) = rational_cells(&st.d_hi);
    cells.push(d_lo);
    cells.push(d_lo_dec);
    cells.push(d_hi);
    cells.push(d_hi_dec);
    cells.push(
        st.approx_d_hi
            .as_ref()
            .map_or_else(String::new, |v| v.to_string()),
    );
    let (share, share_dec) = rational_cells(&st.column_share);
    cells.push(share);
    cells.push(share_dec);
    let (disp, disp_dec) = rational_cells(&st.displacement);
    cells.push(disp);
    cells.push(disp_dec);
    cells.into_iter().map(|c| csv_escape(&c)).collect::<Vec<_>>().join(",")
}

/// Generic CSV from a header and exact/decimal cell rows.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(
        &header
            .iter()
            .map(|h| csv_escape(h))
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    for row in rows {
        out.push_str(
            &row.iter()
                .map(|c| csv_escape(c))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
    }
    out
}

pub fn interval_cells(v: &Interval) -> Vec<String> {
    vec![
        v.lo.to_string(),
        v.lo.to_decimal(DECIMAL_DIGITS),
        v.hi.to_string(),
        v.hi.to_decimal(DECIMAL_DIGITS),
    ]
}

/// Human-readable summary: certifications first, then per-stage tables.
pub fn summary_text(
    title: &str,
    certifications: &[Certification],
    extra_sections: &[(String, String)],
) -> String {
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    out.push_str(&"=".repeat(title.len()));
    out.push_str("\n\n");
    if certifications.is_empty() {
        out.push_str("no hard assertions for this experiment\n");
    } else {
        for c in certifications {
            out.push_str(&format!(
                "[{}] {}: {}\n      witness: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.statement,
                c.witness
            ));
        }
    }
    for (name, body) in extra_sections {
        out.push('\n');
        out.push_str(name);
        out.push('\n');
        out.push_str(&"-".repeat(name.len()));
        out.push('\n');
        out.push_str(body);
        if !body.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}
