//! RFC-4180 CSV tables and pretty JSON documents. Field order in JSON follows
//! struct declaration order, so output bytes are stable.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::markov::{DppProbe, ValueSurface};
use crate::pde::{ChiCertificate, GrowthReport, Verdict};

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_surface_csv(path: &Path, s: &ValueSurface) -> Result<()> {
    let mut rows = Vec::with_capacity(s.values.len());
    for (ti, &t) in s.times.iter().enumerate() {
        for (xi, &x) in s.xs.iter().enumerate() {
            rows.push(vec![num(t), num(x), num(s.value(ti, xi)), s.provenance.as_str().to_string()]);
        }
    }
    write_table(path, &["t", "x", "u", "provenance"], &rows)
}

pub fn write_dpp_csv(path: &Path, probes: &[DppProbe]) -> Result<()> {
    let rows: Vec<Vec<String>> = probes
        .iter()
        .map(|p| {
            vec![
                num(p.t),
                num(p.x),
                num(p.delta),
                num(p.lhs),
                num(p.rhs),
                num(p.residual),
                num(p.threshold),
            ]
        })
        .collect();
    write_table(path, &["t", "x", "delta", "lhs", "rhs", "residual", "threshold"], &rows)
}

pub fn write_growth_csv(path: &Path, g: &GrowthReport) -> Result<()> {
    let rows: Vec<Vec<String>> = g
        .rows
        .iter()
        .map(|r| {
            let verdict = match r.verdict {
                Verdict::Finite => "finite",
                Verdict::Divergent => "divergent",
            };
            vec![num(r.t), num(r.truncation_r), num(r.integral_value), verdict.to_string()]
        })
        .collect();
    write_table(path, &["t", "truncation_R", "integral_value", "verdict"], &rows)
}

/// Certificate summary in the published key order.
#[derive(Serialize)]
pub struct CertificateSummary {
    #[serde(rename = "A")]
    pub a: f64,
    pub p: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C_p_est")]
    pub c_p_est: f64,
    pub min_lhs: f64,
    pub pass: bool,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub max_lhs: f64,
    pub lattice_points: usize,
    pub diagnostic: Option<String>,
}

impl From<&ChiCertificate> for CertificateSummary {
    fn from(c: &ChiCertificate) -> Self {
        Self {
            a: c.a,
            p: c.p,
            c1: c.c1,
            c_p_est: c.c_p_est,
            min_lhs: c.min_lhs,
            pass: c.pass,
            k: c.k,
            c: c.c,
            max_lhs: c.max_lhs,
            lattice_points: c.points.len(),
            diagnostic: c.diagnostic.clone(),
        }
    }
}

pub fn write_certificate_csv(path: &Path, c: &ChiCertificate) -> Result<()> {
    let rows: Vec<Vec<String>> = c.points.iter().map(|p| vec![num(p.t), num(p.x), num(p.lhs)]).collect();
    write_table(path, &["t", "x", "lhs"], &rows)
}
