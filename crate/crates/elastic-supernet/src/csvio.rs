//! Schema-stable CSV emission and re-parsing. Every file starts with a
//! documented header row; floats are written in shortest-round-trip form
//! so a re-read reproduces the exact values.

use std::fs;
use std::path::Path;

use elastic_core::backbone::BackboneSpec;
use elastic_core::codec::ConfigCodec;
use elastic_core::search::{ArchiveEntry, ParetoArchive};

use crate::error::{CliError, Result};

pub const ARCHIVE_HEADER: &str = "genome_hex,macs_norm,macs_absolute,loss,front_rank";
pub const EVAL_HEADER: &str = "m_t,realized_macs,macs_norm,accuracy,genome_hex";
pub const HISTORY_HEADER: &str = "generation,evaluations,nonfinite,best_loss,front_macs_norm,front_loss";

pub fn write_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(header.len() + 1 + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    fs::write(path, out).map_err(CliError::io(path))
}

/// Read a CSV produced by this module: verifies the header and splits
/// each row on commas (no quoting — none of our schemas need it).
pub fn read_rows(path: &Path, expected_header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == expected_header => {}
        Some(h) => {
            return Err(CliError::Data(format!(
                "{}: header {h:?}, expected {expected_header:?}",
                path.display()
            )))
        }
        None => return Err(CliError::Data(format!("{}: empty file", path.display()))),
    }
    let cols = expected_header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != cols {
            return Err(CliError::Data(format!(
                "{}: row {} has {} fields, expected {cols}",
                path.display(),
                i + 2,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn archive_row(e: &ArchiveEntry) -> String {
    format!(
        "{},{:?},{},{:?},{}",
        ConfigCodec::to_hex(&e.bits),
        e.macs_norm,
        e.macs,
        e.loss,
        e.front_rank
    )
}

/// Write the full archive, or only its non-dominated front when
/// `front_only` (the file the router trainer consumes).
pub fn write_archive(path: &Path, archive: &ParetoArchive, front_only: bool) -> Result<()> {
    let rows: Vec<String> = archive
        .entries
        .iter()
        .filter(|e| !front_only || e.front_rank == 0)
        .map(archive_row)
        .collect();
    write_lines(path, ARCHIVE_HEADER, &rows)
}

/// Re-read an archive CSV. Genomes are decoded and their cost recomputed
/// as a consistency check against file tampering or spec mismatch.
pub fn read_archive(path: &Path, spec: &BackboneSpec) -> Result<ParetoArchive> {
    let codec = ConfigCodec::new(spec);
    let m0 = elastic_core::backbone::cost::macs(
        spec,
        &elastic_core::backbone::SubmodelConfig::maximal(spec),
    ) as f64;
    let mut entries = Vec::new();
    for (i, row) in read_rows(path, ARCHIVE_HEADER)?.into_iter().enumerate() {
        let bad = |what: &str, val: &str| {
            CliError::Data(format!(
                "{}: row {}: bad {what} {val:?}",
                path.display(),
                i + 2
            ))
        };
        let bits = codec
            .from_hex(&row[0])
            .map_err(|e| CliError::Data(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        let macs_norm: f64 = row[1].parse().map_err(|_| bad("macs_norm", &row[1]))?;
        let macs: u64 = row[2].parse().map_err(|_| bad("macs_absolute", &row[2]))?;
        let loss: f64 = row[3].parse().map_err(|_| bad("loss", &row[3]))?;
        let front_rank: usize = row[4].parse().map_err(|_| bad("front_rank", &row[4]))?;
        let cfg = codec.decode(&bits)?;
        let expect = elastic_core::backbone::cost::macs(spec, &cfg);
        if expect != macs {
            return Err(CliError::Data(format!(
                "{}: row {}: genome costs {expect} MACs but the file claims {macs}",
                path.display(),
                i + 2
            )));
        }
        if (macs_norm - macs as f64 / m0).abs() > 1e-9 {
            return Err(CliError::Data(format!(
                "{}: row {}: macs_norm {macs_norm} inconsistent with {macs}/{m0}",
                path.display(),
                i + 2
            )));
        }
        entries.push(ArchiveEntry {
            bits,
            loss,
            macs_norm,
            macs,
            front_rank,
        });
    }
    Ok(ParetoArchive {
        entries,
        history: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub m_t: f64,
    pub realized_macs: u64,
    pub macs_norm: f64,
    pub accuracy: f64,
    pub genome_hex: String,
}

pub fn write_eval(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{:?},{},{:?},{:?},{}",
                r.m_t, r.realized_macs, r.macs_norm, r.accuracy, r.genome_hex
            )
        })
        .collect();
    write_lines(path, EVAL_HEADER, &lines)
}

pub fn read_eval(path: &Path) -> Result<Vec<EvalRow>> {
    let mut out = Vec::new();
    for (i, row) in read_rows(path, EVAL_HEADER)?.into_iter().enumerate() {
        let bad = |what: &str, val: &str| {
            CliError::Data(format!(
                "{}: row {}: bad {what} {val:?}",
                path.display(),
                i + 2
            ))
        };
        out.push(EvalRow {
            m_t: row[0].parse().map_err(|_| bad("m_t", &row[0]))?,
            realized_macs: row[1].parse().map_err(|_| bad("realized_macs", &row[1]))?,
            macs_norm: row[2].parse().map_err(|_| bad("macs_norm", &row[2]))?,
            accuracy: row[3].parse().map_err(|_| bad("accuracy", &row[3]))?,
            genome_hex: row[4].clone(),
        });
    }
    Ok(out)
}

/// One row per front point per generation, preceded by the generation's
/// scalar counters (repeated across its rows for flat re-parsing).
pub fn write_history(path: &Path, archive: &ParetoArchive) -> Result<()> {
    let mut rows = Vec::new();
    for g in &archive.history {
        for &(macs_norm, loss) in &g.front {
            rows.push(format!(
                "{},{},{},{:?},{:?},{:?}",
                g.generation, g.evaluations, g.nonfinite, g.best_loss, macs_norm, loss
            ));
        }
    }
    write_lines(path, HISTORY_HEADER, &rows)
}
