//! CSV and JSON writers for analysis results. Output is a pure function of
//! the value written: '.' decimals, '\n' line endings, UTF-8.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::analytics::{DiffHistogram, GapMetric, NamedHistogram, PositionStats, TeacherRanking, TokenMarker};
use crate::beta::BetaSearchReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub trait Report: Serialize {
    fn write_csv(&self, w: &mut dyn Write) -> Result<()>;

    fn write_json(&self, w: &mut dyn Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

pub fn emit_report<R: Report + ?Sized>(report: &R, format: Format, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => report.write_csv(&mut w)?,
        Format::Json => report.write_json(&mut w)?,
    }
    w.flush()?;
    Ok(())
}

impl Report for PositionStats {
    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let labels = self.mode.labels();
        let names: Vec<&str> = labels.iter().map(|l| l.as_str()).collect();
        writeln!(
            w,
            "position,support,low_support,{},mean_tokens,cum_mean_tokens",
            names.join(",")
        )?;
        for row in &self.rows {
            write!(w, "{},{},{}", row.position, row.support, row.low_support)?;
            for label in labels {
                write!(w, ",{}", row.proportion(*label))?;
            }
            writeln!(w, ",{},{}", row.mean_tokens, row.cum_mean_tokens)?;
        }
        Ok(())
    }
}

impl Report for DiffHistogram {
    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "bin_lo,bin_hi,mass")?;
        for b in &self.bins {
            writeln!(w, "{},{},{}", b.lo, b.hi, b.mass)?;
        }
        Ok(())
    }
}

impl Report for [NamedHistogram] {
    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "name,bin_lo,bin_hi,mass")?;
        for h in self {
            for b in &h.histogram.bins {
                writeln!(w, "{},{},{},{}", h.name, b.lo, b.hi, b.mass)?;
            }
        }
        Ok(())
    }
}

impl Report for GapMetric {
    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "k,value")?;
        writeln!(w, "{},{}", self.k, self.value)?;
        Ok(())
    }

    fn write_json(&self, w: &mut dyn Write) -> Result<()> {
        serde_json::to_writer(&mut *w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

impl Report for [TokenMarker] {
    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "threshold,position")?;
        for m in self {
            writeln!(w, "{},{}", m.threshold, m.position)?;
        }
        Ok(())
    }
}

impl Report for TeacherRanking {
    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "rank,candidate,mean_teacher,mean_student,trajectories")?;
        for (i, c) in self.ranking.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                i + 1,
                c.name,
                c.mean_teacher,
                c.mean_student,
                c.trajectories
            )?;
        }
        Ok(())
    }
}

impl Report for BetaSearchReport {
    fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "beta,overlap_sc,overlap_ct,total_overlap,mean_common,mean_teacher")?;
        for e in &self.per_beta {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.beta, e.overlap_sc, e.overlap_ct, e.total_overlap, e.mean_common, e.mean_teacher
            )?;
        }
        Ok(())
    }
}
