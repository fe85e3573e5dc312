//! Line-delimited text records: JSON lines for metrics and samples, TSV for
//! NFE sweeps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CategoricalDataset, State, SweepEntry};
use crate::error::Result;
use crate::io::write_atomic;

/// One generated state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub state: State,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

pub fn sample_records(ds: &CategoricalDataset, states: &[State], rewards: Option<&[f64]>) -> Vec<SampleRecord> {
    states
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRecord { index: i, state: s.clone(), valid: ds.is_valid(s), reward: rewards.map(|r| r[i]) })
        .collect()
}

/// Serializes `items` one JSON document per line.
pub fn to_json_lines<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_json_lines(items)?.as_bytes())
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Appends one JSON line per record as training progresses.
pub struct JsonLinesWriter {
    inner: BufWriter<File>,
}

impl JsonLinesWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonLinesWriter { inner: BufWriter::new(File::create(path)?) })
    }

    pub fn write<T: Serialize>(&mut self, item: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, item)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        self.inner.get_ref().sync_all()?;
        Ok(())
    }
}

/// One row of an NFE sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sampler: String,
    pub nfe: usize,
    pub samples: usize,
    pub tv: f64,
    pub validity: f64,
    pub validity_lo: f64,
    pub validity_hi: f64,
    pub entropy: f64,
}

impl From<&SweepEntry> for SweepRow {
    fn from(e: &SweepEntry) -> Self {
        let r = &e.report;
        SweepRow {
            sampler: e.sampler.name().into(),
            nfe: e.nfe,
            samples: r.samples,
            tv: r.tv,
            validity: r.validity_rate,
            validity_lo: r.validity_ci.0,
            validity_hi: r.validity_ci.1,
            entropy: r.empirical_entropy,
        }
    }
}

pub const SWEEP_COLUMNS: [&str; 8] = ["sampler", "nfe", "samples", "tv", "validity", "validity_lo", "validity_hi", "entropy"];

/// Tab-separated table with a header row.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.sampler, r.nfe, r.samples, r.tv, r.validity, r.validity_lo, r.validity_hi, r.entropy
        ));
    }
    out
}
