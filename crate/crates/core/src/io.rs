//! Trace and table serialization: CSV with `#` header comments, the `TDCB`
//! binary batch format, and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::attack::Histogram;
use crate::power::PowerTrace;
use crate::tdc::TdcTrace;

const BATCH_MAGIC: &[u8; 4] = b"TDCB";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed data: {0}")]
    Malformed(String),
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), IoError> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| IoError::Io(e.error))?;
    Ok(())
}

fn with_comments(comments: &[(&str, String)], body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::new();
    for (k, v) in comments {
        out.extend_from_slice(format!("# {k}: {v}\n").as_bytes());
    }
    out.extend(body);
    out
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, IoError> {
    w.into_inner().map_err(|e| IoError::Io(e.into_error()))
}

/// Two-column CSV `<index_name>,<value_name>` preceded by comment lines.
pub fn series_csv(
    index_name: &str,
    value_name: &str,
    values: impl IntoIterator<Item = String>,
    comments: &[(&str, String)],
) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([index_name, value_name])?;
    for (i, v) in values.into_iter().enumerate() {
        w.write_record([i.to_string(), v])?;
    }
    Ok(with_comments(comments, finish(w)?))
}

pub fn power_trace_csv(trace: &PowerTrace, config_hash: &str) -> Result<Vec<u8>, IoError> {
    series_csv(
        "cycle",
        "power",
        trace.samples.iter().map(|p| format!("{p}")),
        &[("config-hash", config_hash.to_string())],
    )
}

pub fn tdc_trace_csv(trace: &TdcTrace, config_hash: &str) -> Result<Vec<u8>, IoError> {
    series_csv(
        "cycle",
        "hw",
        trace.hw.iter().map(|h| h.to_string()),
        &[("run-id", trace.run_id.to_string()), ("config-hash", config_hash.to_string())],
    )
}

pub fn f64_series_csv(value_name: &str, values: &[f64], comments: &[(&str, String)]) -> Result<Vec<u8>, IoError> {
    series_csv("cycle", value_name, values.iter().map(|v| format!("{v}")), comments)
}

/// Read back a two-column series written by [`series_csv`].
pub fn read_series_csv(bytes: &[u8]) -> Result<Vec<f64>, IoError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let idx: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| IoError::Malformed(format!("row {i}: bad index")))?;
        if idx != i {
            return Err(IoError::Malformed(format!("row {i} carries index {idx}")));
        }
        let v: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| IoError::Malformed(format!("row {i}: bad value")))?;
        out.push(v);
    }
    Ok(out)
}

pub fn histogram_csv(hist: &Histogram) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin", "lower", "upper", "count"])?;
    for (i, c) in hist.counts.iter().enumerate() {
        w.write_record([
            i.to_string(),
            format!("{}", hist.edges[i]),
            format!("{}", hist.edges[i + 1]),
            c.to_string(),
        ])?;
    }
    finish(w)
}

pub fn read_histogram_csv(bytes: &[u8]) -> Result<Histogram, IoError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let mut edges = Vec::new();
    let mut counts = Vec::new();
    for rec in r.deserialize::<(usize, f64, f64, usize)>() {
        let (_, lo, hi, c) = rec?;
        if edges.is_empty() {
            edges.push(lo);
        }
        edges.push(hi);
        counts.push(c);
    }
    Ok(Histogram { edges, counts })
}

/// `TDCB`, u32 run count, then 784 little-endian u16 per run.
pub fn encode_batch(traces: &[TdcTrace]) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::with_capacity(8 + traces.len() * crate::PIXELS * 2);
    out.extend_from_slice(BATCH_MAGIC);
    let n = u32::try_from(traces.len()).map_err(|_| IoError::Malformed("too many runs".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for t in traces {
        if t.hw.len() != crate::PIXELS {
            return Err(IoError::Malformed(format!("run {} has {} samples", t.run_id, t.hw.len())));
        }
        for h in &t.hw {
            out.extend_from_slice(&h.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_batch(bytes: &[u8]) -> Result<Vec<TdcTrace>, IoError> {
    if bytes.len() < 8 || &bytes[..4] != BATCH_MAGIC {
        return Err(IoError::Malformed("missing TDCB magic".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let per = crate::PIXELS * 2;
    let body = &bytes[8..];
    if body.len() != n * per {
        return Err(IoError::Malformed(format!("{} payload bytes for {n} runs", body.len())));
    }
    Ok(body
        .chunks_exact(per)
        .enumerate()
        .map(|(i, c)| TdcTrace {
            hw: c.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect(),
            run_id: i as u64,
        })
        .collect())
}

pub fn write_batch(path: impl AsRef<Path>, traces: &[TdcTrace]) -> Result<(), IoError> {
    write_atomic(path, &encode_batch(traces)?)
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<Vec<TdcTrace>, IoError> {
    decode_batch(&fs::read(path)?)
}
