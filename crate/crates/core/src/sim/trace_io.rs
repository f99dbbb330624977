//! JSON Lines trace and ground-truth files.
//!
//! Trace: a header line `{"format":"sifall-csi-v1","fs":200,"m":56,"c":3}`
//! followed by one `{"t":..,"seq":..,"h":[[[re,im],..M],..C]}` per frame.

use std::io::{BufRead, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CsiFrame, CsiMatrix, GroundTruthEvent, Trace};

pub const TRACE_FORMAT: &str = "sifall-csi-v1";

#[derive(Debug, thiserror::Error)]
pub enum TraceIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json at line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("bad header: {0}")]
    Header(String),
    #[error("frame {seq}: expected {m}x{c} matrix")]
    Shape { seq: u64, m: usize, c: usize },
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    t: f64,
    seq: u64,
    h: Vec<Vec<[f64; 2]>>,
}

fn number(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < 9e15 {
        json!(x as i64)
    } else {
        json!(x)
    }
}

pub fn write_trace<W: Write>(mut w: W, trace: &Trace) -> Result<(), TraceIoError> {
    writeln!(
        w,
        r#"{{"format":"{TRACE_FORMAT}","fs":{},"m":{},"c":{}}}"#,
        number(trace.sample_rate_hz),
        trace.subcarriers,
        trace.streams
    )?;
    for fr in &trace.frames {
        let h = (0..fr.h.streams)
            .map(|c| fr.h.stream(c).iter().map(|z| [z.re, z.im]).collect())
            .collect();
        let line = FrameLine {
            t: fr.timestamp,
            seq: fr.seq,
            h,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| TraceIoError::Json { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Trace, TraceIoError> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| TraceIoError::Header("empty file".into()))?;
    let header: Value = serde_json::from_str(&first?)
        .map_err(|e| TraceIoError::Json { line: 1, source: e })?;
    if header["format"] != TRACE_FORMAT {
        return Err(TraceIoError::Header(format!("format {}", header["format"])));
    }
    let fs = header["fs"].as_f64().ok_or_else(|| TraceIoError::Header("fs".into()))?;
    let m = header["m"].as_u64().ok_or_else(|| TraceIoError::Header("m".into()))? as usize;
    let c = header["c"].as_u64().ok_or_else(|| TraceIoError::Header("c".into()))? as usize;
    let mut frames = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fl: FrameLine = serde_json::from_str(&line)
            .map_err(|e| TraceIoError::Json { line: i + 1, source: e })?;
        if fl.h.len() != c || fl.h.iter().any(|row| row.len() != m) {
            return Err(TraceIoError::Shape { seq: fl.seq, m, c });
        }
        let data = fl
            .h
            .iter()
            .flat_map(|row| row.iter().map(|&[re, im]| Complex64::new(re, im)))
            .collect();
        frames.push(CsiFrame {
            timestamp: fl.t,
            seq: fl.seq,
            h: CsiMatrix {
                subcarriers: m,
                streams: c,
                data,
            },
        });
    }
    Ok(Trace {
        sample_rate_hz: fs,
        subcarriers: m,
        streams: c,
        frames,
    })
}

pub fn write_truth<W: Write>(mut w: W, truth: &[GroundTruthEvent]) -> Result<(), TraceIoError> {
    for ev in truth {
        serde_json::to_writer(&mut w, ev).map_err(|e| TraceIoError::Json { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_truth<R: BufRead>(r: R) -> Result<Vec<GroundTruthEvent>, TraceIoError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| TraceIoError::Json { line: i + 1, source: e })?,
        );
    }
    Ok(out)
}
