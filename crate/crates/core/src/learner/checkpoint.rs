//! Checkpoint files: a single JSON object
//! `{"format":"cmr-checkpoint","version":1,"arch":..,"d":..,"k":..,"theta":[..],"optimizer":{"m":[..],"v":[..],"step":..}}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{AdamState, Arch, LearnerState};
use crate::error::{Error, Result};
use crate::jsonl::Line;

pub const FORMAT: &str = "cmr-checkpoint";
pub const VERSION: u64 = 1;

#[derive(Serialize)]
struct Record<'a> {
    format: &'static str,
    version: u64,
    arch: Arch,
    d: usize,
    k: usize,
    theta: &'a [f64],
    optimizer: &'a AdamState,
}

pub fn write_checkpoint<W: Write>(state: &LearnerState, mut out: W) -> Result<()> {
    let rec = Record {
        format: FORMAT,
        version: VERSION,
        arch: state.arch,
        d: state.d,
        k: state.k,
        theta: &state.theta,
        optimizer: &state.optimizer,
    };
    serde_json::to_writer(&mut out, &rec)?;
    out.write_all(b"\n").map_err(|e| Error::io("<checkpoint writer>", e))
}

pub fn save_checkpoint(state: &LearnerState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(state, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(text: &str, source: &str) -> Result<LearnerState> {
    let line = Line { source, number: 1 };
    let map = line.object(text.trim())?;
    line.expect_format(&map, FORMAT, VERSION)?;
    let arch: Arch = line.typed(&map, "arch")?;
    let d = line.usize(&map, "d")?;
    let k = line.usize(&map, "k")?;
    if d == 0 || k < 2 {
        return Err(line.err("k", "need d >= 1 and k >= 2"));
    }
    let expected = match arch {
        Arch::Softmax => k.checked_mul(d).and_then(|v| v.checked_add(k)),
        Arch::Hidden { width } => width
            .checked_mul(d)
            .and_then(|v| v.checked_add(width))
            .and_then(|v| v.checked_add(k.checked_mul(width)?))
            .and_then(|v| v.checked_add(k)),
    }
    .ok_or_else(|| line.err("arch", "parameter count overflows"))?;
    let theta = line.f64_array(&map, "theta")?;
    if theta.len() != expected {
        return Err(line.err(
            "theta",
            format!("{} parameters, architecture needs {expected}", theta.len()),
        ));
    }
    let optimizer: AdamState = line.typed(&map, "optimizer")?;
    if optimizer.m.len() != expected || optimizer.v.len() != expected {
        return Err(line.err("optimizer", "moment vectors do not match theta"));
    }
    if optimizer.m.iter().chain(&optimizer.v).any(|x| !x.is_finite()) {
        return Err(line.err("optimizer", "non-finite moment"));
    }
    Ok(LearnerState {
        arch,
        d,
        k,
        theta,
        optimizer,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LearnerState> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, &path.display().to_string())
}
