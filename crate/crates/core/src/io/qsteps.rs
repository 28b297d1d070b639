use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Parses one positive decimal per line. Blank lines are ignored. When `n`
/// is given the count must match.
pub fn parse_qsteps(text: &str, n: Option<usize>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Qsteps(format!("line {}: `{s}` is not a number", line_no + 1)))?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Qsteps(format!("line {}: step {v} is not positive", line_no + 1)));
        }
        out.push(v);
    }
    if let Some(n) = n {
        if out.len() != n {
            return Err(Error::Qsteps(format!("expected {n} steps, found {}", out.len())));
        }
    }
    Ok(out)
}

pub fn read_qsteps(path: impl AsRef<Path>, n: Option<usize>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qsteps(&text, n).map_err(|e| match e {
        Error::Qsteps(msg) => Error::Qsteps(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_qsteps(qsteps: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(v) = qsteps.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Qsteps(format!("step {v} is not positive")));
    }
    let mut text = String::with_capacity(qsteps.len() * 4);
    for v in qsteps {
        text.push_str(&format!("{v}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
