//! Plain-text gradient files: one example per line, whitespace-separated
//! reals, with an optional `d=<int>` first line. Blank lines and `#`
//! comments are skipped.

use std::fmt::Write as _;

use dpclip_core::PerExampleGradients;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GradFileError {
    #[error("line {line}: cannot parse {token:?} as a real number")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: bad header {text:?}, expected d=<int>")]
    BadHeader { line: usize, text: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("line {line}: non-finite value")]
    NonFinite { line: usize },
    #[error("no gradients and no d=<int> header")]
    Empty,
}

pub fn parse(text: &str) -> Result<PerExampleGradients, GradFileError> {
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if first {
            first = false;
            if let Some(rest) = line.strip_prefix("d=") {
                let d = rest.trim().parse::<usize>().ok().filter(|&d| d > 0);
                dim = Some(d.ok_or_else(|| GradFileError::BadHeader {
                    line: line_no,
                    text: line.to_string(),
                })?);
                continue;
            }
        }
        let start = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| GradFileError::BadNumber {
                line: line_no,
                token: tok.to_string(),
            })?;
            if !v.is_finite() {
                return Err(GradFileError::NonFinite { line: line_no });
            }
            data.push(v);
        }
        let found = data.len() - start;
        match dim {
            None => dim = Some(found),
            Some(expected) if expected != found => {
                return Err(GradFileError::Ragged {
                    line: line_no,
                    expected,
                    found,
                })
            }
            _ => {}
        }
    }
    let dim = dim.ok_or(GradFileError::Empty)?;
    Ok(PerExampleGradients::from_flat(dim, data).expect("validated rows"))
}

pub fn render(grads: &PerExampleGradients) -> String {
    let mut s = format!("d={}\n", grads.dim());
    for row in grads.rows() {
        let mut sep = "";
        for v in row {
            let _ = write!(s, "{sep}{v}");
            sep = " ";
        }
        s.push('\n');
    }
    s
}
