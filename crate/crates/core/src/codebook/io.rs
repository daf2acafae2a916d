//! Codebook text serialization.
//!
//! A single text document: `key: value` header lines, then one codeword
//! (nested) or one difference pair (progressive) per line. Values carry
//! 9 significant digits so a 32-bit round trip is bit-identical.

use std::fs;
use std::path::Path;

use super::{CodebookError, NestedCodebook, ProgressiveCodebook};
use crate::textfmt::{f32_sig9, header_kv, parse_floats};

#[derive(Debug, Clone, PartialEq)]
pub enum CodebookFile {
    Nested(NestedCodebook<f32>),
    Progressive(ProgressiveCodebook<f32>),
}

impl CodebookFile {
    pub fn dim(&self) -> usize {
        match self {
            CodebookFile::Nested(cb) => cb.dim(),
            CodebookFile::Progressive(cb) => cb.dim(),
        }
    }

    pub fn max_level(&self) -> u8 {
        match self {
            CodebookFile::Nested(cb) => cb.max_level(),
            CodebookFile::Progressive(cb) => cb.max_level(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("format_version: 1\n");
        match self {
            CodebookFile::Nested(cb) => {
                out.push_str("mode: nested\n");
                out.push_str(&format!("dim: {}\n", cb.dim()));
                out.push_str(&format!("max_level: {}\n", cb.max_level()));
                out.push_str("codewords:\n");
                for k in 0..cb.size() {
                    let row: Vec<String> = cb.codeword(k).iter().map(|&v| f32_sig9(v)).collect();
                    out.push_str(&row.join(" "));
                    out.push('\n');
                }
            }
            CodebookFile::Progressive(cb) => {
                out.push_str("mode: progressive\n");
                out.push_str(&format!("dim: {}\n", cb.dim()));
                out.push_str(&format!("max_level: {}\n", cb.max_level()));
                out.push_str("difference_pairs:\n");
                for l in 1..=cb.max_level() {
                    let (e1, e2) = cb.pair(l);
                    let vals: Vec<String> =
                        e1.iter().chain(e2.iter()).map(|&v| f32_sig9(v)).collect();
                    out.push_str(&vals.join(" "));
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CodebookError> {
        let mut lines = text.lines();
        let mut version = None;
        let mut mode = None;
        let mut dim = None;
        let mut max_level = None;
        let mut body_tag = None;
        for line in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match header_kv(line) {
                Some(("format_version", v)) => version = Some(v.to_string()),
                Some(("mode", v)) => mode = Some(v.to_string()),
                Some(("dim", v)) => {
                    dim = Some(v.parse::<usize>().map_err(|e| CodebookError::Io(e.to_string()))?)
                }
                Some(("max_level", v)) => {
                    max_level =
                        Some(v.parse::<u8>().map_err(|e| CodebookError::Io(e.to_string()))?)
                }
                Some(("codewords", _)) => {
                    body_tag = Some("codewords");
                    break;
                }
                Some(("difference_pairs", _)) => {
                    body_tag = Some("difference_pairs");
                    break;
                }
                _ => return Err(CodebookError::Io(format!("unexpected header line {line:?}"))),
            }
        }
        if version.as_deref() != Some("1") {
            return Err(CodebookError::Io(format!(
                "unsupported format_version {version:?}"
            )));
        }
        let dim = dim.ok_or_else(|| CodebookError::Io("missing dim".into()))?;
        let max_level = max_level.ok_or_else(|| CodebookError::Io("missing max_level".into()))?;
        let mode = mode.ok_or_else(|| CodebookError::Io("missing mode".into()))?;

        let rows: Vec<Vec<f32>> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_floats(l).map_err(CodebookError::Io))
            .collect::<Result<_, _>>()?;

        match (mode.as_str(), body_tag) {
            ("nested", Some("codewords")) => {
                let expect = 1usize << max_level;
                if rows.len() != expect {
                    return Err(CodebookError::Io(format!(
                        "expected {expect} codeword rows, found {}",
                        rows.len()
                    )));
                }
                let mut flat = Vec::with_capacity(expect * dim);
                for row in &rows {
                    if row.len() != dim {
                        return Err(CodebookError::Io(format!(
                            "codeword row has {} values, expected {dim}",
                            row.len()
                        )));
                    }
                    flat.extend_from_slice(row);
                }
                Ok(CodebookFile::Nested(NestedCodebook::new(dim, max_level, flat)?))
            }
            ("progressive", Some("difference_pairs")) => {
                if rows.len() != max_level as usize {
                    return Err(CodebookError::Io(format!(
                        "expected {max_level} difference pairs, found {}",
                        rows.len()
                    )));
                }
                let mut pairs = Vec::with_capacity(rows.len());
                for row in &rows {
                    if row.len() != 2 * dim {
                        return Err(CodebookError::Io(format!(
                            "difference pair row has {} values, expected {}",
                            row.len(),
                            2 * dim
                        )));
                    }
                    pairs.push((row[..dim].to_vec(), row[dim..].to_vec()));
                }
                Ok(CodebookFile::Progressive(ProgressiveCodebook::new(dim, pairs)?))
            }
            _ => Err(CodebookError::Io(format!(
                "mode {mode:?} does not match body section {body_tag:?}"
            ))),
        }
    }
}

pub fn save_codebook(path: &Path, file: &CodebookFile) -> Result<(), CodebookError> {
    fs::write(path, file.to_text()).map_err(|e| CodebookError::Io(format!("{path:?}: {e}")))
}

pub fn load_codebook(path: &Path) -> Result<CodebookFile, CodebookError> {
    let text = fs::read_to_string(path).map_err(|e| CodebookError::Io(format!("{path:?}: {e}")))?;
    CodebookFile::from_text(&text)
}
