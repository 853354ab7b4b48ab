use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

/// One hospitalization: progress notes, the gold discharge summary, and the
/// structured metadata. Any metadata field may be missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: u32,
    pub hospital: Option<String>,
    pub physician: Option<String>,
    pub disease_name: Option<String>,
    pub icd10: Option<String>,
    pub stay_days: Option<u32>,
    pub source: String,
    pub summary: String,
}

impl Case {
    /// A case with text only and every metadata field missing.
    pub fn bare(case_id: u32, source: impl Into<String>, summary: impl Into<String>) -> Self {
        Case {
            case_id,
            hospital: None,
            physician: None,
            disease_name: None,
            icd10: None,
            stay_days: None,
            source: source.into(),
            summary: summary.into(),
        }
    }
}

/// Case ids per split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

/// One JSON object per line.
pub fn write_cases(mut w: impl Write, cases: &[Case]) -> io::Result<()> {
    for case in cases {
        serde_json::to_writer(&mut w, case)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_cases(r: impl BufRead) -> io::Result<Vec<Case>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(case);
    }
    Ok(out)
}
