use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::MetadataError;
use crate::text::normalize_width;

/// Disease name to ICD-10 code, used when a case lacks its code.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseLexicon {
    codes: BTreeMap<String, String>,
}

impl DiseaseLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, code: &str) -> Result<(), MetadataError> {
        icd10_prefix_id(code)?;
        self.codes
            .insert(normalize_width(name.trim()), code.trim().to_string());
        Ok(())
    }

    pub fn code(&self, name: &str) -> Option<&str> {
        self.codes.get(&normalize_width(name.trim())).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// `name<TAB>icd10_code` lines.
    pub fn read_from(r: impl BufRead) -> Result<Self, MetadataError> {
        let mut lex = DiseaseLexicon::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| MetadataError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, code) = line.split_once('\t').ok_or_else(|| MetadataError::Parse {
                line: i + 1,
                msg: "expected name<TAB>icd10_code".into(),
            })?;
            lex.insert(name, code).map_err(|e| MetadataError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(lex)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for (name, code) in &self.codes {
            writeln!(w, "{name}\t{code}")?;
        }
        Ok(())
    }
}

/// A disease given either as a code or by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiseaseRef<'a> {
    Code(&'a str),
    Name(&'a str),
}

/// Letter-major index of the three-character category: `A00 -> 1`,
/// `A05 -> 6`, `Z99 -> 2600`. Anything after the third character is ignored
/// as long as it is made of letters, digits, `.` or `-`.
pub fn icd10_prefix_id(code: &str) -> Result<u16, MetadataError> {
    let norm = normalize_width(code.trim());
    let bad = || MetadataError::Format(code.to_string());
    let mut chars = norm.chars();
    let (Some(l), Some(d1), Some(d2)) = (chars.next(), chars.next(), chars.next()) else {
        return Err(bad());
    };
    if !l.is_ascii_alphabetic() || !d1.is_ascii_digit() || !d2.is_ascii_digit() {
        return Err(bad());
    }
    if !chars.all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-') {
        return Err(bad());
    }
    let letter = (l.to_ascii_uppercase() as u8 - b'A') as u16;
    let tens = d1 as u16 - '0' as u16;
    let ones = d2 as u16 - '0' as u16;
    Ok(letter * 100 + tens * 10 + ones + 1)
}

/// Inverse of [`icd10_prefix_id`] on `1..=2600`.
pub fn decode_icd10(id: u16) -> Option<String> {
    if !(1..=2600).contains(&id) {
        return None;
    }
    let k = id - 1;
    let letter = (b'A' + (k / 100) as u8) as char;
    Some(format!("{letter}{:02}", k % 100))
}

/// Disease feature id. Codes must be well formed; names go through the
/// lexicon and resolve to 0 when unknown.
pub fn encode_icd10(disease: DiseaseRef<'_>, lexicon: &DiseaseLexicon) -> Result<u16, MetadataError> {
    match disease {
        DiseaseRef::Code(code) => icd10_prefix_id(code),
        DiseaseRef::Name(name) => match lexicon.code(name) {
            Some(code) => icd10_prefix_id(code),
            None => Ok(0),
        },
    }
}
