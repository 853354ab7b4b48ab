use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TextError;

/// Word category used by the word-precision analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Numeral,
    Symbol,
    Disease,
    Symptom,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Numeral,
        Category::Symbol,
        Category::Disease,
        Category::Symptom,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Numeral => "numeral",
            Category::Symbol => "symbol",
            Category::Disease => "disease",
            Category::Symptom => "symptom",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

/// Dictionary of disease and symptom terms. Numerals and symbols are never
/// stored here; they come from character classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagLexicon {
    entries: BTreeMap<String, Category>,
    max_chars: usize,
    first_chars: HashSet<char>,
}

impl TagLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a term. Only [`Category::Disease`] and [`Category::Symptom`] are
    /// accepted; a word keeps its first category.
    pub fn insert(&mut self, word: &str, category: Category) -> Result<(), String> {
        if !matches!(category, Category::Disease | Category::Symptom) {
            return Err(format!("lexicon category must be disease or symptom, got {category}"));
        }
        let word = super::normalize_width(word.trim());
        let Some(first) = word.chars().next() else {
            return Err("empty lexicon word".into());
        };
        if let Some(existing) = self.entries.get(&word) {
            if *existing != category {
                return Err(format!("{word:?} is already tagged {existing}"));
            }
            return Ok(());
        }
        self.max_chars = self.max_chars.max(word.chars().count());
        self.first_chars.insert(first);
        self.entries.insert(word, category);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<Category> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Category)> {
        self.entries.iter().map(|(w, c)| (w.as_str(), *c))
    }

    /// `word<TAB>category` lines; blank lines and `#` comments are skipped.
    pub fn read_from(r: impl BufRead) -> Result<Self, TextError> {
        let mut lex = TagLexicon::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| TextError::Parse { line: i + 1, msg };
            let (word, cat) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected word<TAB>category".into()))?;
            let cat: Category = cat.parse().map_err(parse_err)?;
            lex.insert(word, cat).map_err(parse_err)?;
        }
        Ok(lex)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for (word, cat) in &self.entries {
            writeln!(w, "{word}\t{cat}")?;
        }
        Ok(())
    }

    fn longest_match(&self, chars: &[char], start: usize) -> Option<(usize, Category)> {
        if !self.first_chars.contains(&chars[start]) {
            return None;
        }
        let limit = self.max_chars.min(chars.len() - start);
        let mut buf: String = chars[start..start + limit].iter().collect();
        for len in (1..=limit).rev() {
            if let Some(&cat) = self.entries.get(&buf) {
                return Some((len, cat));
            }
            buf.pop();
        }
        None
    }
}

/// Greedy segmentation. At each non-space position the longest lexicon entry
/// wins; otherwise a digit run (with inner decimal points) is a numeral, an
/// alphanumeric run is `Other`, and any other single character is a symbol.
pub fn segment_and_tag(text: &str, lexicon: &TagLexicon) -> Vec<(String, Category)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if let Some((len, cat)) = lexicon.longest_match(&chars, i) {
            out.push((chars[i..i + len].iter().collect(), cat));
            i += len;
            continue;
        }
        let start = i;
        let cat = if c.is_ascii_digit() {
            i += 1;
            while i < chars.len()
                && (chars[i].is_ascii_digit()
                    || (chars[i] == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit)))
            {
                i += 1;
            }
            Category::Numeral
        } else if c.is_alphanumeric() {
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            Category::Other
        } else {
            i += 1;
            Category::Symbol
        };
        out.push((chars[start..i].iter().collect(), cat));
    }
    out
}
