//! Width normalization, a word-level vocabulary, and lexicon-driven word
//! segmentation with category tags.

mod segment;
mod vocab;

pub use segment::{segment_and_tag, Category, TagLexicon};
pub use vocab::{build_vocab, detokenize, tokenize, Vocab};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("vocabulary size {size} leaves no room beyond the {specials} special tokens")]
    VocabTooSmall { size: usize, specials: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps full-width ASCII variants (U+FF01..=U+FF5E) to their half-width
/// forms and the ideographic space to a plain space.
pub fn normalize_width(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
            '\u{3000}' => ' ',
            _ => c,
        })
        .collect()
}

/// One lexical unit of raw text as seen by the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Piece<'a> {
    Word(&'a str),
    Space,
    Newline,
}

/// Splits text into maximal alphanumeric runs, single punctuation
/// characters, and one layout piece per whitespace character. `\r` is
/// dropped so CRLF input lexes like LF input.
pub(crate) fn lex(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c == '\n' {
            out.push(Piece::Newline);
        } else if c == '\r' {
        } else if c.is_whitespace() {
            out.push(Piece::Space);
        } else if c.is_alphanumeric() {
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = iter.peek() {
                if !d.is_alphanumeric() {
                    break;
                }
                end = j + d.len_utf8();
                iter.next();
            }
            out.push(Piece::Word(&text[i..end]));
        } else {
            out.push(Piece::Word(&text[i..i + c.len_utf8()]));
        }
    }
    out
}
