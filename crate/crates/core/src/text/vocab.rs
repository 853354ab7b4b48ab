use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::{lex, normalize_width, Piece, TextError};

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const SPACE: &str = "<sp>";
const NEWLINE: &str = "<nl>";

/// Word-level vocabulary.
///
/// Ids `0..4` are `<pad>`, `<s>`, `</s>`, `<unk>`; ranked words follow; the
/// two layout tokens for a space and a line break are appended last, so a
/// vocabulary built with `target_size` words-plus-specials holds
/// `target_size + 2` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;

    fn from_words(words: Vec<String>) -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .chain([SPACE.to_string(), NEWLINE.to_string()])
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn space(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn newline(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// One token per line; the line number is the id.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, TextError> {
        let lines: Vec<String> = r.lines().collect::<Result<_, _>>()?;
        if lines.len() < SPECIALS.len() + 2 {
            return Err(TextError::Parse {
                line: lines.len(),
                msg: "vocabulary file is truncated".into(),
            });
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines[i] != *s {
                return Err(TextError::Parse {
                    line: i + 1,
                    msg: format!("expected special token {s}, found {:?}", lines[i]),
                });
            }
        }
        let n = lines.len();
        if lines[n - 2] != SPACE || lines[n - 1] != NEWLINE {
            return Err(TextError::Parse {
                line: n - 1,
                msg: "vocabulary must end with the layout tokens".into(),
            });
        }
        let words = lines[SPECIALS.len()..n - 2].to_vec();
        let vocab = Vocab::from_words(words);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TextError::Parse {
                line: 0,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }
}

/// Frequency-ranked word vocabulary over the corpus. Ties break
/// lexicographically, so document order never matters.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab, TextError> {
    if corpus.is_empty() {
        return Err(TextError::Empty("corpus"));
    }
    if target_size <= SPECIALS.len() {
        return Err(TextError::VocabTooSmall {
            size: target_size,
            specials: SPECIALS.len(),
        });
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        let text = normalize_width(doc.as_ref());
        for piece in lex(&text) {
            if let Piece::Word(w) = piece {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words = ranked
        .into_iter()
        .take(target_size - SPECIALS.len())
        .map(|(w, _)| w)
        .collect();
    Ok(Vocab::from_words(words))
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    let text = normalize_width(text);
    lex(&text)
        .into_iter()
        .map(|p| match p {
            Piece::Word(w) => vocab.id(w).unwrap_or(Vocab::UNK),
            Piece::Space => vocab.space(),
            Piece::Newline => vocab.newline(),
        })
        .collect()
}

/// Inverse of [`tokenize`] for in-vocabulary text. `<pad>`, `<s>` and `</s>`
/// are dropped; `<unk>` is rendered literally.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == vocab.space() {
            out.push(' ');
        } else if id == vocab.newline() {
            out.push('\n');
        } else if id == Vocab::UNK {
            out.push_str(SPECIALS[Vocab::UNK]);
        } else if vocab.is_special(id) {
        } else if let Some(t) = vocab.token(id) {
            out.push_str(t);
        }
    }
    out
}
