//! Summary scoring: ROUGE-1/2/L F1 and category-wise word precision, plus
//! seed aggregation and a plain-text comparison table.

mod rouge;

pub use rouge::{f1, lcs_len, rouge_l, rouge_n, RougeScore};

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::text::{normalize_width, segment_and_tag, Category, TagLexicon};

/// Words used for scoring: width-normalized, lexicon-segmented, whitespace
/// dropped.
pub fn eval_words(text: &str, lexicon: &TagLexicon) -> Vec<String> {
    segment_and_tag(&normalize_width(text), lexicon)
        .into_iter()
        .map(|(w, _)| w)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryPrecision {
    pub generated: u64,
    pub matched: u64,
    /// `None` when nothing of this category was generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
}

impl CategoryPrecision {
    fn from_counts(generated: u64, matched: u64) -> Self {
        CategoryPrecision {
            generated,
            matched,
            precision: (generated > 0).then(|| matched as f64 / generated as f64),
        }
    }
}

/// Per-category precision of generated words against the gold summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WordPrecisionReport {
    pub categories: BTreeMap<Category, CategoryPrecision>,
}

impl Default for WordPrecisionReport {
    fn default() -> Self {
        WordPrecisionReport {
            categories: Category::ALL
                .into_iter()
                .map(|c| (c, CategoryPrecision::default()))
                .collect(),
        }
    }
}

impl WordPrecisionReport {
    pub fn get(&self, category: Category) -> CategoryPrecision {
        self.categories.get(&category).copied().unwrap_or_default()
    }

    pub fn precision(&self, category: Category) -> Option<f64> {
        self.get(category).precision
    }

    /// Pools counts; precision is recomputed from the pooled counts.
    pub fn merge(&mut self, other: &WordPrecisionReport) {
        for c in Category::ALL {
            let a = self.get(c);
            let b = other.get(c);
            self.categories.insert(
                c,
                CategoryPrecision::from_counts(a.generated + b.generated, a.matched + b.matched),
            );
        }
    }

    /// Pooled precision over several categories.
    pub fn pooled(&self, categories: &[Category]) -> Option<f64> {
        let (g, m) = categories.iter().fold((0, 0), |(g, m), c| {
            let p = self.get(*c);
            (g + p.generated, m + p.matched)
        });
        (g > 0).then(|| m as f64 / g as f64)
    }
}

/// A generated word counts as correct when its surface form occurs anywhere
/// in the gold summary. Every generated occurrence is counted.
pub fn word_precision(candidate: &str, gold: &str, lexicon: &TagLexicon) -> WordPrecisionReport {
    let gold_words: HashSet<String> = eval_words(gold, lexicon).into_iter().collect();
    let mut counts: BTreeMap<Category, (u64, u64)> = BTreeMap::new();
    for (word, cat) in segment_and_tag(&normalize_width(candidate), lexicon) {
        let e = counts.entry(cat).or_default();
        e.0 += 1;
        if gold_words.contains(&word) {
            e.1 += 1;
        }
    }
    let mut report = WordPrecisionReport::default();
    for (cat, (g, m)) in counts {
        report
            .categories
            .insert(cat, CategoryPrecision::from_counts(g, m));
    }
    report
}

/// Sample standard deviations across seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: f64,
    pub word_precision: BTreeMap<Category, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub cases: usize,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
    pub word_precision: WordPrecisionReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<MetricSpread>,
}

fn mean_score(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Scores `(candidate, gold)` pairs. ROUGE is averaged per case; word
/// precision pools counts over all cases.
pub fn score_corpus<S: AsRef<str>>(pairs: &[(S, S)], lexicon: &TagLexicon) -> EvalReport {
    let mut r1 = Vec::with_capacity(pairs.len());
    let mut r2 = Vec::with_capacity(pairs.len());
    let mut rl = Vec::with_capacity(pairs.len());
    let mut wp = WordPrecisionReport::default();
    for (cand, gold) in pairs {
        let c = eval_words(cand.as_ref(), lexicon);
        let g = eval_words(gold.as_ref(), lexicon);
        r1.push(rouge_n(&c, &g, 1));
        r2.push(rouge_n(&c, &g, 2));
        rl.push(rouge_l(&c, &g));
        wp.merge(&word_precision(cand.as_ref(), gold.as_ref(), lexicon));
    }
    EvalReport {
        seed: None,
        cases: pairs.len(),
        rouge1: mean_score(&r1),
        rouge2: mean_score(&r2),
        rouge_l: mean_score(&rl),
        word_precision: wp,
        seeds: Vec::new(),
        std: None,
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Seed average. Every metric is the arithmetic mean over runs; word
/// precision is the mean of the per-run precisions (runs where a category
/// was never generated are skipped) while counts are summed.
pub fn aggregate(runs: &[EvalReport]) -> EvalReport {
    let flat: Vec<EvalReport> = runs
        .iter()
        .map(|r| EvalReport {
            seeds: Vec::new(),
            std: None,
            ..r.clone()
        })
        .collect();
    let pick = |f: fn(&EvalReport) -> RougeScore| -> Vec<RougeScore> { flat.iter().map(f).collect() };
    let r1 = pick(|r| r.rouge1);
    let r2 = pick(|r| r.rouge2);
    let rl = pick(|r| r.rouge_l);

    let mut wp = WordPrecisionReport::default();
    let mut wp_std = BTreeMap::new();
    for c in Category::ALL {
        let generated = flat.iter().map(|r| r.word_precision.get(c).generated).sum();
        let matched = flat.iter().map(|r| r.word_precision.get(c).matched).sum();
        let defined: Vec<f64> = flat.iter().filter_map(|r| r.word_precision.precision(c)).collect();
        let precision = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        wp.categories.insert(
            c,
            CategoryPrecision {
                generated,
                matched,
                precision,
            },
        );
        wp_std.insert(c, sample_std(&defined));
    }
    let f1s = |v: &[RougeScore]| v.iter().map(|s| s.f1).collect::<Vec<_>>();
    EvalReport {
        seed: None,
        cases: flat.first().map_or(0, |r| r.cases),
        rouge1: mean_score(&r1),
        rouge2: mean_score(&r2),
        rouge_l: mean_score(&rl),
        word_precision: wp,
        std: Some(MetricSpread {
            rouge1_f1: sample_std(&f1s(&r1)),
            rouge2_f1: sample_std(&f1s(&r2)),
            rouge_l_f1: sample_std(&f1s(&rl)),
            word_precision: wp_std,
        }),
        seeds: flat,
    }
}

/// Fixed column set of the comparison table.
pub const TABLE_COLUMNS: [&str; 8] = [
    "R-1", "R-2", "R-L", "Numeral", "Symbol", "Disease", "Symptom", "Other",
];

fn table_values(r: &EvalReport) -> [Option<f64>; 8] {
    let wp = |c| r.word_precision.precision(c).map(|p| p * 100.0);
    [
        Some(r.rouge1.f1 * 100.0),
        Some(r.rouge2.f1 * 100.0),
        Some(r.rouge_l.f1 * 100.0),
        wp(Category::Numeral),
        wp(Category::Symbol),
        wp(Category::Disease),
        wp(Category::Symptom),
        wp(Category::Other),
    ]
}

/// Aligned text table, values in points (x100, two decimals). The best
/// value in each column carries a trailing `*`.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let values: Vec<[Option<f64>; 8]> = rows.iter().map(|(_, r)| table_values(r)).collect();
    let mut best = [None::<f64>; 8];
    for row in &values {
        for (b, v) in best.iter_mut().zip(row) {
            if let Some(v) = v {
                let rounded = (v * 100.0).round() / 100.0;
                *b = Some(b.map_or(rounded, |x: f64| x.max(rounded)));
            }
        }
    }
    let label_w = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .chain(["Model".len()])
        .max()
        .unwrap_or(5);
    let col_w = 9;
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "Model");
    for c in TABLE_COLUMNS {
        let _ = write!(out, " {c:>col_w$}");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(label_w + (col_w + 1) * TABLE_COLUMNS.len()));
    for ((label, _), row) in rows.iter().zip(&values) {
        let _ = write!(out, "{label:<label_w$}");
        for (v, b) in row.iter().zip(&best) {
            let cell = match v {
                Some(v) => {
                    let rounded = (v * 100.0).round() / 100.0;
                    let mark = if Some(rounded) == *b { "*" } else { " " };
                    format!("{rounded:.2}{mark}")
                }
                None => "- ".to_string(),
            };
            let _ = write!(out, " {cell:>col_w$}");
        }
        out.push('\n');
    }
    out
}
