//! Synthetic corpus in which each metadata field controls one part of the
//! summary, with a tunable coupling strength per field.
//!
//! A summary reads `{bullet} {header} {disease} {symptom} {drug} {dose}
//! {stay word}{punct}`. The bullet and closing punctuation follow the
//! hospital, the header follows the physician, the disease and symptom
//! follow the disease, and the stay word follows the length of stay. With
//! coupling `c` a field's true value drives its part with probability `c`;
//! otherwise a uniformly drawn value does. The progress notes are written
//! from the same effective disease, so the notes never reveal the metadata
//! beyond what the summary does.

mod terms;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{read_cases, write_cases, Case, Splits};
use crate::metadata::{DiseaseLexicon, FeatureKind, GROUP_SIZE, MAX_STAY_DAYS};
use crate::text::{normalize_width, segment_and_tag, Category, TagLexicon};

use terms::{
    DAY_WORD, DISEASES, DOSES, FILLERS, GENERAL_DRUGS, HEADERS, HOSPITAL_STYLES, LABS, STAY_BOUNDS, STAY_WORDS,
};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("infeasible corpus spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Couplings {
    pub hospital: f64,
    pub physician: f64,
    pub disease: f64,
    pub stay: f64,
}

impl Default for Couplings {
    fn default() -> Self {
        Couplings::uniform(1.0)
    }
}

impl Couplings {
    pub fn uniform(c: f64) -> Self {
        Couplings {
            hospital: c,
            physician: c,
            disease: c,
            stay: c,
        }
    }

    pub fn get(&self, kind: FeatureKind) -> Option<f64> {
        match kind {
            FeatureKind::Hospital => Some(self.hospital),
            FeatureKind::Physician => Some(self.physician),
            FeatureKind::Disease => Some(self.disease),
            FeatureKind::LengthOfStay => Some(self.stay),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_cases: usize,
    pub n_hospitals: usize,
    pub n_physicians: usize,
    pub n_diseases: usize,
    /// Median of the log-normal length of stay, in days.
    pub stay_median: f64,
    /// Log-scale spread of the length of stay.
    pub stay_sigma: f64,
    pub couplings: Couplings,
    pub icd_missing_rate: f64,
    /// How often the notes name the disease or give one of its drugs.
    pub cue_rate: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_cases: 4000,
            n_hospitals: 5,
            n_physicians: 60,
            n_diseases: 20,
            stay_median: 9.0,
            stay_sigma: 0.9,
            couplings: Couplings::default(),
            icd_missing_rate: 0.1,
            cue_rate: 0.3,
            valid_fraction: 0.05,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

fn hospital_name(h: usize) -> String {
    format!("hospital-{}", (b'A' + h as u8) as char)
}

fn physician_name(h: usize, k: usize) -> String {
    format!("{}-{k:03}", (b'A' + h as u8) as char)
}

/// Stay bucket index into the stay words.
pub fn stay_bucket(days: u32) -> usize {
    STAY_BOUNDS.iter().position(|&b| days <= b).unwrap_or(STAY_BOUNDS.len())
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Infeasible(m));
        if self.n_cases == 0 {
            return bad("n_cases must be positive".into());
        }
        if !(1..=HOSPITAL_STYLES.len()).contains(&self.n_hospitals) {
            return bad(format!("n_hospitals must be in 1..={}", HOSPITAL_STYLES.len()));
        }
        if self.n_physicians < self.n_hospitals {
            return bad(format!(
                "{} physicians cannot staff {} hospitals",
                self.n_physicians, self.n_hospitals
            ));
        }
        let groups: usize = (0..self.n_hospitals)
            .map(|h| self.physicians_at(h).div_ceil(GROUP_SIZE))
            .sum();
        let capacity = FeatureKind::Physician.cardinality().unwrap_or(0);
        if groups > capacity {
            return bad(format!("{groups} physician groups exceed the table of {capacity}"));
        }
        if !(4..=DISEASES.len()).contains(&self.n_diseases) {
            return bad(format!("n_diseases must be in 4..={}", DISEASES.len()));
        }
        if !(self.stay_median >= 1.0 && self.stay_sigma >= 0.0) {
            return bad("stay_median must be >= 1 and stay_sigma >= 0".into());
        }
        let unit = [
            ("couplings.hospital", self.couplings.hospital),
            ("couplings.physician", self.couplings.physician),
            ("couplings.disease", self.couplings.disease),
            ("couplings.stay", self.couplings.stay),
            ("icd_missing_rate", self.icd_missing_rate),
            ("cue_rate", self.cue_rate),
            ("valid_fraction", self.valid_fraction),
            ("test_fraction", self.test_fraction),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.valid_fraction + self.test_fraction >= 1.0 {
            return bad("valid and test fractions leave no training data".into());
        }
        Ok(())
    }

    fn physicians_at(&self, h: usize) -> usize {
        self.n_physicians / self.n_hospitals + usize::from(h < self.n_physicians % self.n_hospitals)
    }

    /// `(valid, test)` sizes; each is the rounded fraction of `n_cases`.
    pub fn split_sizes(&self) -> (usize, usize) {
        let n = self.n_cases as f64;
        (
            (n * self.valid_fraction).round() as usize,
            (n * self.test_fraction).round() as usize,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub cases: Vec<Case>,
    /// Disease and symptom words for segmentation and word precision.
    pub lexicon: TagLexicon,
    /// Disease name to ICD-10 code, for cases whose code is missing.
    pub diseases: DiseaseLexicon,
    pub splits: Splits,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty")
}

/// The true value with probability `c`, else a uniform draw from `0..n`.
fn couple(rng: &mut ChaCha8Rng, truth: usize, n: usize, c: f64) -> usize {
    // both draws always happen so the stream layout is independent of c
    let fire = rng.gen::<f64>() < c;
    let other = rng.gen_range(0..n);
    if fire {
        truth
    } else {
        other
    }
}

struct World {
    habits: Vec<Vec<usize>>,
}

fn build_world(spec: &CorpusSpec) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let habits = (0..spec.n_hospitals)
        .map(|h| {
            (0..spec.physicians_at(h))
                .map(|_| rng.gen_range(0..HEADERS.len()))
                .collect()
        })
        .collect();
    World { habits }
}

fn make_case(spec: &CorpusSpec, world: &World, case_id: u32) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_id as u64);
    let c = &spec.couplings;

    let hospital = rng.gen_range(0..spec.n_hospitals);
    let physician = rng.gen_range(0..spec.physicians_at(hospital));
    let disease = rng.gen_range(0..spec.n_diseases);
    let stay_dist = LogNormal::new(spec.stay_median.ln(), spec.stay_sigma).expect("validated spread");
    let stay = (stay_dist.sample(&mut rng).round() as u32).clamp(1, MAX_STAY_DAYS);
    let code_missing = rng.gen::<f64>() < spec.icd_missing_rate;
    let subcode = rng.gen_range(0..10);

    let eff_hospital = couple(&mut rng, hospital, spec.n_hospitals, c.hospital);
    let eff_header = couple(&mut rng, world.habits[hospital][physician], HEADERS.len(), c.physician);
    let eff_disease = couple(&mut rng, disease, spec.n_diseases, c.disease);
    let eff_stay = couple(&mut rng, stay_bucket(stay), STAY_WORDS.len(), c.stay);

    let (disease_word, _, symptoms, drugs) = DISEASES[eff_disease];
    let symptom = *pick(&mut rng, &symptoms);
    let mut distractors: Vec<usize> = (0..spec.n_diseases).filter(|&d| d != eff_disease).collect();
    distractors.shuffle(&mut rng);
    let true_line = rng.gen_range(0..4);
    let cue_line = (rng.gen::<f64>() < spec.cue_rate).then(|| rng.gen_range(0..4));
    let cue_drug = rng.gen::<f64>() < spec.cue_rate;

    let mut lines = Vec::with_capacity(4);
    let mut first_drug = ("", 0);
    let mut distractor = distractors.into_iter();
    for line in 0..4 {
        let drug = if line == 0 && cue_drug {
            *pick(&mut rng, &drugs)
        } else {
            *pick(&mut rng, &GENERAL_DRUGS)
        };
        let dose = *pick(&mut rng, &DOSES);
        if line == 0 {
            first_drug = (drug, dose);
        }
        let lab = *pick(&mut rng, &LABS);
        let value = rng.gen_range(1..100) as f64 / 10.0;
        let sym = if line == true_line {
            symptom
        } else {
            let d = distractor.next().expect("at least four diseases");
            *pick(&mut rng, &DISEASES[d].2)
        };
        let filler = if cue_line == Some(line) {
            disease_word
        } else {
            *pick(&mut rng, &FILLERS)
        };
        lines.push(format!(
            "{DAY_WORD} {} {drug} {dose} {lab} {value:.1} {sym} {filler}",
            line + 1
        ));
    }

    let (bullet, punct) = HOSPITAL_STYLES[eff_hospital];
    let summary = format!(
        "{bullet} {} {disease_word} {symptom} {} {} {}{punct}",
        HEADERS[eff_header], first_drug.0, first_drug.1, STAY_WORDS[eff_stay]
    );
    let (name, code, _, _) = DISEASES[disease];
    Case {
        case_id,
        hospital: Some(hospital_name(hospital)),
        physician: Some(physician_name(hospital, physician)),
        disease_name: Some(name.to_string()),
        icd10: (!code_missing).then(|| format!("{code}.{subcode}")),
        stay_days: Some(stay),
        source: lines.join("\n"),
        summary,
    }
}

fn make_splits(spec: &CorpusSpec) -> Splits {
    let mut ids: Vec<u32> = (0..spec.n_cases as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX - 1);
    ids.shuffle(&mut rng);
    let (nv, nt) = spec.split_sizes();
    let mut valid = ids[..nv].to_vec();
    let mut test = ids[nv..nv + nt].to_vec();
    let mut train = ids[nv + nt..].to_vec();
    for s in [&mut train, &mut valid, &mut test] {
        s.sort_unstable();
    }
    Splits { train, valid, test }
}

/// Tag lexicon of every disease and symptom word the spec can emit.
pub fn tag_lexicon(n_diseases: usize) -> TagLexicon {
    let mut lex = TagLexicon::new();
    for (name, _, symptoms, _) in &DISEASES[..n_diseases] {
        lex.insert(name, Category::Disease).expect("disease category");
        for s in symptoms {
            lex.insert(s, Category::Symptom).expect("symptom category");
        }
    }
    lex
}

pub fn disease_lexicon(n_diseases: usize) -> DiseaseLexicon {
    let mut lex = DiseaseLexicon::new();
    for (name, code, _, _) in &DISEASES[..n_diseases] {
        lex.insert(name, code).expect("well-formed code");
    }
    lex
}

/// Deterministic in `spec.seed`. Each case draws from its own stream, so a
/// case does not depend on how many others are generated.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus, SpecError> {
    spec.validate()?;
    let world = build_world(spec);
    let cases = (0..spec.n_cases as u32).map(|id| make_case(spec, &world, id)).collect();
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        cases,
        lexicon: tag_lexicon(spec.n_diseases),
        diseases: disease_lexicon(spec.n_diseases),
        splits: make_splits(spec),
    })
}

/// Every word a spec's summaries and notes can contain, lexicon words
/// included.
pub fn vocabulary(n_diseases: usize) -> Vec<&'static str> {
    let mut out = vec![DAY_WORD];
    for (name, _, symptoms, drugs) in &DISEASES[..n_diseases] {
        out.push(name);
        out.extend(symptoms);
        out.extend(drugs);
    }
    out.extend(GENERAL_DRUGS);
    out.extend(LABS);
    out.extend(FILLERS);
    out.extend(HEADERS);
    out.extend(STAY_WORDS);
    out
}

/// The hospital's bullet, or `None` if the summary starts with something
/// else.
pub fn summary_bullet(summary: &str) -> Option<&'static str> {
    HOSPITAL_STYLES
        .iter()
        .map(|(b, _)| *b)
        .find(|b| summary.split_whitespace().next() == Some(*b))
}

pub fn summary_header(summary: &str) -> Option<&'static str> {
    let word = summary.split_whitespace().nth(1)?;
    HEADERS.iter().copied().find(|h| *h == word)
}

pub fn summary_stay_word(summary: &str) -> Option<&'static str> {
    let last = summary.split_whitespace().last()?;
    STAY_WORDS.iter().copied().find(|w| last.starts_with(w))
}

pub fn summary_disease(summary: &str) -> Option<&'static str> {
    let word = summary.split_whitespace().nth(2)?;
    DISEASES.iter().map(|d| d.0).find(|d| *d == word)
}

/// Plug-in mutual information (nats) of the empirical joint distribution.
pub fn mutual_information<A: Ord, B: Ord>(pairs: &[(A, B)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    let mut left: BTreeMap<&A, usize> = BTreeMap::new();
    let mut right: BTreeMap<&B, usize> = BTreeMap::new();
    for (a, b) in pairs {
        *joint.entry((a, b)).or_default() += 1;
        *left.entry(a).or_default() += 1;
        *right.entry(b).or_default() += 1;
    }
    joint
        .iter()
        .map(|((a, b), &c)| {
            let pab = c as f64 / n;
            pab * (pab / (left[a] as f64 / n * right[b] as f64 / n)).ln()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub cases: usize,
    pub hospitals: usize,
    pub physicians: usize,
    pub diseases: usize,
    pub stay_mean: f64,
    pub stay_median: f64,
    pub stay_std: f64,
    pub source_words_mean: f64,
    pub summary_words_mean: f64,
}

impl CorpusStats {
    pub fn length_ratio(&self) -> f64 {
        self.source_words_mean / self.summary_words_mean
    }
}

/// Words as the evaluation segmenter sees them.
pub fn word_count(text: &str) -> usize {
    segment_and_tag(&normalize_width(text), &TagLexicon::new()).len()
}

fn distinct<'a>(xs: impl Iterator<Item = Option<&'a String>>) -> usize {
    xs.flatten().collect::<std::collections::BTreeSet<_>>().len()
}

/// Counts, stay distribution and mean lengths. The stay spread is the
/// population standard deviation; cases without a stay are skipped.
pub fn corpus_stats(cases: &[Case]) -> Option<CorpusStats> {
    if cases.is_empty() {
        return None;
    }
    let mut stays: Vec<f64> = cases.iter().filter_map(|c| c.stay_days).map(f64::from).collect();
    stays.sort_by(f64::total_cmp);
    let (mean, median, std) = if stays.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let n = stays.len() as f64;
        let mean = stays.iter().sum::<f64>() / n;
        let mid = stays.len() / 2;
        let median = if stays.len() % 2 == 1 {
            stays[mid]
        } else {
            (stays[mid - 1] + stays[mid]) / 2.0
        };
        let var = stays.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        (mean, median, var.sqrt())
    };
    let n = cases.len() as f64;
    Some(CorpusStats {
        cases: cases.len(),
        hospitals: distinct(cases.iter().map(|c| c.hospital.as_ref())),
        physicians: distinct(cases.iter().map(|c| c.physician.as_ref())),
        diseases: distinct(cases.iter().map(|c| c.disease_name.as_ref())),
        stay_mean: mean,
        stay_median: median,
        stay_std: std,
        source_words_mean: cases.iter().map(|c| word_count(&c.source)).sum::<usize>() as f64 / n,
        summary_words_mean: cases.iter().map(|c| word_count(&c.summary)).sum::<usize>() as f64 / n,
    })
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const ICD10_FILE: &str = "icd10_lexicon.tsv";
pub const SPLITS_FILE: &str = "splits.json";
pub const SPEC_FILE: &str = "spec.json";

impl SyntheticCorpus {
    pub fn write_to(&self, dir: &Path) -> Result<(), SpecError> {
        fs::create_dir_all(dir)?;
        write_cases(BufWriter::new(File::create(dir.join(CORPUS_FILE))?), &self.cases)?;
        self.lexicon.write_to(BufWriter::new(File::create(dir.join(LEXICON_FILE))?))?;
        self.diseases.write_to(BufWriter::new(File::create(dir.join(ICD10_FILE))?))?;
        fs::write(dir.join(SPLITS_FILE), serde_json::to_string(&self.splits)?)?;
        fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }
}

/// Corpus files as read back from disk. The ICD-10 lexicon is optional.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub cases: Vec<Case>,
    pub lexicon: TagLexicon,
    pub diseases: DiseaseLexicon,
    pub splits: Splits,
}

pub fn read_corpus(dir: &Path) -> Result<CorpusFiles, SpecError> {
    let bad = |what: &str, e: String| SpecError::Infeasible(format!("{what}: {e}"));
    let cases = read_cases(BufReader::new(File::open(dir.join(CORPUS_FILE))?))?;
    let lexicon = TagLexicon::read_from(BufReader::new(File::open(dir.join(LEXICON_FILE))?))
        .map_err(|e| bad(LEXICON_FILE, e.to_string()))?;
    let icd = dir.join(ICD10_FILE);
    let diseases = if icd.exists() {
        DiseaseLexicon::read_from(BufReader::new(File::open(icd)?)).map_err(|e| bad(ICD10_FILE, e.to_string()))?
    } else {
        DiseaseLexicon::new()
    };
    let splits: Splits = serde_json::from_slice(&fs::read(dir.join(SPLITS_FILE))?)?;
    Ok(CorpusFiles {
        cases,
        lexicon,
        diseases,
        splits,
    })
}
