//! Metadata feature tables: which kinds exist, how large each table is, and
//! how a case's hospital, physician, disease and stay become row ids.
//!
//! Every table reserves row 0 for padding / unknown values, so a missing or
//! never-seen value resolves to 0 instead of failing.

mod groups;
mod icd10;

pub use groups::{group_physicians, PhysicianGroupMap, GROUP_SIZE};
pub use icd10::{decode_icd10, encode_icd10, icd10_prefix_id, DiseaseLexicon, DiseaseRef};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::Case;

#[derive(Debug, Error, PartialEq)]
pub enum MetadataError {
    #[error("malformed ICD-10 code {0:?}: expected letter, digit, digit")]
    Format(String),
    #[error("length of stay must be at least one day, got {0}")]
    Domain(i64),
    #[error("{what}: {needed} exceeds the capacity of {capacity}")]
    Capacity {
        what: &'static str,
        needed: usize,
        capacity: usize,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Which metadata the encoder input is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Vanilla,
    Hospital,
    Physician,
    Disease,
    LengthOfStay,
    /// Hospital, physician, disease and stay tables summed together.
    AllFeatures,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 6] = [
        FeatureKind::Vanilla,
        FeatureKind::Hospital,
        FeatureKind::Physician,
        FeatureKind::Disease,
        FeatureKind::LengthOfStay,
        FeatureKind::AllFeatures,
    ];

    /// Number of distinct values `|M|`, excluding the reserved row.
    /// `None` for [`FeatureKind::AllFeatures`], which owns no table itself.
    pub fn cardinality(self) -> Option<usize> {
        match self {
            FeatureKind::Vanilla => Some(1),
            FeatureKind::Hospital => Some(5),
            FeatureKind::Physician => Some(485),
            FeatureKind::Disease => Some(2600),
            FeatureKind::LengthOfStay => Some(1000),
            FeatureKind::AllFeatures => None,
        }
    }

    /// The single-kind tables a model of this kind carries.
    pub fn tables(self) -> Vec<FeatureKind> {
        match self {
            FeatureKind::AllFeatures => vec![
                FeatureKind::Hospital,
                FeatureKind::Physician,
                FeatureKind::Disease,
                FeatureKind::LengthOfStay,
            ],
            k => vec![k],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Vanilla => "vanilla",
            FeatureKind::Hospital => "hospital",
            FeatureKind::Physician => "physician",
            FeatureKind::Disease => "disease",
            FeatureKind::LengthOfStay => "length_of_stay",
            FeatureKind::AllFeatures => "all_features",
        }
    }

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            FeatureKind::Vanilla => "Vanilla",
            FeatureKind::Hospital => "w/ Hospital",
            FeatureKind::Physician => "w/ Physician",
            FeatureKind::Disease => "w/ Disease",
            FeatureKind::LengthOfStay => "w/ Stay length",
            FeatureKind::AllFeatures => "w/ All features",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" => Ok(FeatureKind::Vanilla),
            "hospital" => Ok(FeatureKind::Hospital),
            "physician" => Ok(FeatureKind::Physician),
            "disease" => Ok(FeatureKind::Disease),
            "length_of_stay" | "stay" => Ok(FeatureKind::LengthOfStay),
            "all_features" | "all" => Ok(FeatureKind::AllFeatures),
            other => Err(format!("unknown feature kind {other:?}")),
        }
    }
}

/// Per-case row ids into each table. 0 means missing or unknown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureAssignment {
    pub hospital: u16,
    pub physician: u16,
    pub disease: u16,
    pub stay: u16,
}

impl FeatureAssignment {
    /// Row id for a single-kind table; the vanilla table always uses row 1.
    pub fn id(&self, kind: FeatureKind) -> usize {
        match kind {
            FeatureKind::Vanilla => 1,
            FeatureKind::Hospital => self.hospital as usize,
            FeatureKind::Physician => self.physician as usize,
            FeatureKind::Disease => self.disease as usize,
            FeatureKind::LengthOfStay => self.stay as usize,
            FeatureKind::AllFeatures => panic!("all_features has no table of its own"),
        }
    }
}

pub const MAX_STAY_DAYS: u32 = 1000;

/// Clamps the stay to the table size.
pub fn encode_stay(days: i64) -> Result<u16, MetadataError> {
    if days < 1 {
        return Err(MetadataError::Domain(days));
    }
    Ok(days.min(MAX_STAY_DAYS as i64) as u16)
}

/// Sorted hospital names; a hospital's id is its 1-based rank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HospitalIndex {
    names: Vec<String>,
}

impl HospitalIndex {
    pub fn from_names<I, S>(names: I) -> Result<Self, MetadataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        let capacity = FeatureKind::Hospital.cardinality().unwrap_or(0);
        if names.len() > capacity {
            return Err(MetadataError::Capacity {
                what: "hospitals",
                needed: names.len(),
                capacity,
            });
        }
        Ok(HospitalIndex { names })
    }

    pub fn from_cases(cases: &[Case]) -> Result<Self, MetadataError> {
        Self::from_names(cases.iter().filter_map(|c| c.hospital.clone()))
    }

    pub fn id(&self, name: &str) -> u16 {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map_or(0, |i| i as u16 + 1)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Everything needed to turn a [`Case`] into a [`FeatureAssignment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataEncoder {
    pub hospitals: HospitalIndex,
    pub groups: PhysicianGroupMap,
    pub diseases: DiseaseLexicon,
}

impl MetadataEncoder {
    /// Fits the hospital index and physician groups on `cases`.
    pub fn fit(cases: &[Case], diseases: DiseaseLexicon, seed: u64) -> Result<Self, MetadataError> {
        Ok(MetadataEncoder {
            hospitals: HospitalIndex::from_cases(cases)?,
            groups: group_physicians(cases, GROUP_SIZE, seed)?,
            diseases,
        })
    }

    pub fn resolve(&self, case: &Case) -> FeatureAssignment {
        resolve_features(case, self)
    }
}

/// Resolves each metadata field independently. Missing values, unseen
/// physicians and unresolvable diseases map to 0.
pub fn resolve_features(case: &Case, encoder: &MetadataEncoder) -> FeatureAssignment {
    let hospital = case
        .hospital
        .as_deref()
        .map_or(0, |h| encoder.hospitals.id(h));
    let physician = case
        .physician
        .as_deref()
        .map_or(0, |p| encoder.groups.group_of(p));
    let from_code = case
        .icd10
        .as_deref()
        .and_then(|c| encode_icd10(DiseaseRef::Code(c), &encoder.diseases).ok())
        .filter(|&id| id != 0);
    let disease = from_code.unwrap_or_else(|| {
        case.disease_name
            .as_deref()
            .and_then(|n| encode_icd10(DiseaseRef::Name(n), &encoder.diseases).ok())
            .unwrap_or(0)
    });
    let stay = case
        .stay_days
        .and_then(|d| encode_stay(d as i64).ok())
        .unwrap_or(0);
    FeatureAssignment {
        hospital,
        physician,
        disease,
        stay,
    }
}
