use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureKind, MetadataError};
use crate::case::Case;

pub const GROUP_SIZE: usize = 10;

/// Physician id to group id. Groups never span hospitals and are numbered
/// contiguously, hospital by hospital in name order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicianGroupMap {
    pub group_size: usize,
    pub group_count: u16,
    assignments: BTreeMap<String, u16>,
    /// First and last group id used by each hospital.
    hospital_ranges: BTreeMap<String, (u16, u16)>,
}

impl PhysicianGroupMap {
    /// 0 for physicians not seen when the map was built.
    pub fn group_of(&self, physician: &str) -> u16 {
        self.assignments.get(physician).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn members(&self) -> BTreeMap<u16, Vec<String>> {
        let mut out: BTreeMap<u16, Vec<String>> = BTreeMap::new();
        for (p, g) in &self.assignments {
            out.entry(*g).or_default().push(p.clone());
        }
        out
    }

    pub fn hospital_range(&self, hospital: &str) -> Option<(u16, u16)> {
        self.hospital_ranges.get(hospital).copied()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Within each hospital, shuffles that hospital's cases with `seed` and
/// hands out group ids in order of first physician appearance, opening a new
/// group every `group_size` physicians. Cases without a physician are
/// skipped; cases without a hospital are pooled under the empty name.
pub fn group_physicians(
    cases: &[Case],
    group_size: usize,
    seed: u64,
) -> Result<PhysicianGroupMap, MetadataError> {
    let group_size = group_size.max(1);
    let capacity = FeatureKind::Physician.cardinality().unwrap_or(0);
    let mut by_hospital: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for case in cases {
        if let Some(p) = case.physician.as_deref() {
            by_hospital
                .entry(case.hospital.as_deref().unwrap_or(""))
                .or_default()
                .push(p);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = PhysicianGroupMap {
        group_size,
        ..Default::default()
    };
    let mut next_group: usize = 0;
    for (hospital, mut physicians) in by_hospital {
        physicians.shuffle(&mut rng);
        let mut in_current = group_size; // forces a fresh group per hospital
        let mut seen = HashSet::new();
        let mut first = None;
        for p in physicians {
            if map.assignments.contains_key(p) || !seen.insert(p) {
                continue;
            }
            if in_current == group_size {
                next_group += 1;
                in_current = 0;
                if next_group > capacity {
                    return Err(MetadataError::Capacity {
                        what: "physician groups",
                        needed: next_group,
                        capacity,
                    });
                }
            }
            in_current += 1;
            first.get_or_insert(next_group as u16);
            map.assignments.insert(p.to_string(), next_group as u16);
        }
        if let Some(f) = first {
            map.hospital_ranges
                .insert(hospital.to_string(), (f, next_group as u16));
        }
    }
    map.group_count = next_group as u16;
    Ok(map)
}
