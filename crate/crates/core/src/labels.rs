//! Per-slice, per-iteration pseudo-label store and its directory format.
//!
//! On disk every volume gets its own directory holding one JSON file per
//! `(slice, iteration)`; masks are run-length encoded in row-major order with
//! alternating background/foreground runs, background first.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_model::{DataError, InstanceMask, Mask2, Provenance};
use crate::io::{read_json, write_json};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelKey {
    pub volume_id: String,
    pub slice_index: usize,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEntry {
    pub masks: Vec<InstanceMask>,
    /// Pipeline stage that produced the entry.
    pub generation: u32,
    /// Set when refinement came back empty and the previous labels were kept.
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelStore {
    entries: BTreeMap<LabelKey, LabelEntry>,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        volume_id: &str,
        slice_index: usize,
        iteration: u32,
        entry: LabelEntry,
    ) -> Result<(), DataError> {
        let mut ids = BTreeSet::new();
        for m in &entry.masks {
            if !ids.insert(m.vertebra_id.as_str()) {
                return Err(DataError::InvalidLabels(format!(
                    "duplicate vertebra {} at {volume_id}/{slice_index}/{iteration}",
                    m.vertebra_id
                )));
            }
            m.validate()?;
        }
        let key = LabelKey {
            volume_id: volume_id.to_string(),
            slice_index,
            iteration,
        };
        if self.entries.contains_key(&key) {
            return Err(DataError::InvalidLabels(format!(
                "entry {volume_id}/{slice_index}/{iteration} already exists"
            )));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn get(&self, volume_id: &str, slice_index: usize, iteration: u32) -> Option<&LabelEntry> {
        self.entries.get(&LabelKey {
            volume_id: volume_id.to_string(),
            slice_index,
            iteration,
        })
    }

    /// Highest-iteration entry for a slice.
    pub fn latest(&self, volume_id: &str, slice_index: usize) -> Option<(u32, &LabelEntry)> {
        let lo = LabelKey {
            volume_id: volume_id.to_string(),
            slice_index,
            iteration: 0,
        };
        let hi = LabelKey {
            iteration: u32::MAX,
            ..lo.clone()
        };
        self.entries
            .range(lo..=hi)
            .next_back()
            .map(|(k, e)| (k.iteration, e))
    }

    pub fn volume_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.keys().map(|k| k.volume_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn slices(&self, volume_id: &str) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .entries
            .keys()
            .filter(|k| k.volume_id == volume_id)
            .map(|k| k.slice_index)
            .collect();
        set.into_iter().collect()
    }

    pub fn iterations(&self, volume_id: &str, slice_index: usize) -> Vec<u32> {
        self.entries
            .keys()
            .filter(|k| k.volume_id == volume_id && k.slice_index == slice_index)
            .map(|k| k.iteration)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LabelKey, &LabelEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mask counts per provenance at one iteration across all slices.
    pub fn provenance_counts(&self, iteration: u32) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (k, e) in &self.entries {
            if k.iteration != iteration {
                continue;
            }
            for m in &e.masks {
                *out.entry(m.provenance.as_str().to_string()).or_insert(0) += 1;
            }
            if e.fallback {
                *out.entry("fallback".to_string()).or_insert(0) += e.masks.len();
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        for (k, e) in &self.entries {
            let file = EntryFile::from_entry(k, e);
            let path = dir
                .join(sanitize(&k.volume_id))
                .join(format!("s{:03}_it{:02}.json", k.slice_index, k.iteration));
            write_json(&file, &path)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let mut store = LabelStore::new();
        let mut files = Vec::new();
        let rd = fs::read_dir(dir).map_err(|e| DataError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        for vol_dir in rd {
            let vol_dir = vol_dir
                .map_err(|e| DataError::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?
                .path();
            if !vol_dir.is_dir() {
                continue;
            }
            for f in fs::read_dir(&vol_dir).map_err(|e| DataError::Io {
                path: vol_dir.display().to_string(),
                source: e,
            })? {
                let f = f
                    .map_err(|e| DataError::Io {
                        path: vol_dir.display().to_string(),
                        source: e,
                    })?
                    .path();
                if f.extension().is_some_and(|e| e == "json") {
                    files.push(f);
                }
            }
        }
        files.sort();
        for f in files {
            let file: EntryFile = read_json(&f)?;
            let (key, entry) = file.into_entry()?;
            store.insert(&key.volume_id, key.slice_index, key.iteration, entry)?;
        }
        Ok(store)
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Row-major run lengths, background run first.
pub fn rle_encode(mask: &Mask2) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &v in mask.iter() {
        if v == current {
            run += 1;
        } else {
            counts.push(run);
            current = v;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u32], shape: (usize, usize)) -> Result<Mask2, DataError> {
    let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    if total != (shape.0 * shape.1) as u64 {
        return Err(DataError::InvalidLabels(format!(
            "run lengths cover {total} pixels, shape needs {}",
            shape.0 * shape.1
        )));
    }
    let mut data = Vec::with_capacity(shape.0 * shape.1);
    let mut value = false;
    for &c in counts {
        data.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    Array2::from_shape_vec(shape, data).map_err(|e| DataError::InvalidLabels(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    volume_id: String,
    slice_index: usize,
    iteration: u32,
    generation: u32,
    fallback: bool,
    shape: [usize; 2],
    instances: Vec<InstanceFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    vertebra_id: String,
    provenance: Provenance,
    iteration: u32,
    rle: Vec<u32>,
}

impl EntryFile {
    fn from_entry(k: &LabelKey, e: &LabelEntry) -> Self {
        let shape = e.masks.first().map(|m| m.mask.dim()).unwrap_or((0, 0));
        Self {
            volume_id: k.volume_id.clone(),
            slice_index: k.slice_index,
            iteration: k.iteration,
            generation: e.generation,
            fallback: e.fallback,
            shape: [shape.0, shape.1],
            instances: e
                .masks
                .iter()
                .map(|m| InstanceFile {
                    vertebra_id: m.vertebra_id.clone(),
                    provenance: m.provenance,
                    iteration: m.iteration,
                    rle: rle_encode(&m.mask),
                })
                .collect(),
        }
    }

    fn into_entry(self) -> Result<(LabelKey, LabelEntry), DataError> {
        let shape = (self.shape[0], self.shape[1]);
        let masks = self
            .instances
            .into_iter()
            .map(|i| {
                InstanceMask::new(
                    i.vertebra_id,
                    rle_decode(&i.rle, shape)?,
                    i.provenance,
                    i.iteration,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((
            LabelKey {
                volume_id: self.volume_id,
                slice_index: self.slice_index,
                iteration: self.iteration,
            },
            LabelEntry {
                masks,
                generation: self.generation,
                fallback: self.fallback,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_with(shape: (usize, usize), on: &[(usize, usize)]) -> Mask2 {
        let mut m = Array2::from_elem(shape, false);
        for &(y, x) in on {
            m[[y, x]] = true;
        }
        m
    }

    #[test]
    fn rle_starts_with_background() {
        let m = mask_with((2, 3), &[(0, 0), (0, 1), (1, 2)]);
        assert_eq!(rle_encode(&m), vec![0, 2, 3, 1]);
        assert_eq!(rle_decode(&[0, 2, 3, 1], (2, 3)).unwrap(), m);
        assert!(rle_decode(&[1, 2], (2, 3)).is_err());
    }

    #[test]
    fn duplicate_vertebra_rejected() {
        let m = InstanceMask::new("L1", mask_with((2, 2), &[(0, 0)]), Provenance::Coarse, 0)
            .unwrap();
        let mut store = LabelStore::new();
        let entry = LabelEntry {
            masks: vec![m.clone(), m.clone()],
            generation: 0,
            fallback: false,
        };
        assert!(store.insert("v", 0, 0, entry).is_err());
        let entry = LabelEntry {
            masks: vec![m],
            generation: 0,
            fallback: false,
        };
        store.insert("v", 0, 0, entry.clone()).unwrap();
        assert!(store.insert("v", 0, 0, entry).is_err());
    }

    #[test]
    fn latest_picks_highest_iteration() {
        let m = InstanceMask::new("L1", mask_with((2, 2), &[(0, 0)]), Provenance::Coarse, 0)
            .unwrap();
        let mut store = LabelStore::new();
        for it in [0, 2, 1] {
            store
                .insert(
                    "v",
                    4,
                    it,
                    LabelEntry {
                        masks: vec![m.clone()],
                        generation: it,
                        fallback: false,
                    },
                )
                .unwrap();
        }
        store
            .insert(
                "v",
                5,
                7,
                LabelEntry {
                    masks: vec![m],
                    generation: 9,
                    fallback: false,
                },
            )
            .unwrap();
        assert_eq!(store.latest("v", 4).unwrap().0, 2);
        assert_eq!(store.slices("v"), vec![4, 5]);
        assert!(store.latest("w", 4).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn directory_round_trip(
            bits in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 30), 1..4),
            fallback in any::<bool>(),
        ) {
            let mut store = LabelStore::new();
            let masks: Vec<InstanceMask> = bits.iter().enumerate().filter_map(|(i, b)| {
                let m = Array2::from_shape_vec((5, 6), b.clone()).unwrap();
                InstanceMask::new(format!("V{i}"), m, Provenance::Model, i as u32).ok()
            }).collect();
            store.insert("vol-a", 3, 1, LabelEntry { masks: masks.clone(), generation: 4, fallback }).unwrap();
            store.insert("vol b", 2, 0, LabelEntry { masks, generation: 0, fallback: false }).unwrap();
            let dir = tempfile::tempdir().unwrap();
            store.save(dir.path()).unwrap();
            let back = LabelStore::load(dir.path()).unwrap();
            prop_assert_eq!(back, store);
        }
    }
}
