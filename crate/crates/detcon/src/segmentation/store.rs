//! Append-only on-disk mask store keyed by image id.
//!
//! Masks are computed once and reused throughout training. Layout: one
//! `<image_id>.dtns` per image (i32 rank-2 label map for partition sources,
//! i32 rank-3 binary stack for overlapping human masks) plus `index.tsv`
//! with `image_id <TAB> path <TAB> source <TAB> params` rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::tensorcore::dtns;

use super::{labelmap_to_maskset, LabelMap, Mask, MaskSet, MaskSource, SegError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreEntry {
    pub image_id: String,
    pub path: String,
    pub source: String,
    pub params: String,
}

#[derive(Debug)]
pub struct MaskStore {
    dir: PathBuf,
    entries: BTreeMap<String, StoreEntry>,
}

impl MaskStore {
    pub fn open(dir: &Path) -> Result<Self, SegError> {
        fs::create_dir_all(dir).map_err(|e| SegError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let mut entries = BTreeMap::new();
        let index = dir.join("index.tsv");
        if index.exists() {
            let text = fs::read_to_string(&index).map_err(|e| SegError::Io {
                path: index.display().to_string(),
                source: e,
            })?;
            for line in text.lines().skip(1) {
                if line.trim().is_empty() {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() < 4 {
                    return Err(SegError::Store {
                        what: format!("malformed index line: {line}"),
                    });
                }
                entries.insert(
                    cols[0].to_string(),
                    StoreEntry {
                        image_id: cols[0].to_string(),
                        path: cols[1].to_string(),
                        source: cols[2].to_string(),
                        params: cols[3].to_string(),
                    },
                );
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn has(&self, image_id: &str) -> bool {
        self.entries.contains_key(image_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &StoreEntry> {
        self.entries.values()
    }

    /// True when the stored entry for this image matches source and params.
    pub fn matches(&self, image_id: &str, source: &MaskSource) -> bool {
        self.entries.get(image_id).is_some_and(|e| {
            e.source == source.kind() && e.params == source.params()
        })
    }

    fn append_index(&mut self, entry: StoreEntry) -> Result<(), SegError> {
        let index = self.dir.join("index.tsv");
        crate::util::append_tsv_line(
            &index,
            "image_id\tpath\tsource\tparams",
            &format!(
                "{}\t{}\t{}\t{}",
                entry.image_id, entry.path, entry.source, entry.params
            ),
        )
        .map_err(|e| SegError::Io {
            path: index.display().to_string(),
            source: e,
        })?;
        self.entries.insert(entry.image_id.clone(), entry);
        Ok(())
    }

    /// Stores a partition as a rank-2 label map.
    pub fn put_labelmap(
        &mut self,
        image_id: &str,
        lm: &LabelMap,
        source: &MaskSource,
    ) -> Result<(), SegError> {
        let file = format!("{image_id}.dtns");
        dtns::save_i32(&self.dir.join(&file), &[lm.height, lm.width], &lm.to_i32())?;
        self.append_index(StoreEntry {
            image_id: image_id.to_string(),
            path: file,
            source: source.kind().to_string(),
            params: source.params(),
        })
    }

    /// Stores possibly-overlapping masks as a rank-3 binary stack.
    pub fn put_masks(&mut self, image_id: &str, ms: &MaskSet) -> Result<(), SegError> {
        if ms.is_empty() {
            return Err(SegError::EmptyMaskSet);
        }
        let (r, h, w) = (ms.len(), ms.height, ms.width);
        let mut data = Vec::with_capacity(r * h * w);
        for (_, m) in &ms.masks {
            data.extend(m.data().iter().map(|&v| i32::from(v)));
        }
        let file = format!("{image_id}.dtns");
        dtns::save_i32(&self.dir.join(&file), &[r, h, w], &data)?;
        self.append_index(StoreEntry {
            image_id: image_id.to_string(),
            path: file,
            source: ms.source.kind().to_string(),
            params: ms.source.params(),
        })
    }

    /// Loads the mask set for an image.
    pub fn get(&self, image_id: &str) -> Result<MaskSet, SegError> {
        let entry = self.entries.get(image_id).ok_or_else(|| SegError::Store {
            what: format!("no masks stored for image {image_id}"),
        })?;
        let (shape, data) = dtns::load_i32(&self.dir.join(&entry.path))?;
        let source = match entry.source.as_str() {
            "grid" => MaskSource::Grid {
                n: parse_param(&entry.params, "n").unwrap_or(1.0) as usize,
            },
            "fh" => MaskSource::Fh {
                scale: parse_param(&entry.params, "s").unwrap_or(0.0),
                min_size: parse_param(&entry.params, "c").unwrap_or(1.0) as usize,
                sigma: parse_param(&entry.params, "sigma").unwrap_or(0.0),
            },
            _ => MaskSource::Human,
        };
        match shape.len() {
            2 => {
                let lm = LabelMap::from_i32(shape[0], shape[1], &data)?;
                let mut ms = labelmap_to_maskset(&lm);
                ms.source = source;
                Ok(ms)
            }
            3 => {
                let (r, h, w) = (shape[0], shape[1], shape[2]);
                let masks = (0..r)
                    .map(|ri| {
                        let slice = &data[ri * h * w..(ri + 1) * h * w];
                        (ri, Mask::new(h, w, slice.iter().map(|&v| u8::from(v != 0)).collect()))
                    })
                    .collect();
                Ok(MaskSet {
                    height: h,
                    width: w,
                    masks,
                    source,
                })
            }
            other => Err(SegError::Store {
                what: format!("mask tensor for {image_id} has rank {other}, expected 2 or 3"),
            }),
        }
    }
}

fn parse_param(params: &str, key: &str) -> Option<f64> {
    params.split(',').find_map(|kv| {
        let (k, v) = kv.split_once('=')?;
        if k == key {
            v.parse().ok()
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::super::grid_masks;
    use super::*;

    #[test]
    fn labelmap_round_trip_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MaskStore::open(dir.path()).unwrap();
        let lm = LabelMap::new(4, 6, (0..24).map(|i| (i % 3) as u32).collect()).unwrap();
        store
            .put_labelmap("img0", &lm, &MaskSource::Fh { scale: 1000.0, min_size: 1000, sigma: 0.8 })
            .unwrap();

        // Re-open to exercise index parsing.
        let store = MaskStore::open(dir.path()).unwrap();
        assert!(store.has("img0"));
        let ms = store.get("img0").unwrap();
        assert_eq!(ms.len(), 3);
        assert!(ms.is_partition());
        assert_eq!(ms.source.kind(), "fh");
        assert!(store.matches("img0", &MaskSource::Fh { scale: 1000.0, min_size: 1000, sigma: 0.8 }));
        assert!(!store.matches("img0", &MaskSource::Fh { scale: 500.0, min_size: 500, sigma: 0.8 }));
    }

    #[test]
    fn overlapping_masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MaskStore::open(dir.path()).unwrap();
        let mut ms = grid_masks(6, 6, 2).unwrap();
        ms.source = MaskSource::Human;
        // Make them overlap: extend mask 0 over everything.
        ms.masks[0].1 = Mask::filled(6, 6);
        store.put_masks("scene", &ms).unwrap();
        let back = store.get("scene").unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.masks[0].1.active_count(), 36);
        assert!(!back.is_partition());
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = MaskStore::open(dir.path()).unwrap();
        assert!(store.get("nope").is_err());
    }
}
