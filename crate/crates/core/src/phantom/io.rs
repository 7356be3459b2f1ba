//! On-disk raster format and dataset indexing.
//!
//! An image is a little-endian `f32` raster (row-major) in `<name>.f32` with a
//! JSON sidecar `<name>.json` of the form
//! `{"h": 64, "w": 64, "modality": "CT", "units": "HU"}`.
//! A label map is an unsigned 8-bit raster `<name>.u8` with sidecar
//! `{"h": 64, "w": 64, "modality": "MR"}`.
//!
//! A dataset directory holds one directory per subject and one directory per
//! slice below it, each with `mr`, `ct`, `label_mr` and `label_ct`. An optional
//! `dataset.json` at the root records the seed used for fold assignment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::types::{ImageSlice, LabelMap, Modality, PairedRecord};
use crate::seed::{self, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub h: usize,
    pub w: usize,
    pub modality: Modality,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelHeader {
    pub h: usize,
    pub w: usize,
    pub modality: Modality,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_image(dir: &Path, name: &str, img: &ImageSlice) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.pixels().len() * 4);
    for v in img.pixels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let raster = dir.join(format!("{name}.f32"));
    fs::write(&raster, bytes).map_err(|e| Error::io(&raster, e))?;
    write_json(
        &dir.join(format!("{name}.json")),
        &ImageHeader {
            h: img.size(),
            w: img.size(),
            modality: img.modality(),
            units: img.modality().units().to_string(),
        },
    )
}

pub fn read_image(dir: &Path, name: &str) -> Result<ImageSlice> {
    let header: ImageHeader = read_json(&dir.join(format!("{name}.json")))?;
    let raster = dir.join(format!("{name}.f32"));
    let bytes = fs::read(&raster).map_err(|e| Error::io(&raster, e))?;
    if bytes.len() != header.h * header.w * 4 {
        return Err(Error::InvalidImage(format!(
            "{} holds {} bytes, header says {}x{} f32",
            raster.display(),
            bytes.len(),
            header.h,
            header.w
        )));
    }
    if header.h != header.w {
        return Err(Error::InvalidImage(format!(
            "{}: non-square {}x{}",
            raster.display(),
            header.h,
            header.w
        )));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ImageSlice::new(header.h, header.modality, pixels)
}

pub fn write_labels(dir: &Path, name: &str, labels: &LabelMap) -> Result<()> {
    let raster = dir.join(format!("{name}.u8"));
    fs::write(&raster, labels.classes()).map_err(|e| Error::io(&raster, e))?;
    write_json(
        &dir.join(format!("{name}.json")),
        &LabelHeader {
            h: labels.size(),
            w: labels.size(),
            modality: labels.source(),
        },
    )
}

pub fn read_labels(dir: &Path, name: &str) -> Result<LabelMap> {
    let header: LabelHeader = read_json(&dir.join(format!("{name}.json")))?;
    let raster = dir.join(format!("{name}.u8"));
    let bytes = fs::read(&raster).map_err(|e| Error::io(&raster, e))?;
    if bytes.len() != header.h * header.w || header.h != header.w {
        return Err(Error::InvalidImage(format!(
            "{} holds {} bytes, header says {}x{}",
            raster.display(),
            bytes.len(),
            header.h,
            header.w
        )));
    }
    LabelMap::new(header.h, header.modality, bytes)
}

const FILES: [&str; 4] = ["mr", "ct", "label_mr", "label_ct"];

/// Write a record under `root/<subject>/<slice>/`.
pub fn write_record(root: &Path, slice: &str, record: &PairedRecord) -> Result<PathBuf> {
    let dir = root.join(&record.subject_id).join(slice);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_image(&dir, "mr", &record.mr)?;
    write_image(&dir, "ct", &record.ct)?;
    write_labels(&dir, "label_mr", &record.label_mr)?;
    write_labels(&dir, "label_ct", &record.label_ct)?;
    Ok(dir)
}

pub fn read_record(dir: &Path, subject_id: &str) -> Result<PairedRecord> {
    Ok(PairedRecord {
        subject_id: subject_id.to_string(),
        mr: read_image(dir, "mr")?,
        ct: read_image(dir, "ct")?,
        label_mr: read_labels(dir, "label_mr")?,
        label_ct: read_labels(dir, "label_ct")?,
    })
}

/// Root-level dataset metadata written by the phantom generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub inconsistency: Option<String>,
}

pub const DATASET_META: &str = "dataset.json";

pub fn write_dataset_meta(root: &Path, meta: &DatasetMeta) -> Result<()> {
    write_json(&root.join(DATASET_META), meta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordPaths {
    pub subject_id: String,
    pub slice: String,
    pub dir: PathBuf,
}

impl RecordPaths {
    pub fn mr(&self) -> PathBuf {
        self.dir.join("mr.f32")
    }
    pub fn ct(&self) -> PathBuf {
        self.dir.join("ct.f32")
    }
    pub fn label_mr(&self) -> PathBuf {
        self.dir.join("label_mr.u8")
    }
    pub fn label_ct(&self) -> PathBuf {
        self.dir.join("label_ct.u8")
    }
}

/// Validated dataset listing with subject-level fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<RecordPaths>,
    pub folds: usize,
    pub seed: u64,
    pub fold_of_subject: BTreeMap<String, usize>,
}

impl DatasetIndex {
    pub fn subjects(&self) -> Vec<&str> {
        self.fold_of_subject.keys().map(|s| s.as_str()).collect()
    }

    pub fn fold_subjects(&self, fold: usize) -> Vec<&str> {
        self.fold_of_subject
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Records of (train, test) for cross-validation fold `fold`. With a single
    /// fold everything lands in the training split.
    pub fn split(&self, fold: usize) -> (Vec<&RecordPaths>, Vec<&RecordPaths>) {
        if self.folds <= 1 {
            return (self.records.iter().collect(), Vec::new());
        }
        self.records
            .iter()
            .partition(|r| self.fold_of_subject[&r.subject_id] != fold)
    }

    pub fn load(&self, paths: &RecordPaths) -> Result<PairedRecord> {
        read_record(&paths.dir, &paths.subject_id)
    }

    pub fn load_all(&self, paths: &[&RecordPaths]) -> Result<Vec<PairedRecord>> {
        paths.iter().map(|p| self.load(p)).collect()
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Scan, validate and fold-assign a dataset directory.
pub fn load_dataset(root: &Path, folds: usize) -> Result<DatasetIndex> {
    if folds == 0 {
        return Err(Error::InvalidConfig("folds must be at least 1".into()));
    }
    let meta_path = root.join(DATASET_META);
    let seed = if meta_path.exists() {
        read_json::<DatasetMeta>(&meta_path)?.seed
    } else {
        0
    };
    let mut records = Vec::new();
    for (subject, sdir) in sorted_dirs(root)? {
        for (slice, dir) in sorted_dirs(&sdir)? {
            let record = format!("{subject}/{slice}");
            let fail = |reason: String| Error::Load {
                record: record.clone(),
                reason,
            };
            for f in FILES {
                let ext = if f.starts_with("label") { "u8" } else { "f32" };
                for p in [dir.join(format!("{f}.{ext}")), dir.join(format!("{f}.json"))] {
                    if !p.exists() {
                        return Err(fail(format!("missing file {}", p.display())));
                    }
                }
            }
            let rec = read_record(&dir, &subject).map_err(|e| fail(e.to_string()))?;
            let n = rec.mr.size();
            if rec.ct.size() != n || rec.label_mr.size() != n || rec.label_ct.size() != n {
                return Err(fail(format!(
                    "dimension mismatch: mr {n}, ct {}, label_mr {}, label_ct {}",
                    rec.ct.size(),
                    rec.label_mr.size(),
                    rec.label_ct.size()
                )));
            }
            if rec.mr.modality() != Modality::MR || rec.ct.modality() != Modality::CT {
                return Err(fail("modality tags do not match file roles".into()));
            }
            records.push(RecordPaths {
                subject_id: subject.clone(),
                slice,
                dir,
            });
        }
    }
    let mut subjects: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
    subjects.dedup();
    let mut shuffled = subjects.clone();
    shuffled.shuffle(&mut seed::rng(seed, &[stream::FOLDS]));
    let fold_of_subject = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % folds))
        .collect();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        records,
        folds,
        seed,
        fold_of_subject,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, Inconsistency};
    use proptest::prelude::*;

    fn write_cohort(root: &Path, n: usize) {
        for r in generate_cohort(n, 32, 11, Inconsistency::Random).unwrap() {
            write_record(root, "z000", &r).unwrap();
        }
        write_dataset_meta(
            root,
            &DatasetMeta {
                seed: 11,
                size: Some(32),
                count: Some(n),
                inconsistency: None,
            },
        )
        .unwrap();
    }

    #[test]
    fn twenty_five_subjects_split_into_five_folds_of_five() {
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), 25);
        let idx = load_dataset(dir.path(), 5).unwrap();
        assert_eq!(idx.records.len(), 25);
        for f in 0..5 {
            assert_eq!(idx.fold_subjects(f).len(), 5);
            let (train, test) = idx.split(f);
            assert_eq!(test.len(), 5);
            assert_eq!(train.len(), 20);
            for t in &test {
                assert!(train.iter().all(|r| r.subject_id != t.subject_id));
            }
        }
        assert_eq!(load_dataset(dir.path(), 5).unwrap(), idx);
    }

    #[test]
    fn single_fold_keeps_everything_in_training() {
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), 3);
        let idx = load_dataset(dir.path(), 1).unwrap();
        let (train, test) = idx.split(0);
        assert_eq!(train.len(), 3);
        assert!(test.is_empty());
    }

    #[test]
    fn dimension_mismatch_names_the_subject() {
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), 2);
        let other = generate_cohort(1, 64, 3, Inconsistency::None).unwrap();
        let target = dir.path().join("subject001").join("z000");
        write_image(&target, "ct", &other[0].ct).unwrap();
        let err = load_dataset(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("subject001"), "{err}");
        assert!(err.contains("dimension"), "{err}");
    }

    #[test]
    fn missing_file_and_unknown_class_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), 2);
        let target = dir.path().join("subject000").join("z000");
        fs::remove_file(target.join("label_ct.u8")).unwrap();
        let err = load_dataset(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("subject000") && err.contains("missing"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), 2);
        let target = dir.path().join("subject001").join("z000");
        fs::write(target.join("label_mr.u8"), vec![7u8; 32 * 32]).unwrap();
        let err = load_dataset(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("subject001") && err.contains("class"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn write_then_read_is_bit_exact(seed in 0u64..1_000_000) {
            let rec = &generate_cohort(1, 32, seed, Inconsistency::Random).unwrap()[0];
            let dir = tempfile::tempdir().unwrap();
            let path = write_record(dir.path(), "z", rec).unwrap();
            let back = read_record(&path, &rec.subject_id).unwrap();
            let bits = |img: &ImageSlice| img.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.mr), bits(&rec.mr));
            prop_assert_eq!(bits(&back.ct), bits(&rec.ct));
            prop_assert_eq!(&back, rec);
        }
    }
}
