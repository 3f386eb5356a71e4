//! Dataset ingestion, preprocessing, view grouping and batch sampling.

mod preprocess;
mod sampling;

pub use preprocess::{augment, load_image, load_mask, preprocess, resize_image, AugmentSpec, Interpolation, PreprocessSpec};
pub use sampling::{few_shot_subset, group_views, BatchSampler, FewShotSpec, ObjectGroup};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default dataset root when none is configured.
pub const DATA_ENV: &str = "DINOLAB_DATA";

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff", "webp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Rgb,
    Depth,
    Ir,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Ir => "ir",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Mvtec,
    FlatCsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Stable identifier, unique within a dataset.
    pub id: String,
    pub image_path: PathBuf,
    pub category: String,
    pub split: Split,
    pub label: u8,
    pub mask_path: Option<PathBuf>,
    pub view: Option<String>,
    pub modality: Modality,
    pub object_id: Option<String>,
    /// Set by few-shot subsetting; the trainer then augments this sample online.
    #[serde(default)]
    pub augment: bool,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Ingest { path: dir.to_path_buf(), reason: e.to_string() })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn find_mask(gt_dir: &Path, image: &Path) -> Option<PathBuf> {
    let s = stem(image);
    ["_mask.png", ".png", "_mask.bmp", ".bmp", "_mask.tif", ".tif"]
        .iter()
        .map(|suffix| gt_dir.join(format!("{s}{suffix}")))
        .find(|p| p.is_file())
}

/// Reads a dataset rooted at `root` in the given layout.
pub fn scan_dataset(root: &Path, layout: Layout) -> Result<Vec<SampleRecord>> {
    if !root.exists() {
        return Err(Error::Ingest { path: root.to_path_buf(), reason: "dataset root does not exist".into() });
    }
    let records = match layout {
        Layout::Mvtec => scan_mvtec(root)?,
        Layout::FlatCsv => scan_flat_csv(root)?,
    };
    check_train_split(&records)?;
    Ok(records)
}

fn check_train_split(records: &[SampleRecord]) -> Result<()> {
    let mut categories: Vec<&str> = records.iter().map(|r| r.category.as_str()).collect();
    categories.sort_unstable();
    categories.dedup();
    let empty: Vec<&str> = categories
        .into_iter()
        .filter(|c| !records.iter().any(|r| r.category == *c && r.split == Split::Train))
        .collect();
    if records.is_empty() {
        return Err(Error::Data("dataset contains no samples".into()));
    }
    if !empty.is_empty() {
        return Err(Error::Data(format!("empty train split for categories {empty:?}")));
    }
    if let Some(r) = records.iter().find(|r| r.split == Split::Train && r.label != 0) {
        return Err(Error::Data(format!("training sample {} is labelled anomalous", r.id)));
    }
    Ok(())
}

fn scan_mvtec(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.join("train").is_dir() || p.join("test").is_dir()) {
        let category = class_dir.file_name().expect("directory entry").to_string_lossy().into_owned();
        let record = |split: Split, leaf: &str, path: PathBuf, mask: Option<PathBuf>| SampleRecord {
            id: format!("{category}/{}/{leaf}/{}", if split == Split::Train { "train" } else { "test" }, stem(&path)),
            image_path: path,
            category: category.clone(),
            split,
            label: u8::from(leaf != "good"),
            mask_path: mask,
            view: None,
            modality: Modality::Rgb,
            object_id: None,
            augment: false,
        };
        let good = class_dir.join("train").join("good");
        if good.is_dir() {
            for p in sorted_images(&good)? {
                records.push(record(Split::Train, "good", p, None));
            }
        }
        let test = class_dir.join("test");
        if !test.is_dir() {
            continue;
        }
        for defect_dir in sorted_entries(&test)?.into_iter().filter(|p| p.is_dir()) {
            let leaf = defect_dir.file_name().expect("directory entry").to_string_lossy().into_owned();
            let gt_dir = class_dir.join("ground_truth").join(&leaf);
            for p in sorted_images(&defect_dir)? {
                let mask = if leaf == "good" {
                    None
                } else {
                    let m = find_mask(&gt_dir, &p);
                    if m.is_none() {
                        log::warn!("no ground-truth mask for {}; image-level metrics only", p.display());
                    }
                    m
                };
                records.push(record(Split::Test, &leaf, p, mask));
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    image_path: String,
    category: String,
    split: Split,
    label: u8,
    #[serde(default)]
    mask_path: Option<String>,
    #[serde(default)]
    view: Option<String>,
    #[serde(default)]
    modality: Option<Modality>,
    #[serde(default)]
    object_id: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.trim().is_empty())
}

/// `root` is either the index file or a directory holding `index.csv`.
fn scan_flat_csv(root: &Path) -> Result<Vec<SampleRecord>> {
    let index = if root.is_dir() { root.join("index.csv") } else { root.to_path_buf() };
    let base = index.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(&index)
        .map_err(|e| Error::Ingest { path: index.clone(), reason: e.to_string() })?;
    let mut records = Vec::new();
    for (line, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| Error::Ingest { path: index.clone(), reason: format!("row {}: {e}", line + 1) })?;
        if row.label > 1 {
            return Err(Error::Ingest { path: index.clone(), reason: format!("row {}: label must be 0 or 1", line + 1) });
        }
        let image_path = base.join(&row.image_path);
        let mut mask_path = non_empty(row.mask_path).map(|m| base.join(m));
        if let Some(m) = &mask_path {
            if !m.is_file() {
                log::warn!("mask {} listed but missing; image-level metrics only", m.display());
                mask_path = None;
            }
        }
        if row.label == 1 && mask_path.is_none() {
            log::warn!("no ground-truth mask for {}; image-level metrics only", image_path.display());
        }
        records.push(SampleRecord {
            id: row.image_path.clone(),
            image_path,
            category: row.category,
            split: row.split,
            label: row.label,
            mask_path,
            view: non_empty(row.view),
            modality: row.modality.unwrap_or_default(),
            object_id: non_empty(row.object_id),
            augment: false,
        });
    }
    Ok(records)
}

/// Dataset root from an explicit value or the `DINOLAB_DATA` environment variable.
pub fn resolve_root(explicit: Option<&Path>) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::config(format!("no dataset root configured and {DATA_ENV} is unset")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_png(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        image::GrayImage::from_pixel(4, 4, image::Luma([128])).save(p).unwrap();
    }

    fn mvtec_fixture(root: &Path) {
        for class in ["alpha", "beta"] {
            for i in 0..3 {
                touch_png(&root.join(format!("{class}/train/good/{i:03}.png")));
            }
            touch_png(&root.join(format!("{class}/test/good/000.png")));
            touch_png(&root.join(format!("{class}/test/crack/000.png")));
            touch_png(&root.join(format!("{class}/ground_truth/crack/000_mask.png")));
        }
        touch_png(&root.join("beta/test/crack/001.png"));
    }

    #[test]
    fn mvtec_layout() {
        let dir = tempfile::tempdir().unwrap();
        mvtec_fixture(dir.path());
        let recs = scan_dataset(dir.path(), Layout::Mvtec).unwrap();
        let train: Vec<_> = recs.iter().filter(|r| r.split == Split::Train).collect();
        assert_eq!(train.len(), 6);
        assert!(train.iter().all(|r| r.label == 0 && r.mask_path.is_none()));
        let good = recs.iter().find(|r| r.id == "alpha/test/good/000").unwrap();
        assert_eq!((good.label, good.mask_path.is_none()), (0, true));
        let crack = recs.iter().find(|r| r.id == "alpha/test/crack/000").unwrap();
        assert_eq!(crack.label, 1);
        assert!(crack.mask_path.as_ref().unwrap().ends_with("ground_truth/crack/000_mask.png"));
        let maskless = recs.iter().find(|r| r.id == "beta/test/crack/001").unwrap();
        assert_eq!((maskless.label, maskless.mask_path.is_none()), (1, true));
        assert_eq!(scan_dataset(dir.path(), Layout::Mvtec).unwrap(), recs);
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("gamma/test/good/000.png"));
        assert!(matches!(scan_dataset(dir.path(), Layout::Mvtec), Err(Error::Data(_))));
        assert!(matches!(scan_dataset(&dir.path().join("nope"), Layout::Mvtec), Err(Error::Ingest { .. })));
    }

    #[test]
    fn flat_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("img/a.png"));
        touch_png(&dir.path().join("img/a_mask.png"));
        fs::write(
            dir.path().join("index.csv"),
            "image_path,category,split,label,mask_path,view,modality,object_id\n\
             img/t.png,pill,train,0,,,,\n\
             img/a.png,pill,test,1,img/a_mask.png,top,ir,obj7\n\
             img/b.png,pill,test,1,img/missing.png,side,rgb,obj7\n",
        )
        .unwrap();
        let recs = scan_dataset(dir.path(), Layout::FlatCsv).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].modality, Modality::Ir);
        assert_eq!(recs[1].view.as_deref(), Some("top"));
        assert_eq!(recs[1].object_id.as_deref(), Some("obj7"));
        assert!(recs[1].mask_path.is_some());
        assert!(recs[2].mask_path.is_none());
        assert_eq!(recs[0].modality, Modality::Rgb);
        fs::write(dir.path().join("bad.csv"), "image_path,category,split,label\nx.png,pill,train,1\n").unwrap();
        assert!(matches!(scan_dataset(&dir.path().join("bad.csv"), Layout::FlatCsv), Err(Error::Data(_))));
    }
}
