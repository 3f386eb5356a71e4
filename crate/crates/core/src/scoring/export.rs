//! On-disk anomaly maps: a raw binary per image plus a JSON index.
//!
//! Binary layout: `AMAP`, `u32` height, `u32` width, `u32` reserved (zero),
//! then `height·width` little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AMAP_MAGIC: &[u8; 4] = b"AMAP";

pub fn write_amap(path: &Path, map: ArrayView2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(AMAP_MAGIC)?;
    for v in [h as u32, w as u32, 0u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for &v in map.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_amap(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path)?;
    let bad = |reason: String| Error::Ingest { path: path.to_path_buf(), reason };
    if bytes.len() < 16 || &bytes[..4] != AMAP_MAGIC {
        return Err(bad("missing AMAP header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    if bytes.len() != 16 + 4 * h * w {
        return Err(bad(format!("{}x{} map needs {} bytes, file has {}", h, w, 16 + 4 * h * w, bytes.len())));
    }
    let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Array2::from_shape_vec((h, w), values).expect("length checked"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapIndexEntry {
    /// Path of the binary map relative to the index file.
    pub file: String,
    pub label: u8,
    pub category: String,
    pub view: Option<String>,
    pub modality: Option<String>,
    /// Path of the ground-truth mask, when one exists.
    #[serde(default)]
    pub mask_path: Option<String>,
    #[serde(default)]
    pub image_score: Option<f64>,
    #[serde(default)]
    pub object_id: Option<String>,
}

/// `image_id → entry`, serialized as a JSON object.
pub type MapIndex = BTreeMap<String, MapIndexEntry>;

pub fn write_index(path: &Path, index: &MapIndex) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(index)?)?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<MapIndex> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Writes an 8-bit grayscale PNG of `(v - mean) / (max - mean)`, clipped to `[0, 1]`.
pub fn visualize(path: &Path, map: ArrayView2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let n = map.len().max(1) as f64;
    let mean = map.iter().map(|&v| v as f64).sum::<f64>() / n;
    let max = map.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let span = max - mean;
    let pixels = map
        .iter()
        .map(|&v| if span > 0.0 { (((v as f64 - mean) / span).clamp(0.0, 1.0) * 255.0).round() as u8 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn amap_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.amap");
        let m = array![[0.5f32, -1.25, 3.0], [f32::MIN_POSITIVE, 0.0, 7.5]];
        write_amap(&p, m.view()).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[..4], b"AMAP");
        assert_eq!(&raw[4..16], &[2, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&raw[16..20], &0.5f32.to_le_bytes());
        assert_eq!(raw.len(), 16 + 24);
        assert_eq!(read_amap(&p).unwrap(), m);
        fs::write(&p, &raw[..30]).unwrap();
        assert!(matches!(read_amap(&p), Err(Error::Ingest { .. })));
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = MapIndex::new();
        idx.insert(
            "bottle/test/broken/000".into(),
            MapIndexEntry {
                file: "maps/0.amap".into(),
                label: 1,
                category: "bottle".into(),
                view: None,
                modality: Some("rgb".into()),
                mask_path: None,
                image_score: Some(0.4),
                object_id: None,
            },
        );
        let p = dir.path().join("index.json");
        write_index(&p, &idx).unwrap();
        assert_eq!(read_index(&p).unwrap(), idx);
    }

    #[test]
    fn visualization_is_mean_max_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.png");
        let m = array![[0.0f32, 1.0], [2.0, 5.0]];
        visualize(&p, m.view()).unwrap();
        let img = image::open(&p).unwrap().to_luma8();
        // mean 2: values below clip to 0, max maps to 255
        assert_eq!(img.into_raw(), vec![0, 0, 0, 255]);
        visualize(&p, Array2::from_elem((3, 3), 0.4f32).view()).unwrap();
        assert!(image::open(&p).unwrap().to_luma8().iter().all(|&v| v == 0));
    }
}
