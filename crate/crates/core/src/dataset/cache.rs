//! Slice cache layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/slices/<id>.f32          image, little-endian f32, row-major
//! <dir>/slices/<id>_tumor.u8     tumor mask, one byte per pixel
//! <dir>/slices/<id>_inpaint.u8   inpaint mask
//! <dir>/slices/<id>_edge.u8      Canny edge map
//! <dir>/slices/<id>.json         sidecar
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::preprocess::{PreparedDataset, PreprocessConfig};
use super::split::SplitManifest;
use super::{MaskSource, SliceClass, SliceRecord};
use crate::error::{Error, Result};
use crate::fsutil::{read, read_json, write_atomic, write_json};
use crate::prompt::PromptSpec;

pub const CACHE_MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub subject_id: String,
    pub slice_index: usize,
    pub class: SliceClass,
    pub tumor_pixel_count: usize,
    pub age: Option<f64>,
    pub height: usize,
    pub width: usize,
    pub image_file: String,
    pub tumor_mask_file: String,
    pub inpaint_mask_file: String,
    pub edge_file: String,
    pub mask_source: Option<MaskSource>,
    pub prompt: Option<PromptSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub id: String,
    pub split: SplitName,
    pub sidecar: String,
    pub prompt: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub format_version: u32,
    pub preprocess: PreprocessConfig,
    pub split: SplitManifest,
    pub excluded: usize,
    pub records: Vec<CacheEntry>,
}

fn mask_bytes(m: &Array2<bool>) -> Vec<u8> {
    m.iter().map(|&b| u8::from(b)).collect()
}

fn read_mask(path: &Path, h: usize, w: usize) -> Result<Array2<bool>> {
    let bytes = read(path)?;
    if bytes.len() != h * w {
        return Err(Error::format(path, format!("expected {} bytes, found {}", h * w, bytes.len())));
    }
    Ok(Array2::from_shape_vec((h, w), bytes.into_iter().map(|b| b != 0).collect()).expect("length checked"))
}

pub fn write_image_f32(path: &Path, image: &Array2<f32>) -> Result<()> {
    let bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)
}

pub fn read_image_f32(path: &Path, h: usize, w: usize) -> Result<Array2<f32>> {
    let bytes = read(path)?;
    if bytes.len() != 4 * h * w {
        return Err(Error::format(path, format!("expected {} bytes, found {}", 4 * h * w, bytes.len())));
    }
    let vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Array2::from_shape_vec((h, w), vals).expect("length checked"))
}

pub fn write_cache(dir: &Path, data: &PreparedDataset, preprocess: &PreprocessConfig) -> Result<CacheManifest> {
    let slices = dir.join("slices");
    let mut entries = Vec::with_capacity(data.records.len());
    for r in &data.records {
        let id = r.id();
        let (h, w) = r.dim();
        let sidecar = Sidecar {
            subject_id: r.subject_id.clone(),
            slice_index: r.slice_index,
            class: r.slice_class,
            tumor_pixel_count: r.tumor_pixel_count,
            age: r.age,
            height: h,
            width: w,
            image_file: format!("{id}.f32"),
            tumor_mask_file: format!("{id}_tumor.u8"),
            inpaint_mask_file: format!("{id}_inpaint.u8"),
            edge_file: format!("{id}_edge.u8"),
            mask_source: r.mask_source.clone(),
            prompt: r.prompt.clone(),
        };
        write_image_f32(&slices.join(&sidecar.image_file), &r.image)?;
        write_atomic(&slices.join(&sidecar.tumor_mask_file), &mask_bytes(&r.tumor_mask))?;
        write_atomic(&slices.join(&sidecar.inpaint_mask_file), &mask_bytes(&r.inpaint_mask))?;
        write_atomic(&slices.join(&sidecar.edge_file), &mask_bytes(&r.edges))?;
        write_json(&slices.join(format!("{id}.json")), &sidecar)?;
        let split = if data.manifest.is_test(&r.subject_id) { SplitName::Test } else { SplitName::Train };
        entries.push(CacheEntry {
            id: id.clone(),
            split,
            sidecar: format!("slices/{id}.json"),
            prompt: r.prompt.as_ref().map(|p| p.text.clone()),
        });
    }
    let manifest = CacheManifest {
        format_version: FORMAT_VERSION,
        preprocess: preprocess.clone(),
        split: data.manifest.clone(),
        excluded: data.excluded,
        records: entries,
    };
    write_json(&dir.join(CACHE_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_record(dir: &Path, sidecar_rel: &str) -> Result<SliceRecord> {
    let path = dir.join(sidecar_rel);
    let sc: Sidecar = read_json(&path)?;
    let base = path.parent().unwrap_or(dir);
    let (h, w) = (sc.height, sc.width);
    Ok(SliceRecord {
        image: read_image_f32(&base.join(&sc.image_file), h, w)?,
        tumor_mask: read_mask(&base.join(&sc.tumor_mask_file), h, w)?,
        inpaint_mask: read_mask(&base.join(&sc.inpaint_mask_file), h, w)?,
        edges: read_mask(&base.join(&sc.edge_file), h, w)?,
        subject_id: sc.subject_id,
        slice_index: sc.slice_index,
        slice_class: sc.class,
        tumor_pixel_count: sc.tumor_pixel_count,
        age: sc.age,
        prompt: sc.prompt,
        mask_source: sc.mask_source,
    })
}

pub fn read_cache(dir: &Path) -> Result<(PreparedDataset, CacheManifest)> {
    let mpath = dir.join(CACHE_MANIFEST);
    if !mpath.is_file() {
        return Err(Error::MissingArtifact(format!("slice cache manifest {}", mpath.display())));
    }
    let manifest: CacheManifest = read_json(&mpath)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported cache format {}", manifest.format_version)));
    }
    let records = manifest.records.iter().map(|e| read_record(dir, &e.sidecar)).collect::<Result<Vec<_>>>()?;
    let data = PreparedDataset { records, manifest: manifest.split.clone(), excluded: manifest.excluded };
    Ok((data, manifest))
}
