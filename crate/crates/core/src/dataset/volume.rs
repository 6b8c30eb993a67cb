use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[default]
    #[serde(rename = "T1CE")]
    T1ce,
}

impl Modality {
    /// File-name suffix used by the BraTS naming scheme.
    pub fn file_suffix(self) -> &'static str {
        match self {
            Modality::T1ce => "t1ce",
        }
    }

    /// Text used in prompts.
    pub fn prompt_text(self) -> &'static str {
        match self {
            Modality::T1ce => "T1CE MRI",
        }
    }
}

/// One subject's scan in `[x, y, z]` voxel order with its segmentation.
#[derive(Clone, Debug)]
pub struct Volume {
    voxels: Array3<f32>,
    seg: Array3<i32>,
    pub subject_id: String,
    pub modality: Modality,
    pub age: Option<f64>,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, seg: Array3<i32>, subject_id: impl Into<String>, age: Option<f64>) -> Result<Self> {
        if voxels.shape() != seg.shape() {
            return Err(Error::DimensionMismatch {
                what: "voxels vs seg",
                left: voxels.shape().to_vec(),
                right: seg.shape().to_vec(),
            });
        }
        if let Some(&bad) = seg.iter().find(|&&v| v < 0) {
            return Err(Error::InvalidLabel { value: f64::from(bad) });
        }
        Ok(Self { voxels, seg, subject_id: subject_id.into(), modality: Modality::T1ce, age })
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn seg(&self) -> &Array3<i32> {
        &self.seg
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

#[derive(Debug, Deserialize)]
struct SubjectMeta {
    age: Option<f64>,
}

fn read_nifti(path: &Path) -> Result<Array3<f32>> {
    let err = |message: String| Error::Nifti { path: path.to_path_buf(), message };
    let obj = ReaderOptions::new().read_file(path).map_err(|e| err(e.to_string()))?;
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(|e| err(e.to_string()))?;
    arr.into_dimensionality::<Ix3>().map_err(|_| err("expected a 3-D volume".into()))
}

fn labels_from_f32(seg: Array3<f32>) -> Result<Array3<i32>> {
    if let Some(&bad) = seg.iter().find(|&&v| v < 0.0 || v.fract() != 0.0 || !v.is_finite()) {
        return Err(Error::InvalidLabel { value: f64::from(bad) });
    }
    Ok(seg.mapv(|v| v as i32))
}

/// Locates `<subject>_t1ce.nii[.gz]` inside a subject directory, or accepts
/// the image path itself.
fn resolve_image(path: &Path, modality: Modality) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if !path.is_dir() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let suffix = format!("_{}.nii", modality.file_suffix());
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.contains(&suffix)))
        .collect();
    found.sort();
    found.into_iter().next().ok_or_else(|| Error::MissingFile(path.join(format!("*{suffix}[.gz]"))))
}

/// Splits `BraTS20_001_t1ce.nii.gz` into (`BraTS20_001`, `.nii.gz`).
fn subject_and_ext(image: &Path, modality: Modality) -> Result<(String, String)> {
    let name = image.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let marker = format!("_{}", modality.file_suffix());
    let pos = name
        .rfind(&marker)
        .ok_or_else(|| Error::InvalidArgument(format!("{name}: expected a name ending in {marker}.nii[.gz]")))?;
    Ok((name[..pos].to_string(), name[pos + marker.len()..].to_string()))
}

/// Reads an image volume, its `_seg` companion and the optional
/// `_meta.json` sidecar carrying `age`.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let modality = Modality::T1ce;
    let image = resolve_image(path, modality)?;
    let (subject, ext) = subject_and_ext(&image, modality)?;
    let dir = image.parent().unwrap_or(Path::new("."));
    let seg_path = dir.join(format!("{subject}_seg{ext}"));
    if !seg_path.is_file() {
        return Err(Error::MissingFile(seg_path));
    }
    let voxels = read_nifti(&image)?;
    let seg = labels_from_f32(read_nifti(&seg_path)?)?;
    let meta_path = dir.join(format!("{subject}_meta.json"));
    let age = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: SubjectMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        meta.age
    } else {
        None
    };
    Volume::new(voxels, seg, subject, age)
}

/// Writes a volume in the layout [`load_volume`] reads.
pub fn save_volume(dir: &Path, volume: &Volume) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &volume.subject_id;
    let image = dir.join(format!("{id}_{}.nii.gz", volume.modality.file_suffix()));
    let seg = dir.join(format!("{id}_seg.nii.gz"));
    let werr = |p: &Path, e: nifti::NiftiError| Error::Nifti { path: p.to_path_buf(), message: e.to_string() };
    nifti::writer::WriterOptions::new(&image).write_nifti(&volume.voxels).map_err(|e| werr(&image, e))?;
    let seg_f = volume.seg.mapv(|v| v as f32);
    nifti::writer::WriterOptions::new(&seg).write_nifti(&seg_f).map_err(|e| werr(&seg, e))?;
    if let Some(age) = volume.age {
        let meta = dir.join(format!("{id}_meta.json"));
        fs::write(&meta, serde_json::json!({ "age": age }).to_string()).map_err(|e| Error::io(&meta, e))?;
    }
    Ok(image)
}

/// Every subject image under `root` (searched one directory deep), sorted.
pub fn discover_volumes(root: &Path) -> Result<Vec<PathBuf>> {
    let suffix = format!("_{}.nii", Modality::T1ce.file_suffix());
    let mut out = Vec::new();
    let mut visit = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut subdirs = Vec::new();
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                subdirs.push(p);
            } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.contains(&suffix)) {
                out.push(p);
            }
        }
        Ok(subdirs)
    };
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    for sub in visit(root)? {
        visit(&sub)?;
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_nifti() {
        let dir = tempfile::tempdir().unwrap();
        let vox = Array3::from_shape_fn((6, 5, 4), |(x, y, z)| (x + 10 * y + 100 * z) as f32);
        let seg = Array3::from_shape_fn((6, 5, 4), |(x, _, _)| if x == 2 { 4 } else { 0 });
        let v = Volume::new(vox.clone(), seg.clone(), "S1", Some(61.0)).unwrap();
        let img = save_volume(dir.path(), &v).unwrap();
        let back = load_volume(&img).unwrap();
        assert_eq!(back.subject_id, "S1");
        assert_eq!(back.voxels(), &vox);
        assert_eq!(back.seg(), &seg);
        assert_eq!(back.age, Some(61.0));
        assert_eq!(load_volume(dir.path()).unwrap().dims(), (6, 5, 4));
        assert_eq!(discover_volumes(dir.path()).unwrap(), vec![img]);
    }

    #[test]
    fn rejects_mismatch_and_bad_labels() {
        let a = Array3::<f32>::zeros((2, 2, 2));
        assert!(matches!(
            Volume::new(a.clone(), Array3::zeros((2, 2, 3)), "x", None),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut s = Array3::<f32>::zeros((2, 2, 2));
        s[[0, 0, 0]] = 2.5;
        assert!(matches!(labels_from_f32(s), Err(Error::InvalidLabel { value }) if value == 2.5));
    }

    #[test]
    fn missing_seg_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(Array3::zeros((2, 2, 2)), Array3::zeros((2, 2, 2)), "S2", None).unwrap();
        let img = save_volume(dir.path(), &v).unwrap();
        fs::remove_file(dir.path().join("S2_seg.nii.gz")).unwrap();
        assert!(matches!(load_volume(&img), Err(Error::MissingFile(_))));
    }
}
