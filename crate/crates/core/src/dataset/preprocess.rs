use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::borrow::{borrow_mask, MaskPool};
use super::slice_ops::{
    categorize_with, clip_and_normalize, count_true, dilate_mask, extract_slices, merge_tumor_labels, pad_and_resize,
    SliceClass, TumorRange,
};
use super::split::{subject_split, SplitManifest};
use super::volume::Volume;
use super::{MaskSource, SliceRecord};
use crate::edge::{canny_edges, CannyParams};
use crate::error::Result;
use crate::prompt::{render_prompt, size_category, CaseKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub slice_lo: usize,
    pub slice_hi: usize,
    pub clip_percentile: f64,
    pub pad_to: usize,
    pub out_size: usize,
    pub dilation: usize,
    pub tumor_range: TumorRange,
    /// Tumor pixel counts are rescaled to a field of view with this many
    /// pixels before classification, so thresholds keep their meaning for
    /// volumes sampled more coarsely than 240×240.
    pub reference_pixels: usize,
    pub canny: CannyParams,
    pub split_ratio: f64,
}

impl PreprocessConfig {
    pub fn paper() -> Self {
        Self {
            slice_lo: 80,
            slice_hi: 130,
            clip_percentile: 99.5,
            pad_to: 256,
            out_size: 512,
            dilation: 5,
            tumor_range: TumorRange::default(),
            reference_pixels: 240 * 240,
            canny: CannyParams::default(),
            split_ratio: 0.9,
        }
    }

    pub fn desk() -> Self {
        Self { slice_lo: 4, slice_hi: 11, pad_to: 64, out_size: 64, ..Self::paper() }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub records: Vec<SliceRecord>,
    pub manifest: SplitManifest,
    pub excluded: usize,
}

impl PreparedDataset {
    pub fn train(&self) -> impl Iterator<Item = &SliceRecord> {
        self.records.iter().filter(|r| self.manifest.is_train(&r.subject_id))
    }

    pub fn test(&self) -> impl Iterator<Item = &SliceRecord> {
        self.records.iter().filter(|r| self.manifest.is_test(&r.subject_id))
    }
}

/// Slice records for one volume. Excluded slices are dropped and counted.
/// Non-tumorous records come back with an empty inpaint mask; masks are
/// borrowed once the split is known.
pub fn records_from_volume(volume: &Volume, cfg: &PreprocessConfig) -> Result<(Vec<SliceRecord>, usize)> {
    let raw = extract_slices(volume.voxels(), volume.seg(), cfg.slice_lo, cfg.slice_hi)?;
    let mut out = Vec::new();
    let mut excluded = 0;
    for s in raw {
        let native = merge_tumor_labels(s.seg.view());
        let (h, w) = native.dim();
        let native_count = count_true(native.view());
        let count = (native_count as f64 * cfg.reference_pixels as f64 / (h * w) as f64).round() as usize;
        let class = categorize_with(count, cfg.tumor_range);
        if class == SliceClass::Excluded {
            excluded += 1;
            continue;
        }
        let resized = pad_and_resize(s.image.view(), cfg.pad_to, cfg.out_size)?;
        let image = clip_and_normalize(resized.view(), cfg.clip_percentile);
        let tumor_mask = pad_and_resize(native.view(), cfg.pad_to, cfg.out_size)?;
        let inpaint_mask = match class {
            SliceClass::Tumorous => dilate_mask(tumor_mask.view(), cfg.dilation),
            _ => Array2::from_elem(tumor_mask.dim(), false),
        };
        let edges = canny_edges(image.view(), &cfg.canny)?.edges;
        out.push(SliceRecord {
            image,
            tumor_mask,
            inpaint_mask,
            edges,
            subject_id: volume.subject_id.clone(),
            slice_index: s.slice_index,
            slice_class: class,
            tumor_pixel_count: count,
            age: volume.age,
            prompt: None,
            mask_source: (class == SliceClass::Tumorous).then_some(MaskSource::OwnTumor),
        });
    }
    Ok((out, excluded))
}

/// Full preprocessing: slice records, subject split, borrowed masks for
/// non-tumorous slices (drawn within the same split) and rendered prompts.
pub fn prepare_dataset(volumes: &[Volume], cfg: &PreprocessConfig, seed: u64) -> Result<PreparedDataset> {
    let mut records = Vec::new();
    let mut excluded = 0;
    for v in volumes {
        let (r, e) = records_from_volume(v, cfg)?;
        records.extend(r);
        excluded += e;
    }
    records.sort_by(|a, b| (&a.subject_id, a.slice_index).cmp(&(&b.subject_id, b.slice_index)));
    let manifest = subject_split(&records, cfg.split_ratio, seed)?;

    let train_pool = MaskPool::from_records(records.iter().filter(|r| manifest.is_train(&r.subject_id)));
    let test_pool = MaskPool::from_records(records.iter().filter(|r| manifest.is_test(&r.subject_id)));
    let mut borrow_rng = ChaCha8Rng::seed_from_u64(seed);
    borrow_rng.set_stream(1);
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(seed);
    prompt_rng.set_stream(2);
    for r in &mut records {
        if r.slice_class == SliceClass::NonTumorous {
            let own = if manifest.is_train(&r.subject_id) { &train_pool } else { &test_pool };
            let pool = if own.is_empty() {
                warn!("no tumorous slices in the split of {}; borrowing across splits", r.subject_id);
                if manifest.is_train(&r.subject_id) { &test_pool } else { &train_pool }
            } else {
                own
            };
            let b = borrow_mask(r.slice_index, pool, &mut borrow_rng)?;
            r.inpaint_mask = b.mask;
            r.mask_source =
                Some(MaskSource::Borrowed { subject_id: b.source_subject, slice_index: b.source_slice, fallback: b.fallback });
        }
        let (kind, size) = match r.slice_class {
            SliceClass::Tumorous => (CaseKind::Tumorous, Some(size_category(r.tumor_pixel_count)?)),
            _ => (CaseKind::NonTumorous, None),
        };
        r.prompt = Some(render_prompt(kind, crate::dataset::Modality::T1ce, r.age, size, &mut prompt_rng)?);
    }
    info!(
        "prepared {} slices ({} excluded); train {:?}, test {:?}",
        records.len(),
        excluded,
        manifest.counts.train,
        manifest.counts.test
    );
    Ok(PreparedDataset { records, manifest, excluded })
}
