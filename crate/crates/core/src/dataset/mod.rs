//! Volume ingestion, slice preprocessing, subject-level splitting and the
//! on-disk slice cache.

mod borrow;
mod cache;
mod preprocess;
mod slice_ops;
mod split;
pub mod synthetic;
mod volume;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::prompt::PromptSpec;

pub use borrow::{borrow_mask, BorrowedMask, MaskPool};
pub use cache::{read_cache, read_image_f32, read_record, write_cache, write_image_f32, CacheManifest, CACHE_MANIFEST};
pub use preprocess::{prepare_dataset, records_from_volume, PreparedDataset, PreprocessConfig};
pub use slice_ops::{
    categorize_slice, categorize_with, clip_and_normalize, count_true, dilate_mask, extract_slices,
    merge_tumor_labels, pad_and_resize, percentile_sorted, RawSlice, SliceClass, TumorRange,
};
pub use split::{subject_split, ClassCounts, SplitCounts, SplitManifest};
pub use volume::{discover_volumes, load_volume, save_volume, Modality, Volume};

/// Where a record's inpaint mask came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSource {
    /// Dilated own tumor mask.
    OwnTumor,
    Borrowed {
        subject_id: String,
        slice_index: usize,
        fallback: bool,
    },
}

/// One preprocessed slice. `image` is in `[-1, 1]` at model resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub image: Array2<f32>,
    pub tumor_mask: Array2<bool>,
    pub inpaint_mask: Array2<bool>,
    pub edges: Array2<bool>,
    pub subject_id: String,
    pub slice_index: usize,
    pub slice_class: SliceClass,
    pub tumor_pixel_count: usize,
    pub age: Option<f64>,
    pub prompt: Option<PromptSpec>,
    pub mask_source: Option<MaskSource>,
}

impl SliceRecord {
    pub fn id(&self) -> String {
        format!("{}_s{:03}", self.subject_id, self.slice_index)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }
}
