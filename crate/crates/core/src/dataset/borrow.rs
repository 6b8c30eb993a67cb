use std::collections::BTreeMap;

use log::info;
use ndarray::Array2;
use rand::Rng;

use super::{SliceClass, SliceRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Candidate {
    subject_id: String,
    slice_index: usize,
    mask: Array2<bool>,
}

/// Dilated tumor masks of tumorous records, indexed by slice index.
/// Candidates at one index keep insertion order, which makes draws
/// reproducible for a fixed seed.
#[derive(Clone, Debug, Default)]
pub struct MaskPool {
    by_index: BTreeMap<usize, Vec<Candidate>>,
}

impl MaskPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SliceRecord>) -> Self {
        let mut pool = Self::new();
        for r in records.into_iter().filter(|r| r.slice_class == SliceClass::Tumorous) {
            pool.insert(&r.subject_id, r.slice_index, r.inpaint_mask.clone());
        }
        pool
    }

    pub fn insert(&mut self, subject_id: &str, slice_index: usize, dilated_mask: Array2<bool>) {
        self.by_index.entry(slice_index).or_default().push(Candidate {
            subject_id: subject_id.to_string(),
            slice_index,
            mask: dilated_mask,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.by_index.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_index.values().map(Vec::len).sum()
    }

    /// Closest populated slice index; ties go to the lower index.
    fn nearest(&self, slice_index: usize) -> Option<usize> {
        let below = self.by_index.range(..=slice_index).next_back().map(|(&k, _)| k);
        let above = self.by_index.range(slice_index..).next().map(|(&k, _)| k);
        match (below, above) {
            (Some(b), Some(a)) => Some(if slice_index - b <= a - slice_index { b } else { a }),
            (b, a) => b.or(a),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BorrowedMask {
    pub mask: Array2<bool>,
    pub source_subject: String,
    pub source_slice: usize,
    pub fallback: bool,
}

/// Draws a dilated tumor mask uniformly from the pool entries at
/// `slice_index`, or at the nearest populated index when there are none.
pub fn borrow_mask<R: Rng + ?Sized>(slice_index: usize, pool: &MaskPool, rng: &mut R) -> Result<BorrowedMask> {
    let idx = pool.nearest(slice_index).ok_or_else(|| Error::Empty("tumor mask pool".into()))?;
    let fallback = idx != slice_index;
    if fallback {
        info!("no tumorous slice at index {slice_index}; borrowing from index {idx}");
    }
    let cands = &pool.by_index[&idx];
    let c = &cands[rng.random_range(0..cands.len())];
    Ok(BorrowedMask { mask: c.mask.clone(), source_subject: c.subject_id.clone(), source_slice: c.slice_index, fallback })
}
