use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SliceClass, SliceRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tumorous: usize,
    pub non_tumorous: usize,
}

impl ClassCounts {
    fn add(&mut self, o: ClassCounts) {
        self.tumorous += o.tumorous;
        self.non_tumorous += o.non_tumorous;
    }

    fn sub(&mut self, o: ClassCounts) {
        self.tumorous -= o.tumorous;
        self.non_tumorous -= o.non_tumorous;
    }

    pub fn total(&self) -> usize {
        self.tumorous + self.non_tumorous
    }

    pub fn tumorous_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.tumorous as f64 / self.total() as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: ClassCounts,
    pub test: ClassCounts,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
    pub seed: u64,
    pub counts: SplitCounts,
}

impl SplitManifest {
    pub fn is_train(&self, subject: &str) -> bool {
        self.train_subjects.contains(subject)
    }

    pub fn is_test(&self, subject: &str) -> bool {
        self.test_subjects.contains(subject)
    }
}

const TOLERANCE: f64 = 0.02;

fn imbalance(train: ClassCounts, test: ClassCounts) -> f64 {
    (train.tumorous_fraction() - test.tumorous_fraction()).abs()
}

/// Subject-level split with `round(n * (1 - ratio))` test subjects (at
/// least one). Starts from a seeded shuffle, then swaps subjects greedily
/// until the tumorous fraction of both sides agrees within two points or no
/// swap helps.
pub fn subject_split(records: &[SliceRecord], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let mut per_subject: BTreeMap<&str, ClassCounts> = BTreeMap::new();
    for r in records {
        let e = per_subject.entry(r.subject_id.as_str()).or_default();
        match r.slice_class {
            SliceClass::Tumorous => e.tumorous += 1,
            SliceClass::NonTumorous => e.non_tumorous += 1,
            SliceClass::Excluded => {}
        }
    }
    let n = per_subject.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("subject split needs at least 2 subjects, got {n}")));
    }
    let n_test = ((n as f64 * (1.0 - ratio)).round() as usize).clamp(1, n - 1);
    let mut subjects: Vec<(&str, ClassCounts)> = per_subject.into_iter().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = subjects.split_at_mut(n_test);

    let sum = |s: &[(&str, ClassCounts)]| {
        s.iter().fold(ClassCounts::default(), |mut a, (_, c)| {
            a.add(*c);
            a
        })
    };
    let (mut tr, mut te) = (sum(train), sum(test));
    loop {
        let current = imbalance(tr, te);
        if current <= TOLERANCE {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, (_, ci)) in test.iter().enumerate() {
            for (j, (_, cj)) in train.iter().enumerate() {
                let (mut a, mut b) = (tr, te);
                a.sub(*cj);
                a.add(*ci);
                b.sub(*ci);
                b.add(*cj);
                let v = imbalance(a, b);
                if v < best.map_or(current, |x| x.2) - 1e-12 {
                    best = Some((i, j, v));
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        tr.sub(train[j].1);
        tr.add(test[i].1);
        te.sub(test[i].1);
        te.add(train[j].1);
        std::mem::swap(&mut test[i], &mut train[j]);
    }
    Ok(SplitManifest {
        train_subjects: train.iter().map(|(s, _)| s.to_string()).collect(),
        test_subjects: test.iter().map(|(s, _)| s.to_string()).collect(),
        seed,
        counts: SplitCounts { train: tr, test: te },
    })
}
