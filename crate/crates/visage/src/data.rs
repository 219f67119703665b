//! Subject-independent fold splitting, same-class pair sampling, and
//! deterministic batch assembly.
//!
//! Batch composition is a pure function of (seed, iteration): the epoch
//! permutation derives from (seed, epoch) and pair draws from (seed,
//! iteration), so a resumed run consumes exactly the batches an uninterrupted
//! run would have seen.

use crate::image::{Image, ImageError};
use crate::labels::ExpressionLabel;
use crate::manifest::{DatasetManifest, ManifestEntry};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("fold count {fold_count} exceeds subject count {subjects}")]
    TooManyFolds { fold_count: usize, subjects: usize },
    #[error("fold index {index} out of range for {fold_count} folds")]
    FoldOutOfRange { index: usize, fold_count: usize },
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("no entries to iterate")]
    NoEntries,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// The anchor / same-class real / same-class synthetic unit consumed by the
/// recognition network.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub x: Image,
    pub x_pr: Image,
    pub x_pf: Image,
    pub label: ExpressionLabel,
}

/// Subject-level partition for cross-validation: every subject lands in
/// exactly one fold, so no identity straddles a train/test boundary.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    fold_count: usize,
    assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.get(subject_id).copied()
    }

    pub fn train_entries<'m>(
        &self,
        manifest: &'m DatasetManifest,
        fold: usize,
    ) -> Result<Vec<&'m ManifestEntry>, DataError> {
        self.split_entries(manifest, fold, false)
    }

    pub fn test_entries<'m>(
        &self,
        manifest: &'m DatasetManifest,
        fold: usize,
    ) -> Result<Vec<&'m ManifestEntry>, DataError> {
        self.split_entries(manifest, fold, true)
    }

    fn split_entries<'m>(
        &self,
        manifest: &'m DatasetManifest,
        fold: usize,
        held_out: bool,
    ) -> Result<Vec<&'m ManifestEntry>, DataError> {
        if fold >= self.fold_count {
            return Err(DataError::FoldOutOfRange {
                index: fold,
                fold_count: self.fold_count,
            });
        }
        Ok(manifest
            .entries
            .iter()
            .filter(|e| (self.assignments[&e.subject_id] == fold) == held_out)
            .collect())
    }

    /// Audit export: one `subject_id<TAB>fold` line per subject.
    pub fn export(&self, path: &Path) -> Result<(), DataError> {
        let mut text = String::new();
        for (subject, fold) in &self.assignments {
            text.push_str(&format!("{subject}\t{fold}\n"));
        }
        std::fs::write(path, text).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Deterministically partitions subjects into `fold_count` folds of sizes
/// differing by at most one.
pub fn make_folds(
    manifest: &DatasetManifest,
    fold_count: usize,
    seed: u64,
) -> Result<FoldSplit, DataError> {
    let mut subjects = manifest.subjects();
    subjects.sort();
    if fold_count > subjects.len() || fold_count == 0 {
        return Err(DataError::TooManyFolds {
            fold_count,
            subjects: subjects.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let assignments = subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % fold_count))
        .collect();
    Ok(FoldSplit {
        fold_count,
        assignments,
    })
}

/// Uniformly picks a same-class partner for `anchor`, excluding the anchor
/// entry itself. A singleton class falls back to the anchor with a warning.
pub fn sample_pair_index(
    entries: &[&ManifestEntry],
    anchor: usize,
    same_subject_only: bool,
    rng: &mut impl Rng,
) -> usize {
    let a = entries[anchor];
    let candidates: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            *i != anchor
                && e.class_index == a.class_index
                && (!same_subject_only || e.subject_id == a.subject_id)
        })
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        log::warn!(
            "class {} has a single usable image ({}); pairing it with itself",
            a.class_index,
            a.path
        );
        return anchor;
    }
    candidates[rng.gen_range(0..candidates.len())]
}

/// All images of one entry list held in memory as `[c, h, w]` float arrays.
pub struct ImageStore {
    images: Vec<Image>,
}

impl ImageStore {
    pub fn load(
        root: &Path,
        entries: &[&ManifestEntry],
        size: usize,
        channels: usize,
    ) -> Result<Self, DataError> {
        let mut images = Vec::with_capacity(entries.len());
        for e in entries {
            images.push(Image::load_png(&resolve(root, &e.path), size, channels)?);
        }
        Ok(Self { images })
    }

    pub fn get(&self, index: usize) -> &Image {
        &self.images[index]
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// One training batch: anchors, their labels, and same-class partners.
pub struct Batch {
    pub x: Array4<f32>,
    pub x_pr: Array4<f32>,
    pub labels: Vec<usize>,
    pub anchor_indices: Vec<usize>,
    pub pair_indices: Vec<usize>,
}

/// Deterministic batch assembly over one fixed entry list.
pub struct BatchPlan {
    seed: u64,
    batch_size: usize,
    n: usize,
    same_subject_only: bool,
}

impl BatchPlan {
    pub fn new(
        n: usize,
        batch_size: usize,
        seed: u64,
        same_subject_only: bool,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::ZeroBatch);
        }
        if n == 0 {
            return Err(DataError::NoEntries);
        }
        Ok(Self {
            seed,
            batch_size,
            n,
            same_subject_only,
        })
    }

    /// Batches per epoch; the final incomplete batch is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        (self.n / self.batch_size).max(1)
    }

    /// Anchor indices for iteration `t`, a pure function of (seed, t).
    pub fn anchor_indices(&self, t: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch() as u64;
        let epoch = t / bpe;
        let slot = (t % bpe) as usize;
        let mut perm: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * epoch);
        perm.shuffle(&mut rng);
        let take = self.batch_size.min(self.n);
        perm[slot * self.batch_size..]
            .iter()
            .take(take)
            .copied()
            .collect()
    }

    /// Assembles the batch for iteration `t` from preloaded images.
    pub fn batch(&self, t: u64, entries: &[&ManifestEntry], store: &ImageStore) -> Batch {
        let anchors = self.anchor_indices(t);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * t + 1);
        let pairs: Vec<usize> = anchors
            .iter()
            .map(|&a| sample_pair_index(entries, a, self.same_subject_only, &mut rng))
            .collect();

        let imgs: Vec<&Image> = anchors.iter().map(|&i| store.get(i)).collect();
        let pair_imgs: Vec<&Image> = pairs.iter().map(|&i| store.get(i)).collect();
        Batch {
            x: crate::image::stack_batch(&imgs),
            x_pr: crate::image::stack_batch(&pair_imgs),
            labels: anchors.iter().map(|&i| entries[i].class_index).collect(),
            anchor_indices: anchors,
            pair_indices: pairs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ManifestEntry;

    fn toy_manifest(subjects: usize, per_subject: usize, k: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for s in 0..subjects {
            for i in 0..per_subject {
                entries.push(ManifestEntry {
                    path: format!("s{s}_i{i}.png"),
                    subject_id: format!("id_{s:04}"),
                    class_index: i % k,
                });
            }
        }
        DatasetManifest {
            class_count: k,
            image_size: 32,
            channels: 1,
            entries,
        }
    }

    #[test]
    fn folds_are_even_and_subject_disjoint() {
        let m = toy_manifest(200, 2, 2);
        let split = make_folds(&m, 10, 3).unwrap();
        let mut sizes = vec![0usize; 10];
        for s in m.subjects() {
            sizes[split.fold_of(&s).unwrap()] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 20), "{sizes:?}");

        for fold in 0..10 {
            let train = split.train_entries(&m, fold).unwrap();
            let test = split.test_entries(&m, fold).unwrap();
            assert_eq!(train.len() + test.len(), m.entries.len());
            let train_subjects: std::collections::HashSet<_> =
                train.iter().map(|e| &e.subject_id).collect();
            for e in &test {
                assert!(!train_subjects.contains(&e.subject_id));
            }
        }
    }

    #[test]
    fn folds_are_deterministic_and_respect_bounds() {
        let m = toy_manifest(7, 1, 2);
        let a = make_folds(&m, 5, 9).unwrap();
        let b = make_folds(&m, 5, 9).unwrap();
        for s in m.subjects() {
            assert_eq!(a.fold_of(&s), b.fold_of(&s));
        }
        assert!(make_folds(&m, 8, 9).is_err());
        assert!(a.train_entries(&m, 5).is_err());
    }

    #[test]
    fn pair_sampling_stays_in_class_and_excludes_anchor() {
        let m = toy_manifest(6, 4, 2);
        let entries: Vec<&ManifestEntry> = m.entries.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for anchor in 0..entries.len() {
            for _ in 0..20 {
                let p = sample_pair_index(&entries, anchor, false, &mut rng);
                assert_ne!(p, anchor);
                assert_eq!(entries[p].class_index, entries[anchor].class_index);
            }
        }
    }

    #[test]
    fn pair_sampling_is_uniform() {
        // One class of 5 images: each non-anchor should appear ~1/4.
        let entries_owned: Vec<ManifestEntry> = (0..5)
            .map(|i| ManifestEntry {
                path: format!("p{i}.png"),
                subject_id: format!("id_{i:04}"),
                class_index: 0,
            })
            .collect();
        let entries: Vec<&ManifestEntry> = entries_owned.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_pair_index(&entries, 0, false, &mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn singleton_class_falls_back_to_anchor() {
        let entries_owned = vec![
            ManifestEntry {
                path: "only.png".into(),
                subject_id: "id_0000".into(),
                class_index: 0,
            },
            ManifestEntry {
                path: "other.png".into(),
                subject_id: "id_0001".into(),
                class_index: 1,
            },
        ];
        let entries: Vec<&ManifestEntry> = entries_owned.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_pair_index(&entries, 0, false, &mut rng), 0);
    }

    #[test]
    fn same_subject_restriction_holds() {
        let m = toy_manifest(4, 6, 2);
        let entries: Vec<&ManifestEntry> = m.entries.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for anchor in 0..entries.len() {
            let p = sample_pair_index(&entries, anchor, true, &mut rng);
            assert_eq!(entries[p].subject_id, entries[anchor].subject_id);
        }
    }

    #[test]
    fn epoch_plan_counts_batches_and_visits_each_entry_once() {
        let plan = BatchPlan::new(100, 16, 4, false).unwrap();
        assert_eq!(plan.batches_per_epoch(), 6);

        let mut seen = std::collections::HashSet::new();
        for t in 0..6 {
            let idx = plan.anchor_indices(t);
            assert_eq!(idx.len(), 16);
            for i in idx {
                assert!(seen.insert(i), "index {i} repeated within epoch");
            }
        }
        assert_eq!(seen.len(), 96);
    }

    #[test]
    fn epoch_plan_is_deterministic_and_reshuffles_across_epochs() {
        let plan = BatchPlan::new(64, 8, 4, false).unwrap();
        assert_eq!(plan.anchor_indices(3), plan.anchor_indices(3));
        let epoch0: Vec<_> = (0..8).flat_map(|t| plan.anchor_indices(t)).collect();
        let epoch1: Vec<_> = (8..16).flat_map(|t| plan.anchor_indices(t)).collect();
        assert_ne!(epoch0, epoch1);
    }

    #[test]
    fn plan_rejects_degenerate_inputs() {
        assert!(BatchPlan::new(10, 0, 1, false).is_err());
        assert!(BatchPlan::new(0, 4, 1, false).is_err());
    }
}
