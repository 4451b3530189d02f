//! Sequential adaptive fusion of individual model predictions.
//!
//! Every model keeps an [`AccuracyMemory`]: the per-interaction accuracies
//! it earned on the last test batch together with a snapshot of the
//! `[p_u; q_v]` embedding it used. To fuse a prediction for a target pair,
//! each model's confidence is the mean accuracy of the `e` stored pairs most
//! cosine-similar to the target in that model's own embedding space. The
//! confidences are mapped through the odds transform `c / (1 - c)` and
//! L1-normalized into fusion weights.

use std::collections::HashMap;

use crate::domain::{ItemId, UserId};
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Confidences are clamped to `[CONFIDENCE_CLAMP, 1 - CONFIDENCE_CLAMP]`
/// before the odds transform.
pub const CONFIDENCE_CLAMP: f64 = 0.01;

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine_similarity<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let nx = dot(x, x);
    let ny = dot(y, y);
    if nx == T::zero() || ny == T::zero() {
        return Ok(T::zero());
    }
    let c = dot(x, y) / (nx.sqrt() * ny.sqrt());
    Ok(c.max(-T::one()).min(T::one()))
}

/// One remembered evaluation of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryEntry<T> {
    pub acc: T,
    pub user: UserId,
    pub item: ItemId,
}

/// `(u, v, acc, [p_u; q_v])` as produced by one test evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRecord<T> {
    pub user: UserId,
    pub item: ItemId,
    pub acc: T,
    pub embedding: Vec<T>,
}

/// The accuracy tuples a model earned in the last test iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMemory<T> {
    width: usize,
    entries: Vec<MemoryEntry<T>>,
    /// Row-major `entries.len() x width` embedding snapshots.
    embeddings: Vec<T>,
    norms: Vec<T>,
    /// `1 / norm`, or 0 for zero snapshots.
    inv_norms: Vec<T>,
}

impl<T: Scalar> AccuracyMemory<T> {
    /// Empty memory for embeddings of length `width`.
    pub fn new(width: usize) -> Self {
        AccuracyMemory {
            width,
            entries: Vec::new(),
            embeddings: Vec::new(),
            norms: Vec::new(),
            inv_norms: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry<T>] {
        &self.entries
    }

    pub fn embedding(&self, j: usize) -> &[T] {
        &self.embeddings[j * self.width..(j + 1) * self.width]
    }

    /// Replaces the memory wholesale with `records`.
    pub fn record_accuracies(&mut self, records: &[AccuracyRecord<T>]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::Empty("accuracy batch".to_string()));
        }
        for r in records {
            if r.embedding.len() != self.width {
                return Err(Error::LengthMismatch {
                    left: r.embedding.len(),
                    right: self.width,
                });
            }
            if !(r.acc >= T::zero() && r.acc <= T::one()) {
                return Err(Error::invalid("acc", format!("accuracy {} outside [0, 1]", r.acc)));
            }
        }
        self.entries.clear();
        self.embeddings.clear();
        self.norms.clear();
        self.inv_norms.clear();
        for r in records {
            self.entries.push(MemoryEntry {
                acc: r.acc,
                user: r.user,
                item: r.item,
            });
            self.embeddings.extend_from_slice(&r.embedding);
            let norm = dot(&r.embedding, &r.embedding).sqrt();
            self.norms.push(norm);
            self.inv_norms.push(if norm == T::zero() { T::zero() } else { T::one() / norm });
        }
        Ok(())
    }

    /// Mean stored accuracy, `None` when empty.
    pub fn mean_accuracy(&self) -> Option<T> {
        if self.entries.is_empty() {
            return None;
        }
        let n = T::from_usize(self.entries.len()).expect("memory size fits");
        Some(self.entries.iter().map(|e| e.acc).sum::<T>() / n)
    }

    /// Mean accuracy of the `e` stored pairs most similar to `target`
    /// (ties to the lower index).
    pub fn confidence(&self, target: &[T], e: usize) -> Result<T> {
        if self.is_empty() {
            return Err(Error::ColdStart);
        }
        if target.len() != self.width {
            return Err(Error::LengthMismatch {
                left: target.len(),
                right: self.width,
            });
        }
        if e == 0 {
            return Err(Error::invalid("memory_top_e", "must be positive"));
        }
        let tn = dot(target, target).sqrt();
        let mut top = TopE::new(e);
        for j in 0..self.len() {
            let s = if tn == T::zero() || self.norms[j] == T::zero() {
                T::zero()
            } else {
                dot(target, self.embedding(j)) / (tn * self.norms[j])
            };
            top.offer(s, j);
        }
        Ok(top.mean_acc(&self.entries))
    }
}

/// The `e` best `(similarity, index)` pairs seen so far, best first.
/// Offers must come in increasing index order so that equal similarities
/// keep the lower index.
#[derive(Debug, Clone)]
struct TopE<T> {
    e: usize,
    best: Vec<(T, usize)>,
}

impl<T: Scalar> TopE<T> {
    fn new(e: usize) -> Self {
        TopE {
            e,
            best: Vec::with_capacity(e + 1),
        }
    }

    fn clear(&mut self) {
        self.best.clear();
    }

    #[inline]
    fn worst(&self) -> T {
        self.best.last().map_or(T::neg_infinity(), |b| b.0)
    }

    #[inline]
    fn offer(&mut self, sim: T, j: usize) {
        if self.best.len() == self.e {
            match self.best.last() {
                Some(&(worst, _)) if sim > worst => {}
                _ => return,
            }
        }
        let pos = self.best.partition_point(|&(s, _)| s >= sim);
        self.best.insert(pos, (sim, j));
        self.best.truncate(self.e);
    }

    fn mean_acc(&self, entries: &[MemoryEntry<T>]) -> T {
        let n = T::from_usize(self.best.len()).expect("e fits");
        self.best.iter().map(|&(_, j)| entries[j].acc).sum::<T>() / n
    }
}

/// Repeated confidence queries against one memory, for many users and
/// items. Dot products of each item's half of the embedding with the stored
/// snapshots are cached, so a query costs `O(|memory|)` once the item has
/// been seen.
#[derive(Debug)]
pub struct ConfidenceIndex<'a, T> {
    memory: &'a AccuracyMemory<T>,
    user_dim: usize,
    user_sq: T,
    user_dots: Vec<T>,
    item_cache: HashMap<ItemId, (T, Vec<T>)>,
    scores: Vec<T>,
    top: TopE<T>,
}

impl<'a, T: Scalar> ConfidenceIndex<'a, T> {
    /// `user_dim` is the length of the user half of the stored embeddings.
    pub fn new(memory: &'a AccuracyMemory<T>, user_dim: usize, top_e: usize) -> Result<Self> {
        if memory.is_empty() {
            return Err(Error::ColdStart);
        }
        if user_dim > memory.width {
            return Err(Error::LengthMismatch {
                left: user_dim,
                right: memory.width,
            });
        }
        if top_e == 0 {
            return Err(Error::invalid("memory_top_e", "must be positive"));
        }
        Ok(ConfidenceIndex {
            memory,
            user_dim,
            user_sq: T::zero(),
            user_dots: vec![T::zero(); memory.len()],
            item_cache: HashMap::new(),
            scores: Vec::with_capacity(memory.len()),
            top: TopE::new(top_e),
        })
    }

    /// Fixes the user half of the targets that follow.
    pub fn set_user(&mut self, user_part: &[T]) -> Result<()> {
        if user_part.len() != self.user_dim {
            return Err(Error::LengthMismatch {
                left: user_part.len(),
                right: self.user_dim,
            });
        }
        let du = self.user_dim;
        for (j, d) in self.user_dots.iter_mut().enumerate() {
            *d = dot(user_part, &self.memory.embedding(j)[..du]);
        }
        self.user_sq = dot(user_part, user_part);
        Ok(())
    }

    /// Confidence for the current user and `item`, whose embedding half is
    /// `item_part`.
    pub fn confidence(&mut self, item: ItemId, item_part: &[T]) -> Result<T> {
        let m = self.memory;
        if self.user_dim + item_part.len() != m.width {
            return Err(Error::LengthMismatch {
                left: self.user_dim + item_part.len(),
                right: m.width,
            });
        }
        let du = self.user_dim;
        let (item_sq, item_dots) = self.item_cache.entry(item).or_insert_with(|| {
            let dots = (0..m.len()).map(|j| dot(item_part, &m.embedding(j)[du..])).collect();
            (dot(item_part, item_part), dots)
        });
        // Ranking by `x . s_j / |s_j|` orders the stored pairs exactly like
        // cosine similarity, since the target norm is a common factor.
        self.top.clear();
        if self.user_sq + *item_sq == T::zero() {
            (0..m.len()).for_each(|j| self.top.offer(T::zero(), j));
        } else {
            let g = m.len();
            self.scores.resize(g, T::zero());
            let (ud, id, inv) = (&self.user_dots[..g], &item_dots[..g], &m.inv_norms[..g]);
            for (j, out) in self.scores.iter_mut().enumerate() {
                *out = (ud[j] + id[j]) * inv[j];
            }
            let e = self.top.e.min(self.scores.len());
            for (j, &s) in self.scores[..e].iter().enumerate() {
                self.top.offer(s, j);
            }
            let mut worst = self.top.worst();
            for (j, &s) in self.scores.iter().enumerate().skip(e) {
                if s > worst {
                    self.top.offer(s, j);
                    worst = self.top.worst();
                }
            }
        }
        Ok(self.top.mean_acc(&m.entries))
    }
}

/// Non-negative per-model weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<T>(pub Vec<T>);

impl<T: Scalar> FusionWeights<T> {
    pub fn uniform(o: usize) -> Self {
        let w = T::one() / T::from_usize(o).expect("model count fits");
        FusionWeights(vec![w; o])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Odds transform `c / (1 - c)` of clamped confidences, L1-normalized.
pub fn fusion_weights<T: Scalar>(confidences: &[T]) -> FusionWeights<T> {
    let lo = T::lit(CONFIDENCE_CLAMP);
    let hi = T::one() - lo;
    let mut odds: Vec<T> = confidences
        .iter()
        .map(|&c| {
            let c = if c.is_nan() { lo } else { c.max(lo).min(hi) };
            c / (T::one() - c)
        })
        .collect();
    let total: T = odds.iter().copied().sum();
    odds.iter_mut().for_each(|w| *w = *w / total);
    FusionWeights(odds)
}

/// `fw^T y`, kept inside `[min y, max y]`.
pub fn fuse<T: Scalar>(predictions: &[T], weights: &FusionWeights<T>) -> Result<T> {
    if predictions.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: weights.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("predictions".to_string()));
    }
    let (lo, hi) = predictions
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let y = predictions
        .iter()
        .zip(weights.as_slice())
        .fold(T::zero(), |acc, (&y, &w)| acc + w * y);
    Ok(y.max(lo).min(hi))
}

/// Plain average: fusion with uniform weights.
pub fn avg_fuse<T: Scalar>(predictions: &[T]) -> Result<T> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions".to_string()));
    }
    fuse(predictions, &FusionWeights::uniform(predictions.len()))
}

/// Weights from each model's global accuracy on the last test batch; falls
/// back to the average before any accuracy exists.
pub fn adaw_fuse<T: Scalar>(predictions: &[T], global_accuracies: Option<&[T]>) -> Result<T> {
    match global_accuracies {
        None => avg_fuse(predictions),
        Some(acc) => fuse(predictions, &fusion_weights(acc)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(acc: f64, embedding: Vec<f64>) -> AccuracyRecord<f64> {
        AccuracyRecord {
            user: 0,
            item: 0,
            acc,
            embedding,
        }
    }

    /// Full sort of all similarities, then the mean of the first `e`.
    fn brute_force_confidence(records: &[AccuracyRecord<f64>], target: &[f64], e: usize) -> f64 {
        let mut scored: Vec<(f64, usize)> = records
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let dotp: f64 = r.embedding.iter().zip(target).map(|(a, b)| a * b).sum();
                let na: f64 = r.embedding.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = target.iter().map(|a| a * a).sum::<f64>().sqrt();
                let s = if na == 0.0 || nb == 0.0 { 0.0 } else { dotp / (na * nb) };
                (s, j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let take = e.min(records.len());
        scored[..take].iter().map(|&(_, j)| records[j].acc).sum::<f64>() / take as f64
    }

    #[test]
    fn cosine_examples() {
        let x = [0.3f64, -1.2, 4.0];
        assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.707_106_781_186_547_5).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn confidence_examples() {
        let mut m = AccuracyMemory::new(2);
        assert!(matches!(m.confidence(&[1.0, 0.0], 3), Err(Error::ColdStart)));
        m.record_accuracies(&[record(0.7, vec![1.0, 2.0])]).unwrap();
        assert!((m.confidence(&[5.0, -1.0], 10).unwrap() - 0.7).abs() < 1e-15);

        let recs = vec![
            record(1.0, vec![1.0, 0.1]),
            record(0.0, vec![1.0, -0.1]),
            record(0.5, vec![-1.0, 0.0]),
        ];
        m.record_accuracies(&recs).unwrap();
        let target = [1.0, 0.0];
        assert_eq!(brute_force_confidence(&recs, &target, 2), 0.5);
        assert!((m.confidence(&target, 2).unwrap() - 0.5).abs() < 1e-15);
        assert!((m.confidence(&target, 3).unwrap() - 0.5).abs() < 1e-15);
        assert!((m.confidence(&target, 99).unwrap() - 0.5).abs() < 1e-15);
        assert!((m.confidence(&target, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(m.confidence(&[1.0], 2).is_err());
    }

    #[test]
    fn confidence_ties_prefer_lower_index() {
        let mut m = AccuracyMemory::new(2);
        m.record_accuracies(&[
            record(0.2, vec![1.0, 0.0]),
            record(0.9, vec![2.0, 0.0]),
            record(0.4, vec![3.0, 0.0]),
        ])
        .unwrap();
        assert!((m.confidence(&[1.0, 0.0], 1).unwrap() - 0.2).abs() < 1e-15);
        assert!((m.confidence(&[1.0, 0.0], 2).unwrap() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn memory_replacement_and_validation() {
        let mut m = AccuracyMemory::new(2);
        let first: Vec<_> = (0..256).map(|i| record((i % 3) as f64 / 2.0, vec![1.0, i as f64])).collect();
        m.record_accuracies(&first).unwrap();
        assert_eq!(m.len(), 256);
        m.record_accuracies(&[record(0.25, vec![0.0, 1.0])]).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.entries()[0].acc, 0.25);
        assert!(m.entries().iter().all(|e| (0.0..=1.0).contains(&e.acc)));
        assert_eq!(m.mean_accuracy(), Some(0.25));

        assert!(m.record_accuracies(&[]).is_err());
        assert!(m.record_accuracies(&[record(1.5, vec![0.0, 1.0])]).is_err());
        assert!(m.record_accuracies(&[record(0.5, vec![1.0])]).is_err());
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn fusion_weight_examples() {
        let fw = fusion_weights(&[0.5f64, 0.5]);
        assert_eq!(fw.as_slice(), &[0.5, 0.5]);

        let fw = fusion_weights(&[0.8f64, 0.2]);
        assert!((fw.0[0] - 16.0 / 17.0).abs() < 1e-15);
        assert!((fw.0[1] - 1.0 / 17.0).abs() < 1e-15);

        let fw = fusion_weights(&[0.99f64, 0.5]);
        assert!((fw.0[0] - 0.99).abs() < 1e-12);
        assert!((fw.0[1] - 0.01).abs() < 1e-12);

        // clamp keeps perfect and zero confidences finite
        let fw = fusion_weights(&[1.0f64, 0.0]);
        assert!(fw.0.iter().all(|w| w.is_finite() && *w > 0.0));
        assert!((fw.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_examples() {
        let fw = FusionWeights(vec![0.1f64, 0.3, 0.6]);
        assert_eq!(fuse(&[0.7, 0.7, 0.7], &fw).unwrap(), 0.7);
        let one_hot = FusionWeights(vec![0.0f64, 1.0, 0.0]);
        assert_eq!(fuse(&[0.1, 0.4, 0.9], &one_hot).unwrap(), 0.4);
        let y = fuse(&[0.2f64, 0.8], &FusionWeights(vec![0.25, 0.75])).unwrap();
        assert!((y - 0.65).abs() < 1e-15);
        assert!(fuse(&[0.2f64], &fw).is_err());
    }

    #[test]
    fn baseline_fusers() {
        assert!((avg_fuse(&[0.2f64, 0.8]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(avg_fuse(&[0.37f64]).unwrap(), 0.37);
        assert!(avg_fuse::<f64>(&[]).is_err());
        let y = [0.1f64, 0.5, 0.9];
        assert_eq!(avg_fuse(&y).unwrap(), fuse(&y, &FusionWeights::uniform(3)).unwrap());

        assert_eq!(adaw_fuse(&y, Some(&[0.4, 0.4, 0.4])).unwrap(), avg_fuse(&y).unwrap());
        let p = [0.3f64, 0.6];
        let expect = fuse(&p, &fusion_weights(&[0.8, 0.2])).unwrap();
        assert_eq!(adaw_fuse(&p, Some(&[0.8, 0.2])).unwrap(), expect);
        assert!((expect - (0.3 * 16.0 / 17.0 + 0.6 / 17.0)).abs() < 1e-15);
        assert_eq!(adaw_fuse(&p, None).unwrap(), avg_fuse(&p).unwrap());
    }

    #[test]
    fn index_matches_direct_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let recs: Vec<_> = (0..200)
            .map(|_| record(rng.random(), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let mut m = AccuracyMemory::new(8);
        m.record_accuracies(&recs).unwrap();
        let items: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut index = ConfidenceIndex::new(&m, 4, 10).unwrap();
        for _ in 0..5 {
            let user: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            index.set_user(&user).unwrap();
            for _ in 0..30 {
                let v = rng.random_range(0..20);
                let target: Vec<f64> = user.iter().chain(&items[v]).copied().collect();
                let direct = m.confidence(&target, 10).unwrap();
                let fast = index.confidence(v as ItemId, &items[v]).unwrap();
                assert!((direct - fast).abs() < 1e-12);
            }
        }
        assert!(index.confidence(0, &[1.0]).is_err());
        assert!(index.set_user(&[1.0]).is_err());
        assert!(matches!(ConfidenceIndex::new(&AccuracyMemory::<f64>::new(8), 4, 10), Err(Error::ColdStart)));
    }

    proptest! {
        #[test]
        fn confidence_matches_brute_force(seed in any::<u64>(), g in 1usize..100, e in 1usize..20, width in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<_> = (0..g)
                .map(|_| record(rng.random(), (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let mut m = AccuracyMemory::new(width);
            m.record_accuracies(&recs).unwrap();
            let target: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = m.confidence(&target, e).unwrap();
            prop_assert!((c - brute_force_confidence(&recs, &target, e)).abs() < 1e-12);
        }

        #[test]
        fn weights_sum_to_one_and_permute(c in proptest::collection::vec(0.0f64..=1.0, 1..9), rot in 0usize..8) {
            let fw = fusion_weights(&c);
            prop_assert!(fw.0.iter().all(|&w| w >= 0.0));
            prop_assert!((fw.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let k = rot % c.len();
            let mut rotated = c.clone();
            rotated.rotate_left(k);
            let mut expect = fw.0.clone();
            expect.rotate_left(k);
            let got = fusion_weights(&rotated).0;
            for (a, b) in got.iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn raising_one_confidence_shifts_weight(c in proptest::collection::vec(0.02f64..0.97, 2..9), i in 0usize..8, bump in 0.001f64..0.01) {
            let i = i % c.len();
            let before = fusion_weights(&c);
            let mut raised = c.clone();
            raised[i] += bump;
            let after = fusion_weights(&raised);
            prop_assert!(after.0[i] > before.0[i]);
            for j in (0..c.len()).filter(|&j| j != i) {
                prop_assert!(after.0[j] < before.0[j]);
            }
        }

        #[test]
        fn fused_value_is_convex(y in proptest::collection::vec(0.0f64..1.0, 1..9), c in proptest::collection::vec(0.0f64..=1.0, 9)) {
            let fw = fusion_weights(&c[..y.len()]);
            let f = fuse(&y, &fw).unwrap();
            let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f >= lo && f <= hi);
            let same = vec![y[0]; y.len()];
            prop_assert_eq!(fuse(&same, &fw).unwrap(), y[0]);
        }
    }
}
