//! Metrics (binary AUC, macro-averaged AUC, concordance index) and the
//! dataset-splitting protocol: stratified k-fold CV plus training-fraction
//! subsampling. Ties get half credit throughout (Mann-Whitney convention).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("both classes must be present for binary AUC")]
    SingleClassOnly,
    #[error("class {0} missing from labels")]
    MissingClass(usize),
    #[error("no comparable pairs for concordance index")]
    NoComparablePairs,
    #[error("{n} slides cannot fill {k} folds")]
    TooFewSlides { n: usize, k: usize },
    #[error("training fraction must be in (0,1], got {0}")]
    BadFraction(f64),
    #[error("input length mismatch: {0}")]
    LengthMismatch(String),
}

/// Mann-Whitney AUC: `(concordant + 0.5 * tied) / (n_pos * n_neg)`,
/// computed via average ranks.
pub fn binary_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch("scores vs labels".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (ranks are 1-based)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Unweighted mean of one-vs-rest binary AUCs over `k` classes.
/// `probabilities` is row-major `n x k`.
pub fn macro_auc(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    if probabilities.len() != labels.len() || probabilities.is_empty() {
        return Err(EvalError::LengthMismatch("probabilities vs labels".into()));
    }
    let k = probabilities[0].len();
    for c in 0..k {
        if !labels.contains(&c) {
            return Err(EvalError::MissingClass(c));
        }
    }
    let mut total = 0.0;
    for c in 0..k {
        let scores: Vec<f64> = probabilities.iter().map(|row| row[c]).collect();
        let ovr: Vec<u8> = labels.iter().map(|&l| u8::from(l == c)).collect();
        total += binary_auc(&scores, &ovr)?;
    }
    Ok(total / k as f64)
}

/// Harrell's c-index. A pair (i, j) is comparable when sample `i` has an
/// observed event strictly before `j`'s recorded time; credit 1 when the
/// earlier event carries the higher risk, 0.5 on risk ties.
pub fn concordance_index(
    risks: &[f64],
    times: &[f64],
    events: &[bool],
) -> Result<f64, EvalError> {
    if risks.len() != times.len() || risks.len() != events.len() {
        return Err(EvalError::LengthMismatch("risks/times/events".into()));
    }
    let mut comparable = 0u64;
    let mut credit = 0.0f64;
    for i in 0..risks.len() {
        if !events[i] {
            continue;
        }
        for j in 0..risks.len() {
            if j == i || times[j] <= times[i] {
                continue;
            }
            comparable += 1;
            if risks[i] > risks[j] {
                credit += 1.0;
            } else if risks[i] == risks[j] {
                credit += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(EvalError::NoComparablePairs);
    }
    Ok(credit / comparable as f64)
}

/// One cross-validation fold: held-out validation ids and the remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    pub k: usize,
    pub stratified: bool,
    pub folds: Vec<Fold>,
}

/// Seeded (optionally stratified) k-fold partition of `(slide_id, class)`
/// pairs. Validation folds are pairwise disjoint and cover the dataset.
pub fn make_folds(
    entries: &[(String, usize)],
    k: usize,
    seed: u64,
    stratified: bool,
) -> Result<FoldSplit, EvalError> {
    if entries.len() < k || k == 0 {
        return Err(EvalError::TooFewSlides { n: entries.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_sets: Vec<Vec<String>> = vec![Vec::new(); k];
    if stratified {
        // classes processed in sorted order for reproducibility
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (_, class)) in entries.iter().enumerate() {
            by_class.entry(*class).or_default().push(i);
        }
        let mut next_fold = 0usize;
        for (_, mut members) in by_class {
            members.shuffle(&mut rng);
            for idx in members {
                val_sets[next_fold].push(entries[idx].0.clone());
                next_fold = (next_fold + 1) % k;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut rng);
        for (pos, idx) in order.into_iter().enumerate() {
            val_sets[pos % k].push(entries[idx].0.clone());
        }
    }
    let folds = val_sets
        .iter()
        .map(|val| {
            let val_set: HashSet<&String> = val.iter().collect();
            let train = entries
                .iter()
                .map(|(id, _)| id.clone())
                .filter(|id| !val_set.contains(id))
                .collect();
            Fold { train, val: val.clone() }
        })
        .collect();
    Ok(FoldSplit { seed, k, stratified, folds })
}

/// Keep `ceil(fraction * n_c)` training slides per class in every fold,
/// seeded from the split's own seed. Validation folds are untouched.
pub fn subsample_train(
    split: &FoldSplit,
    classes: &HashMap<String, usize>,
    fraction: f64,
) -> Result<FoldSplit, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::BadFraction(fraction));
    }
    let mut folds = Vec::with_capacity(split.folds.len());
    for (fold_idx, fold) in split.folds.iter().enumerate() {
        let mut by_class: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
        for id in &fold.train {
            let class = *classes.get(id).unwrap_or(&0);
            by_class.entry(class).or_default().push(id);
        }
        let mut kept: HashSet<&String> = HashSet::new();
        for (class, members) in by_class {
            let keep_n = (fraction * members.len() as f64).ceil() as usize;
            let mut shuffled = members;
            let mut rng = ChaCha8Rng::seed_from_u64(
                split.seed ^ (fold_idx as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ class as u64,
            );
            shuffled.shuffle(&mut rng);
            kept.extend(shuffled.into_iter().take(keep_n));
        }
        // preserve original train order
        let train = fold.train.iter().filter(|id| kept.contains(id)).cloned().collect();
        folds.push(Fold { train, val: fold.val.clone() });
    }
    Ok(FoldSplit { seed: split.seed, k: split.k, stratified: split.stratified, folds })
}

/// Per-fold metric values plus their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn from_folds(metric: impl Into<String>, per_fold: Vec<f64>, fingerprint: impl Into<String>) -> Self {
        let n = per_fold.len() as f64;
        let mean = per_fold.iter().sum::<f64>() / n;
        let std = if per_fold.len() > 1 {
            (per_fold.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { metric: metric.into(), per_fold, mean, std, config_fingerprint: fingerprint.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent O(n^2) pair-counting oracle.
    fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn cindex_pairs(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..risks.len() {
            for j in 0..risks.len() {
                if i != j && events[i] && times[i] < times[j] {
                    den += 1.0;
                    num += if risks[i] > risks[j] {
                        1.0
                    } else if risks[i] == risks[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn auc_separated_and_tied_extremes() {
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(binary_auc(&[0.5; 6], &[0, 1, 0, 1, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_rejected() {
        assert!(matches!(binary_auc(&[0.1, 0.2], &[1, 1]), Err(EvalError::SingleClassOnly)));
    }

    #[test]
    fn auc_matches_pair_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(5..120);
            // coarse quantization forces plenty of ties
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let fast = binary_auc(&scores, &labels).unwrap();
            let slow = auc_pairs(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn macro_auc_is_mean_of_one_vs_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let probs: Vec<Vec<f64>> =
            (0..n).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let macro_val = macro_auc(&probs, &labels).unwrap();
        let mut manual = 0.0;
        for c in 0..3 {
            let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
            let ovr: Vec<u8> = labels.iter().map(|&l| u8::from(l == c)).collect();
            manual += binary_auc(&scores, &ovr).unwrap();
        }
        assert_eq!(macro_val, manual / 3.0);
    }

    #[test]
    fn macro_auc_missing_class_rejected() {
        let probs = vec![vec![0.2, 0.3, 0.5], vec![0.5, 0.3, 0.2]];
        assert!(matches!(macro_auc(&probs, &[0, 1]), Err(EvalError::MissingClass(2))));
    }

    #[test]
    fn cindex_perfect_and_inverted() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true; 4];
        assert_eq!(concordance_index(&[4.0, 3.0, 2.0, 1.0], &times, &events).unwrap(), 1.0);
        assert_eq!(concordance_index(&[1.0, 2.0, 3.0, 4.0], &times, &events).unwrap(), 0.0);
    }

    #[test]
    fn cindex_matches_pair_oracle_on_censored_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.gen_range(5..100);
            let risks: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 2.0).collect();
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(1..50) as f64).collect();
            let mut events: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            events[0] = true;
            if let Some(expect) = cindex_pairs(&risks, &times, &events) {
                let got = concordance_index(&risks, &times, &events).unwrap();
                assert!((got - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cindex_no_comparable_pairs() {
        assert!(matches!(
            concordance_index(&[1.0, 2.0], &[5.0, 5.0], &[true, true]),
            Err(EvalError::NoComparablePairs)
        ));
    }

    fn labeled_entries(n: usize, classes: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("s{i:03}"), i % classes)).collect()
    }

    #[test]
    fn folds_partition_dataset() {
        let entries = labeled_entries(40, 2);
        let split = make_folds(&entries, 10, 7, true).unwrap();
        let mut seen = HashSet::new();
        for fold in &split.folds {
            assert_eq!(fold.val.len(), 4);
            for id in &fold.val {
                assert!(seen.insert(id.clone()), "{id} in two validation folds");
            }
            assert_eq!(fold.train.len() + fold.val.len(), 40);
        }
        assert_eq!(seen.len(), 40);
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let entries = labeled_entries(50, 2); // 25 per class
        let split = make_folds(&entries, 10, 1, true).unwrap();
        for fold in &split.folds {
            let pos = fold.val.iter().filter(|id| {
                let idx: usize = id[1..].parse().unwrap();
                idx % 2 == 1
            }).count();
            // global proportion is one half; deviation at most 1 sample
            assert!((pos as i64 - (fold.val.len() as i64 - pos as i64)).abs() <= 1);
            assert!(pos >= 1, "class missing from a validation fold");
        }
    }

    #[test]
    fn folds_reproducible_and_seed_sensitive() {
        let entries = labeled_entries(30, 3);
        let a = make_folds(&entries, 5, 99, true).unwrap();
        let b = make_folds(&entries, 5, 99, true).unwrap();
        let c = make_folds(&entries, 5, 100, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_slides_rejected() {
        let entries = labeled_entries(5, 2);
        assert!(matches!(
            make_folds(&entries, 10, 0, true),
            Err(EvalError::TooFewSlides { n: 5, k: 10 })
        ));
    }

    #[test]
    fn subsample_identity_at_full_fraction() {
        let entries = labeled_entries(40, 2);
        let split = make_folds(&entries, 10, 3, true).unwrap();
        let classes: HashMap<String, usize> = entries.iter().cloned().collect();
        let same = subsample_train(&split, &classes, 1.0).unwrap();
        assert_eq!(split, same);
    }

    #[test]
    fn subsample_keeps_ceil_per_class() {
        // per-class counts (20, 12): ceil(0.25 * n) -> (5, 3)
        let mut entries = Vec::new();
        for i in 0..20 {
            entries.push((format!("a{i:02}"), 0));
        }
        for i in 0..12 {
            entries.push((format!("b{i:02}"), 1));
        }
        let split = make_folds(&entries, 4, 5, true).unwrap();
        let classes: HashMap<String, usize> = entries.iter().cloned().collect();
        let sub = subsample_train(&split, &classes, 0.25).unwrap();
        for (fold, orig) in sub.folds.iter().zip(&split.folds) {
            assert_eq!(fold.val, orig.val);
            for class in 0..2 {
                let count = |ids: &[String]| {
                    ids.iter().filter(|id| *classes.get(*id).unwrap() == class).count()
                };
                let expect = (0.25f64 * count(&orig.train) as f64).ceil() as usize;
                assert_eq!(count(&fold.train), expect);
            }
        }
        // deterministic
        assert_eq!(sub, subsample_train(&split, &classes, 0.25).unwrap());
    }

    #[test]
    fn report_mean_std_recomputable() {
        let r = MetricsReport::from_folds("auc", vec![0.8, 0.9, 1.0], "cfg");
        assert!((r.mean - 0.9).abs() < 1e-12);
        assert!((r.std - 0.1).abs() < 1e-12); // n-1 denominator
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transforms(
            raw in proptest::collection::vec((0u8..2, 0.0f64..1.0), 8..60)
        ) {
            let labels: Vec<u8> = raw.iter().map(|(l, _)| *l).collect();
            let scores: Vec<f64> = raw.iter().map(|(_, s)| *s).collect();
            prop_assume!(labels.iter().any(|&l| l == 0) && labels.iter().any(|&l| l == 1));
            let base = binary_auc(&scores, &labels).unwrap();
            let expd: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 11.0).collect();
            prop_assert!((binary_auc(&expd, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((binary_auc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn auc_complement_without_ties(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
            scores.shuffle(&mut rng);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let fwd = binary_auc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let rev = binary_auc(&neg, &labels).unwrap();
            prop_assert!((fwd + rev - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cindex_shift_invariant(shift in -50.0f64..50.0) {
            let risks = [0.3, -0.2, 1.1, 0.0, 0.4];
            let times = [3.0, 1.0, 4.0, 2.0, 6.0];
            let events = [true, false, true, true, false];
            let base = concordance_index(&risks, &times, &events).unwrap();
            let shifted: Vec<f64> = risks.iter().map(|r| r + shift).collect();
            let moved = concordance_index(&shifted, &times, &events).unwrap();
            prop_assert!((base - moved).abs() < 1e-12);
        }
    }
}
