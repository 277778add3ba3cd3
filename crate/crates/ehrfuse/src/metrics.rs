//! Ranking metrics and the scoring baselines used for sanity floors.

use crate::data::PatientRecord;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Top-k accuracy of one evaluated visit: `|top-k ∩ truth| / min(k, |truth|)`,
/// with score ties broken toward the lower label index. Returns `None` when
/// the truth set is empty (such visits are excluded from cohort means).
pub fn topk_visit_accuracy(scores: &[f64], truth: &[usize], k: usize) -> Option<f64> {
    if truth.is_empty() || k == 0 {
        return None;
    }
    let take = k.min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits = order[..take].iter().filter(|i| truth.contains(i)).count();
    Some(hits as f64 / k.min(truth.len()) as f64)
}

/// Streaming mean of visit-level top-k accuracies for a fixed set of ks.
#[derive(Debug, Clone)]
pub struct TopKAccumulator {
    pub ks: Vec<usize>,
    sums: Vec<f64>,
    count: usize,
}

impl TopKAccumulator {
    pub fn new(ks: &[usize]) -> Self {
        TopKAccumulator {
            ks: ks.to_vec(),
            sums: vec![0.0; ks.len()],
            count: 0,
        }
    }

    pub fn add_visit(&mut self, scores: &[f64], truth: &[usize]) {
        if truth.is_empty() {
            return;
        }
        for (i, &k) in self.ks.iter().enumerate() {
            self.sums[i] += topk_visit_accuracy(scores, truth, k).expect("non-empty truth");
        }
        self.count += 1;
    }

    pub fn visits(&self) -> usize {
        self.count
    }

    pub fn means(&self) -> Vec<(usize, f64)> {
        self.ks
            .iter()
            .zip(&self.sums)
            .map(|(&k, &s)| (k, if self.count == 0 { 0.0 } else { s / self.count as f64 }))
            .collect()
    }

    pub fn mean_at(&self, k: usize) -> f64 {
        self.means()
            .into_iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, v)| v)
            .unwrap_or(0.0)
    }
}

// ── Scoring baselines ───────────────────────────────────────────────────

/// Scores 1 for every code present in the current visit, 0 otherwise.
pub fn repeat_previous_scores(current_codes: &[usize], n_labels: usize) -> Vec<f64> {
    let mut scores = vec![0.0; n_labels];
    for &c in current_codes {
        if c < n_labels {
            scores[c] = 1.0;
        }
    }
    scores
}

/// Scores every label by its visit frequency in the given records.
pub fn marginal_frequency_scores(records: &[PatientRecord], n_labels: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_labels];
    for r in records {
        for v in &r.visits {
            for &c in &v.codes {
                if c < n_labels {
                    counts[c] += 1.0;
                }
            }
        }
    }
    let total: f64 = counts.iter().sum::<f64>().max(1.0);
    for c in counts.iter_mut() {
        *c /= total;
    }
    counts
}

/// One fresh uniform score vector; repeated draws across visits give a
/// Monte-Carlo estimate of the random-ranking floor.
pub fn random_scores(rng: &mut ChaCha8Rng, n_labels: usize) -> Vec<f64> {
    (0..n_labels).map(|_| rng.random_range(0.0..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_ontology, generate_cohort, GenParams};
    use rand::SeedableRng;

    /// Independent oracle: selection by repeated max scans over an explicit
    /// candidate list, no sorting shared with the implementation.
    pub(crate) fn oracle_topk(scores: &[f64], truth: &[usize], k: usize) -> Option<f64> {
        if truth.is_empty() || k == 0 {
            return None;
        }
        let mut remaining: Vec<usize> = (0..scores.len()).collect();
        let mut picked = Vec::new();
        while picked.len() < k.min(scores.len()) {
            let mut best = remaining[0];
            for &cand in &remaining {
                if scores[cand] > scores[best] || (scores[cand] == scores[best] && cand < best) {
                    best = cand;
                }
            }
            remaining.retain(|&c| c != best);
            picked.push(best);
        }
        let hits = picked.iter().filter(|i| truth.contains(i)).count();
        Some(hits as f64 / k.min(truth.len()) as f64)
    }

    #[test]
    fn perfect_recall_in_top_five() {
        let mut scores = vec![0.01; 20];
        for (i, c) in [3usize, 7, 11].iter().enumerate() {
            scores[*c] = 0.9 - 0.1 * i as f64;
        }
        assert_eq!(topk_visit_accuracy(&scores, &[3, 7, 11], 5), Some(1.0));
    }

    #[test]
    fn partial_recall_uses_min_of_k_and_truth() {
        // 10 true codes, top-5 contains exactly 2: acc = 2 / min(5, 10) = 2/5
        let n = 30;
        let mut scores = vec![0.0; n];
        let truth: Vec<usize> = (0..10).collect();
        scores[0] = 0.99;
        scores[5] = 0.98;
        scores[20] = 0.97;
        scores[21] = 0.96;
        scores[22] = 0.95;
        assert_eq!(topk_visit_accuracy(&scores, &truth, 5), Some(2.0 / 5.0));
    }

    #[test]
    fn huge_k_retrieves_everything() {
        let scores = vec![0.5, 0.1, 0.9, 0.3];
        assert_eq!(topk_visit_accuracy(&scores, &[1, 3], 10), Some(1.0));
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // all-equal scores: top-2 is {0, 1}
        let scores = vec![0.5; 4];
        assert_eq!(topk_visit_accuracy(&scores, &[1], 2), Some(1.0));
        assert_eq!(topk_visit_accuracy(&scores, &[3], 2), Some(0.0));
    }

    #[test]
    fn empty_truth_is_excluded() {
        assert_eq!(topk_visit_accuracy(&[0.1, 0.2], &[], 1), None);
        let mut acc = TopKAccumulator::new(&[1, 2]);
        acc.add_visit(&[0.1, 0.2], &[]);
        assert_eq!(acc.visits(), 0);
    }

    #[test]
    fn matches_enumeration_oracle_exhaustively() {
        // every truth subset for label counts up to 8, with tie-heavy scores
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=8usize {
            let score_sets: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..n).map(|_| (rng.random_range(0..4) as f64) * 0.25).collect())
                .collect();
            for subset in 0u32..(1 << n) {
                let truth: Vec<usize> = (0..n).filter(|i| subset >> i & 1 == 1).collect();
                for scores in &score_sets {
                    for k in 1..=n {
                        assert_eq!(
                            topk_visit_accuracy(scores, &truth, k),
                            oracle_topk(scores, &truth, k),
                            "n={n} subset={subset:b} k={k}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn monotone_in_k_once_k_reaches_truth_size() {
        // provable regime: for k >= |truth| the denominator is fixed and the
        // hit count can only grow
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in 2..=8usize {
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            for subset in 1u32..(1 << n) {
                let truth: Vec<usize> = (0..n).filter(|i| subset >> i & 1 == 1).collect();
                let mut prev = None;
                for k in truth.len()..=n {
                    let acc = topk_visit_accuracy(&scores, &truth, k).unwrap();
                    if let Some(p) = prev {
                        assert!(acc >= p, "n={n} k={k}");
                    }
                    prev = Some(acc);
                }
            }
        }
    }

    #[test]
    fn small_k_can_decrease_accuracy() {
        // |C|=3, truth {0,1}, scores rank a non-truth label second:
        // acc@1 = 1/1 but acc@2 = 1/2. This is why the k >= |truth| guard
        // exists in the monotonicity property above.
        let scores = vec![0.9, 0.1, 0.5];
        let truth = vec![0, 1];
        let a1 = topk_visit_accuracy(&scores, &truth, 1).unwrap();
        let a2 = topk_visit_accuracy(&scores, &truth, 2).unwrap();
        assert_eq!(a1, 1.0);
        assert_eq!(a2, 0.5);
        assert!(a2 < a1);
    }

    proptest::proptest! {
        // accuracy stays in [0,1] and equals hits / min(k, |truth|) for any
        // scores, truth set and k
        #[test]
        fn accuracy_is_bounded_and_consistent(
            scores in proptest::collection::vec(0.0f64..1.0, 1..24),
            truth_bits in proptest::collection::vec(proptest::bool::ANY, 1..24),
            k in 1usize..30,
        ) {
            let n = scores.len().min(truth_bits.len());
            let scores = &scores[..n];
            let truth: Vec<usize> = (0..n).filter(|i| truth_bits[*i]).collect();
            match topk_visit_accuracy(scores, &truth, k) {
                None => proptest::prop_assert!(truth.is_empty()),
                Some(acc) => {
                    proptest::prop_assert!((0.0..=1.0).contains(&acc));
                    let oracle = oracle_topk(scores, &truth, k).unwrap();
                    proptest::prop_assert_eq!(acc, oracle);
                }
            }
        }
    }

    #[test]
    fn repeat_previous_beats_marginal_frequency_on_synthetic_cohort() {
        let ont = default_ontology();
        let cohort = generate_cohort(2, 120, &ont, &GenParams::default()).unwrap();
        let marginal = marginal_frequency_scores(&cohort, ont.leaves());

        let mut repeat_acc = TopKAccumulator::new(&[10]);
        let mut marginal_acc = TopKAccumulator::new(&[10]);
        for r in &cohort {
            for t in 0..r.visits.len() - 1 {
                let truth = &r.visits[t + 1].codes;
                let repeat = repeat_previous_scores(&r.visits[t].codes, ont.leaves());
                repeat_acc.add_visit(&repeat, truth);
                marginal_acc.add_visit(&marginal, truth);
            }
        }
        let r10 = repeat_acc.mean_at(10);
        let m10 = marginal_acc.mean_at(10);
        assert!(
            r10 > m10,
            "repeat-previous ({r10:.3}) must beat marginal frequency ({m10:.3})"
        );
    }
}
