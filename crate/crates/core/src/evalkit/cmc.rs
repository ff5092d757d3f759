//! Score matrices and cumulative match characteristic curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `P × G` similarities (higher is more similar).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    scores: Vec<f64>,
    probe_labels: Vec<u64>,
    gallery_labels: Vec<u64>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<f64>, probe_labels: Vec<u64>, gallery_labels: Vec<u64>) -> Result<Self> {
        if scores.len() != probe_labels.len() * gallery_labels.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} probes x {} gallery",
                scores.len(),
                probe_labels.len(),
                gallery_labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("score {i} is not finite")));
        }
        Ok(Self {
            scores,
            probe_labels,
            gallery_labels,
        })
    }

    pub fn probes(&self) -> usize {
        self.probe_labels.len()
    }

    pub fn gallery(&self) -> usize {
        self.gallery_labels.len()
    }

    pub fn get(&self, p: usize, g: usize) -> f64 {
        self.scores[p * self.gallery() + g]
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let g = self.gallery();
        &self.scores[p * g..(p + 1) * g]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn probe_labels(&self) -> &[u64] {
        &self.probe_labels
    }

    pub fn gallery_labels(&self) -> &[u64] {
        &self.gallery_labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcResult {
    /// Entry `k - 1` is the fraction of probes whose mate ranks within `k`.
    pub rank_accuracies: Vec<f64>,
    /// Rank of the first mate per counted probe (1-based).
    pub ranks: Vec<usize>,
    /// Probes skipped because their finger has no gallery entry.
    pub excluded_probes: usize,
}

impl CmcResult {
    /// Accuracy at rank `k`; ranks past the gallery size saturate.
    pub fn at(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks start at 1");
        let i = (k - 1).min(self.rank_accuracies.len() - 1);
        self.rank_accuracies[i]
    }
}

/// Gallery indices in ranked order: descending score, ties by lower index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

pub fn cmc(m: &ScoreMatrix) -> Result<CmcResult> {
    let g = m.gallery();
    if g == 0 {
        return Err(Error::Domain("empty gallery".into()));
    }
    let mut ranks = Vec::new();
    let mut excluded = 0;
    for p in 0..m.probes() {
        let label = m.probe_labels[p];
        let order = ranking(m.row(p));
        match order.iter().position(|&j| m.gallery_labels[j] == label) {
            Some(pos) => ranks.push(pos + 1),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} probe(s) have no gallery mate and were excluded");
    }
    if ranks.is_empty() {
        return Err(Error::Domain("no probe has a gallery mate".into()));
    }
    let mut hist = vec![0usize; g + 1];
    for &r in &ranks {
        hist[r] += 1;
    }
    let mut acc = Vec::with_capacity(g);
    let mut cum = 0;
    for k in 1..=g {
        cum += hist[k];
        acc.push(cum as f64 / ranks.len() as f64);
    }
    Ok(CmcResult {
        rank_accuracies: acc,
        ranks,
        excluded_probes: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Counts, for every mate, the gallery entries that beat it.
    pub(crate) fn brute_force(m: &ScoreMatrix) -> Vec<Option<usize>> {
        (0..m.probes())
            .map(|p| {
                let mut best: Option<usize> = None;
                for mate in 0..m.gallery() {
                    if m.gallery_labels()[mate] != m.probe_labels()[p] {
                        continue;
                    }
                    let s = m.get(p, mate);
                    let mut ahead = 0;
                    for j in 0..m.gallery() {
                        let t = m.get(p, j);
                        if t > s || (t == s && j < mate) {
                            ahead += 1;
                        }
                    }
                    best = Some(best.map_or(ahead + 1, |b| b.min(ahead + 1)));
                }
                best
            })
            .collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, p: usize, g: usize, fingers: u64, coarse: bool) -> ScoreMatrix {
        let scores = (0..p * g)
            .map(|_| {
                if coarse {
                    rng.gen_range(0..4) as f64
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let pl = (0..p).map(|_| rng.gen_range(0..fingers)).collect();
        let gl = (0..g).map(|_| rng.gen_range(0..fingers)).collect();
        ScoreMatrix::new(scores, pl, gl).unwrap()
    }

    #[test]
    fn identity_matrix_is_perfect() {
        let labels: Vec<u64> = (0..5).collect();
        let scores = (0..25).map(|i| if i / 5 == i % 5 { 1.0 } else { 0.0 }).collect();
        let r = cmc(&ScoreMatrix::new(scores, labels.clone(), labels).unwrap()).unwrap();
        assert_eq!(r.at(1), 1.0);
    }

    #[test]
    fn adversarial_matrix_puts_mates_last() {
        let labels: Vec<u64> = (0..5).collect();
        let scores = (0..25).map(|i| if i / 5 == i % 5 { 0.0 } else { 1.0 }).collect();
        let r = cmc(&ScoreMatrix::new(scores, labels.clone(), labels).unwrap()).unwrap();
        assert_eq!(r.at(1), 0.0);
        assert_eq!(*r.rank_accuracies.last().unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_the_lower_gallery_index() {
        let m = ScoreMatrix::new(vec![0.5, 0.5, 0.5], vec![7], vec![1, 7, 7]).unwrap();
        assert_eq!(cmc(&m).unwrap().ranks, vec![2]);
    }

    #[test]
    fn probes_without_mates_are_counted_and_skipped() {
        let m = ScoreMatrix::new(vec![1.0, 0.0, 0.0, 1.0], vec![1, 9], vec![1, 2]).unwrap();
        let r = cmc(&m).unwrap();
        assert_eq!(r.excluded_probes, 1);
        assert_eq!(r.ranks, vec![1]);
        let none = ScoreMatrix::new(vec![1.0], vec![3], vec![4]).unwrap();
        assert!(cmc(&none).is_err());
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        assert!(ScoreMatrix::new(vec![f64::NAN], vec![1], vec![1]).is_err());
        assert!(ScoreMatrix::new(vec![1.0, 2.0], vec![1], vec![1]).is_err());
    }

    #[test]
    fn random_20x40_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let m = random_matrix(&mut rng, 20, 40, 8, false);
        let oracle: Vec<usize> = brute_force(&m).into_iter().flatten().collect();
        assert_eq!(cmc(&m).unwrap().ranks, oracle);
    }

    proptest! {
        #[test]
        fn cmc_equals_brute_force(seed in any::<u64>(), p in 1usize..50, g in 1usize..100, coarse in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = random_matrix(&mut rng, p, g, 6, coarse);
            // Guarantee at least one mate.
            m.gallery_labels[0] = m.probe_labels[0];
            let oracle = brute_force(&m);
            let r = cmc(&m).unwrap();
            prop_assert_eq!(r.ranks, oracle.iter().flatten().copied().collect::<Vec<_>>());
            prop_assert_eq!(r.excluded_probes, oracle.iter().filter(|o| o.is_none()).count());
            for w in r.rank_accuracies.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }

        #[test]
        fn cmc_is_invariant_under_increasing_transforms(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 12, 30, 5, true);
            let m = ScoreMatrix::new(m.scores.clone(), m.probe_labels.clone(), m.probe_labels.iter().chain(m.gallery_labels.iter()).take(30).copied().collect()).unwrap();
            let t = ScoreMatrix::new(m.scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect(), m.probe_labels.clone(), m.gallery_labels.clone()).unwrap();
            prop_assert_eq!(cmc(&m).unwrap(), cmc(&t).unwrap());
        }
    }
}
