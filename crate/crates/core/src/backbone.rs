//! Frozen pooled scorer with prompt injection, recommendation losses, ranking.
//!
//! `score = < M * meanpool([prompt rows; history embeddings]), e_candidate >`.
//! The scorer is linear in the prompt, so its prompt gradient is exact.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::linalg;
use crate::prompt::{sigmoid, PromptMatrix};

#[derive(Debug, Clone)]
pub struct FrozenScorer {
    items: Vec<DVector<f64>>,
    mixing: DMatrix<f64>,
}

impl FrozenScorer {
    /// Scorer over `items` with mixing `I + strength * G`, `G` Gaussian with
    /// entries of variance `1/d`.
    pub fn new(items: Vec<DVector<f64>>, mixing_strength: f64, seed: u64) -> Self {
        let d = items.first().map(|e| e.len()).unwrap_or(0);
        let mut rng = crate::rng::stream(seed, "backbone-mixing", &[d as u64]);
        let g = linalg::gaussian_matrix(&mut rng, d, d, 1.0 / (d.max(1) as f64).sqrt());
        let mixing = DMatrix::identity(d, d) + g * mixing_strength;
        Self { items, mixing }
    }

    pub fn with_mixing(items: Vec<DVector<f64>>, mixing: DMatrix<f64>) -> Self {
        Self { items, mixing }
    }

    pub fn dim(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    pub fn item(&self, id: usize) -> Result<&DVector<f64>> {
        match self.items.get(id) {
            Some(e) => Ok(e),
            None => arg(format!("unknown item id {id}")),
        }
    }

    pub fn items(&self) -> &[DVector<f64>] {
        &self.items
    }

    /// Sum of the history's item embeddings.
    pub fn history_sum(&self, history: &[usize]) -> Result<DVector<f64>> {
        let mut s = DVector::zeros(self.dim());
        for &h in history {
            s += self.item(h)?;
        }
        Ok(s)
    }

    /// `M * (prompt_row_sum + hist_sum) / (prompt_rows + history_len)`.
    pub fn query(&self, prompt_row_sum: &DVector<f64>, prompt_rows: usize, hist_sum: &DVector<f64>, history_len: usize) -> DVector<f64> {
        let tokens = (prompt_rows + history_len).max(1) as f64;
        &self.mixing * ((prompt_row_sum + hist_sum) / tokens)
    }

    pub fn score(&self, history: &[usize], prompt: &PromptMatrix, candidate: usize) -> Result<f64> {
        if prompt.cols() != self.dim() {
            return arg("prompt width does not match the scorer dimension");
        }
        let q = self.query(&prompt.sum_rows(), prompt.rows(), &self.history_sum(history)?, history.len());
        Ok(q.dot(self.item(candidate)?))
    }

    pub fn scores(&self, query: &DVector<f64>, candidates: &[usize]) -> Result<Vec<f64>> {
        candidates.iter().map(|&c| Ok(query.dot(self.item(c)?))).collect()
    }

    /// Gradient of `sum_i g_i s_i` with respect to any single prompt row, given
    /// `weighted = sum_i g_i e_{c_i}`; every row receives the same gradient.
    pub fn prompt_row_grad(&self, weighted: &DVector<f64>, prompt_rows: usize, history_len: usize) -> DVector<f64> {
        self.mixing.tr_mul(weighted) / (prompt_rows + history_len).max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bce,
    Bpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: usize,
    pub label: u8,
    pub score: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Summed binary cross-entropy and its gradient `sigma(s) - y` per score.
pub fn bce_loss(scores_labels: &[(f64, u8)]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores_labels.len());
    for &(s, y) in scores_labels {
        let y = f64::from(y);
        // -y log sigma(s) - (1 - y) log(1 - sigma(s)) = softplus(s) - y s
        loss += if y > 0.5 { softplus(-s) } else { softplus(s) };
        grad.push(sigmoid(s) - y);
    }
    (loss, grad)
}

/// Summed `-log sigma(s_pos - s_neg)` and its gradient per pair.
pub fn bpr_loss(pairs: &[(f64, f64)]) -> (f64, Vec<(f64, f64)>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pairs.len());
    for &(p, n) in pairs {
        loss += softplus(n - p);
        let g = sigmoid(n - p);
        grad.push((-g, g));
    }
    (loss, grad)
}

/// Indices of `candidates` by descending score, ties by ascending item id.
pub fn rank(candidates: &[Candidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .total_cmp(&candidates[a].score)
            .then(candidates[a].item_id.cmp(&candidates[b].item_id))
    });
    order
}

/// 1-based rank of candidate `target` under [`rank`]'s ordering, without sorting.
pub fn rank_of(scores: &[f64], item_ids: &[usize], target: usize) -> usize {
    let (s, id) = (scores[target], item_ids[target]);
    1 + scores
        .iter()
        .zip(item_ids.iter())
        .filter(|(&o, &oid)| o > s || (o == s && oid < id))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scorer(seed: u64, n: usize, d: usize) -> FrozenScorer {
        let mut r = crate::rng::stream(seed, "scorer-items", &[]);
        let items = (0..n).map(|_| linalg::gaussian_vector(&mut r, d, 0.5)).collect();
        FrozenScorer::new(items, 0.3, seed)
    }

    #[test]
    fn score_examples() {
        let s = scorer(1, 20, 4);
        for c in 0..20 {
            assert_eq!(s.score(&[], &PromptMatrix::zeros(3, 4), c).unwrap(), 0.0);
        }
        let mut r = crate::rng::stream(2, "score", &[]);
        let p = PromptMatrix::from_fn(3, 4, |_, _| r.random_range(-1.0..1.0));
        let hist = [3, 7, 7, 11];
        assert_eq!(s.score(&hist, &p, 5).unwrap(), s.score(&hist, &p, 5).unwrap());
        assert!(s.score(&hist, &p, 20).is_err());

        // Straight-line reference: explicit token list, mean, matrix-vector, dot.
        let mut tokens: Vec<Vec<f64>> = (0..3).map(|i| (0..4).map(|j| p.matrix()[(i, j)]).collect()).collect();
        for &h in &hist {
            tokens.push(s.item(h).unwrap().iter().cloned().collect());
        }
        let pooled: Vec<f64> = (0..4).map(|j| tokens.iter().map(|t| t[j]).sum::<f64>() / tokens.len() as f64).collect();
        let m = s.mixing();
        let mixed: Vec<f64> = (0..4).map(|i| (0..4).map(|j| m[(i, j)] * pooled[j]).sum()).collect();
        let e = s.item(5).unwrap();
        let reference: f64 = (0..4).map(|j| mixed[j] * e[j]).sum();
        assert!((s.score(&hist, &p, 5).unwrap() - reference).abs() < 1e-14);
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let s = scorer(3, 30, 5);
        let mut r = crate::rng::stream(4, "grad", &[]);
        let p = PromptMatrix::from_fn(2, 5, |_, _| r.random_range(-1.0..1.0));
        let hist = [1, 2, 3];
        let cands = [4, 9, 17];
        let labels = [1u8, 0, 0];
        let loss = |p: &PromptMatrix| -> f64 {
            let sl: Vec<(f64, u8)> = cands.iter().zip(labels).map(|(&c, y)| (s.score(&hist, p, c).unwrap(), y)).collect();
            bce_loss(&sl).0
        };
        let sl: Vec<(f64, u8)> = cands.iter().zip(labels).map(|(&c, y)| (s.score(&hist, &p, c).unwrap(), y)).collect();
        let (_, g) = bce_loss(&sl);
        let mut weighted = DVector::zeros(5);
        for (gi, &c) in g.iter().zip(cands.iter()) {
            weighted.axpy(*gi, s.item(c).unwrap(), 1.0);
        }
        let row = s.prompt_row_grad(&weighted, 2, hist.len());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..5 {
                let mut pp = p.clone();
                pp.matrix_mut()[(i, j)] += h;
                let mut pm = p.clone();
                pm.matrix_mut()[(i, j)] -= h;
                let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
                assert!((fd - row[j]).abs() <= 1e-5 * row[j].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[(0.0, 1)]).0 - 2.0_f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[(30.0, 1)]).0 < 1e-12);
        assert!(bce_loss(&[(-30.0, 0)]).0 < 1e-12);
        let mut r = crate::rng::stream(5, "bce", &[]);
        let batch: Vec<(f64, u8)> = (0..12).map(|i| (r.random_range(-4.0..4.0), (i % 3 == 0) as u8)).collect();
        let (_, g) = bce_loss(&batch);
        let h = 1e-6;
        for i in 0..batch.len() {
            let mut bp = batch.clone();
            bp[i].0 += h;
            let mut bm = batch.clone();
            bm[i].0 -= h;
            let fd = (bce_loss(&bp).0 - bce_loss(&bm).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn bpr_examples() {
        let (l, _) = bpr_loss(&[(0.3, 0.3), (-1.0, -1.0)]);
        assert!((l - 2.0 * 2.0_f64.ln()).abs() < 1e-15);
        assert!(bpr_loss(&[(30.0, 0.0)]).0 < 1e-12);
        let mut r = crate::rng::stream(6, "bpr", &[]);
        let pairs: Vec<(f64, f64)> = (0..8).map(|_| (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0))).collect();
        let (_, g) = bpr_loss(&pairs);
        let h = 1e-6;
        for i in 0..pairs.len() {
            for side in 0..2 {
                let mut pp = pairs.clone();
                let mut pm = pairs.clone();
                if side == 0 {
                    pp[i].0 += h;
                    pm[i].0 -= h;
                } else {
                    pp[i].1 += h;
                    pm[i].1 -= h;
                }
                let fd = (bpr_loss(&pp).0 - bpr_loss(&pm).0) / (2.0 * h);
                let a = if side == 0 { g[i].0 } else { g[i].1 };
                assert!((fd - a).abs() < 1e-6);
            }
        }
    }

    fn cands(scores: &[f64]) -> Vec<Candidate> {
        scores.iter().enumerate().map(|(i, s)| Candidate { item_id: 10 + i, label: 0, score: *s }).collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&cands(&[2.0, 1.0, 3.0])), vec![2, 0, 1]);
        let mut c = cands(&[1.0; 4]);
        c[0].item_id = 40;
        assert_eq!(rank(&c), vec![1, 2, 3, 0]);
    }

    proptest! {
        #[test]
        fn rank_matches_stable_sort_and_rank_of(scores in proptest::collection::vec(-3i32..3, 1..40)) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let c = cands(&scores);
            let order = rank(&c);
            // Items are numbered in index order, so a stable descending sort is the oracle.
            let mut oracle: Vec<usize> = (0..c.len()).collect();
            oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            prop_assert_eq!(&order, &oracle);
            let ids: Vec<usize> = c.iter().map(|x| x.item_id).collect();
            for (pos, &idx) in order.iter().enumerate() {
                prop_assert_eq!(rank_of(&scores, &ids, idx), pos + 1);
            }
        }

        #[test]
        fn raising_a_score_never_worsens_its_rank(scores in proptest::collection::vec(-5.0f64..5.0, 2..30), bump in 0.0f64..3.0) {
            let ids: Vec<usize> = (0..scores.len()).collect();
            let before = rank_of(&scores, &ids, 0);
            let mut raised = scores.clone();
            raised[0] += bump;
            prop_assert!(rank_of(&raised, &ids, 0) <= before);
        }

        #[test]
        fn score_is_linear_in_the_pooled_vector(seed in 0u64..1000, a in -2.0f64..2.0) {
            let s = scorer(seed, 10, 3);
            let mut r = crate::rng::stream(seed, "lin", &[]);
            let x = linalg::gaussian_vector(&mut r, 3, 1.0);
            let y = linalg::gaussian_vector(&mut r, 3, 1.0);
            let e = s.item(2).unwrap();
            let f = |v: &DVector<f64>| (s.mixing() * v).dot(e);
            prop_assert!((f(&(&x + &y * a)) - f(&x) - a * f(&y)).abs() < 1e-12);
        }
    }
}
