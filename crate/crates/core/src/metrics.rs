//! Ranking metrics, continual-learning functionals over the accuracy matrix,
//! adaptation speed and exposure disparity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CUTOFFS: [usize; 3] = [5, 10, 20];

/// Single-relevant-item NDCG: `1 / log2(1 + rank)` inside the cutoff.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((1 + rank) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn mrr_at(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// Mean HR/NDCG/MRR at each cutoff in [`CUTOFFS`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub queries: usize,
    pub hr: [f64; 3],
    pub ndcg: [f64; 3],
    pub mrr: [f64; 3],
}

impl RankingSummary {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let mut s = RankingSummary { queries: ranks.len(), ..Default::default() };
        if ranks.is_empty() {
            return s;
        }
        for (j, &k) in CUTOFFS.iter().enumerate() {
            let n = ranks.len() as f64;
            s.hr[j] = ranks.iter().map(|&r| hr_at(r, k)).sum::<f64>() / n;
            s.ndcg[j] = ranks.iter().map(|&r| ndcg_at(r, k)).sum::<f64>() / n;
            s.mrr[j] = ranks.iter().map(|&r| mrr_at(r, k)).sum::<f64>() / n;
        }
        s
    }

    pub fn ndcg10(&self) -> f64 {
        self.ndcg[1]
    }

    pub fn hr10(&self) -> f64 {
        self.hr[1]
    }
}

/// `a[s][t]`: NDCG@10 on slice `s` after training through slice `t`.
/// Entries exist for `t >= s - 1`; `t = s - 1` is the pre-training
/// evaluation used by forward transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub a: Vec<Vec<Option<f64>>>,
    pub scratch: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(slices: usize) -> Self {
        Self { a: vec![vec![None; slices]; slices], scratch: vec![None; slices] }
    }

    pub fn slices(&self) -> usize {
        self.a.len()
    }

    pub fn set(&mut self, s: usize, t: usize, v: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::State(format!("accuracy A[{s}][{t}] = {v} outside [0,1]")));
        }
        if s > t + 1 || t >= self.slices() {
            return Err(Error::Argument(format!("A[{s}][{t}] is not a defined entry")));
        }
        self.a[s][t] = Some(v);
        Ok(())
    }

    fn get(&self, s: usize, t: usize) -> Result<f64> {
        self.a[s][t].ok_or_else(|| Error::State(format!("accuracy matrix entry A[{s}][{t}] is missing")))
    }

    /// Mean of the final row: every slice under the final model.
    pub fn final_mean(&self) -> Result<f64> {
        let t = self.slices() - 1;
        let vals = (0..=t).map(|s| self.get(s, t)).collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean over `s < T` of `max_{s <= t' < T} A[s][t'] - A[s][T]`.
    pub fn average_forgetting(&self) -> Result<f64> {
        let last = self.slices() - 1;
        if last == 0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for s in 0..last {
            let mut peak = f64::NEG_INFINITY;
            for t in s..last {
                peak = peak.max(self.get(s, t)?);
            }
            total += peak - self.get(s, last)?;
        }
        Ok(total / last as f64)
    }

    /// Mean over `s < T` of `A[s][T] - A[s][s]`.
    pub fn backward_transfer(&self) -> Result<f64> {
        let last = self.slices() - 1;
        if last == 0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for s in 0..last {
            total += self.get(s, last)? - self.get(s, s)?;
        }
        Ok(total / last as f64)
    }

    /// Mean over slices after the first of `A[s][s-1] - scratch[s]`.
    pub fn forward_transfer(&self) -> Result<f64> {
        let n = self.slices();
        if n < 2 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for s in 1..n {
            let scratch = self.scratch[s].ok_or_else(|| Error::State(format!("scratch accuracy for slice {s} is missing")))?;
            total += self.get(s, s - 1)? - scratch;
        }
        Ok(total / (n - 1) as f64)
    }
}

/// Returned by [`steps_to_95`] when the threshold is never reached.
pub const NEVER: u64 = u64::MAX;

/// First recorded step whose NDCG is at least 95% of the plateau, the mean
/// of the last 10% of the trajectory (at least one point).
pub fn steps_to_95(trajectory: &[(u64, f64)]) -> Result<u64> {
    if trajectory.is_empty() {
        return Err(Error::Argument("empty NDCG trajectory".into()));
    }
    let tail = trajectory.len().div_ceil(10);
    let plateau = trajectory[trajectory.len() - tail..].iter().map(|p| p.1).sum::<f64>() / tail as f64;
    Ok(trajectory.iter().find(|p| p.1 >= 0.95 * plateau).map(|p| p.0).unwrap_or(NEVER))
}

/// Top-K exposure gap between head and tail items, per query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub counts: Vec<u64>,
    pub queries: u64,
    pub k: usize,
}

impl Exposure {
    pub fn new(n_items: usize, k: usize) -> Self {
        Self { counts: vec![0; n_items], queries: 0, k }
    }

    pub fn record(&mut self, top: &[usize]) {
        for &i in top.iter().take(self.k) {
            self.counts[i] += 1;
        }
        self.queries += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `|mean exposure of head items - mean exposure of tail items| / queries`.
    pub fn disparity(&self, head: &[bool]) -> f64 {
        if self.queries == 0 {
            return 0.0;
        }
        let mean = |want: bool| {
            let xs: Vec<u64> = self.counts.iter().zip(head).filter(|(_, h)| **h == want).map(|(c, _)| *c).collect();
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<u64>() as f64 / xs.len() as f64
            }
        };
        (mean(true) - mean(false)).abs() / self.queries as f64
    }
}

/// Top decile of items by interaction count; ties broken by lower item id.
pub fn head_items(interaction_counts: &[u64]) -> Vec<bool> {
    let n = interaction_counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| interaction_counts[b].cmp(&interaction_counts[a]).then(a.cmp(&b)));
    let mut head = vec![false; n];
    for &i in order.iter().take(n.div_ceil(10)) {
        head[i] = true;
    }
    head
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Final-model ranking metrics per slice.
    pub per_slice: Vec<RankingSummary>,
    pub final_ndcg10: f64,
    pub af: f64,
    pub bwt: f64,
    pub fwt: f64,
    /// Per slice; [`NEVER`] when the probe never reached the threshold.
    pub steps_to_95: Vec<u64>,
    pub mean_steps_to_95: f64,
    pub disparity_item: f64,
    pub disparity_user: f64,
    pub trainable_params_per_client: usize,
    pub upload_bytes: u64,
    pub uploads: u64,
    /// Composed epsilon of the most exposed client; `None` without noise.
    pub epsilon: Option<f64>,
}
