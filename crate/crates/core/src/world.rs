//! Synthetic federated world with known ground truth.
//!
//! Users belong to latent clusters; each user's preference starts near its
//! cluster center and drifts by a Gaussian random walk with occasional
//! shocks. Every (user, slice) also carries a transient session intent.
//! Positives are drawn by softmax over `<preference + intent, e_item>` among
//! items already introduced; each event is scored against 99 sampled
//! negatives.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    /// Per-slice random-walk step, relative to the preference scale.
    pub walk_sigma: f64,
    pub shock_prob: f64,
    /// Shock length, relative to the preference scale.
    pub shock_magnitude: f64,
    /// Log-normal spread of per-user drift speed.
    pub heterogeneity: f64,
    /// Fraction of the displacement from the user's base preference undone
    /// each slice; 0 gives a pure random walk.
    pub reversion: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self { walk_sigma: 0.25, shock_prob: 0.1, shock_magnitude: 0.8, heterogeneity: 0.5, reversion: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_true_clusters: usize,
    pub n_slices: usize,
    pub drift: DriftConfig,
    pub interactions_per_user_per_slice: usize,
    /// Held-out events per (user, slice); the rest are training events.
    pub test_events: usize,
    pub seed: u64,
    /// Embedding width; set from the scorer configuration.
    #[serde(skip)]
    pub dim: usize,
    pub item_scale: f64,
    /// Norm of the preference vectors (cluster center scale).
    pub preference_scale: f64,
    /// Spread of users around their center, relative to the preference scale.
    pub user_noise: f64,
    /// Per-slice session intent, relative to the preference scale.
    pub session_sigma: f64,
    /// Log-normal spread of per-user activity.
    pub activity_spread: f64,
    pub history_len: usize,
    pub negatives: usize,
    /// Fraction of items introduced after the first slice.
    pub new_item_fraction: f64,
    /// Fraction of users whose first slice is one of the final two.
    pub cold_start_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 600,
            n_true_clusters: 8,
            n_slices: 8,
            drift: DriftConfig::default(),
            interactions_per_user_per_slice: 12,
            test_events: 2,
            seed: 0,
            dim: 32,
            item_scale: 6.0,
            preference_scale: 3.0,
            user_noise: 0.5,
            session_sigma: 0.5,
            activity_spread: 0.5,
            history_len: 3,
            negatives: 99,
            new_item_fraction: 0.2,
            cold_start_fraction: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.n_slices < 2 {
            return bad("n_slices must be at least 2");
        }
        if self.n_users == 0 || self.n_true_clusters == 0 || self.dim == 0 {
            return bad("n_users, n_true_clusters and dim must be positive");
        }
        if self.n_items < self.negatives + 1 + 2 * self.interactions_per_user_per_slice {
            return bad("n_items too small for the candidate sets");
        }
        if self.interactions_per_user_per_slice <= self.test_events {
            return bad("interactions_per_user_per_slice must exceed test_events");
        }
        for (name, p) in [
            ("drift.shock_prob", self.drift.shock_prob),
            ("drift.reversion", self.drift.reversion),
            ("new_item_fraction", self.new_item_fraction),
            ("cold_start_fraction", self.cold_start_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0,1]"));
            }
        }
        for (name, v) in [
            ("drift.walk_sigma", self.drift.walk_sigma),
            ("drift.shock_magnitude", self.drift.shock_magnitude),
            ("drift.heterogeneity", self.drift.heterogeneity),
            ("user_noise", self.user_noise),
            ("session_sigma", self.session_sigma),
            ("activity_spread", self.activity_spread),
        ] {
            if !(v >= 0.0) {
                return bad(&format!("{name} must be >= 0"));
            }
        }
        if !(self.item_scale > 0.0 && self.preference_scale > 0.0) {
            return bad("item_scale and preference_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user: usize,
    pub cluster_id: usize,
    /// First slice with interactions.
    pub arrival: usize,
    pub activity: f64,
    pub drift_scale: f64,
    /// Preference for every slice (defined before arrival too).
    pub preference: Vec<DVector<f64>>,
    pub intent: Vec<DVector<f64>>,
    /// Interactions per slice.
    pub interactions: Vec<usize>,
}

impl UserTruth {
    /// Mean per-slice preference displacement after arrival.
    pub fn realized_drift(&self) -> f64 {
        let steps: Vec<f64> = (self.arrival + 1..self.preference.len())
            .map(|t| (&self.preference[t] - &self.preference[t - 1]).norm())
            .collect();
        if steps.is_empty() {
            0.0
        } else {
            steps.iter().sum::<f64>() / steps.len() as f64
        }
    }

    pub fn total_interactions(&self) -> usize {
        self.interactions.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user: u32,
    /// Previous positives of this user, oldest first.
    pub history: Vec<u32>,
    pub candidates: Vec<u32>,
    /// Position of the positive inside `candidates`.
    pub positive: u16,
    pub test: bool,
}

impl Event {
    pub fn positive_item(&self) -> u32 {
        self.candidates[self.positive as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSlice {
    pub slice_index: usize,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub items: Vec<DVector<f64>>,
    pub item_intro: Vec<usize>,
    pub centers: Vec<DVector<f64>>,
    pub users: Vec<UserTruth>,
    pub slices: Vec<InteractionSlice>,
}

/// Rescale rows so their sample covariance is `scale^2 / d * I` with zero mean.
fn whiten(items: &mut [DVector<f64>], scale: f64) {
    let n = items.len();
    let d = items[0].len();
    if n <= d {
        for e in items.iter_mut() {
            *e *= scale / (d as f64).sqrt();
        }
        return;
    }
    let mean: DVector<f64> = items.iter().sum::<DVector<f64>>() / n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in items.iter_mut() {
        *e -= &mean;
        cov += &*e * e.transpose();
    }
    cov /= n as f64;
    let chol = cov.cholesky().expect("item covariance is positive definite for n > d");
    let l = chol.l();
    let f = scale / (d as f64).sqrt();
    for e in items.iter_mut() {
        let white = l.solve_lower_triangular(e).expect("triangular factor is nonsingular");
        *e = white * f;
    }
}

/// Softmax choice probabilities of `eligible` items under `logit_vec`.
pub fn choice_probabilities(logit_vec: &DVector<f64>, items: &[DVector<f64>], eligible: &[usize]) -> Vec<f64> {
    let logits: Vec<f64> = eligible.iter().map(|&i| logit_vec.dot(&items[i])).collect();
    crate::routing::softmax(&logits)
}

/// Draw an index into `probs` by inversion of the cumulative sum.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (d, t_max) = (cfg.dim, cfg.n_slices);
    let seed = cfg.seed;
    let unit = 1.0 / (d as f64).sqrt();

    let mut rng = crate::rng::stream(seed, "world-items", &[]);
    let mut items: Vec<DVector<f64>> = (0..cfg.n_items).map(|_| linalg::gaussian_vector(&mut rng, d, 1.0)).collect();
    whiten(&mut items, cfg.item_scale);
    let n_new = ((cfg.n_items as f64) * cfg.new_item_fraction).round() as usize;
    let mut item_intro = vec![0usize; cfg.n_items];
    for (j, intro) in item_intro.iter_mut().rev().take(n_new).enumerate() {
        *intro = 1 + j % (t_max - 1);
    }

    let mut rng = crate::rng::stream(seed, "world-centers", &[]);
    let centers: Vec<DVector<f64>> = (0..cfg.n_true_clusters)
        .map(|_| linalg::random_unit(&mut rng, d) * cfg.preference_scale)
        .collect();

    let b = cfg.preference_scale;
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut r = crate::rng::stream(seed, "world-user", &[u as u64]);
        let cluster_id = u % cfg.n_true_clusters;
        let cold = r.random::<f64>() < cfg.cold_start_fraction;
        let arrival = if cold { t_max - 2 + r.random_range(0..2) } else { 0 };
        let activity = (cfg.activity_spread * r.sample::<f64, _>(StandardNormal)).exp();
        let drift_scale = (cfg.drift.heterogeneity * r.sample::<f64, _>(StandardNormal)).exp();
        let base = &centers[cluster_id] + linalg::gaussian_vector(&mut r, d, cfg.user_noise * b * unit);
        let mut pref = base.clone();
        let mut preference = Vec::with_capacity(t_max);
        let mut intent = Vec::with_capacity(t_max);
        let mut interactions = vec![0usize; t_max];
        for (t, count) in interactions.iter_mut().enumerate() {
            if t > 0 {
                pref = &pref - (&pref - &base) * cfg.drift.reversion;
                pref += linalg::gaussian_vector(&mut r, d, drift_scale * cfg.drift.walk_sigma * b * unit);
                if r.random::<f64>() < cfg.drift.shock_prob {
                    pref += linalg::random_unit(&mut r, d) * (drift_scale * cfg.drift.shock_magnitude * b);
                }
            }
            preference.push(pref.clone());
            intent.push(linalg::gaussian_vector(&mut r, d, cfg.session_sigma * b * unit));
            if t >= arrival {
                let n = (cfg.interactions_per_user_per_slice as f64 * activity).round() as usize;
                *count = n.clamp(cfg.test_events + 1, 4 * cfg.interactions_per_user_per_slice);
            }
        }
        users.push(UserTruth { user: u, cluster_id, arrival, activity, drift_scale, preference, intent, interactions });
    }

    let mut histories: Vec<Vec<u32>> = vec![Vec::new(); cfg.n_users];
    let mut slices = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let eligible: Vec<usize> = (0..cfg.n_items).filter(|&i| item_intro[i] <= t).collect();
        let mut events = Vec::new();
        for user in &users {
            let n = user.interactions[t];
            if n == 0 {
                continue;
            }
            let mut r = crate::rng::stream(seed, "world-events", &[t as u64, user.user as u64]);
            let probs = choice_probabilities(&(&user.preference[t] + &user.intent[t]), &items, &eligible);
            let positives: Vec<u32> = (0..n).map(|_| eligible[sample_index(&probs, &mut r)] as u32).collect();
            let mut seen = positives.clone();
            seen.sort_unstable();
            seen.dedup();
            let pool: Vec<u32> =
                eligible.iter().map(|&i| i as u32).filter(|i| seen.binary_search(i).is_err()).collect();
            let history = &mut histories[user.user];
            for (k, &pos) in positives.iter().enumerate() {
                let negs = index::sample(&mut r, pool.len(), cfg.negatives);
                let mut candidates: Vec<u32> = negs.iter().map(|j| pool[j]).collect();
                let slot = r.random_range(0..=candidates.len());
                candidates.insert(slot, pos);
                let start = history.len().saturating_sub(cfg.history_len);
                events.push(Event {
                    user: user.user as u32,
                    history: history[start..].to_vec(),
                    candidates,
                    positive: slot as u16,
                    test: k >= n - cfg.test_events,
                });
                history.push(pos);
            }
        }
        slices.push(InteractionSlice { slice_index: t, events });
    }

    Ok(World { config: cfg.clone(), items, item_intro, centers, users, slices })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub drift: Vec<Level>,
    pub activity: Vec<Level>,
    pub cold_start: Vec<bool>,
}

/// Tercile labels; ties go to the lower stratum. The cut values are the
/// order statistics at ranks `ceil(n/3)` and `ceil(2n/3)`.
pub fn terciles(values: &[f64]) -> Vec<Level> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let q1 = sorted[n.div_ceil(3) - 1];
    let q2 = sorted[(2 * n).div_ceil(3) - 1];
    values
        .iter()
        .map(|&v| {
            if v <= q1 {
                Level::Low
            } else if v <= q2 {
                Level::Mid
            } else {
                Level::High
            }
        })
        .collect()
}

pub fn stratify(users: &[UserTruth], n_slices: usize) -> Strata {
    let drift: Vec<f64> = users.iter().map(|u| u.realized_drift()).collect();
    let activity: Vec<f64> = users.iter().map(|u| u.total_interactions() as f64).collect();
    Strata {
        drift: terciles(&drift),
        activity: terciles(&activity),
        cold_start: users.iter().map(|u| u.arrival + 2 >= n_slices).collect(),
    }
}

pub const WORLD_FORMAT: &str = "protofed-world";
pub const WORLD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    dim: usize,
    config: WorldConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Item { id: usize, intro: usize, embedding: DVector<f64> },
    Center { id: usize, vector: DVector<f64> },
    User(UserTruth),
    Event { slice: usize, event: Event },
}

/// Line-JSON: a header line, then items, centers, users and events.
pub fn write_world(world: &World, mut out: impl Write) -> Result<()> {
    let header = Header {
        format: WORLD_FORMAT.into(),
        version: WORLD_VERSION,
        seed: world.config.seed,
        dim: world.config.dim,
        config: world.config.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let line = |r: Record, out: &mut dyn Write| -> Result<()> {
        serde_json::to_writer(&mut *out, &r)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    for (id, e) in world.items.iter().enumerate() {
        line(Record::Item { id, intro: world.item_intro[id], embedding: e.clone() }, &mut out)?;
    }
    for (id, c) in world.centers.iter().enumerate() {
        line(Record::Center { id, vector: c.clone() }, &mut out)?;
    }
    for u in &world.users {
        line(Record::User(u.clone()), &mut out)?;
    }
    for s in &world.slices {
        for e in &s.events {
            line(Record::Event { slice: s.slice_index, event: e.clone() }, &mut out)?;
        }
    }
    Ok(())
}

pub fn read_world(input: impl BufRead) -> Result<World> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::State("empty world file".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.format != WORLD_FORMAT || header.version != WORLD_VERSION {
        return Err(Error::State(format!("unsupported world format {} v{}", header.format, header.version)));
    }
    let mut config = header.config;
    config.dim = header.dim;
    let mut world = World {
        slices: (0..config.n_slices).map(|t| InteractionSlice { slice_index: t, events: Vec::new() }).collect(),
        config,
        items: Vec::new(),
        item_intro: Vec::new(),
        centers: Vec::new(),
        users: Vec::new(),
    };
    for (n, line) in lines.enumerate() {
        let line = line?;
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::State(format!("world line {}: {e}", n + 2)))?;
        match record {
            Record::Item { embedding, intro, .. } => {
                world.items.push(embedding);
                world.item_intro.push(intro);
            }
            Record::Center { vector, .. } => world.centers.push(vector),
            Record::User(u) => world.users.push(u),
            Record::Event { slice, event } => match world.slices.get_mut(slice) {
                Some(s) => s.events.push(event),
                None => return Err(Error::State(format!("world line {}: slice {slice} out of range", n + 2))),
            },
        }
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            n_users: 60,
            n_items: 220,
            n_true_clusters: 3,
            n_slices: 4,
            interactions_per_user_per_slice: 6,
            seed,
            dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn no_drift_means_constant_preferences() {
        let cfg = WorldConfig {
            drift: DriftConfig { walk_sigma: 0.0, shock_prob: 0.0, ..Default::default() },
            ..small(1)
        };
        let w = generate_world(&cfg).unwrap();
        for u in &w.users {
            assert!(u.preference.windows(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn single_cluster_shares_one_center() {
        let cfg = WorldConfig { n_true_clusters: 1, user_noise: 0.0, ..small(2) };
        let w = generate_world(&cfg).unwrap();
        assert!(w.users.iter().all(|u| u.cluster_id == 0 && u.preference[0] == w.centers[0]));
    }

    #[test]
    fn positive_frequencies_match_the_softmax_model() {
        let mut r = crate::rng::stream(3, "five-items", &[]);
        let items: Vec<DVector<f64>> = (0..5).map(|_| linalg::gaussian_vector(&mut r, 3, 1.0)).collect();
        let pref = linalg::gaussian_vector(&mut r, 3, 1.0);
        let eligible: Vec<usize> = (0..5).collect();
        let probs = choice_probabilities(&pref, &items, &eligible);
        // Direct softmax as the model.
        let logits: Vec<f64> = items.iter().map(|e| pref.dot(e)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let model: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_index(&probs, &mut r)] += 1;
        }
        for (c, p) in counts.iter().zip(model.iter()) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02);
        }
    }

    #[test]
    fn no_item_is_positive_before_introduction() {
        let w = generate_world(&WorldConfig { new_item_fraction: 0.5, ..small(4) }).unwrap();
        for s in &w.slices {
            for e in &s.events {
                assert!(w.item_intro[e.positive_item() as usize] <= s.slice_index);
                assert!(e.candidates.iter().all(|&c| w.item_intro[c as usize] <= s.slice_index));
                assert_eq!(e.candidates.len(), 100);
                let mut c = e.candidates.clone();
                c.sort_unstable();
                c.dedup();
                assert_eq!(c.len(), 100);
            }
        }
    }

    #[test]
    fn worlds_are_deterministic() {
        let a = generate_world(&small(5)).unwrap();
        let b = generate_world(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_world(&small(6)).unwrap());
    }

    #[test]
    fn more_walk_noise_means_more_drift() {
        for seed in [7, 8] {
            let mean_drift = |walk: f64| {
                let cfg = WorldConfig {
                    drift: DriftConfig { walk_sigma: walk, shock_prob: 0.0, ..Default::default() },
                    ..small(seed)
                };
                let w = generate_world(&cfg).unwrap();
                w.users.iter().map(|u| u.realized_drift()).sum::<f64>() / w.users.len() as f64
            };
            assert!(mean_drift(0.4) > mean_drift(0.1));
        }
    }

    #[test]
    fn items_are_whitened() {
        let w = generate_world(&small(9)).unwrap();
        let n = w.items.len() as f64;
        let mut cov = DMatrix::zeros(8, 8);
        for e in &w.items {
            cov += e * e.transpose();
        }
        cov /= n;
        let target = DMatrix::identity(8, 8) * (w.config.item_scale.powi(2) / 8.0);
        assert!((cov - target).amax() < 1e-9);
    }

    #[test]
    fn tercile_examples() {
        assert!(terciles(&[0.3; 7]).iter().all(|l| *l == Level::Low));
        let v: Vec<f64> = (0..9).map(|i| (i * 7 % 9) as f64).collect();
        let t = terciles(&v);
        for level in [Level::Low, Level::Mid, Level::High] {
            assert_eq!(t.iter().filter(|l| **l == level).count(), 3);
        }
    }

    #[test]
    fn terciles_match_a_sort_oracle() {
        let mut r = crate::rng::stream(10, "terciles", &[]);
        for n in [1usize, 2, 5, 30, 101] {
            let v: Vec<f64> = (0..n).map(|_| r.random_range(0..20) as f64).collect();
            let labels = terciles(&v);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            let cut1 = v[idx[(n + 2) / 3 - 1]];
            let cut2 = v[idx[(2 * n + 2) / 3 - 1]];
            for i in 0..n {
                let expect = if v[i] <= cut1 { Level::Low } else if v[i] <= cut2 { Level::Mid } else { Level::High };
                assert_eq!(labels[i], expect);
            }
        }
    }

    #[test]
    fn cold_start_users_arrive_late() {
        let w = generate_world(&WorldConfig { cold_start_fraction: 0.5, ..small(11) }).unwrap();
        let s = stratify(&w.users, w.config.n_slices);
        for (u, cold) in w.users.iter().zip(s.cold_start.iter()) {
            assert_eq!(*cold, u.arrival >= 2);
            let first = w.slices.iter().position(|sl| sl.events.iter().any(|e| e.user as usize == u.user));
            assert_eq!(first, Some(u.arrival));
        }
        assert!(s.cold_start.iter().any(|c| *c));
    }

    #[test]
    fn world_file_round_trips() {
        let w = generate_world(&small(12)).unwrap();
        let mut buf = Vec::new();
        write_world(&w, &mut buf).unwrap();
        let back = read_world(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, w);
    }
}
