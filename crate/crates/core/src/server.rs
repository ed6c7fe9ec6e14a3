//! The federated prototype server.
//!
//! Prototypes live in the encoder's output space; each encoded vector `v_k`
//! is mirrored by a prompt matrix `c_k` decoded through the encoder's linear
//! right inverse, so `phi(c_k) = v_k` holds exactly after every resync.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{sinkhorn_transport, EmpiricalMeasure};
use crate::error::{arg, Error, Result};
use crate::linalg;
use crate::prompt::PromptMatrix;
use crate::routing::Encoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeLibrary {
    pub prototypes: Vec<PromptMatrix>,
    pub encoded: Vec<DVector<f64>>,
    pub utilization: Vec<f64>,
    pub rho_sep: f64,
    pub tau_util: f64,
}

impl PrototypeLibrary {
    pub fn empty(rho_sep: f64, tau_util: f64) -> Self {
        Self { prototypes: Vec::new(), encoded: Vec::new(), utilization: Vec::new(), rho_sep, tau_util }
    }

    /// Library whose prompts are decoded from `encoded`.
    pub fn from_encoded(
        encoded: Vec<DVector<f64>>,
        encoder: &Encoder,
        l_p: usize,
        rho_sep: f64,
        tau_util: f64,
    ) -> Result<Self> {
        let prototypes = encoded
            .iter()
            .map(|v| encoder.decode_prompt(v, l_p))
            .collect::<Result<Vec<_>>>()?;
        let k = encoded.len();
        Ok(Self { prototypes, encoded, utilization: vec![0.0; k], rho_sep, tau_util })
    }

    /// Library whose encodings are computed from `prototypes`.
    pub fn from_prompts(
        prototypes: Vec<PromptMatrix>,
        encoder: &Encoder,
        rho_sep: f64,
        tau_util: f64,
    ) -> Result<Self> {
        let encoded = prototypes
            .iter()
            .map(|p| encoder.encode_prompt(p))
            .collect::<Result<Vec<_>>>()?;
        let k = encoded.len();
        Ok(Self { prototypes, encoded, utilization: vec![0.0; k], rho_sep, tau_util })
    }

    /// `k` small random prototypes.
    pub fn random(
        k: usize,
        encoder: &Encoder,
        l_p: usize,
        scale: f64,
        rho_sep: f64,
        tau_util: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = crate::rng::stream(seed, "prototype-init", &[]);
        let d_phi = encoder.output_dim();
        let encoded = (0..k)
            .map(|_| linalg::gaussian_vector(&mut rng, d_phi, scale / (d_phi as f64).sqrt()))
            .collect();
        Self::from_encoded(encoded, encoder, l_p, rho_sep, tau_util)
    }

    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }

    /// Re-decode every prompt from its encoded vector.
    pub fn resync(&mut self, encoder: &Encoder) -> Result<()> {
        let l_p = self.prototypes.first().map(|p| p.rows()).unwrap_or(1);
        for (c, v) in self.prototypes.iter_mut().zip(self.encoded.iter()) {
            *c = encoder.decode_prompt(v, l_p)?;
        }
        Ok(())
    }

    /// Largest `||phi(c_k) - v_k||_inf` over the library.
    pub fn encoding_drift(&self, encoder: &Encoder) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (c, v) in self.prototypes.iter().zip(self.encoded.iter()) {
            worst = worst.max((encoder.encode_prompt(c)? - v).amax());
        }
        Ok(worst)
    }

    pub fn min_separation(&self) -> f64 {
        min_pairwise_distance(&self.encoded)
    }
}

pub fn min_pairwise_distance(vs: &[DVector<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            best = best.min((&vs[i] - &vs[j]).norm());
        }
    }
    best
}

/// One client's release for a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub client_id: u64,
    pub vector: DVector<f64>,
    /// Optional small atom set for the barycenter aggregator; empty means the
    /// single atom `vector`.
    #[serde(default)]
    pub atoms: Vec<DVector<f64>>,
}

impl Upload {
    pub fn new(client_id: u64, vector: DVector<f64>) -> Self {
        Self { client_id, vector, atoms: Vec::new() }
    }
}

pub type RoundUploads = Vec<Upload>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    Kmeans,
    Median,
    Barycenter,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Kmeans => "kmeans",
            AggregatorKind::Median => "median",
            AggregatorKind::Barycenter => "barycenter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub beta: f64,
    pub clip_radius: f64,
    pub rho_sep: f64,
    pub tau_util: f64,
    pub aggregator: AggregatorKind,
    /// Server-side noise added to each nonempty cluster's estimate.
    pub noise_sigma: f64,
    pub init_scale: f64,
    pub separation_max_sweeps: usize,
    pub upload_window: usize,
    pub median_max_iter: usize,
    pub median_tol: f64,
    pub barycenter_support: usize,
    pub barycenter_epsilon: f64,
    pub barycenter_max_iter: usize,
    pub barycenter_tol: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            k: 128,
            beta: 0.5,
            clip_radius: 1.0,
            rho_sep: 0.5,
            tau_util: 0.01,
            aggregator: AggregatorKind::Kmeans,
            noise_sigma: 0.0,
            init_scale: 0.1,
            separation_max_sweeps: 100,
            upload_window: 256,
            median_max_iter: 200,
            median_tol: 1e-9,
            barycenter_support: 1,
            barycenter_epsilon: 0.05,
            barycenter_max_iter: 100,
            barycenter_tol: 1e-9,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("server.K must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("server.beta must be in (0,1], got {}", self.beta)));
        }
        if !(self.clip_radius > 0.0) || !(self.rho_sep > 0.0) {
            return Err(Error::Config("server.clip_radius and server.rho_sep must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tau_util) {
            return Err(Error::Config("server.tau_util must be in [0,1)".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config("server noise and init scale must be >= 0".into()));
        }
        if self.separation_max_sweeps == 0 || self.barycenter_support == 0 {
            return Err(Error::Config("server sweep and support counts must be positive".into()));
        }
        Ok(())
    }
}

/// Norm clipping to radius `r`.
pub fn clip(z: &DVector<f64>, r: f64) -> DVector<f64> {
    let n = z.norm();
    if n <= r {
        z.clone()
    } else {
        z * (r / n)
    }
}

/// Partition of upload indices by nearest prototype (ties to the lowest index).
pub fn assign(uploads: &[Upload], library: &PrototypeLibrary) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); library.len()];
    for (i, u) in uploads.iter().enumerate() {
        if let Some(k) = linalg::nearest(&u.vector, &library.encoded) {
            parts[k].push(i);
        }
    }
    parts
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub partition: Vec<Vec<usize>>,
    /// Nonempty clusters whose estimate was released.
    pub releases: usize,
    /// Clusters whose inner solver hit its iteration cap.
    pub unconverged: usize,
}

/// Aggregator tuning shared by the three variants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateParams {
    pub kind: AggregatorKind,
    pub beta: f64,
    pub clip_radius: f64,
    pub noise_sigma: f64,
    pub median_max_iter: usize,
    pub median_tol: f64,
    pub barycenter_support: usize,
    pub barycenter_epsilon: f64,
    pub barycenter_max_iter: usize,
    pub barycenter_tol: f64,
}

impl AggregateParams {
    pub fn from_config(cfg: &ServerConfig) -> Self {
        Self {
            kind: cfg.aggregator,
            beta: cfg.beta,
            clip_radius: cfg.clip_radius,
            noise_sigma: cfg.noise_sigma,
            median_max_iter: cfg.median_max_iter,
            median_tol: cfg.median_tol,
            barycenter_support: cfg.barycenter_support,
            barycenter_epsilon: cfg.barycenter_epsilon,
            barycenter_max_iter: cfg.barycenter_max_iter,
            barycenter_tol: cfg.barycenter_tol,
        }
    }

    pub fn kmeans(beta: f64, clip_radius: f64, noise_sigma: f64) -> Self {
        Self::from_config(&ServerConfig { beta, clip_radius, noise_sigma, ..Default::default() })
    }
}

/// Assignment followed by a momentum update of every nonempty cluster toward
/// its (noised) aggregate: `v <- (1 - beta) v + beta (agg + xi)`. Only the
/// encoded vectors change; call [`PrototypeLibrary::resync`] afterwards.
pub fn aggregate_step(
    uploads: &[Upload],
    library: &mut PrototypeLibrary,
    params: &AggregateParams,
    rng: &mut impl Rng,
) -> Result<AggregateReport> {
    if library.is_empty() {
        return Err(Error::State("aggregation into an empty prototype library".into()));
    }
    if !(params.beta > 0.0 && params.beta <= 1.0) {
        return arg(format!("beta must be in (0,1], got {}", params.beta));
    }
    let partition = assign(uploads, library);
    let total = uploads.len();
    let mut releases = 0;
    let mut unconverged = 0;
    for (k, members) in partition.iter().enumerate() {
        library.utilization[k] = if total == 0 { 0.0 } else { members.len() as f64 / total as f64 };
        if members.is_empty() {
            continue;
        }
        let clipped: Vec<DVector<f64>> =
            members.iter().map(|&i| clip(&uploads[i].vector, params.clip_radius)).collect();
        let target = match params.kind {
            AggregatorKind::Kmeans => mean(&clipped),
            AggregatorKind::Median => {
                let res = geometric_median(&clipped, params.median_max_iter, params.median_tol);
                unconverged += usize::from(!res.converged);
                res.point
            }
            AggregatorKind::Barycenter => {
                let measures = members
                    .iter()
                    .zip(clipped.iter())
                    .map(|(&i, c)| {
                        let atoms = if uploads[i].atoms.is_empty() {
                            vec![c.clone()]
                        } else {
                            uploads[i].atoms.iter().map(|a| clip(a, params.clip_radius)).collect()
                        };
                        EmpiricalMeasure::uniform(atoms)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut jitter_rng = crate::rng::stream(rng.random(), "barycenter-jitter", &[k as u64]);
                let init: Vec<DVector<f64>> = (0..params.barycenter_support)
                    .map(|_| &library.encoded[k] + linalg::gaussian_vector(&mut jitter_rng, library.encoded[k].len(), 1e-3))
                    .collect();
                let res = wasserstein_barycenter(
                    &measures,
                    init,
                    params.barycenter_epsilon,
                    params.barycenter_max_iter,
                    params.barycenter_tol,
                )?;
                unconverged += usize::from(!res.converged);
                weighted_mean(&res.measure.atoms, &res.measure.weights)
            }
        };
        let mut noisy = target;
        if params.noise_sigma > 0.0 {
            for x in noisy.iter_mut() {
                *x += params.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let v = &mut library.encoded[k];
        *v *= 1.0 - params.beta;
        v.axpy(params.beta, &noisy, 1.0);
        releases += 1;
    }
    Ok(AggregateReport { partition, releases, unconverged })
}

/// DP-FedKMeans: clipped cluster means with momentum and Gaussian noise.
pub fn dp_fedkmeans_step(
    uploads: &[Upload],
    library: &mut PrototypeLibrary,
    beta: f64,
    clip_radius: f64,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<AggregateReport> {
    aggregate_step(uploads, library, &AggregateParams::kmeans(beta, clip_radius, noise_sigma), rng)
}

pub fn mean(points: &[DVector<f64>]) -> DVector<f64> {
    let mut out = DVector::zeros(points[0].len());
    for p in points {
        out += p;
    }
    out / points.len() as f64
}

fn weighted_mean(points: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(points[0].len());
    for (p, w) in points.iter().zip(weights.iter()) {
        out.axpy(*w, p, 1.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianResult {
    pub point: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// `sum_i ||z_i - y||_2`.
pub fn distance_sum(points: &[DVector<f64>], y: &DVector<f64>) -> f64 {
    points.iter().map(|p| (p - y).norm()).sum()
}

/// Weiszfeld iterations from the arithmetic mean.
///
/// When an iterate coincides with a data point, that point is returned if it
/// satisfies the optimality test of the distance sum there; otherwise the
/// iteration restarts from the point plus a 1e-9 jitter.
pub fn geometric_median(points: &[DVector<f64>], max_iter: usize, tol: f64) -> MedianResult {
    assert!(!points.is_empty(), "geometric median of no points");
    if points.len() == 1 {
        return MedianResult { point: points[0].clone(), converged: true, iterations: 0 };
    }
    let dim = points[0].len();
    let mut y = mean(points);
    let mut jitter = crate::rng::stream(points.len() as u64, "weiszfeld-jitter", &[dim as u64]);
    for it in 1..=max_iter {
        // Weiszfeld converges sublinearly when the median is an input point, so
        // the nearest input is tested for optimality on every iteration.
        let (j, dist) = points
            .iter()
            .map(|p| (p - &y).norm())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        let mut pull = DVector::zeros(dim);
        let mut weight_here = 0.0;
        for p in points {
            let d = (p - &points[j]).norm();
            if d < 1e-12 {
                weight_here += 1.0;
            } else {
                pull += (p - &points[j]) / d;
            }
        }
        if pull.norm() <= weight_here {
            return MedianResult { point: points[j].clone(), converged: true, iterations: it };
        }
        if dist < 1e-12 {
            y = &points[j] + linalg::random_unit(&mut jitter, dim) * 1e-9;
            continue;
        }
        let mut num = DVector::zeros(dim);
        let mut den = 0.0;
        for p in points {
            let w = 1.0 / (p - &y).norm();
            num.axpy(w, p, 1.0);
            den += w;
        }
        let next = num / den;
        let step = (&next - &y).norm();
        y = next;
        if step <= tol * y.norm().max(1.0) {
            return MedianResult { point: y, converged: true, iterations: it };
        }
    }
    MedianResult { point: y, converged: false, iterations: max_iter }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterResult {
    pub measure: EmpiricalMeasure,
    pub converged: bool,
    pub iterations: usize,
}

/// Entropic 2-Wasserstein barycenter of `measures` (equal weights) on a
/// uniformly weighted support of `init_support.len()` atoms. Each iteration
/// solves one transport per input measure and moves every support atom to the
/// plan-weighted average of the input atoms it receives.
pub fn wasserstein_barycenter(
    measures: &[EmpiricalMeasure],
    init_support: Vec<DVector<f64>>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<BarycenterResult> {
    if measures.is_empty() {
        return arg("barycenter of no measures");
    }
    if init_support.is_empty() {
        return arg("barycenter support must be nonempty");
    }
    let s = init_support.len();
    let lambda = 1.0 / measures.len() as f64;
    let mut bary = EmpiricalMeasure::uniform(init_support)?;
    for it in 1..=max_iter {
        let mut num = vec![DVector::zeros(bary.atoms[0].len()); s];
        let mut mass = vec![0.0; s];
        for m in measures {
            let res = sinkhorn_transport(&bary, m, epsilon, 1000, 1e-10)?;
            for i in 0..s {
                for (j, x) in m.atoms.iter().enumerate() {
                    let p = lambda * res.plan[(i, j)];
                    num[i].axpy(p, x, 1.0);
                    mass[i] += p;
                }
            }
        }
        let mut change: f64 = 0.0;
        for i in 0..s {
            if mass[i] > 0.0 {
                let next = &num[i] / mass[i];
                change = change.max((&next - &bary.atoms[i]).norm());
                bary.atoms[i] = next;
            }
        }
        if change < tol {
            return Ok(BarycenterResult { measure: bary, converged: true, iterations: it });
        }
    }
    Ok(BarycenterResult { measure: bary, converged: false, iterations: max_iter })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    pub feasible: bool,
    pub sweeps: usize,
    pub moves: usize,
}

/// Pairwise sweeps that push each violating pair apart symmetrically until
/// every distance is at least `rho`. Coincident pairs separate along a random
/// unit direction drawn from `rng`.
pub fn enforce_separation(
    encoded: &mut [DVector<f64>],
    rho: f64,
    max_sweeps: usize,
    rng: &mut impl Rng,
) -> Result<SeparationReport> {
    if !(rho > 0.0) {
        return arg(format!("separation margin must be positive, got {rho}"));
    }
    let mut moves = 0;
    for sweep in 1..=max_sweeps {
        let mut violated = false;
        for i in 0..encoded.len() {
            for j in i + 1..encoded.len() {
                let diff = &encoded[i] - &encoded[j];
                let dist = diff.norm();
                if dist >= rho - 1e-12 {
                    continue;
                }
                violated = true;
                moves += 1;
                let dir = if dist < 1e-12 { linalg::random_unit(rng, diff.len()) } else { diff / dist };
                let delta = (rho - dist) / 2.0;
                encoded[i].axpy(delta, &dir, 1.0);
                encoded[j].axpy(-delta, &dir, 1.0);
            }
        }
        if !violated {
            return Ok(SeparationReport { feasible: true, sweeps: sweep, moves });
        }
    }
    let feasible = min_pairwise_distance(encoded) >= rho - 1e-9;
    Ok(SeparationReport { feasible, sweeps: max_sweeps, moves })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub reseeded: Vec<usize>,
    /// Dead prototypes were found but the upload window was empty.
    pub skipped_empty_window: bool,
}

/// Reseed every prototype with utilization below `tau_util` by k-means++
/// sampling from `window`: probability proportional to the squared distance
/// to the nearest surviving (or already reseeded) prototype.
pub fn prune_or_reinit(
    library: &mut PrototypeLibrary,
    window: &[DVector<f64>],
    rng: &mut impl Rng,
) -> PruneReport {
    let dead: Vec<usize> = (0..library.len()).filter(|&k| library.utilization[k] < library.tau_util).collect();
    if dead.is_empty() {
        return PruneReport { reseeded: Vec::new(), skipped_empty_window: false };
    }
    if window.is_empty() {
        return PruneReport { reseeded: Vec::new(), skipped_empty_window: true };
    }
    let mut alive: Vec<usize> = (0..library.len()).filter(|k| !dead.contains(k)).collect();
    for &k in &dead {
        let weights: Vec<f64> = window
            .iter()
            .map(|x| {
                alive
                    .iter()
                    .map(|&a| (x - &library.encoded[a]).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().filter(|w| w.is_finite()).sum();
        let pick = if alive.is_empty() || !(total > 0.0) {
            rng.random_range(0..window.len())
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut idx = window.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        library.encoded[k] = window[pick].clone();
        alive.push(k);
    }
    PruneReport { reseeded: dead, skipped_empty_window: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rvec(r: &mut impl Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0))
    }

    fn lib(encoded: Vec<DVector<f64>>) -> PrototypeLibrary {
        let d = encoded[0].len();
        PrototypeLibrary::from_encoded(encoded, &Encoder::mean_pool(d), 2, 0.5, 0.01).unwrap()
    }

    fn ups(vs: &[DVector<f64>]) -> Vec<Upload> {
        vs.iter().enumerate().map(|(i, v)| Upload::new(i as u64, v.clone())).collect()
    }

    #[test]
    fn clip_examples() {
        let z = DVector::from_vec(vec![1.2, 1.6]);
        let c = clip(&z, 1.0);
        assert!((c.norm() - 1.0).abs() < 1e-15);
        assert!((c[0] / c[1] - 0.75).abs() < 1e-15);
        let z = DVector::from_vec(vec![0.3, 0.4]);
        assert_eq!(clip(&z, 1.0), z);
        let mut r = crate::rng::stream(3, "clip", &[]);
        for _ in 0..1000 {
            let z = rvec(&mut r, 6) * 5.0;
            assert!(clip(&z, 0.7).norm() <= 0.7 + 1e-15);
        }
    }

    #[test]
    fn assign_examples() {
        let l = lib(vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![-1.0, 0.0]),
            DVector::from_vec(vec![0.0, 3.0]),
        ]);
        let parts = assign(&ups(&[DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![0.0, 3.0])]), &l);
        assert_eq!(parts, vec![vec![0], vec![], vec![1]]);

        let mut r = crate::rng::stream(8, "assign", &[]);
        let protos: Vec<_> = (0..7).map(|_| rvec(&mut r, 3)).collect();
        let l = lib(protos.clone());
        let points: Vec<_> = (0..200).map(|_| rvec(&mut r, 3)).collect();
        let parts = assign(&ups(&points), &l);
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (k, v) in protos.iter().enumerate() {
                let d: f64 = (0..3).map(|c| (p[c] - v[c]).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            assert!(parts[best.1].contains(&i));
        }
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 200);
    }

    #[test]
    fn kmeans_step_examples() {
        let mut r = crate::rng::stream(1, "kmeans", &[]);
        let mut l = lib(vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![5.0, 5.0])]);
        let z = DVector::from_vec(vec![0.4, -0.2]);
        dp_fedkmeans_step(&ups(&[z.clone()]), &mut l, 1.0, 100.0, 0.0, &mut r).unwrap();
        assert_eq!(l.encoded[0], z);
        assert_eq!(l.encoded[1], DVector::from_vec(vec![5.0, 5.0]));
        assert_eq!(l.utilization, vec![1.0, 0.0]);

        let mut l = lib(vec![DVector::from_vec(vec![0.2, 0.2]), DVector::from_vec(vec![5.0, 5.0])]);
        dp_fedkmeans_step(&ups(&[z.clone()]), &mut l, 0.5, 100.0, 0.0, &mut r).unwrap();
        assert!((&l.encoded[0] - DVector::from_vec(vec![0.3, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn kmeans_noise_has_the_configured_variance() {
        let sigma = 0.3;
        let z = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let n = 10_000;
        let mut samples = vec![Vec::with_capacity(n); 3];
        let mut r = crate::rng::stream(5, "kmeans-noise", &[]);
        for _ in 0..n {
            let mut l = lib(vec![DVector::zeros(3)]);
            dp_fedkmeans_step(&ups(&[z.clone()]), &mut l, 1.0, 10.0, sigma, &mut r).unwrap();
            for c in 0..3 {
                samples[c].push(l.encoded[0][c] - z[c]);
            }
        }
        for s in samples {
            let m = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "variance {var}");
            assert!(m.abs() < 4.0 * sigma / (n as f64).sqrt());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kmeans_step_is_lloyd_and_momentum_linear(seed in 0u64..10_000, beta in 0.05f64..1.0) {
            let mut r = crate::rng::stream(seed, "lloyd", &[]);
            let protos: Vec<_> = (0..4).map(|_| rvec(&mut r, 3)).collect();
            let points: Vec<_> = (0..30).map(|_| rvec(&mut r, 3)).collect();
            let mut full = lib(protos.clone());
            let report = dp_fedkmeans_step(&ups(&points), &mut full, 1.0, f64::INFINITY, 0.0, &mut r).unwrap();
            let mut damped = lib(protos.clone());
            dp_fedkmeans_step(&ups(&points), &mut damped, beta, f64::INFINITY, 0.0, &mut r).unwrap();
            for (k, members) in report.partition.iter().enumerate() {
                if members.is_empty() {
                    prop_assert_eq!(&full.encoded[k], &protos[k]);
                    continue;
                }
                let mut m = DVector::zeros(3);
                for &i in members { m += &points[i]; }
                m /= members.len() as f64;
                prop_assert!((&full.encoded[k] - &m).amax() < 1e-12);
                let expect = &protos[k] * (1.0 - beta) + &full.encoded[k] * beta;
                prop_assert!((&damped.encoded[k] - expect).amax() < 1e-12);
            }
        }

        #[test]
        fn clipped_mean_sensitivity_is_bounded(seed in 0u64..10_000, n in 1usize..12) {
            let mut r = crate::rng::stream(seed, "sensitivity", &[]);
            let radius = 0.8;
            let points: Vec<_> = (0..n).map(|_| rvec(&mut r, 4) * 3.0).collect();
            let mut neighbor = points.clone();
            neighbor[0] = rvec(&mut r, 4) * 3.0;
            let m1 = mean(&points.iter().map(|p| clip(p, radius)).collect::<Vec<_>>());
            let m2 = mean(&neighbor.iter().map(|p| clip(p, radius)).collect::<Vec<_>>());
            prop_assert!((m1 - m2).norm() <= 2.0 * radius / n as f64 + 1e-12);
        }
    }

    #[test]
    fn geometric_median_examples() {
        let p = DVector::from_vec(vec![0.3, 0.7]);
        assert_eq!(geometric_median(&[p.clone()], 100, 1e-12).point, p);

        let pts: Vec<_> = [0.0, 1.0, 10.0].iter().map(|x| DVector::from_vec(vec![*x])).collect();
        let res = geometric_median(&pts, 1000, 1e-12);
        assert!(res.converged);
        assert!((res.point[0] - 1.0).abs() < 1e-9, "{}", res.point[0]);

        let s = 3.0_f64.sqrt();
        let tri = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![-0.5, s / 2.0]),
            DVector::from_vec(vec![-0.5, -s / 2.0]),
        ];
        let res = geometric_median(&tri, 1000, 1e-12);
        assert!(res.point.norm() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn geometric_median_dominates_inputs_and_mean(seed in 0u64..10_000, n in 2usize..20) {
            let mut r = crate::rng::stream(seed, "median-prop", &[]);
            let pts: Vec<_> = (0..n).map(|_| rvec(&mut r, 3)).collect();
            let res = geometric_median(&pts, 2000, 1e-12);
            let obj = distance_sum(&pts, &res.point);
            prop_assert!(obj <= distance_sum(&pts, &mean(&pts)) + 1e-9);
            for p in &pts {
                prop_assert!(obj <= distance_sum(&pts, p) + 1e-9);
            }
        }
    }

    #[test]
    fn barycenter_examples() {
        let single = EmpiricalMeasure::uniform(vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![2.0, -1.0])])
            .unwrap();
        let init = vec![DVector::from_vec(vec![0.01, 0.99]), DVector::from_vec(vec![1.98, -1.02])];
        let res = wasserstein_barycenter(&[single.clone()], init, 0.01, 200, 1e-10).unwrap();
        for (a, b) in res.measure.atoms.iter().zip(single.atoms.iter()) {
            assert!((a - b).norm() < 1e-6);
        }

        let m0 = EmpiricalMeasure::uniform(vec![DVector::from_vec(vec![0.0])]).unwrap();
        let m2 = EmpiricalMeasure::uniform(vec![DVector::from_vec(vec![2.0])]).unwrap();
        let res = wasserstein_barycenter(&[m0, m2], vec![DVector::from_vec(vec![0.3])], 0.05, 100, 1e-12).unwrap();
        assert!((res.measure.atoms[0][0] - 1.0).abs() < 1e-3);
        assert!(res.converged);
    }

    #[test]
    fn barycenter_beats_every_input_support() {
        let mut r = crate::rng::stream(12, "bary", &[]);
        let eps = 0.01;
        let measures: Vec<_> = (0..3)
            .map(|_| EmpiricalMeasure::uniform(vec![rvec(&mut r, 2), rvec(&mut r, 2)]).unwrap())
            .collect();
        let objective = |support: &EmpiricalMeasure| -> f64 {
            measures
                .iter()
                .map(|m| sinkhorn_transport(support, m, eps, 5000, 1e-10).unwrap().cost)
                .sum::<f64>()
                / 3.0
        };
        let init = measures[0].atoms.clone();
        let res = wasserstein_barycenter(&measures, init, eps, 500, 1e-10).unwrap();
        let bary_cost = objective(&res.measure);
        for m in &measures {
            assert!(bary_cost <= objective(m) + 1e-9, "{bary_cost} vs {}", objective(m));
        }
    }

    #[test]
    fn separation_examples() {
        let mut r = crate::rng::stream(1, "sep", &[]);
        let mut vs = vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![0.3, 0.0])];
        let rep = enforce_separation(&mut vs, 0.5, 10, &mut r).unwrap();
        assert!(rep.feasible);
        assert!(((&vs[0] - &vs[1]).norm() - 0.5).abs() < 1e-15);
        assert!((((&vs[0] + &vs[1]) / 2.0)[0] - 0.15).abs() < 1e-15);

        let mut vs = vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![1.0, 0.0])];
        let before = vs.clone();
        enforce_separation(&mut vs, 0.5, 10, &mut r).unwrap();
        assert_eq!(vs, before);

        let mut vs: Vec<_> = (0..5).map(|_| rvec(&mut r, 3) * 0.05).collect();
        vs.push(vs[0].clone());
        let rep = enforce_separation(&mut vs, 0.5, 1000, &mut r).unwrap();
        assert!(rep.feasible);
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                assert!((&vs[i] - &vs[j]).norm() >= 0.5 - 1e-9);
            }
        }
        assert!(enforce_separation(&mut vs, 0.0, 10, &mut r).is_err());
    }

    #[test]
    fn prune_examples() {
        let mut r = crate::rng::stream(2, "prune", &[]);
        let mut l = lib(vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0])]);
        l.utilization = vec![0.5, 0.5];
        let before = l.clone();
        let rep = prune_or_reinit(&mut l, &[DVector::from_vec(vec![3.0])], &mut r);
        assert!(rep.reseeded.is_empty());
        assert_eq!(l, before);

        l.utilization = vec![0.0, 1.0];
        let rep = prune_or_reinit(&mut l, &[DVector::from_vec(vec![3.0])], &mut r);
        assert_eq!(rep.reseeded, vec![0]);
        assert_eq!(l.encoded[0], DVector::from_vec(vec![3.0]));

        let rep = prune_or_reinit(&mut l, &[], &mut r);
        assert!(rep.skipped_empty_window);
    }

    #[test]
    fn prune_samples_proportionally_to_squared_distance() {
        let survivor = DVector::from_vec(vec![0.0, 0.0]);
        let window: Vec<_> = (0..10)
            .map(|i| {
                let angle = i as f64 * 0.6;
                let radius = 1.0 + 0.1 * i as f64;
                DVector::from_vec(vec![radius * angle.cos(), radius * angle.sin()])
            })
            .collect();
        let weights: Vec<f64> = window.iter().map(|x| x.norm_squared()).collect();
        let total: f64 = weights.iter().sum();
        let trials = 1_000_000;
        let mut counts = [0usize; 10];
        let mut r = crate::rng::stream(9, "prune-mc", &[]);
        let base = lib(vec![DVector::from_vec(vec![9.0, 9.0]), survivor]);
        for _ in 0..trials {
            let mut l = base.clone();
            l.utilization = vec![0.0, 1.0];
            prune_or_reinit(&mut l, &window, &mut r);
            let idx = window.iter().position(|w| *w == l.encoded[0]).unwrap();
            counts[idx] += 1;
        }
        for (c, w) in counts.iter().zip(weights.iter()) {
            let freq = *c as f64 / trials as f64;
            let p = w / total;
            assert!((freq - p).abs() <= 0.03 * p, "freq {freq} vs {p}");
        }
    }
}
