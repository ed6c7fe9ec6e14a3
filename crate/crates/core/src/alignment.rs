//! Alignment of long-term prompt encodings to the prototype library.
//!
//! Two families: a Bregman pull to the nearest prototype sharpened by an
//! InfoNCE term, and an entropic 2-Wasserstein alignment between an empirical
//! measure of the user's embeddings and the prototype mixture.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::server::PrototypeLibrary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BregmanGenerator {
    /// `Psi(x) = 0.5 ||x||^2`.
    #[default]
    SquaredEuclidean,
    /// `Psi(x) = sum x_i ln x_i`, strictly positive inputs only.
    NegativeEntropy,
}

impl BregmanGenerator {
    fn check(self, x: &DVector<f64>) -> Result<()> {
        if self == BregmanGenerator::NegativeEntropy && x.iter().any(|v| !(*v > 0.0)) {
            return arg("negative entropy needs strictly positive entries");
        }
        Ok(())
    }

    pub fn value(self, x: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        Ok(match self {
            BregmanGenerator::SquaredEuclidean => 0.5 * x.norm_squared(),
            BregmanGenerator::NegativeEntropy => x.iter().map(|v| v * v.ln()).sum(),
        })
    }

    pub fn grad(self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(match self {
            BregmanGenerator::SquaredEuclidean => x.clone(),
            BregmanGenerator::NegativeEntropy => x.map(|v| v.ln() + 1.0),
        })
    }
}

/// `D(x || y) = Psi(x) - Psi(y) - <grad Psi(y), x - y>`.
pub fn bregman(x: &DVector<f64>, y: &DVector<f64>, gen: BregmanGenerator) -> Result<f64> {
    if x.len() != y.len() {
        return arg("bregman inputs differ in length");
    }
    gen.check(x)?;
    gen.check(y)?;
    // Closed forms avoid cancellation between the Psi terms.
    let d = match gen {
        BregmanGenerator::SquaredEuclidean => 0.5 * (x - y).norm_squared(),
        BregmanGenerator::NegativeEntropy => x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| a * (a / b).ln() - a + b)
            .sum(),
    };
    Ok(d.max(0.0))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log softmax_assigned(<z, v_j> / tau_a)`.
pub fn info_nce(z: &DVector<f64>, prototypes: &[DVector<f64>], assigned: usize, tau_a: f64) -> Result<f64> {
    if prototypes.is_empty() {
        return arg("info_nce needs at least one prototype");
    }
    if assigned >= prototypes.len() {
        return arg(format!("assigned index {assigned} out of range"));
    }
    if !(tau_a > 0.0) {
        return arg("alignment temperature must be positive");
    }
    let logits: Vec<f64> = prototypes.iter().map(|v| z.dot(v) / tau_a).collect();
    Ok((log_sum_exp(&logits) - logits[assigned]).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub value: f64,
    pub grad: DVector<f64>,
    pub assigned: usize,
}

/// Bregman pull to the nearest prototype plus `gamma` times InfoNCE, with the
/// assignment held fixed in the gradient.
pub fn align_value_and_grad(
    z: &DVector<f64>,
    prototypes: &[DVector<f64>],
    gen: BregmanGenerator,
    gamma: f64,
    tau_a: f64,
) -> Result<Alignment> {
    if prototypes.is_empty() {
        return Err(Error::State("alignment against an empty prototype library".into()));
    }
    let mut assigned = 0;
    let mut best = f64::INFINITY;
    for (k, v) in prototypes.iter().enumerate() {
        let d = bregman(z, v, gen)?;
        if d < best {
            best = d;
            assigned = k;
        }
    }
    let mut value = best;
    let mut grad = gen.grad(z)? - gen.grad(&prototypes[assigned])?;
    if gamma > 0.0 {
        value += gamma * info_nce(z, prototypes, assigned, tau_a)?;
        let logits: Vec<f64> = prototypes.iter().map(|v| z.dot(v) / tau_a).collect();
        let lse = log_sum_exp(&logits);
        let mut expected = DVector::zeros(z.len());
        for (v, l) in prototypes.iter().zip(logits.iter()) {
            expected.axpy((l - lse).exp(), v, 1.0);
        }
        grad += (expected - &prototypes[assigned]) * (gamma / tau_a);
    }
    Ok(Alignment { value, grad, assigned })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    #[default]
    Bregman,
    Wasserstein,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub mode: AlignMode,
    pub generator: BregmanGenerator,
    pub tau_a: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            mode: AlignMode::Bregman,
            generator: BregmanGenerator::SquaredEuclidean,
            tau_a: 0.1,
            sinkhorn_epsilon: 0.05,
            sinkhorn_max_iter: 500,
            sinkhorn_tol: 1e-6,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_a > 0.0) || !(self.sinkhorn_epsilon > 0.0) || !(self.sinkhorn_tol > 0.0) {
            return Err(Error::Config("alignment temperatures and tolerances must be positive".into()));
        }
        if self.sinkhorn_max_iter == 0 {
            return Err(Error::Config("alignment.sinkhorn_max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted atoms in `R^d_phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub atoms: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return arg("a measure needs at least one atom");
        }
        if atoms.len() != weights.len() {
            return arg("atoms and weights differ in length");
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return arg(format!("measure weights must be a simplex, sum = {total}"));
        }
        let dim = atoms[0].len();
        if atoms.iter().any(|a| a.len() != dim) {
            return arg("atoms differ in dimension");
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<DVector<f64>>) -> Result<Self> {
        let n = atoms.len().max(1);
        Self::new(atoms, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    /// `<plan, C>`; the entropy term is not included.
    pub cost: f64,
    pub plan: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `||plan 1 - mu||_1 + ||plan^T 1 - nu||_1` at exit.
    pub marginal_error: f64,
}

pub fn squared_distances(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), ys.len(), |i, j| (&xs[i] - &ys[j]).norm_squared())
}

/// Log-domain entropic optimal transport with squared Euclidean cost.
pub fn sinkhorn_transport(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    if !(epsilon > 0.0) {
        return arg("sinkhorn epsilon must be positive");
    }
    if mu.atoms[0].len() != nu.atoms[0].len() {
        return arg("measures live in different dimensions");
    }
    // Zero-mass atoms carry no plan mass; drop them and restore zero rows after.
    let rows: Vec<usize> = (0..mu.len()).filter(|&i| mu.weights[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nu.len()).filter(|&j| nu.weights[j] > 0.0).collect();
    let (n, m) = (rows.len(), cols.len());
    let cost = DMatrix::from_fn(n, m, |i, j| (&mu.atoms[rows[i]] - &nu.atoms[cols[j]]).norm_squared());
    let log_a: Vec<f64> = rows.iter().map(|&i| mu.weights[i].ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| nu.weights[j].ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];
    let log_plan = |f: &[f64], g: &[f64], i: usize, j: usize| (f[i] + g[j] - cost[(i, j)]) / epsilon + log_a[i] + log_b[j];

    let mut converged = false;
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            for j in 0..m {
                buf[j] = (g[j] - cost[(i, j)]) / epsilon + log_b[j];
            }
            f[i] = -epsilon * log_sum_exp(&buf[..m]);
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = (f[i] - cost[(i, j)]) / epsilon + log_a[i];
            }
            g[j] = -epsilon * log_sum_exp(&buf[..n]);
        }
        // Column marginals are exact after the g update; check the rows.
        err = (0..n)
            .map(|i| {
                let r: f64 = (0..m).map(|j| log_plan(&f, &g, i, j).exp()).sum();
                (r - mu.weights[rows[i]]).abs()
            })
            .sum();
        if err <= tol {
            converged = true;
            break;
        }
    }
    let mut plan = DMatrix::zeros(mu.len(), nu.len());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = log_plan(&f, &g, i, j).exp();
            plan[(rows[i], cols[j])] = p;
            total += p * cost[(i, j)];
        }
    }
    if !converged {
        log::debug!("sinkhorn stopped after {iterations} iterations, marginal error {err:.3e}");
    }
    Ok(SinkhornResult { cost: total, plan, converged, iterations, marginal_error: err })
}

/// Entropic squared 2-Wasserstein distance from `history` to the prototype
/// mixture `sum_k rho_k delta_{v_k}` (uniform `rho` when `None`).
pub fn wasserstein_align(
    history: &EmpiricalMeasure,
    library: &PrototypeLibrary,
    rho: Option<&[f64]>,
    cfg: &AlignConfig,
) -> Result<SinkhornResult> {
    let target = prototype_mixture(library, rho)?;
    sinkhorn_transport(history, &target, cfg.sinkhorn_epsilon, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol)
}

fn prototype_mixture(library: &PrototypeLibrary, rho: Option<&[f64]>) -> Result<EmpiricalMeasure> {
    if library.is_empty() {
        return Err(Error::State("alignment against an empty prototype library".into()));
    }
    match rho {
        Some(w) => EmpiricalMeasure::new(library.encoded.clone(), w.to_vec()),
        None => EmpiricalMeasure::uniform(library.encoded.clone()),
    }
}

/// Wasserstein alignment of the measure `{z} + session_atoms` (uniform) with
/// its gradient in `z`, holding the transport plan fixed.
pub fn wasserstein_align_grad(
    z: &DVector<f64>,
    session_atoms: &[DVector<f64>],
    library: &PrototypeLibrary,
    cfg: &AlignConfig,
) -> Result<(f64, DVector<f64>)> {
    let mut atoms = Vec::with_capacity(session_atoms.len() + 1);
    atoms.push(z.clone());
    atoms.extend(session_atoms.iter().cloned());
    let mu = EmpiricalMeasure::uniform(atoms)?;
    let res = wasserstein_align(&mu, library, None, cfg)?;
    let mut grad = DVector::zeros(z.len());
    for (j, v) in library.encoded.iter().enumerate() {
        grad.axpy(2.0 * res.plan[(0, j)], &(z - v), 1.0);
    }
    Ok((res.cost, grad))
}
