//! Numerical certification of the online proximal analysis: the three-point
//! inequality, the path-length dynamic-regret bound, and the contraction of
//! the anchored optimum path.
//!
//! All objectives are quadratics `F(w) = 1/2 w'Hw - g'w + c0` (optionally plus
//! an l1 term on a block of coordinates), so prox steps are solved exactly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::linalg;
use crate::par::{self, Parallelism};

/// Violations below this are treated as rounding error.
pub const SLACK_TOL: f64 = 1e-8;

/// `F(w) = 1/2 w'Hw - g'w + c0 + l1 * sum_{i in l1_block} |w_i|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c0: f64,
    pub l1: f64,
    /// Coordinates carrying the l1 penalty (the short block).
    pub l1_block: std::ops::Range<usize>,
}

impl Objective {
    /// `1/2 ||A w - b||^2 + lambda_s/2 ||w[..c.len()] - c||^2`.
    pub fn anchored(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>, lambda_s: f64) -> Self {
        let d = a.ncols();
        let mut h = a.tr_mul(a);
        let mut g = a.tr_mul(b);
        for i in 0..c.len() {
            h[(i, i)] += lambda_s;
            g[i] += lambda_s * c[i];
        }
        let c0 = 0.5 * b.norm_squared() + 0.5 * lambda_s * c.norm_squared();
        Self { h, g, c0, l1: 0.0, l1_block: d..d }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        let l1: f64 = self.l1_block.clone().map(|i| w[i].abs()).sum();
        0.5 * w.dot(&(&self.h * w)) - self.g.dot(w) + self.c0 + self.l1 * l1
    }
}

/// Minimize `1/2 w'Mw - r'w` over `||w|| <= radius` for symmetric positive
/// definite `M`. If the unconstrained solution is infeasible, the multiplier
/// `nu` of the ball constraint is found by bisection.
pub fn ball_solve(m: &DMatrix<f64>, r: &DVector<f64>, radius: f64) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let lmin = eig.eigenvalues.min();
    if !(lmin > 0.0) || !lmin.is_finite() {
        return Err(Error::State(format!("prox system is not positive definite (min eigenvalue {lmin})")));
    }
    let q = &eig.eigenvectors;
    let qr = q.tr_mul(r);
    let solve = |nu: f64| -> DVector<f64> {
        let scaled = DVector::from_fn(qr.len(), |i, _| qr[i] / (eig.eigenvalues[i] + nu));
        q * scaled
    };
    let w = solve(0.0);
    if !radius.is_finite() || w.norm() <= radius {
        return Ok(w);
    }
    // ||w(nu)|| <= ||r|| / (lmin + nu), so this bracket is feasible.
    let (mut lo, mut hi) = (0.0, (r.norm() / radius).max(1e-12));
    while solve(hi).norm() > radius {
        hi *= 2.0;
    }
    for _ in 0..400 {
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if solve(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(solve(hi))
}

/// Exact minimizer of `F(w) + 1/(2 eta) ||w - w_prev||^2` over the ball of
/// `radius` around the origin (smooth objectives only).
pub fn prox_step(f: &Objective, w_prev: &DVector<f64>, eta: f64, radius: f64) -> Result<DVector<f64>> {
    if !(eta > 0.0) {
        return arg(format!("eta must be positive, got {eta}"));
    }
    if f.l1 != 0.0 && !f.l1_block.is_empty() {
        return arg("prox_step handles smooth objectives; use SeparableL1::prox_soft");
    }
    let m = &f.h + DMatrix::identity(f.dim(), f.dim()) / eta;
    let r = &f.g + w_prev / eta;
    ball_solve(&m, &r, radius)
}

/// Constrained minimizer of a smooth `F` over the ball.
pub fn minimizer(f: &Objective, radius: f64) -> Result<DVector<f64>> {
    ball_solve(&f.h, &f.g, radius)
}

/// `(1/2 eta)(||u-x||^2 - ||u-x+||^2 - ||x+-x||^2) - (F(x+) - F(u))`.
pub fn check_three_point(f: &Objective, x: &DVector<f64>, x_plus: &DVector<f64>, u: &DVector<f64>, eta: f64) -> f64 {
    let rhs = ((u - x).norm_squared() - (u - x_plus).norm_squared() - (x_plus - x).norm_squared()) / (2.0 * eta);
    rhs - (f.value(x_plus) - f.value(u))
}

pub fn path_length(points: &[DVector<f64>]) -> f64 {
    points.windows(2).map(|p| (&p[1] - &p[0]).norm()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStream {
    pub a: DMatrix<f64>,
    pub b: Vec<DVector<f64>>,
    /// Anchors for the long block (the first `c_t.len()` coordinates).
    pub c: Vec<DVector<f64>>,
    pub lambda_s: f64,
    pub eta: f64,
    pub radius: f64,
    pub w0: DVector<f64>,
    /// Extreme eigenvalues of `A'A`.
    pub mu: f64,
    pub l: f64,
}

impl QuadraticStream {
    pub fn rounds(&self) -> usize {
        self.b.len()
    }

    /// Feasible-set diameter.
    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn objective(&self, t: usize) -> Objective {
        Objective::anchored(&self.a, &self.b[t], &self.c[t], self.lambda_s)
    }

    /// A random drifting stream with `T <= 50` rounds and `d <= 10`.
    pub fn random(seed: u64) -> Self {
        let mut r = crate::rng::stream(seed, "theory-stream", &[]);
        let d = r.random_range(1..=10);
        let d_long = r.random_range(1..=d);
        let rounds = r.random_range(1..=50);
        let rows = d + r.random_range(0..4);
        let a = linalg::gaussian_matrix(&mut r, rows, d, 1.0 / (rows as f64).sqrt()) + DMatrix::identity(rows, d) * 0.3;
        let drift = r.random_range(0.0..0.5);
        let mut b = vec![linalg::gaussian_vector(&mut r, rows, 1.0)];
        let mut c = vec![linalg::gaussian_vector(&mut r, d_long, 1.0)];
        for _ in 1..rounds {
            let nb = b.last().unwrap() + linalg::gaussian_vector(&mut r, rows, drift);
            let nc = c.last().unwrap() + linalg::gaussian_vector(&mut r, d_long, drift);
            b.push(nb);
            c.push(nc);
        }
        let radius = r.random_range(0.3..3.0);
        let w0 = linalg::random_unit(&mut r, d) * (radius * r.random::<f64>());
        let eta = 10f64.powf(r.random_range(-1.5..1.0));
        let lambda_s = r.random_range(0.0..2.0);
        let eig = a.tr_mul(&a).symmetric_eigenvalues();
        Self { a, b, c, lambda_s, eta, radius, w0, mu: eig.min(), l: eig.max() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretCertificate {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub path_length: f64,
    pub three_point_slacks: Vec<f64>,
}

impl RegretCertificate {
    pub fn min_three_point(&self) -> f64 {
        self.three_point_slacks.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn holds(&self) -> bool {
        self.slack >= -SLACK_TOL && self.min_three_point() >= -SLACK_TOL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Comparator {
    PerRoundMinimizers,
    Custom(Vec<DVector<f64>>),
}

/// Deliberate defects used as negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    #[default]
    None,
    /// Take each step as the stationary point with `-eta` in the prox term.
    FlipEtaSign,
}

fn corrupted_step(f: &Objective, w_prev: &DVector<f64>, eta: f64, radius: f64) -> DVector<f64> {
    let m = &f.h - DMatrix::identity(f.dim(), f.dim()) / eta;
    let r = &f.g - w_prev / eta;
    let w = m.lu().solve(&r).unwrap_or_else(|| w_prev.clone());
    let n = w.norm();
    if n > radius {
        w * (radius / n)
    } else {
        w
    }
}

pub fn run_regret_experiment(
    stream: &QuadraticStream,
    comparator: &Comparator,
    corruption: Corruption,
) -> Result<RegretCertificate> {
    let t_max = stream.rounds();
    let objectives: Vec<Objective> = (0..t_max).map(|t| stream.objective(t)).collect();
    let u: Vec<DVector<f64>> = match comparator {
        Comparator::PerRoundMinimizers => {
            objectives.iter().map(|f| minimizer(f, stream.radius)).collect::<Result<_>>()?
        }
        Comparator::Custom(seq) => {
            if seq.len() != t_max {
                return arg(format!("comparator has {} points for {t_max} rounds", seq.len()));
            }
            seq.clone()
        }
    };
    let mut w_prev = stream.w0.clone();
    let (mut lhs, mut three) = (0.0, Vec::with_capacity(t_max));
    for (f, ut) in objectives.iter().zip(u.iter()) {
        let w = match corruption {
            Corruption::None => prox_step(f, &w_prev, stream.eta, stream.radius)?,
            Corruption::FlipEtaSign => corrupted_step(f, &w_prev, stream.eta, stream.radius),
        };
        three.push(check_three_point(f, &w_prev, &w, ut, stream.eta));
        lhs += f.value(&w) - f.value(ut);
        w_prev = w;
    }
    let v = path_length(&u);
    let rhs = (&u[0] - &stream.w0).norm_squared() / (2.0 * stream.eta) + stream.diameter() / stream.eta * v;
    Ok(RegretCertificate { lhs, rhs, slack: rhs - lhs, path_length: v, three_point_slacks: three })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub kappa: f64,
    pub alpha: f64,
    pub kappa_bound: f64,
    pub alpha_bound: f64,
    pub mu: f64,
    pub l: f64,
    /// Smallest per-step slack of the contraction inequality.
    pub min_step_slack: f64,
    /// `kappa V_circ + alpha V_c - V_star`.
    pub path_slack: f64,
    /// Largest deviation from the two-term difference decomposition.
    pub decomposition_error: f64,
    pub v_star: f64,
    pub v_circ: f64,
    pub v_c: f64,
}

impl ContractionReport {
    pub fn holds(&self) -> bool {
        self.min_step_slack >= -SLACK_TOL
            && self.path_slack >= -SLACK_TOL
            && self.kappa <= self.kappa_bound + SLACK_TOL
            && self.alpha <= self.alpha_bound + SLACK_TOL
            && self.decomposition_error <= 1e-8
    }
}

/// `kappa = ||(H + l I)^-1 H||` and `alpha = ||l (H + l I)^-1||` from the
/// eigenvalues of the two symmetric operators.
pub fn kappa_alpha(h: &DMatrix<f64>, lambda_s: f64) -> Result<(f64, f64)> {
    let n = h.nrows();
    let shifted = h + DMatrix::identity(n, n) * lambda_s;
    let inv = shifted.cholesky().ok_or_else(|| Error::Argument("H + lambda_s I is singular".into()))?.inverse();
    let k = &inv * h;
    let k = (&k + k.transpose()) * 0.5;
    let a = inv * lambda_s;
    let op = |m: DMatrix<f64>| m.symmetric_eigenvalues().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok((op(k), op(a)))
}

/// Closed-form check of the anchored-path contraction for `H = A'A`.
pub fn check_contraction(
    a: &DMatrix<f64>,
    lambda_s: f64,
    b_seq: &[DVector<f64>],
    c_seq: &[DVector<f64>],
) -> Result<ContractionReport> {
    if b_seq.len() != c_seq.len() || b_seq.is_empty() {
        return arg("b and c sequences must be nonempty and of equal length");
    }
    let h = a.tr_mul(a);
    let n = h.nrows();
    let eig = h.clone().symmetric_eigenvalues();
    let (mu, l) = (eig.min(), eig.max());
    if !(mu > 0.0) {
        return arg(format!("H is singular (smallest eigenvalue {mu})"));
    }
    let h_chol = h.clone().cholesky().ok_or_else(|| Error::Argument("H is not positive definite".into()))?;
    let shifted = (&h + DMatrix::identity(n, n) * lambda_s)
        .cholesky()
        .ok_or_else(|| Error::Argument("H + lambda_s I is singular".into()))?;
    let u_circ: Vec<DVector<f64>> = b_seq.iter().map(|b| h_chol.solve(&a.tr_mul(b))).collect();
    let u_star: Vec<DVector<f64>> =
        b_seq.iter().zip(c_seq).map(|(b, c)| shifted.solve(&(a.tr_mul(b) + c * lambda_s))).collect();
    let (kappa, alpha) = kappa_alpha(&h, lambda_s)?;
    let k_op = shifted.solve(&h);
    let a_op = shifted.inverse() * lambda_s;
    let (mut min_step, mut decomp) = (f64::INFINITY, 0.0f64);
    for t in 1..b_seq.len() {
        let ds = &u_star[t] - &u_star[t - 1];
        let dc = &u_circ[t] - &u_circ[t - 1];
        let dcc = &c_seq[t] - &c_seq[t - 1];
        let two_term = &k_op * &dc + &a_op * &dcc;
        decomp = decomp.max((&ds - two_term).amax());
        min_step = min_step.min(kappa * dc.norm() + alpha * dcc.norm() - ds.norm());
    }
    let (v_star, v_circ, v_c) = (path_length(&u_star), path_length(&u_circ), path_length(c_seq));
    Ok(ContractionReport {
        kappa,
        alpha,
        kappa_bound: l / (mu + lambda_s),
        alpha_bound: lambda_s / (mu + lambda_s),
        mu,
        l,
        min_step_slack: if b_seq.len() > 1 { min_step } else { 0.0 },
        path_slack: kappa * v_circ + alpha * v_c - v_star,
        decomposition_error: decomp,
        v_star,
        v_circ,
        v_c,
    })
}

/// A random instance with `H = Q diag(lambda) Q'`, condition number `<= 1e3`.
pub fn random_contraction_instance(seed: u64) -> (DMatrix<f64>, f64, Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut r = crate::rng::stream(seed, "theory-contraction", &[]);
    let d = r.random_range(1..=10);
    let t = r.random_range(2..=50);
    let mu = 10f64.powf(r.random_range(-1.0..1.0));
    let cond = 10f64.powf(r.random_range(0.0..3.0));
    let q = linalg::orthonormal_columns(&mut r, d, d);
    let lam: Vec<f64> = (0..d)
        .map(|i| if i == 0 { mu } else if i == 1 { mu * cond } else { mu * cond.powf(r.random::<f64>()) })
        .collect();
    let a = DMatrix::from_diagonal(&DVector::from_iterator(d, lam.iter().map(|v| v.sqrt()))) * q.transpose();
    let lambda_s = 10f64.powf(r.random_range(-2.0..1.5));
    let step_b = r.random_range(0.0..1.0);
    let step_c = r.random_range(0.0..1.0);
    let mut b = vec![linalg::gaussian_vector(&mut r, d, 1.0)];
    let mut c = vec![linalg::gaussian_vector(&mut r, d, 1.0)];
    for _ in 1..t {
        let nb = b.last().unwrap() + linalg::gaussian_vector(&mut r, d, step_b);
        let nc = c.last().unwrap() + linalg::gaussian_vector(&mut r, d, step_c);
        b.push(nb);
        c.push(nc);
    }
    (a, lambda_s, b, c)
}

/// Separable quadratic `1/2 sum h_i (w_i - m_i)^2`, anchored on the first
/// `d_long` coordinates and l1-penalized on the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableL1 {
    pub h: DVector<f64>,
    pub m: DVector<f64>,
    pub c: DVector<f64>,
    pub lambda_s: f64,
    pub lambda_p: f64,
}

impl SeparableL1 {
    pub fn d_long(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self) -> Objective {
        let d = self.h.len();
        let dl = self.d_long();
        let mut h = DMatrix::from_diagonal(&self.h);
        let mut g = self.h.component_mul(&self.m);
        let mut c0 = 0.5 * self.h.dot(&self.m.component_mul(&self.m));
        for i in 0..dl {
            h[(i, i)] += self.lambda_s;
            g[i] += self.lambda_s * self.c[i];
            c0 += 0.5 * self.lambda_s * self.c[i] * self.c[i];
        }
        Objective { h, g, c0, l1: self.lambda_p, l1_block: dl..d }
    }

    /// Unconstrained prox by coordinatewise soft-thresholding. `eta = inf`
    /// gives the minimizer of `F` itself.
    pub fn prox_soft(&self, x: &DVector<f64>, eta: f64) -> DVector<f64> {
        let inv = if eta.is_infinite() { 0.0 } else { 1.0 / eta };
        DVector::from_fn(self.h.len(), |i, _| {
            if i < self.d_long() {
                (self.h[i] * self.m[i] + self.lambda_s * self.c[i] + inv * x[i]) / (self.h[i] + self.lambda_s + inv)
            } else {
                let curv = self.h[i] + inv;
                crate::prompt::soft_thresh_scalar((self.h[i] * self.m[i] + inv * x[i]) / curv, self.lambda_p / curv)
            }
        })
    }

    /// Same prox by bisection on the sign of each coordinate's subgradient.
    pub fn prox_bisect(&self, x: &DVector<f64>, eta: f64) -> DVector<f64> {
        let inv = 1.0 / eta;
        DVector::from_fn(self.h.len(), |i, _| {
            let anchored = i < self.d_long();
            let l1 = if anchored { 0.0 } else { self.lambda_p };
            // Right derivative of the 1-D objective at w.
            let slope = |w: f64| {
                let mut s = self.h[i] * (w - self.m[i]) + inv * (w - x[i]);
                if anchored {
                    s += self.lambda_s * (w - self.c[i]);
                }
                s + if w >= 0.0 { l1 } else { -l1 }
            };
            let span = 1.0 + self.m[i].abs() + x[i].abs() + if anchored { self.c[i].abs() } else { 0.0 };
            let (mut lo, mut hi) = (-span, span);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        })
    }

    pub fn random(seed: u64) -> Self {
        let mut r = crate::rng::stream(seed, "theory-l1", &[]);
        let d = r.random_range(2..=10);
        let dl = r.random_range(1..d);
        Self {
            h: DVector::from_fn(d, |_, _| r.random_range(0.1..5.0)),
            m: linalg::gaussian_vector(&mut r, d, 1.5),
            c: linalg::gaussian_vector(&mut r, dl, 1.0),
            lambda_s: r.random_range(0.0..2.0),
            lambda_p: r.random_range(0.0..1.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub instances: usize,
    pub passed: usize,
    pub min_slack: f64,
    pub worst_seed: u64,
}

impl SuiteSummary {
    fn from_slacks(items: &[(u64, f64, bool)]) -> Self {
        let mut s = SuiteSummary { instances: items.len(), passed: 0, min_slack: f64::INFINITY, worst_seed: 0 };
        for &(seed, slack, ok) in items {
            s.passed += usize::from(ok);
            if slack < s.min_slack {
                s.min_slack = slack;
                s.worst_seed = seed;
            }
        }
        s
    }

    pub fn all_passed(&self) -> bool {
        self.passed == self.instances
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub regret_instances: usize,
    pub contraction_instances: usize,
    pub l1_instances: usize,
    pub corruption: Corruption,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self { regret_instances: 200, contraction_instances: 200, l1_instances: 200, corruption: Corruption::None }
    }
}

pub const CERTIFICATE_FORMAT: &str = "protofed-theory-certificate";
pub const CERTIFICATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryCertificate {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub corruption: Corruption,
    /// Regret slack per stream.
    pub regret: SuiteSummary,
    /// Smallest per-round three-point slack per stream.
    pub three_point: SuiteSummary,
    pub contraction: SuiteSummary,
    /// `kappa(1), alpha(1)` at `H = I`.
    pub identity_kappa_alpha: (f64, f64),
    /// kappa nonincreasing and alpha nondecreasing over the lambda grid.
    pub monotone_in_lambda: bool,
    /// Three-point slack with the l1 prox; prox checked against bisection.
    pub l1: SuiteSummary,
    pub l1_max_prox_error: f64,
    pub passed: bool,
}

pub fn instance_seed(seed: u64, suite: &str, i: usize) -> u64 {
    crate::rng::derive_seed(seed, suite, &[i as u64])
}

pub fn verify_theory(seed: u64, cfg: &TheoryConfig, mode: Parallelism) -> Result<TheoryCertificate> {
    let regret: Vec<Result<(u64, RegretCertificate)>> = par::map_range(mode, cfg.regret_instances, |i| {
        let s = instance_seed(seed, "regret", i);
        let stream = QuadraticStream::random(s);
        Ok((s, run_regret_experiment(&stream, &Comparator::PerRoundMinimizers, cfg.corruption)?))
    });
    let regret = regret.into_iter().collect::<Result<Vec<_>>>()?;
    let regret_summary =
        SuiteSummary::from_slacks(&regret.iter().map(|(s, c)| (*s, c.slack, c.slack >= -SLACK_TOL)).collect::<Vec<_>>());
    let three_summary = SuiteSummary::from_slacks(
        &regret.iter().map(|(s, c)| (*s, c.min_three_point(), c.min_three_point() >= -SLACK_TOL)).collect::<Vec<_>>(),
    );

    let contraction: Vec<Result<(u64, ContractionReport)>> = par::map_range(mode, cfg.contraction_instances, |i| {
        let s = instance_seed(seed, "contraction", i);
        let (a, lambda_s, b, c) = random_contraction_instance(s);
        Ok((s, check_contraction(&a, lambda_s, &b, &c)?))
    });
    let contraction = contraction.into_iter().collect::<Result<Vec<_>>>()?;
    let contraction_summary = SuiteSummary::from_slacks(
        &contraction
            .iter()
            .map(|(s, r)| {
                let slack = r
                    .min_step_slack
                    .min(r.path_slack)
                    .min(r.kappa_bound - r.kappa)
                    .min(r.alpha_bound - r.alpha);
                (*s, slack, r.holds())
            })
            .collect::<Vec<_>>(),
    );

    let identity_kappa_alpha = kappa_alpha(&DMatrix::identity(4, 4), 1.0)?;
    let h = {
        let mut r = crate::rng::stream(seed, "theory-grid", &[]);
        let a = linalg::gaussian_matrix(&mut r, 8, 5, 1.0) + DMatrix::identity(8, 5);
        a.tr_mul(&a)
    };
    let grid = (0..=100)
        .map(|k| kappa_alpha(&h, k as f64 * 0.1))
        .collect::<Result<Vec<_>>>()?;
    let monotone_in_lambda =
        grid.windows(2).all(|p| p[1].0 <= p[0].0 + 1e-12 && p[1].1 >= p[0].1 - 1e-12);

    let l1: Vec<(u64, f64, bool, f64)> = par::map_range(mode, cfg.l1_instances, |i| {
        let s = instance_seed(seed, "l1", i);
        let inst = SeparableL1::random(s);
        let f = inst.objective();
        let mut r = crate::rng::stream(s, "theory-l1-eta", &[]);
        let eta = 10f64.powf(r.random_range(-1.5..1.0));
        let x = linalg::gaussian_vector(&mut r, inst.h.len(), 2.0);
        let x_plus = inst.prox_soft(&x, eta);
        let err = (&x_plus - inst.prox_bisect(&x, eta)).amax();
        let u = inst.prox_soft(&x, f64::INFINITY);
        let probe = linalg::gaussian_vector(&mut r, inst.h.len(), 2.0);
        let slack = check_three_point(&f, &x, &x_plus, &u, eta).min(check_three_point(&f, &x, &x_plus, &probe, eta));
        (s, slack, slack >= -SLACK_TOL && err <= 1e-8, err)
    });
    let l1_max_prox_error = l1.iter().fold(0.0f64, |m, x| m.max(x.3));
    let l1_summary = SuiteSummary::from_slacks(&l1.iter().map(|x| (x.0, x.1, x.2)).collect::<Vec<_>>());

    let passed = regret_summary.all_passed()
        && three_summary.all_passed()
        && contraction_summary.all_passed()
        && l1_summary.all_passed()
        && monotone_in_lambda
        && (identity_kappa_alpha.0 - 0.5).abs() <= 1e-12
        && (identity_kappa_alpha.1 - 0.5).abs() <= 1e-12;
    Ok(TheoryCertificate {
        format: CERTIFICATE_FORMAT.into(),
        version: CERTIFICATE_VERSION,
        seed,
        corruption: cfg.corruption,
        regret: regret_summary,
        three_point: three_summary,
        contraction: contraction_summary,
        identity_kappa_alpha,
        monotone_in_lambda,
        l1: l1_summary,
        l1_max_prox_error,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn quad(h: DMatrix<f64>, g: DVector<f64>) -> Objective {
        let d = g.len();
        Objective { h, g, c0: 0.0, l1: 0.0, l1_block: d..d }
    }

    #[test]
    fn prox_of_zero_is_identity() {
        let f = quad(DMatrix::zeros(3, 3), DVector::zeros(3));
        let w = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert_eq!(prox_step(&f, &w, 0.7, f64::INFINITY).unwrap(), w);
    }

    #[test]
    fn prox_of_half_norm_shrinks() {
        let eta = 0.5;
        let f = Objective::anchored(&DMatrix::identity(3, 3), &DVector::zeros(3), &DVector::zeros(0), 0.0);
        let w = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let got = prox_step(&f, &w, eta, 1e6).unwrap();
        assert!((got - &w / (1.0 + eta)).amax() < 1e-14);
    }

    #[test]
    fn constrained_prox_beats_random_probes() {
        let mut r = crate::rng::stream(1, "probe", &[]);
        let a = linalg::gaussian_matrix(&mut r, 5, 4, 1.0);
        let f = Objective::anchored(&a, &linalg::gaussian_vector(&mut r, 5, 3.0), &linalg::gaussian_vector(&mut r, 2, 1.0), 0.8);
        let w_prev = linalg::gaussian_vector(&mut r, 4, 1.0);
        let (eta, radius) = (2.0, 0.5);
        let x = prox_step(&f, &w_prev, eta, radius).unwrap();
        assert!(x.norm() <= radius + 1e-12);
        let obj = |w: &DVector<f64>| f.value(w) + (w - &w_prev).norm_squared() / (2.0 * eta);
        let best = obj(&x);
        for _ in 0..10_000 {
            let p = linalg::random_unit(&mut r, 4) * (radius * r.random::<f64>().powf(0.25));
            assert!(obj(&p) >= best - 1e-12);
        }
    }

    #[test]
    fn three_point_trivial_cases() {
        let mut r = crate::rng::stream(2, "tp", &[]);
        let a = linalg::gaussian_matrix(&mut r, 4, 3, 1.0);
        let f = Objective::anchored(&a, &linalg::gaussian_vector(&mut r, 4, 1.0), &DVector::zeros(0), 0.0);
        let x = linalg::gaussian_vector(&mut r, 3, 1.0);
        let xp = prox_step(&f, &x, 0.3, f64::INFINITY).unwrap();
        // u = x+: F(x+) - F(x+) = 0 against (||x+-x||^2 - 0 - ||x+-x||^2) = 0.
        assert_eq!(check_three_point(&f, &x, &xp, &xp, 0.3), 0.0);
        let zero = quad(DMatrix::zeros(3, 3), DVector::zeros(3));
        // F = 0: x+ = x, and both sides vanish.
        let u = linalg::gaussian_vector(&mut r, 3, 1.0);
        assert_eq!(check_three_point(&zero, &x, &x, &u, 0.3), 0.0);
        let same = prox_step(&zero, &x, 0.3, f64::INFINITY).unwrap();
        assert!(check_three_point(&zero, &x, &same, &u, 0.3).abs() < 1e-14);
    }

    #[test]
    fn three_point_fuzz() {
        let mut worst = f64::INFINITY;
        for i in 0..10_000u64 {
            let mut r = crate::rng::stream(i, "tp-fuzz", &[]);
            let d = r.random_range(1..6);
            let a = linalg::gaussian_matrix(&mut r, d + 1, d, 1.0);
            let dl = r.random_range(0..=d);
            let f = Objective::anchored(&a, &linalg::gaussian_vector(&mut r, d + 1, 2.0), &linalg::gaussian_vector(&mut r, dl, 1.0), r.random_range(0.0..2.0));
            let radius = r.random_range(0.2..3.0);
            let x = linalg::random_unit(&mut r, d) * (radius * r.random::<f64>());
            let u = linalg::random_unit(&mut r, d) * (radius * r.random::<f64>());
            let eta = 10f64.powf(r.random_range(-2.0..1.5));
            let xp = prox_step(&f, &x, eta, radius).unwrap();
            worst = worst.min(check_three_point(&f, &x, &xp, &u, eta));
        }
        assert!(worst >= -SLACK_TOL, "{worst}");
    }

    #[test]
    fn static_stream_has_zero_path_length() {
        let mut s = QuadraticStream::random(3);
        let (b0, c0) = (s.b[0].clone(), s.c[0].clone());
        s.b.iter_mut().for_each(|b| *b = b0.clone());
        s.c.iter_mut().for_each(|c| *c = c0.clone());
        let u = minimizer(&s.objective(0), s.radius).unwrap();
        let cert = run_regret_experiment(&s, &Comparator::Custom(vec![u.clone(); s.rounds()]), Corruption::None).unwrap();
        assert_eq!(cert.path_length, 0.0);
        assert_eq!(cert.rhs, (&u - &s.w0).norm_squared() / (2.0 * s.eta));
        assert!(cert.holds());
    }

    #[test]
    fn single_round_stream_certifies() {
        let mut s = QuadraticStream::random(4);
        s.b.truncate(1);
        s.c.truncate(1);
        let cert = run_regret_experiment(&s, &Comparator::PerRoundMinimizers, Corruption::None).unwrap();
        assert_eq!(cert.three_point_slacks.len(), 1);
        assert!(cert.holds());
    }

    #[test]
    fn random_streams_certify() {
        for i in 0..200 {
            let s = QuadraticStream::random(instance_seed(11, "regret", i));
            let cert = run_regret_experiment(&s, &Comparator::PerRoundMinimizers, Corruption::None).unwrap();
            assert!(cert.holds(), "stream {i}: {cert:?}");
        }
    }

    #[test]
    fn identity_gives_half_and_half() {
        let (k, a) = kappa_alpha(&DMatrix::identity(3, 3), 1.0).unwrap();
        assert!((k - 0.5).abs() <= 1e-12 && (a - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn zero_anchor_weight_leaves_the_path_unchanged() {
        let (a, _, b, c) = random_contraction_instance(5);
        let rep = check_contraction(&a, 0.0, &b, &c).unwrap();
        assert!((rep.kappa - 1.0).abs() < 1e-12);
        assert_eq!(rep.alpha, 0.0);
        assert!((rep.v_star - rep.v_circ).abs() < 1e-8 * (1.0 + rep.v_circ));
    }

    #[test]
    fn singular_h_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = vec![DVector::zeros(2); 2];
        assert!(matches!(check_contraction(&a, 0.5, &b, &b), Err(Error::Argument(_))));
    }

    #[test]
    fn random_contraction_instances_hold() {
        for i in 0..200 {
            let (a, l, b, c) = random_contraction_instance(instance_seed(12, "contraction", i));
            let rep = check_contraction(&a, l, &b, &c).unwrap();
            assert!(rep.holds(), "{i}: {rep:?}");
        }
    }

    #[test]
    fn kappa_and_alpha_are_monotone_in_lambda() {
        let mut r = crate::rng::stream(6, "grid", &[]);
        let a = linalg::gaussian_matrix(&mut r, 6, 4, 1.0);
        let h = a.tr_mul(&a);
        let vals: Vec<(f64, f64)> = (0..=100).map(|k| kappa_alpha(&h, k as f64 * 0.1).unwrap()).collect();
        for p in vals.windows(2) {
            assert!(p[1].0 <= p[0].0 + 1e-12 && p[1].1 >= p[0].1 - 1e-12);
        }
    }

    #[test]
    fn soft_threshold_prox_matches_bisection() {
        for i in 0..500 {
            let inst = SeparableL1::random(i);
            let mut r = crate::rng::stream(i, "l1-x", &[]);
            let x = linalg::gaussian_vector(&mut r, inst.h.len(), 2.0);
            let eta = r.random_range(0.05..5.0);
            let xp = inst.prox_soft(&x, eta);
            assert!((&xp - inst.prox_bisect(&x, eta)).amax() <= 1e-8);
            let f = inst.objective();
            let u = linalg::gaussian_vector(&mut r, inst.h.len(), 2.0);
            assert!(check_three_point(&f, &x, &xp, &u, eta) >= -SLACK_TOL);
        }
    }

    #[test]
    fn flipped_eta_is_caught() {
        let cert = verify_theory(0, &TheoryConfig { corruption: Corruption::FlipEtaSign, ..Default::default() }, Parallelism::Rayon).unwrap();
        assert!(!cert.passed);
        assert!(cert.three_point.min_slack < -SLACK_TOL);
    }

    #[test]
    fn default_suite_passes_and_round_trips() {
        let cert = verify_theory(0, &TheoryConfig::default(), Parallelism::Rayon).unwrap();
        assert!(cert.passed, "{cert:?}");
        let json = serde_json::to_string(&cert).unwrap();
        assert_eq!(serde_json::from_str::<TheoryCertificate>(&json).unwrap(), cert);
    }

    proptest! {
        #[test]
        fn objective_of_minimizer_is_minimal(seed in 0u64..1000) {
            let s = QuadraticStream::random(seed);
            let f = s.objective(0);
            let w = minimizer(&f, s.radius).unwrap();
            let mut r = crate::rng::stream(seed, "min-probe", &[]);
            for _ in 0..50 {
                let p = linalg::random_unit(&mut r, f.dim()) * (s.radius * r.random::<f64>());
                prop_assert!(f.value(&p) >= f.value(&w) - 1e-9);
            }
        }
    }
}
