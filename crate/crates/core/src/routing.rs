//! Frozen encoders into the routing space and Top-M prototype retrieval.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::linalg;
use crate::prompt::PromptMatrix;
use crate::server::PrototypeLibrary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Mean over rows; `d_phi = d`.
    MeanPool,
    /// Mean over rows, then a fixed map with orthonormal rows.
    Linear,
    /// Mean over rows, then Linear -> LayerNorm -> GELU -> Linear.
    Mlp,
}

const LN_EPS: f64 = 1e-5;

/// A frozen, seeded map from prompts (or pooled `d`-vectors) to `d_phi`.
#[derive(Debug, Clone)]
pub struct Encoder {
    kind: EncoderKind,
    input_dim: usize,
    output_dim: usize,
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl Encoder {
    pub fn mean_pool(d: usize) -> Self {
        Self {
            kind: EncoderKind::MeanPool,
            input_dim: d,
            output_dim: d,
            w1: DMatrix::zeros(0, 0),
            b1: DVector::zeros(0),
            w2: DMatrix::zeros(0, 0),
            b2: DVector::zeros(0),
        }
    }

    /// `d_phi <= d`; the map has orthonormal rows so its transpose is an exact
    /// right inverse.
    pub fn linear(d: usize, d_phi: usize, seed: u64) -> Self {
        assert!(d_phi <= d, "linear encoder needs d_phi <= d");
        let mut rng = crate::rng::stream(seed, "encoder-linear", &[d as u64, d_phi as u64]);
        let w1 = linalg::orthonormal_columns(&mut rng, d, d_phi).transpose();
        Self {
            kind: EncoderKind::Linear,
            input_dim: d,
            output_dim: d_phi,
            w1,
            b1: DVector::zeros(d_phi),
            w2: DMatrix::zeros(0, 0),
            b2: DVector::zeros(0),
        }
    }

    pub fn mlp(d: usize, hidden: usize, d_phi: usize, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, "encoder-mlp", &[d as u64, hidden as u64, d_phi as u64]);
        Self {
            kind: EncoderKind::Mlp,
            input_dim: d,
            output_dim: d_phi,
            w1: linalg::gaussian_matrix(&mut rng, hidden, d, 1.0 / (d as f64).sqrt()),
            b1: linalg::gaussian_vector(&mut rng, hidden, 0.1),
            w2: linalg::gaussian_matrix(&mut rng, d_phi, hidden, 1.0 / (hidden as f64).sqrt()),
            b2: linalg::gaussian_vector(&mut rng, d_phi, 0.1),
        }
    }

    pub fn build(kind: EncoderKind, d: usize, hidden: usize, d_phi: usize, seed: u64) -> Result<Self> {
        match kind {
            EncoderKind::MeanPool if d_phi != d => {
                Err(Error::Config(format!("mean_pool encoder needs d_phi = d ({d_phi} != {d})")))
            }
            EncoderKind::MeanPool => Ok(Self::mean_pool(d)),
            EncoderKind::Linear if d_phi > d => {
                Err(Error::Config(format!("linear encoder needs d_phi <= d ({d_phi} > {d})")))
            }
            EncoderKind::Linear => Ok(Self::linear(d, d_phi, seed)),
            EncoderKind::Mlp => Ok(Self::mlp(d, hidden, d_phi, seed)),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn weights(&self) -> (&DMatrix<f64>, &DVector<f64>, &DMatrix<f64>, &DVector<f64>) {
        (&self.w1, &self.b1, &self.w2, &self.b2)
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim {
            return arg(format!("encoder input has length {}, expected {}", x.len(), self.input_dim));
        }
        Ok(())
    }

    /// Encode an already mean-pooled `d`-vector.
    pub fn encode_pooled(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(match self.kind {
            EncoderKind::MeanPool => x.clone(),
            EncoderKind::Linear => &self.w1 * x,
            EncoderKind::Mlp => {
                let (_, _, g) = self.hidden(x);
                &self.w2 * g + &self.b2
            }
        })
    }

    /// Pre-activation, normalized activation and GELU output of the hidden layer.
    fn hidden(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let a = &self.w1 * x + &self.b1;
        let n = a.len() as f64;
        let mean = a.sum() / n;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let normed = a.map(|v| (v - mean) * inv_std);
        let g = normed.map(gelu);
        (inv_std, normed, g)
    }

    /// Vector-Jacobian product at pooled input `x`: returns `J(x)^T grad_out`.
    pub fn vjp_pooled(&self, x: &DVector<f64>, grad_out: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        if grad_out.len() != self.output_dim {
            return arg("encoder output gradient has the wrong length");
        }
        Ok(match self.kind {
            EncoderKind::MeanPool => grad_out.clone(),
            EncoderKind::Linear => self.w1.tr_mul(grad_out),
            EncoderKind::Mlp => {
                let (inv_std, normed, _) = self.hidden(x);
                let dg = self.w2.tr_mul(grad_out);
                let dn = dg.zip_map(&normed, |g, v| g * gelu_grad(v));
                let h = dn.len() as f64;
                let mean_dn = dn.sum() / h;
                let mean_dn_n = dn.dot(&normed) / h;
                let da = dn.zip_map(&normed, |g, v| inv_std * (g - mean_dn - v * mean_dn_n));
                self.w1.tr_mul(&da)
            }
        })
    }

    /// `phi(p)`: mean over rows, then the map.
    pub fn encode_prompt(&self, p: &PromptMatrix) -> Result<DVector<f64>> {
        if p.cols() != self.input_dim {
            return arg(format!("prompt has {} columns, encoder expects {}", p.cols(), self.input_dim));
        }
        self.encode_pooled(&p.mean_row())
    }

    /// Gradient with respect to the prompt of `<grad_out, phi(p)>`.
    pub fn vjp_prompt(&self, p: &PromptMatrix, grad_out: &DVector<f64>) -> Result<PromptMatrix> {
        let g = self.vjp_pooled(&p.mean_row(), grad_out)?;
        Ok(PromptMatrix::tiled(&(g / p.rows() as f64), p.rows()))
    }

    /// Pooled vector whose encoding is `v`, for the invertible kinds.
    pub fn decode_pooled(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.output_dim {
            return arg("decode input has the wrong length");
        }
        match self.kind {
            EncoderKind::MeanPool => Ok(v.clone()),
            EncoderKind::Linear => Ok(self.w1.tr_mul(v)),
            EncoderKind::Mlp => Err(Error::State("the mlp encoder has no linear decoder".into())),
        }
    }

    /// Prompt with every row equal to the decoded vector, so `phi(decode(v)) = v`.
    pub fn decode_prompt(&self, v: &DVector<f64>, rows: usize) -> Result<PromptMatrix> {
        Ok(PromptMatrix::tiled(&self.decode_pooled(v)?, rows))
    }

    pub fn is_invertible(&self) -> bool {
        self.kind != EncoderKind::Mlp
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Inner,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingResult {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Pre-softmax scores `s_k = sim(h, v_k) / tau` of the selected prototypes.
    pub scores: Vec<f64>,
}

/// Top-M retrieval over the library's encoded prototypes.
pub fn route(h: &DVector<f64>, library: &PrototypeLibrary, m: usize, tau: f64) -> Result<RoutingResult> {
    route_encoded(h, &library.encoded, m, tau, Similarity::Inner)
}

pub fn route_encoded(
    h: &DVector<f64>,
    encoded: &[DVector<f64>],
    m: usize,
    tau: f64,
    similarity: Similarity,
) -> Result<RoutingResult> {
    if m == 0 {
        return arg("top_m must be positive");
    }
    if !(tau > 0.0) {
        return arg(format!("routing temperature must be positive, got {tau}"));
    }
    if encoded.is_empty() {
        return Err(Error::State("routing over an empty prototype library".into()));
    }
    let h_norm = h.norm();
    let sims: Vec<f64> = encoded
        .iter()
        .map(|v| {
            let ip = h.dot(v);
            match similarity {
                Similarity::Inner => ip,
                Similarity::Cosine => {
                    let den = h_norm * v.norm();
                    if den > 0.0 {
                        ip / den
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(m.min(encoded.len()));
    let scores: Vec<f64> = order.iter().map(|&k| sims[k] / tau).collect();
    let weights = softmax(&scores);
    Ok(RoutingResult { indices: order, weights, scores })
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn vecs(seed: u64, k: usize, n: usize) -> Vec<DVector<f64>> {
        let mut r = crate::rng::stream(seed, "routing-tests", &[]);
        (0..k).map(|_| DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0))).collect()
    }

    /// Straight-line evaluation of mean-pool, affine, layer norm, GELU, affine.
    fn reference_mlp(enc: &Encoder, p: &PromptMatrix) -> Vec<f64> {
        let (w1, b1, w2, b2) = enc.weights();
        let (rows, cols) = p.shape();
        let mut pooled = vec![0.0; cols];
        for j in 0..cols {
            for i in 0..rows {
                pooled[j] += p.matrix()[(i, j)];
            }
            pooled[j] /= rows as f64;
        }
        let hdim = w1.nrows();
        let mut a = vec![0.0; hdim];
        for i in 0..hdim {
            a[i] = b1[i];
            for j in 0..cols {
                a[i] += w1[(i, j)] * pooled[j];
            }
        }
        let mean: f64 = a.iter().sum::<f64>() / hdim as f64;
        let var: f64 = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / hdim as f64;
        let g: Vec<f64> = a
            .iter()
            .map(|x| {
                let n = (x - mean) / (var + 1e-5).sqrt();
                0.5 * n * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (n + 0.044715 * n.powi(3))).tanh())
            })
            .collect();
        (0..w2.nrows())
            .map(|i| b2[i] + (0..hdim).map(|j| w2[(i, j)] * g[j]).sum::<f64>())
            .collect()
    }

    #[test]
    fn encode_prompt_examples() {
        let enc = Encoder::mlp(6, 10, 4, 3);
        let mut r = crate::rng::stream(3, "enc", &[]);
        let p = PromptMatrix::from_fn(5, 6, |_, _| r.random_range(-1.0..1.0));
        let a = enc.encode_prompt(&p).unwrap();
        assert_eq!(a, enc.encode_prompt(&p.clone()).unwrap());
        // Reverse the rows.
        let flipped = PromptMatrix::from_fn(5, 6, |i, j| p.matrix()[(4 - i, j)]);
        let b = enc.encode_prompt(&flipped).unwrap();
        assert!((&a - &b).amax() < 1e-14);
        let reference = reference_mlp(&enc, &p);
        for (x, y) in a.iter().zip(reference.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(enc.encode_prompt(&PromptMatrix::zeros(5, 7)).is_err());
    }

    #[test]
    fn linear_decoder_is_a_right_inverse() {
        let enc = Encoder::linear(12, 5, 9);
        for v in vecs(4, 5, 5) {
            let p = enc.decode_prompt(&v, 3).unwrap();
            assert!((enc.encode_prompt(&p).unwrap() - &v).amax() < 1e-12);
        }
        assert!(Encoder::mlp(4, 4, 4, 1).decode_pooled(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn mlp_vjp_matches_finite_differences() {
        let enc = Encoder::mlp(7, 9, 5, 21);
        let mut r = crate::rng::stream(8, "vjp", &[]);
        let x = DVector::from_fn(7, |_, _| r.random_range(-1.0..1.0));
        let g = DVector::from_fn(5, |_, _| r.random_range(-1.0..1.0));
        let analytic = enc.vjp_pooled(&x, &g).unwrap();
        let h = 1e-6;
        for j in 0..7 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (g.dot(&enc.encode_pooled(&xp).unwrap()) - g.dot(&enc.encode_pooled(&xm).unwrap())) / (2.0 * h);
            assert!((fd - analytic[j]).abs() < 1e-7 * analytic[j].abs().max(1.0));
        }
    }

    #[test]
    fn route_examples() {
        let same = vec![DVector::from_vec(vec![1.0, 2.0]); 5];
        let h = DVector::from_vec(vec![0.3, -0.2]);
        let res = route_encoded(&h, &same, 3, 0.07, Similarity::Inner).unwrap();
        assert_eq!(res.indices, vec![0, 1, 2]);
        for w in &res.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }

        let protos = vecs(2, 6, 3);
        let res = route_encoded(&h.clone().push(0.1), &protos, 1, 0.5, Similarity::Inner).unwrap();
        assert_eq!(res.weights, vec![1.0]);

        // Scores ln 2 and 0 at tau = 1.
        let protos = vec![DVector::from_vec(vec![2.0_f64.ln()]), DVector::from_vec(vec![0.0])];
        let res = route_encoded(&DVector::from_vec(vec![1.0]), &protos, 2, 1.0, Similarity::Inner).unwrap();
        assert!((res.weights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((res.weights[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(route_encoded(&h, &same, 0, 1.0, Similarity::Inner).is_err());
    }

    #[test]
    fn route_temperature_limit_is_one_hot() {
        let protos = vecs(5, 10, 4);
        let h = vecs(6, 1, 4).remove(0);
        let res = route_encoded(&h, &protos, 4, 1e-6, Similarity::Inner).unwrap();
        assert!((res.weights[0] - 1.0).abs() < 1e-12);
        assert!(res.weights[1..].iter().all(|w| *w < 1e-12));
    }

    proptest! {
        #[test]
        fn route_matches_brute_force_sort(seed in 0u64..10_000, k in 1usize..64, m in 1usize..10, tau in 0.01f64..2.0) {
            let protos = vecs(seed, k, 5);
            let h = vecs(seed + 1, 1, 5).remove(0);
            let res = route_encoded(&h, &protos, m, tau, Similarity::Inner).unwrap();
            prop_assert_eq!(res.indices.len(), m.min(k));
            let total: f64 = res.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let mut brute: Vec<(f64, usize)> = protos.iter().enumerate().map(|(i, v)| (-h.dot(v), i)).collect();
            brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = brute.iter().take(m.min(k)).map(|x| x.1).collect();
            prop_assert_eq!(&res.indices, &expect);

            let shifted: Vec<f64> = res.scores.iter().map(|s| s + 3.7).collect();
            let w2 = softmax(&shifted);
            for (a, b) in w2.iter().zip(res.weights.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
