//! Small dense helpers shared by the encoders, compressor and world.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// A `rows x cols` matrix with orthonormal columns (`rows >= cols`), from the
/// QR factorization of a Gaussian matrix.
pub fn orthonormal_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    let g = gaussian_matrix(rng, rows, cols, 1.0);
    let q = g.qr().q();
    q.columns(0, cols).into_owned()
}

/// A uniformly random unit vector.
pub fn random_unit(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    loop {
        let v = gaussian_vector(rng, n, 1.0);
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Index of the nearest vector in squared Euclidean distance; ties go to the
/// lowest index.
pub fn nearest(x: &DVector<f64>, centers: &[DVector<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in centers.iter().enumerate() {
        let d = (x - c).norm_squared();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_columns_are_orthonormal() {
        let mut r = crate::rng::stream(1, "linalg", &[]);
        for (rows, cols) in [(8, 8), (16, 5), (64, 16)] {
            let q = orthonormal_columns(&mut r, rows, cols);
            let gram = q.transpose() * &q;
            assert!((gram - DMatrix::identity(cols, cols)).amax() < 1e-12);
        }
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let c = vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![-1.0])];
        assert_eq!(nearest(&DVector::from_vec(vec![0.0]), &c), Some(0));
        assert_eq!(nearest(&DVector::from_vec(vec![-0.5]), &c), Some(1));
        assert_eq!(nearest(&DVector::from_vec(vec![0.0]), &[]), None);
    }
}
