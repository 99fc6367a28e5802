#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use streamfact::linalg::SymmetricEigen;
use streamfact::{DenseMatrix, DenseVector, DictionaryState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

pub fn gaussian_vector(rng: &mut impl Rng, len: usize) -> DenseVector {
    DenseVector::new((0..len).map(|_| StandardNormal.sample(&mut *rng)).collect()).unwrap()
}

/// `A Aᵀ / r + ½ I`: symmetric, well conditioned.
pub fn random_spd(rng: &mut impl Rng, r: usize) -> DenseMatrix {
    let a = gaussian_matrix(rng, r, r);
    let aat = a.matmul(&a.transpose()).unwrap().scale(1.0 / r as f64);
    aat.add(&DenseMatrix::identity(r).scale(0.5)).unwrap().symmetrize()
}

pub fn random_state(rng: &mut impl Rng, m: usize, r: usize, lambda: f64) -> DictionaryState {
    let c = gaussian_matrix(rng, m, r);
    let v = random_spd(rng, r);
    DictionaryState::from_parts(c, v, lambda).unwrap()
}

pub fn min_eig(a: &DenseMatrix) -> f64 {
    SymmetricEigen::new(a).unwrap().min()
}

pub fn rel_vec_err(a: &DenseVector, b: &DenseVector) -> f64 {
    let diff = a.sub(b).unwrap().norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
