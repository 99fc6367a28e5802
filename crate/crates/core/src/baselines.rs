//! Comparison algorithms: column-wise SGD factorisation (including the
//! Broyden step size) and batch multiplicative-update NMF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::MaskedDataset;
use crate::error::{Error, Result};
use crate::linalg::{matvec, DenseMatrix, DenseVector};
use crate::model::{check_order, estimate_coefficients_masked, masked_residual, ModelConfig, PassTrace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Constant,
    /// `γ_k = 1 / (λ + xᵀx)`.
    Broyden,
    /// `γ_k = γ₀ / k`.
    Decay,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub step_size: StepSize,
    pub gamma0: f64,
    pub lambda: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            step_size: StepSize::Broyden,
            gamma0: 0.1,
            lambda: 2.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(Error::Contract(format!("gamma0 must be positive, got {}", self.gamma0)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Step size for the `k`-th update (1-based).
    pub fn gamma(&self, k: u64, x: &DenseVector) -> f64 {
        match self.step_size {
            StepSize::Constant => self.gamma0,
            StepSize::Broyden => broyden_gamma(x, self.lambda),
            StepSize::Decay => self.gamma0 / k.max(1) as f64,
        }
    }
}

pub fn broyden_gamma(x: &DenseVector, lambda: f64) -> f64 {
    1.0 / (lambda + x.iter().map(|v| v * v).sum::<f64>())
}

/// `C + γ (y − C x) xᵀ`.
pub fn sgd_update(c: &DenseMatrix, x: &DenseVector, y: &DenseVector, gamma: f64) -> Result<DenseMatrix> {
    let residual = y.sub(&matvec(c, x)?)?;
    sgd_update_residual(c, x, &residual, gamma)
}

/// `C + γ e xᵀ` for a precomputed (possibly masked) residual `e`.
pub fn sgd_update_residual(
    c: &DenseMatrix,
    x: &DenseVector,
    residual: &DenseVector,
    gamma: f64,
) -> Result<DenseMatrix> {
    if x.len() != c.cols() || residual.len() != c.rows() {
        return Err(Error::dims(
            "sgd_update",
            format!("{}x{} dictionary", c.rows(), c.cols()),
            format!("x of length {}, residual of length {}", x.len(), residual.len()),
        ));
    }
    let mut out = c.clone();
    for (i, &e) in residual.iter().enumerate() {
        if e == 0.0 {
            continue;
        }
        for (j, &xj) in x.iter().enumerate() {
            out.set(i, j, out.get(i, j) + gamma * e * xj);
        }
    }
    Ok(out)
}

/// Dictionary plus update counter for the SGD baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub c: DenseMatrix,
    pub step: u64,
}

/// Same loop as the recursive filter: coefficients by (masked) pseudoinverse,
/// then an SGD step on the dictionary using the masked residual.
pub fn sgd_run(
    state: SgdState,
    data: &MaskedDataset,
    model: &ModelConfig,
    sgd: &SgdConfig,
    order: &[usize],
) -> Result<(SgdState, PassTrace)> {
    sgd.validate()?;
    if data.m() != state.c.rows() {
        return Err(Error::dims("sgd_run", state.c.rows(), data.m()));
    }
    check_order(order, data.n())?;
    let mut state = state;
    let mut trace = PassTrace::default();
    for &j in order {
        let obs = data.observation(j);
        let x = match estimate_coefficients_masked(&state.c, &obs, model.ridge) {
            Ok(x) => x,
            Err(e @ Error::SingularSystem { .. }) => {
                trace.push_err(j, &e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let residual = masked_residual(&state.c, &obs, &x)?;
        let gamma = sgd.gamma(state.step + 1, &x);
        state.c = sgd_update_residual(&state.c, &x, &residual, gamma)?;
        state.step += 1;
        trace.push_ok(j, residual.norm());
    }
    Ok((state, trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfConfig {
    pub rank: usize,
    pub iterations: usize,
    pub epsilon: f64,
}

impl NmfConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            iterations: 1000,
            epsilon: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.iterations == 0 {
            return Err(Error::Contract("NMF needs rank ≥ 1 and iterations ≥ 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Contract("NMF epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted Euclidean NMF by multiplicative updates:
///
/// ```text
/// W ← W ⊙ (M⊙Y) Hᵀ / ((M⊙WH) Hᵀ + ε)
/// H ← H ⊙ Wᵀ (M⊙Y) / (Wᵀ (M⊙WH) + ε)
/// ```
///
/// With an all-ones mask this is the standard Lee–Seung update.
#[derive(Debug, Clone)]
pub struct Nmf {
    pub w: DenseMatrix,
    pub h: DenseMatrix,
    epsilon: f64,
    masked_y: DenseMatrix,
    mask: DenseMatrix,
}

impl Nmf {
    pub fn new(data: &MaskedDataset, cfg: &NmfConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let y = data.data();
        if let Some(neg) = y.as_slice().iter().find(|&&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "NMF requires nonnegative data (found {neg}); shift or clip the input first"
            )));
        }
        let masked_y = data.zero_filled();
        let observed = data.mask().as_slice().iter().filter(|&&v| v == 1.0).count().max(1);
        let mean = masked_y.as_slice().iter().sum::<f64>() / observed as f64;
        let scale = (mean.max(f64::MIN_POSITIVE) / cfg.rank as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DenseMatrix::from_fn(data.m(), cfg.rank, |_, _| scale * rng.random_range(0.0..1.0));
        let h = DenseMatrix::from_fn(cfg.rank, data.n(), |_, _| scale * rng.random_range(0.0..1.0));
        Ok(Self {
            w,
            h,
            epsilon: cfg.epsilon,
            masked_y,
            mask: data.mask().clone(),
        })
    }

    pub fn from_factors(data: &MaskedDataset, w: DenseMatrix, h: DenseMatrix, epsilon: f64) -> Result<Self> {
        if w.rows() != data.m() || h.cols() != data.n() || w.cols() != h.rows() {
            return Err(Error::dims(
                "Nmf::from_factors",
                format!("{}xr and rx{}", data.m(), data.n()),
                format!("{}x{} and {}x{}", w.rows(), w.cols(), h.rows(), h.cols()),
            ));
        }
        if w.as_slice().iter().chain(h.as_slice()).any(|&v| v < 0.0) {
            return Err(Error::Contract("NMF factors must be nonnegative".into()));
        }
        Ok(Self {
            w,
            h,
            epsilon,
            masked_y: data.zero_filled(),
            mask: data.mask().clone(),
        })
    }

    fn masked_product(&self) -> DenseMatrix {
        self.w
            .matmul(&self.h)
            .and_then(|wh| wh.hadamard(&self.mask))
            .expect("factor shapes fixed at construction")
    }

    /// `‖M ⊙ (Y − WH)‖²_F`.
    pub fn objective(&self) -> f64 {
        let wh = self.masked_product();
        wh.sub(&self.masked_y)
            .map(|d| d.frobenius_norm().powi(2))
            .unwrap_or(f64::NAN)
    }

    /// One sweep: update `W`, then `H`.
    pub fn sweep(&mut self) {
        let eps = self.epsilon;
        let ht = self.h.transpose();
        let num = self.masked_y.matmul(&ht).expect("shape");
        let den = self.masked_product().matmul(&ht).expect("shape");
        self.w = DenseMatrix::from_fn(self.w.rows(), self.w.cols(), |i, k| {
            self.w.get(i, k) * num.get(i, k) / (den.get(i, k) + eps)
        });
        let num = self.w.tr_matmul(&self.masked_y).expect("shape");
        let den = self.w.tr_matmul(&self.masked_product()).expect("shape");
        self.h = DenseMatrix::from_fn(self.h.rows(), self.h.cols(), |k, j| {
            self.h.get(k, j) * num.get(k, j) / (den.get(k, j) + eps)
        });
    }

    pub fn reconstruction(&self) -> DenseMatrix {
        self.w.matmul(&self.h).expect("factor shapes fixed at construction")
    }
}

/// Runs `cfg.iterations` sweeps of [`Nmf`] on a fully observed matrix.
pub fn nmf_multiplicative(y: &DenseMatrix, cfg: &NmfConfig, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    let data = MaskedDataset::fully_observed(y.clone());
    let mut nmf = Nmf::new(&data, cfg, seed)?;
    for _ in 0..cfg.iterations {
        nmf.sweep();
    }
    Ok((nmf.w, nmf.h))
}
